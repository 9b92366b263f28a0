//! Augmentation-pathway convolutions.
//!
//! An AP^k convolution splits a dense convolution into `k` sub-convolutions.
//! Channel counts are nested: pathway `j` sees `m^(j)` input and output
//! channels with `m^(1) = n` and `m^(j)` strictly decreasing. The shared
//! (deepest-pathway) channels always sit at the trailing end of a feature map,
//! so restricting a map to pathways `j..k` is a contiguous slice.
//!
//! Sub-convolution `c^j` reads the trailing `m_in^(j)` channels and writes
//! `m_out^(j) - m_out^(j+1)` channels. A level-`j` forward concatenates
//! `c^j .. c^k`, producing exactly `m_out^(j)` channels; the level-1 forward
//! therefore has the full `n_out` outputs of the convolution it replaces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{he_uniform, uniform_init, ConvShape};
use crate::tape::{ConvGeom, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApConvSpec {
    /// `m_in^(j)` for `j = 1..=k`; the first entry is the full input width.
    pub pathway_in: Vec<usize>,
    /// `m_out^(j)` for `j = 1..=k`; the first entry is the full output width.
    pub pathway_out: Vec<usize>,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

/// Nested channel counts `m^(j) = round(n · Σ_{i≥j} fractions[i])`.
pub fn nested_channels(n: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::InvalidSpec(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSpec(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    let mut out = Vec::with_capacity(fractions.len());
    let mut tail = 0.0;
    for f in fractions.iter().rev() {
        tail += f;
        out.push((n as f64 * tail).round() as usize);
    }
    out.reverse();
    out[0] = n;
    Ok(out)
}

impl ApConvSpec {
    pub fn new(
        pathway_in: Vec<usize>,
        pathway_out: Vec<usize>,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let spec = Self {
            pathway_in,
            pathway_out,
            kernel,
            stride,
            padding,
            bias,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Two-pathway convolution: `n_in → n_out` with `m_in`/`m_out` shared.
    pub fn basic(
        n_in: usize,
        m_in: usize,
        n_out: usize,
        m_out: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::new(vec![n_in, m_in], vec![n_out, m_out], kernel, stride, padding, bias)
    }

    /// Splits a dense convolution with the given per-pathway fractions.
    pub fn from_split(shape: &ConvShape, fractions: &[f64]) -> Result<Self> {
        Self::new(
            nested_channels(shape.in_channels, fractions)?,
            nested_channels(shape.out_channels, fractions)?,
            shape.kernel,
            shape.stride,
            shape.padding,
            shape.bias,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pathway_in.len();
        if k < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 pathways, got {k}")));
        }
        if self.pathway_out.len() != k {
            return Err(Error::InvalidSpec(format!(
                "{} input splits but {} output splits",
                k,
                self.pathway_out.len()
            )));
        }
        for (name, m) in [("input", &self.pathway_in), ("output", &self.pathway_out)] {
            if m[k - 1] == 0 || m.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::InvalidSpec(format!(
                    "{name} channels {m:?} must be strictly decreasing and positive"
                )));
            }
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return Err(Error::InvalidSpec("kernel and stride must be positive".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.pathway_in.len()
    }

    pub fn in_channels(&self) -> usize {
        self.pathway_in[0]
    }

    pub fn out_channels(&self) -> usize {
        self.pathway_out[0]
    }

    /// Output width of sub-convolution `c^(j+1)` (0-based `j`).
    pub fn sub_out(&self, j: usize) -> usize {
        self.pathway_out[j] - self.pathway_out.get(j + 1).copied().unwrap_or(0)
    }

    /// Range of level-1 output channels written by sub-convolution `j` (0-based).
    pub fn out_block(&self, j: usize) -> std::ops::Range<usize> {
        let n = self.out_channels();
        let end = n - self.pathway_out.get(j + 1).copied().unwrap_or(0);
        (n - self.pathway_out[j])..end
    }

    /// Range of level-1 input channels read by sub-convolution `j` (0-based).
    pub fn in_block(&self, j: usize) -> std::ops::Range<usize> {
        let n = self.in_channels();
        (n - self.pathway_in[j])..n
    }

    pub fn dense_shape(&self) -> ConvShape {
        ConvShape {
            in_channels: self.in_channels(),
            out_channels: self.out_channels(),
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            bias: self.bias,
        }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom {
            stride: self.stride,
            padding: self.padding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub total: u64,
    /// Parameters saved relative to the dense convolution.
    pub delta: u64,
}

pub fn param_count(spec: &ApConvSpec) -> ParamCount {
    let (kh, kw) = spec.kernel;
    let total: u64 = (0..spec.k())
        .map(|j| {
            let out = spec.sub_out(j) as u64;
            spec.pathway_in[j] as u64 * (kh * kw) as u64 * out + if spec.bias { out } else { 0 }
        })
        .sum();
    ParamCount {
        total,
        delta: spec.dense_shape().param_count() - total,
    }
}

/// Multiply-accumulates of the level-1 (inference) forward on an `input`
/// sized map.
pub fn mac_count(spec: &ApConvSpec, input: (usize, usize)) -> Result<u64> {
    let (ho, wo) = spec
        .dense_shape()
        .output_size(input)
        .ok_or_else(|| Error::InvalidSpec(format!("kernel does not fit a {input:?} input")))?;
    let (kh, kw) = spec.kernel;
    Ok((0..spec.k())
        .map(|j| (spec.pathway_in[j] * kh * kw * spec.sub_out(j) * ho * wo) as u64)
        .sum())
}

/// Per-pathway weights in `(out, in, kh, kw)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ApWeights {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Option<Tensor>>,
}

/// Copies the blocks of a dense `(n_out, n_in, kh, kw)` weight that survive the
/// pathway partition: sub-convolution `j` takes output rows [`ApConvSpec::out_block`]
/// and input columns [`ApConvSpec::in_block`]. Every other weight is dropped.
pub fn from_standard(weight: &Tensor, bias: Option<&Tensor>, spec: &ApConvSpec) -> Result<ApWeights> {
    spec.validate()?;
    let (kh, kw) = spec.kernel;
    let expected = [spec.out_channels(), spec.in_channels(), kh, kw];
    if weight.shape() != expected {
        return Err(Error::Shape(format!(
            "dense weight {:?} does not match spec {expected:?}",
            weight.shape()
        )));
    }
    if spec.bias != bias.is_some() {
        return Err(Error::Shape("bias presence differs from spec".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels()] {
            return Err(Error::Shape(format!("dense bias {:?}", b.shape())));
        }
    }
    let mut weights = Vec::with_capacity(spec.k());
    let mut biases = Vec::with_capacity(spec.k());
    for j in 0..spec.k() {
        let (ob, ib) = (spec.out_block(j), spec.in_block(j));
        weights.push(weight.slice(ndarray::s![ob.clone(), ib, .., ..]).to_owned().into_dyn());
        biases.push(bias.map(|b| b.slice(ndarray::s![ob]).to_owned().into_dyn()));
    }
    Ok(ApWeights { weights, biases })
}

/// Embeds pathway weights into a zero-initialised dense tensor; the inverse of
/// [`from_standard`] on the retained blocks.
pub fn to_standard(w: &ApWeights, spec: &ApConvSpec) -> Result<(Tensor, Option<Tensor>)> {
    let (kh, kw) = spec.kernel;
    let mut dense = Tensor::zeros(ndarray::IxDyn(&[spec.out_channels(), spec.in_channels(), kh, kw]));
    let mut bias = spec.bias.then(|| Tensor::zeros(ndarray::IxDyn(&[spec.out_channels()])));
    if w.weights.len() != spec.k() {
        return Err(Error::Shape(format!(
            "{} pathway weights for k={}",
            w.weights.len(),
            spec.k()
        )));
    }
    for j in 0..spec.k() {
        let (ob, ib) = (spec.out_block(j), spec.in_block(j));
        let mut dst = dense.slice_mut(ndarray::s![ob.clone(), ib, .., ..]);
        if dst.shape() != w.weights[j].shape() {
            return Err(Error::Shape(format!(
                "pathway {} weight {:?}",
                j + 1,
                w.weights[j].shape()
            )));
        }
        dst.assign(&w.weights[j]);
        if let (Some(b), Some(Some(src))) = (bias.as_mut(), w.biases.get(j)) {
            b.slice_mut(ndarray::s![ob]).assign(src);
        }
    }
    Ok((dense, bias))
}

/// Outputs of one pathway convolution on a level-`level` map.
#[derive(Debug, Clone)]
pub struct PathwayOutput {
    pub level: usize,
    /// Concatenation of `pathways`, `m_out^(level)` channels.
    pub out: Var,
    /// `c^level(x), …, c^k(x)` before concatenation.
    pub pathways: Vec<Var>,
}

/// A feature map tagged with the view level that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub level: usize,
}

#[derive(Debug, Clone)]
pub struct ApConv {
    pub spec: ApConvSpec,
    pub weights: Vec<ParamId>,
    pub biases: Vec<Option<ParamId>>,
}

impl ApConv {
    /// Allocates one weight (and bias) per pathway, He-uniform initialised by
    /// that pathway's own fan-in.
    pub fn new<R: Rng + ?Sized>(spec: ApConvSpec, params: &mut ParamStore, name: &str, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (kh, kw) = spec.kernel;
        let mut weights = Vec::with_capacity(spec.k());
        let mut biases = Vec::with_capacity(spec.k());
        for j in 0..spec.k() {
            let fan_in = spec.pathway_in[j] * kh * kw;
            let shape = [spec.sub_out(j), spec.pathway_in[j], kh, kw];
            weights.push(params.add(
                format!("{name}.pathway{}.weight", j + 1),
                he_uniform(&shape, fan_in, rng),
            ));
            biases.push(spec.bias.then(|| {
                params.add(
                    format!("{name}.pathway{}.bias", j + 1),
                    uniform_init(&[spec.sub_out(j)], 1.0 / (fan_in as f64).sqrt(), rng),
                )
            }));
        }
        Ok(Self { spec, weights, biases })
    }

    /// Level-`level` forward (1-based): `x` carries `m_in^(level)` channels and
    /// the result `m_out^(level)`.
    pub fn forward_level(&self, g: &mut Graph, params: &ParamStore, x: Var, level: usize) -> Result<PathwayOutput> {
        let k = self.spec.k();
        if level == 0 || level > k {
            return Err(Error::LevelOutOfRange { level, max: k });
        }
        let width = self.spec.pathway_in[level - 1];
        let got = g.value(x).shape().get(1).copied().unwrap_or(0);
        if got != width {
            return Err(Error::ChannelMismatch { expected: width, got });
        }
        let mut pathways = Vec::with_capacity(k - level + 1);
        for j in level - 1..k {
            let m = self.spec.pathway_in[j];
            let xj = if m == width { x } else { g.narrow(x, 1, width - m, m)? };
            let w = g.param(params, self.weights[j]);
            let b = self.biases[j].map(|b| g.param(params, b));
            pathways.push(g.conv2d(xj, w, b, self.spec.geom())?);
        }
        let out = g.concat(&pathways, 1)?;
        Ok(PathwayOutput { level, out, pathways })
    }

    /// Array-in, array-out convenience around [`ApConv::forward_level`].
    pub fn apply(&self, params: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let v = g.constant(x.data.clone());
        let out = self.forward_level(&mut g, params, v, x.level)?;
        Ok(FeatureMap {
            data: g.value(out.out).clone(),
            level: x.level,
        })
    }

    pub fn load(&self, params: &mut ParamStore, w: &ApWeights) -> Result<()> {
        for j in 0..self.spec.k() {
            let dst = params.value_mut(self.weights[j]);
            if dst.shape() != w.weights[j].shape() {
                return Err(Error::Shape(format!(
                    "pathway {} expects {:?}, got {:?}",
                    j + 1,
                    dst.shape(),
                    w.weights[j].shape()
                )));
            }
            dst.assign(&w.weights[j]);
            if let (Some(id), Some(Some(b))) = (self.biases[j], w.biases.get(j)) {
                params.value_mut(id).assign(b);
            }
        }
        Ok(())
    }

    pub fn export(&self, params: &ParamStore) -> ApWeights {
        ApWeights {
            weights: self.weights.iter().map(|id| params.value(*id).clone()).collect(),
            biases: self
                .biases
                .iter()
                .map(|b| b.map(|id| params.value(id).clone()))
                .collect(),
        }
    }

    /// Parameters owned by pathway `j` (1-based).
    pub fn pathway_params(&self, j: usize) -> Vec<ParamId> {
        std::iter::once(self.weights[j - 1]).chain(self.biases[j - 1]).collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        (1..=self.spec.k()).flat_map(|j| self.pathway_params(j)).collect()
    }
}
