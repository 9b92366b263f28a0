//! Standard layers shared by the pathway and heterogeneous networks.

use ndarray::{Array1, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{ConvGeom, Graph, ParamId, ParamStore, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Uniform in `±bound`.
pub fn uniform_init<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
}

/// He-uniform for ReLU networks, scaled by the effective fan-in.
pub fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    uniform_init(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NormId(pub usize);

/// Running statistics for one normalisation layer, one set per view level.
#[derive(Debug, Clone)]
pub struct NormEntry {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Channel count seen at each level; trailing channels are shared.
    pub level_channels: Vec<usize>,
    pub running_mean: Vec<Array1<f64>>,
    pub running_var: Vec<Array1<f64>>,
}

impl NormEntry {
    pub fn channels(&self) -> usize {
        self.level_channels[0]
    }
}

#[derive(Debug, Clone, Default)]
pub struct NormStore {
    entries: Vec<NormEntry>,
}

impl NormStore {
    pub fn entries(&self) -> &[NormEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [NormEntry] {
        &mut self.entries
    }

    pub fn get(&self, id: NormId) -> &NormEntry {
        &self.entries[id.0]
    }
}

/// All mutable state of a model: parameters and normalisation buffers.
#[derive(Debug, Clone, Default)]
pub struct ModelState {
    pub params: ParamStore,
    pub norms: NormStore,
}

struct StatUpdate {
    norm: NormId,
    level: usize,
    mean: Array1<f64>,
    var: Array1<f64>,
    count: usize,
}

/// Per-pass context: the mode and, in training, the batch statistics to be
/// folded into running estimates once the step succeeds.
pub struct ForwardCtx {
    pub mode: Mode,
    updates: Vec<StatUpdate>,
}

impl ForwardCtx {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            updates: Vec::new(),
        }
    }

    /// Applies the collected running-statistic updates.
    pub fn commit(self, norms: &mut NormStore) {
        for u in self.updates {
            let entry = &mut norms.entries[u.norm.0];
            let unbias = if u.count > 1 {
                u.count as f64 / (u.count - 1) as f64
            } else {
                1.0
            };
            let rm = &mut entry.running_mean[u.level];
            *rm = &*rm * (1.0 - NORM_MOMENTUM) + &u.mean * NORM_MOMENTUM;
            let rv = &mut entry.running_var[u.level];
            *rv = &*rv * (1.0 - NORM_MOMENTUM) + &(u.var * unbias) * NORM_MOMENTUM;
        }
    }
}

impl ModelState {
    /// Registers a normalisation layer with one affine parameter set over
    /// `level_channels[0]` channels and separate running statistics per level.
    pub fn add_norm(&mut self, name: &str, level_channels: Vec<usize>) -> NormId {
        let c = level_channels[0];
        let gamma = self.params.add(format!("{name}.gamma"), Tensor::ones(IxDyn(&[c])));
        let beta = self.params.add(format!("{name}.beta"), Tensor::zeros(IxDyn(&[c])));
        let running_mean = level_channels.iter().map(|&m| Array1::zeros(m)).collect();
        let running_var = level_channels.iter().map(|&m| Array1::ones(m)).collect();
        self.norms.entries.push(NormEntry {
            name: name.to_string(),
            gamma,
            beta,
            level_channels,
            running_mean,
            running_var,
        });
        NormId(self.norms.entries.len() - 1)
    }

    /// Normalises a level-`level` (1-based) map. The level's channels are the
    /// trailing slice of the shared affine parameters.
    pub fn norm(&self, g: &mut Graph, id: NormId, x: Var, level: usize, ctx: &mut ForwardCtx) -> Result<Var> {
        let entry = self.norms.get(id);
        let max = entry.level_channels.len();
        if level == 0 || level > max {
            return Err(Error::LevelOutOfRange { level, max });
        }
        let (n, m) = (entry.channels(), entry.level_channels[level - 1]);
        let got = g.value(x).shape().get(1).copied().unwrap_or(0);
        if got != m {
            return Err(Error::ChannelMismatch { expected: m, got });
        }
        let mut gamma = g.param(&self.params, entry.gamma);
        let mut beta = g.param(&self.params, entry.beta);
        if m != n {
            gamma = g.narrow(gamma, 0, n - m, m)?;
            beta = g.narrow(beta, 0, n - m, m)?;
        }
        match ctx.mode {
            Mode::Train => {
                let shape = g.value(x).shape().to_vec();
                let out = g.batch_norm_train(x, gamma, beta, NORM_EPS)?;
                ctx.updates.push(StatUpdate {
                    norm: id,
                    level: level - 1,
                    mean: out.mean,
                    var: out.var,
                    count: shape[0] * shape[2] * shape[3],
                });
                Ok(out.out)
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                &entry.running_mean[level - 1],
                &entry.running_var[level - 1],
                NORM_EPS,
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvShape {
    pub fn param_count(&self) -> u64 {
        let (kh, kw) = self.kernel;
        let w = (self.in_channels * self.out_channels * kh * kw) as u64;
        w + if self.bias { self.out_channels as u64 } else { 0 }
    }

    pub fn output_size(&self, (h, w): (usize, usize)) -> Option<(usize, usize)> {
        Some((
            crate::tape::conv_out_len(h, self.kernel.0, self.stride, self.padding)?,
            crate::tape::conv_out_len(w, self.kernel.1, self.stride, self.padding)?,
        ))
    }

    pub fn mac_count(&self, input: (usize, usize)) -> Option<u64> {
        let (ho, wo) = self.output_size(input)?;
        let (kh, kw) = self.kernel;
        Some((self.in_channels * self.out_channels * kh * kw * ho * wo) as u64)
    }
}

/// An ordinary dense convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub shape: ConvShape,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(shape: ConvShape, params: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let (kh, kw) = shape.kernel;
        let fan_in = shape.in_channels * kh * kw;
        let weight = params.add(
            format!("{name}.weight"),
            he_uniform(&[shape.out_channels, shape.in_channels, kh, kw], fan_in, rng),
        );
        let bias = shape.bias.then(|| {
            params.add(
                format!("{name}.bias"),
                uniform_init(&[shape.out_channels], 1.0 / (fan_in as f64).sqrt(), rng),
            )
        });
        Self { shape, weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let got = g.value(x).shape().get(1).copied().unwrap_or(0);
        if got != self.shape.in_channels {
            return Err(Error::ChannelMismatch {
                expected: self.shape.in_channels,
                got,
            });
        }
        let w = g.param(params, self.weight);
        let b = self.bias.map(|b| g.param(params, b));
        g.conv2d(
            x,
            w,
            b,
            ConvGeom {
                stride: self.shape.stride,
                padding: self.shape.padding,
            },
        )
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Fully connected classifier head.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        out_features: usize,
        params: &mut ParamStore,
        name: &str,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = params.add(
            format!("{name}.weight"),
            uniform_init(&[out_features, in_features], bound, rng),
        );
        let bias = params.add(format!("{name}.bias"), uniform_init(&[out_features], bound, rng));
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> u64 {
        (self.in_features * self.out_features + self.out_features) as u64
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Row-wise softmax of a `(B, classes)` logits tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<ndarray::Array2<f64>> {
    let l = logits
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::Shape("logits must be 2-d".into()))?;
    let mut out = l.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(out)
}
