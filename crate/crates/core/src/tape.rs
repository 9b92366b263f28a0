//! A small reverse-mode tape over `f64` tensors.
//!
//! Every forward pass records its operations on a fresh [`Graph`]. Parameters
//! live in a [`ParamStore`] outside the graph; calling [`Graph::backward`]
//! returns a [`Grads`] table from which parameter gradients are read.
//!
//! Nodes that cannot reach a parameter or a gradient-tracked input are never
//! visited during the backward sweep, so weights with no computational path to
//! the loss receive no gradient at all (rather than an accumulated zero).

use ndarray::{s, Array1, Array2, ArrayD, Axis, Ix2, Ix4, IxDyn, Slice};

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Owner of every learnable array of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar learnable values.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    LinComb(Vec<(Var, f64)>),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Array1<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        grad: Array2<f64>,
    },
    GramPenalty {
        u: Var,
        v: Var,
        m: Array2<f64>,
        pixels: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Result of a training-mode batch normalisation: the output and the batch
/// statistics used, so callers can fold them into running estimates.
pub struct BatchNormOut {
    pub out: Var,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

fn as4(t: &Tensor) -> Result<ndarray::ArrayView4<'_, f64>> {
    t.view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| shape_err(format!("expected a 4-d tensor, got {:?}", t.shape())))
}

fn as2(t: &Tensor) -> Result<ndarray::ArrayView2<'_, f64>> {
    t.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| shape_err(format!("expected a 2-d tensor, got {:?}", t.shape())))
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of one convolution call.
#[derive(Clone, Copy)]
struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeom,
}

impl ConvDims {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Calls `f(row, dst_index, src_index)` for every in-bounds patch entry.
    #[inline(always)]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = self.geom.padding as isize;
        let s = self.geom.stride;
        for ci in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * self.kh + i) * self.kw + j;
                    for oy in 0..self.ho {
                        let iy = (oy * s + i) as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * s + j) as isize - pad;
                            if ix >= 0 && ix < self.w as isize {
                                f(row, oy * self.wo + ox, src_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds one `(C, H, W)` image into a `(C*kh*kw, Ho*Wo)` patch matrix.
fn im2col(img: &[f64], d: &ConvDims, cols: &mut Array2<f64>) {
    cols.fill(0.0);
    let n = d.cols();
    let out = cols.as_slice_mut().expect("standard layout");
    d.for_each_tap(|row, dst, src| out[row * n + dst] = img[src]);
}

/// Adjoint of [`im2col`], accumulating into `img`.
fn col2im(cols: &Array2<f64>, d: &ConvDims, img: &mut [f64]) {
    let n = d.cols();
    let src = cols.as_slice().expect("standard layout");
    d.for_each_tap(|row, dst, i| img[i] += src[row * n + dst]);
}

/// `(B, C, H, W)` -> `(C, B*H*W)`.
fn channels_first(x: ndarray::ArrayView4<'_, f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let p = x.permuted_axes([1, 0, 2, 3]);
    p.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, b * h * w))
        .expect("contiguous")
}

/// `(C, B*H*W)` -> `(B, C, H, W)`.
fn channels_first_inv(m: Array2<f64>, b: usize, h: usize, w: usize) -> Tensor {
    let c = m.nrows();
    let t = m
        .into_shape_with_order((c, b, h, w))
        .expect("contiguous")
        .permuted_axes([1, 0, 2, 3]);
    t.as_standard_layout().into_owned().into_dyn()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.iter().next().copied().unwrap_or(0.0)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (gradient checks, feature-space tests).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xv = as4(self.value(x))?;
        let wv = as4(self.value(w))?;
        let (bsz, c, h, wd) = xv.dim();
        let (o, wc, kh, kw) = wv.dim();
        if wc != c {
            return Err(shape_err(format!("conv input has {c} channels, weight expects {wc}")));
        }
        let ho = conv_out_len(h, kh, geom.stride, geom.padding)
            .ok_or_else(|| shape_err("conv kernel larger than padded input"))?;
        let wo = conv_out_len(wd, kw, geom.stride, geom.padding)
            .ok_or_else(|| shape_err("conv kernel larger than padded input"))?;
        let d = ConvDims {
            c,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            geom,
        };
        let w2 = wv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, d.rows()))
            .expect("contiguous");
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != o {
                    return Err(shape_err("conv bias length mismatch"));
                }
                Some(bv.iter().copied().collect::<Vec<_>>())
            }
            None => None,
        };
        let xs = xv.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = vec![0.0; bsz * o * d.cols()];
        let mut cols = Array2::<f64>::zeros((d.rows(), d.cols()));
        for (bi, chunk) in out.chunks_exact_mut(o * d.cols()).enumerate() {
            im2col(&xs[bi * d.image_len()..(bi + 1) * d.image_len()], &d, &mut cols);
            let mut oi = ndarray::ArrayViewMut2::from_shape((o, d.cols()), chunk).expect("chunk size");
            ndarray::linalg::general_mat_mul(1.0, &w2, &cols, 0.0, &mut oi);
            if let Some(bias) = &bias {
                for (mut row, bv) in oi.axis_iter_mut(Axis(0)).zip(bias) {
                    row += *bv;
                }
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&[bsz, o, ho, wo]), out).expect("conv output shape");
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, tracked))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() || start + len > xv.shape()[axis] {
            return Err(shape_err(format!(
                "narrow [{start}, {}) out of range on axis {axis} of {:?}",
                start + len,
                xv.shape()
            )));
        }
        let out = xv.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, tracked))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat of zero tensors"));
        }
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let views: Vec<_> = xs.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).map_err(|e| shape_err(format!("concat: {e}")))?;
        let tracked = xs.iter().any(|v| self.tracked(*v));
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }, tracked))
    }

    /// Weighted sum of equally shaped tensors.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms.first().ok_or_else(|| shape_err("empty linear combination"))?;
        let mut out = self.value(first.0) * first.1;
        for (v, c) in &terms[1..] {
            let val = self.value(*v);
            if val.shape() != out.shape() {
                return Err(shape_err(format!(
                    "sum of mismatched shapes {:?} and {:?}",
                    out.shape(),
                    val.shape()
                )));
            }
            out.scaled_add(*c, val);
        }
        let tracked = terms.iter().any(|(v, _)| self.tracked(*v));
        Ok(self.push(out, Op::LinComb(terms.to_vec()), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lin_comb(&[(a, 1.0), (b, 1.0)])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let tracked = self.tracked(x);
        self.push(out, Op::Relu(x), tracked)
    }

    /// Per-channel normalisation of a `(B, C, H, W)` map using the batch
    /// statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<BatchNormOut> {
        let xv = as4(self.value(x))?;
        let (b, c, h, w) = xv.dim();
        let count = (b * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let lane = xv.slice(s![.., ci, .., ..]);
            let m = lane.sum() / count;
            let v = lane.fold(0.0, |acc, &t| acc + (t - m) * (t - m)) / count;
            mean[ci] = m;
            var[ci] = v;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let (out, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std)?;
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let out = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            tracked,
        );
        Ok(BatchNormOut { out, mean, var })
    }

    /// Normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Array1<f64>,
        var: &Array1<f64>,
        eps: f64,
    ) -> Result<Var> {
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let (out, xhat) = self.normalize(x, gamma, beta, mean, &inv_std)?;
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            tracked,
        ))
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Array1<f64>,
        inv_std: &Array1<f64>,
    ) -> Result<(Tensor, Tensor)> {
        let xv = as4(self.value(x))?;
        let c = xv.dim().1;
        let g = self.value(gamma);
        let bt = self.value(beta);
        if g.len() != c || bt.len() != c || mean.len() != c {
            return Err(shape_err(format!(
                "norm over {c} channels got gamma {}, beta {}, stats {}",
                g.len(),
                bt.len(),
                mean.len()
            )));
        }
        let mut xhat = xv.to_owned();
        let mut out = xv.to_owned();
        for ci in 0..c {
            let (m, is, gc, bc) = (mean[ci], inv_std[ci], g[[ci]], bt[[ci]]);
            xhat.slice_mut(s![.., ci, .., ..]).mapv_inplace(|t| (t - m) * is);
            out.slice_mut(s![.., ci, .., ..])
                .mapv_inplace(|t| (t - m) * is * gc + bc);
        }
        Ok((out.into_dyn(), xhat.into_dyn()))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = as4(self.value(x))?;
        let (b, c, h, w) = xv.dim();
        let area = (h * w) as f64;
        let mut out = Array2::<f64>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                out[[bi, ci]] = xv.slice(s![bi, ci, .., ..]).sum() / area;
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(out.into_dyn(), Op::GlobalAvgPool(x), tracked))
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let xv = as4(self.value(x))?;
        let (b, c, h, w) = xv.dim();
        let ho = conv_out_len(h, kernel, stride, padding).ok_or_else(|| shape_err("pool window larger than input"))?;
        let wo = conv_out_len(w, kernel, stride, padding).ok_or_else(|| shape_err("pool window larger than input"))?;
        let mut out = ndarray::Array4::<f64>::zeros((b, c, ho, wo));
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut idx = 0;
                        for i in 0..kernel {
                            for j in 0..kernel {
                                let iy = (oy * stride + i) as isize - padding as isize;
                                let ix = (ox * stride + j) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = xv[[bi, ci, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    idx = ((bi * c + ci) * h + iy as usize) * w + ix as usize;
                                }
                            }
                        }
                        out[[bi, ci, oy, ox]] = best;
                        argmax.push(idx);
                    }
                }
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(out.into_dyn(), Op::MaxPool { x, argmax }, tracked))
    }

    /// `x (B, in) · wᵀ (out, in) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = as2(self.value(x))?;
        let wv = as2(self.value(w))?;
        if xv.ncols() != wv.ncols() {
            return Err(shape_err(format!(
                "linear input width {} vs weight width {}",
                xv.ncols(),
                wv.ncols()
            )));
        }
        let mut out = xv.dot(&wv.t());
        let bv = self.value(b);
        if bv.len() != out.ncols() {
            return Err(shape_err("linear bias length mismatch"));
        }
        for mut row in out.axis_iter_mut(Axis(0)) {
            row.zip_mut_with(bv, |o, b| *o += *b);
        }
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(out.into_dyn(), Op::Linear { x, w, b }, tracked))
    }

    /// Mean softmax cross-entropy over the batch, with optional label
    /// smoothing `eps`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let lv = as2(self.value(logits))?;
        let (b, c) = lv.dim();
        if labels.len() != b {
            return Err(shape_err(format!("{} labels for {b} logits rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(shape_err(format!("label {bad} out of range for {c} classes")));
        }
        let mut grad = Array2::<f64>::zeros((b, c));
        let mut loss = 0.0;
        for (bi, &label) in labels.iter().enumerate() {
            let row = lv.row(bi);
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = max + row.fold(0.0, |a, &v| a + (v - max).exp()).ln();
            for ci in 0..c {
                let target = if ci == label { 1.0 - eps } else { 0.0 } + eps / c as f64;
                let logp = row[ci] - lse;
                if target > 0.0 {
                    loss -= target * logp;
                }
                grad[[bi, ci]] = (logp.exp() - target) / b as f64;
            }
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            ndarray::arr0(loss / b as f64).into_dyn(),
            Op::CrossEntropy { logits, grad },
            tracked,
        ))
    }

    /// Cross-channel Gram penalty `Σ_{u∈U, v∈V} (⟨u, v⟩ / P)²` where `P` is the
    /// number of batch-spatial positions.
    pub fn gram_penalty(&mut self, u: Var, v: Var) -> Result<Var> {
        let uv = as4(self.value(u))?;
        let vv = as4(self.value(v))?;
        let (bu, _, hu, wu) = uv.dim();
        let (bv, _, hv, wv) = vv.dim();
        if (bu, hu, wu) != (bv, hv, wv) {
            return Err(shape_err(format!(
                "pathway outputs disagree on batch/spatial dims: {:?} vs {:?}",
                uv.shape(),
                vv.shape()
            )));
        }
        let pixels = bu * hu * wu;
        let um = channels_first(uv);
        let vm = channels_first(vv);
        let m = um.dot(&vm.t()) / pixels as f64;
        let g = m.iter().map(|x| x * x).sum::<f64>();
        let tracked = self.tracked(u) || self.tracked(v);
        Ok(self.push(
            ndarray::arr0(g).into_dyn(),
            Op::GramPenalty { u, v, m, pixels },
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).raw_dim()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, g: Tensor| {
            if !self.tracked(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let wv = as4(self.value(*w))?;
                let (o, c, kh, kw) = wv.dim();
                let xv = as4(self.value(*x))?;
                let (bsz, _, h, wd) = xv.dim();
                let (_, _, ho, wo) = as4(gy)?.dim();
                let d = ConvDims {
                    c,
                    h,
                    w: wd,
                    kh,
                    kw,
                    ho,
                    wo,
                    geom: *geom,
                };
                let gys = gy.as_standard_layout();
                let gys = gys.as_slice().expect("standard layout");
                let gy_i = |bi: usize| {
                    ndarray::ArrayView2::from_shape((o, d.cols()), &gys[bi * o * d.cols()..(bi + 1) * o * d.cols()])
                        .expect("chunk size")
                };
                if let Some(b) = b {
                    let mut gb = Array1::<f64>::zeros(o);
                    for bi in 0..bsz {
                        gb += &gy_i(bi).sum_axis(Axis(1));
                    }
                    acc(*b, gb.into_dyn());
                }
                if self.tracked(*w) {
                    let xs = xv.as_standard_layout();
                    let xs = xs.as_slice().expect("standard layout");
                    let mut cols = Array2::<f64>::zeros((d.rows(), d.cols()));
                    let mut gw = Array2::<f64>::zeros((o, d.rows()));
                    for bi in 0..bsz {
                        im2col(&xs[bi * d.image_len()..(bi + 1) * d.image_len()], &d, &mut cols);
                        ndarray::linalg::general_mat_mul(1.0, &gy_i(bi), &cols.t(), 1.0, &mut gw);
                    }
                    acc(
                        *w,
                        gw.into_shape_with_order(IxDyn(&[o, c, kh, kw])).expect("contiguous"),
                    );
                }
                if self.tracked(*x) {
                    let w2 = wv
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((o, d.rows()))
                        .expect("contiguous");
                    let mut gcols = Array2::<f64>::zeros((d.rows(), d.cols()));
                    let mut gx = vec![0.0; bsz * d.image_len()];
                    for (bi, img) in gx.chunks_exact_mut(d.image_len()).enumerate() {
                        ndarray::linalg::general_mat_mul(1.0, &w2.t(), &gy_i(bi), 0.0, &mut gcols);
                        col2im(&gcols, &d, img);
                    }
                    acc(
                        *x,
                        Tensor::from_shape_vec(IxDyn(&[bsz, c, h, wd]), gx).expect("input shape"),
                    );
                }
            }
            Op::Narrow { x, axis, start } => {
                let mut gx = Tensor::zeros(self.value(*x).raw_dim());
                let len = gy.shape()[*axis];
                gx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                    .assign(gy);
                acc(*x, gx);
            }
            Op::Concat { xs, axis } => {
                let mut offset = 0;
                for v in xs {
                    let len = self.value(*v).shape()[*axis];
                    let part = gy.slice_axis(Axis(*axis), Slice::from(offset..offset + len)).to_owned();
                    acc(*v, part);
                    offset += len;
                }
            }
            Op::LinComb(terms) => {
                for (v, c) in terms {
                    acc(*v, gy * *c);
                }
            }
            Op::Relu(x) => {
                let mut gx = gy.clone();
                gx.zip_mut_with(self.value(*x), |g, &xv| {
                    if xv <= 0.0 {
                        *g = 0.0;
                    }
                });
                acc(*x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gy4 = as4(gy)?;
                let xh = as4(xhat)?;
                let (b, c, h, w) = gy4.dim();
                let count = (b * h * w) as f64;
                let g = self.value(*gamma);
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let gl = gy4.slice(s![.., ci, .., ..]);
                    let xl = xh.slice(s![.., ci, .., ..]);
                    dbeta[ci] = gl.sum();
                    dgamma[ci] = ndarray::Zip::from(&gl).and(&xl).fold(0.0, |a, &gv, &xv| a + gv * xv);
                }
                if self.tracked(*x) {
                    let mut gx = ndarray::Array4::<f64>::zeros((b, c, h, w));
                    for ci in 0..c {
                        let scale = g[[ci]] * inv_std[ci];
                        let gl = gy4.slice(s![.., ci, .., ..]);
                        let xl = xh.slice(s![.., ci, .., ..]);
                        let mut dst = gx.slice_mut(s![.., ci, .., ..]);
                        if *batch_stats {
                            let (sb, sg) = (dbeta[ci], dgamma[ci]);
                            ndarray::Zip::from(&mut dst).and(&gl).and(&xl).for_each(|d, &gv, &xv| {
                                *d = scale * (gv - sb / count - xv * sg / count);
                            });
                        } else {
                            ndarray::Zip::from(&mut dst).and(&gl).for_each(|d, &gv| *d = scale * gv);
                        }
                    }
                    acc(*x, gx.into_dyn());
                }
                acc(*gamma, dgamma.into_dyn());
                acc(*beta, dbeta.into_dyn());
            }
            Op::GlobalAvgPool(x) => {
                let xv = as4(self.value(*x))?;
                let (b, c, h, w) = xv.dim();
                let gy2 = as2(gy)?;
                let area = (h * w) as f64;
                let mut gx = ndarray::Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        gx.slice_mut(s![bi, ci, .., ..]).fill(gy2[[bi, ci]] / area);
                    }
                }
                acc(*x, gx.into_dyn());
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (g, &idx) in gy.iter().zip(argmax) {
                    gx[idx] += g;
                }
                acc(
                    *x,
                    Tensor::from_shape_vec(self.value(*x).raw_dim(), gx).expect("same size"),
                );
            }
            Op::Linear { x, w, b } => {
                let gy2 = as2(gy)?;
                let xv = as2(self.value(*x))?;
                let wv = as2(self.value(*w))?;
                acc(*b, gy2.sum_axis(Axis(0)).into_dyn());
                if self.tracked(*w) {
                    acc(*w, gy2.t().dot(&xv).into_dyn());
                }
                if self.tracked(*x) {
                    acc(*x, gy2.dot(&wv).into_dyn());
                }
            }
            Op::CrossEntropy { logits, grad } => {
                let scale = gy.iter().next().copied().unwrap_or(0.0);
                acc(*logits, (grad * scale).into_dyn());
            }
            Op::GramPenalty { u, v, m, pixels } => {
                let scale = gy.iter().next().copied().unwrap_or(0.0) * 2.0 / *pixels as f64;
                let uv = as4(self.value(*u))?;
                let vv = as4(self.value(*v))?;
                let (b, _, h, w) = uv.dim();
                if self.tracked(*u) {
                    let gu = m.dot(&channels_first(vv)) * scale;
                    acc(*u, channels_first_inv(gu, b, h, w));
                }
                if self.tracked(*v) {
                    let gv = m.t().dot(&channels_first(uv)) * scale;
                    acc(*v, channels_first_inv(gv, b, h, w));
                }
            }
        }
        Ok(())
    }
}

/// Gradients produced by one backward sweep.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients summed over every use of each parameter on the tape.
    pub fn param_grads(&self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (node, grad) in graph.nodes.iter().zip(&self.grads) {
            let (Op::Param(id), Some(g)) = (&node.op, grad) else {
                continue;
            };
            match out.iter_mut().find(|(pid, _)| pid == id) {
                Some((_, existing)) => *existing += g,
                None => out.push((*id, g.clone())),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
