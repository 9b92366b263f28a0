//! Test-side oracles, written without reference to the library's own
//! convolution, routing or gradient code.
#![allow(dead_code)]

use apnet::apconv::ApConvSpec;
use apnet::tape::Tensor;
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct six-loop convolution with zero padding.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (bs, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c, wc);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(IxDyn(&[bs, o, ho, wo]));
    for n in 0..bs {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map(|b| b[[oc]]).unwrap_or(0.0);
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x[[n, ic, iy as usize, ix as usize]] * w[[oc, ic, i, j]];
                                }
                            }
                        }
                    }
                    out[[n, oc, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

/// Which sub-convolution (0-based) owns level-1 output channel `o`: the
/// largest `j` whose trailing `m_out^(j)` block contains `o`.
pub fn owner_of_output(spec: &ApConvSpec, o: usize) -> usize {
    let n = spec.pathway_out[0];
    (0..spec.pathway_out.len())
        .filter(|&j| o >= n - spec.pathway_out[j])
        .max()
        .unwrap()
}

/// The dense `(n_out, n_in, kh, kw)` weight whose entry `(o, i)` is free
/// exactly when input `i` lies in the trailing `m_in` block of `o`'s pathway,
/// and is structurally zero otherwise. Free entries are random.
pub fn masked_dense(spec: &ApConvSpec, rng: &mut ChaCha8Rng) -> (Tensor, Option<Tensor>) {
    let (n_out, n_in) = (spec.pathway_out[0], spec.pathway_in[0]);
    let (kh, kw) = spec.kernel;
    let mut w = Tensor::zeros(IxDyn(&[n_out, n_in, kh, kw]));
    for o in 0..n_out {
        let j = owner_of_output(spec, o);
        for i in n_in - spec.pathway_in[j]..n_in {
            for a in 0..kh {
                for b in 0..kw {
                    w[[o, i, a, b]] = rng.random_range(-1.0..1.0);
                }
            }
        }
    }
    let bias = spec.bias.then(|| random_tensor(&[n_out], rng));
    (w, bias)
}

/// Cuts the per-pathway weights out of a masked dense weight: pathway `j`
/// gets rows of its output block and columns of its input block.
pub fn split_masked(spec: &ApConvSpec, w: &Tensor, b: Option<&Tensor>) -> (Vec<Tensor>, Vec<Option<Tensor>>) {
    let (n_out, n_in) = (spec.pathway_out[0], spec.pathway_in[0]);
    let mut ws = Vec::new();
    let mut bs = Vec::new();
    for j in 0..spec.pathway_in.len() {
        let rows: Vec<usize> = (0..n_out).filter(|&o| owner_of_output(spec, o) == j).collect();
        let cols: Vec<usize> = (n_in - spec.pathway_in[j]..n_in).collect();
        let (kh, kw) = spec.kernel;
        let mut t = Tensor::zeros(IxDyn(&[rows.len(), cols.len(), kh, kw]));
        for (ri, &o) in rows.iter().enumerate() {
            for (ci, &i) in cols.iter().enumerate() {
                for a in 0..kh {
                    for bb in 0..kw {
                        t[[ri, ci, a, bb]] = w[[o, i, a, bb]];
                    }
                }
            }
        }
        ws.push(t);
        bs.push(
            b.map(|b| Tensor::from_shape_vec(IxDyn(&[rows.len()]), rows.iter().map(|&o| b[[o]]).collect()).unwrap()),
        );
    }
    (ws, bs)
}

/// Restricts a dense weight/bias/input to level `level` (1-based): trailing
/// `m_out^(level)` rows, trailing `m_in^(level)` columns.
pub fn restrict_to_level(spec: &ApConvSpec, level: usize, w: &Tensor, b: Option<&Tensor>) -> (Tensor, Option<Tensor>) {
    use ndarray::s;
    let (n_out, n_in) = (spec.pathway_out[0], spec.pathway_in[0]);
    let (mo, mi) = (spec.pathway_out[level - 1], spec.pathway_in[level - 1]);
    let w = w.slice(s![n_out - mo.., n_in - mi.., .., ..]).to_owned().into_dyn();
    let b = b.map(|b| b.slice(s![n_out - mo..]).to_owned().into_dyn());
    (w, b)
}

/// A random valid spec with `k` pathways.
pub fn random_spec(k: usize, rng: &mut ChaCha8Rng) -> ApConvSpec {
    let nested = |rng: &mut ChaCha8Rng| {
        let mut m = vec![0; k];
        m[k - 1] = rng.random_range(1..=3);
        for j in (0..k - 1).rev() {
            m[j] = m[j + 1] + rng.random_range(1..=3);
        }
        m
    };
    let kernel = [(1, 1), (3, 3), (1, 3), (3, 1), (2, 2)][rng.random_range(0..5)];
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=kernel.0.min(kernel.1) / 2);
    ApConvSpec::new(nested(rng), nested(rng), kernel, stride, padding, rng.random_bool(0.5)).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error used for gradient checks, with an absolute floor so that
/// near-zero entries compare by absolute difference.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_diff(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, i: usize, h: f64) -> f64 {
    let mut xp = x.clone();
    let mut xm = x.clone();
    xp.as_slice_mut().unwrap()[i] += h;
    xm.as_slice_mut().unwrap()[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}
