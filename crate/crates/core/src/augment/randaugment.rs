//! RandAugment policy application over a fixed list of 14 transformations.
//!
//! Magnitude `m` on `0..=30` maps linearly onto each transform's range. Signed
//! transforms (shear, translate, rotate, the enhancement factors) pick their
//! sign uniformly at random. Geometric transforms use nearest-neighbour
//! sampling with zero fill.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use super::image::Image;
use super::ops::gray;
use super::policy::MAX_MAGNITUDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Color,
    Posterize,
    Solarize,
    Contrast,
    Sharpness,
    Brightness,
    AutoContrast,
    Equalize,
    Identity,
}

pub const TRANSFORMS: [Transform; 14] = [
    Transform::ShearX,
    Transform::ShearY,
    Transform::TranslateX,
    Transform::TranslateY,
    Transform::Rotate,
    Transform::Color,
    Transform::Posterize,
    Transform::Solarize,
    Transform::Contrast,
    Transform::Sharpness,
    Transform::Brightness,
    Transform::AutoContrast,
    Transform::Equalize,
    Transform::Identity,
];

const MAX_SHEAR: f64 = 0.3;
const MAX_TRANSLATE: f64 = 0.45;
const MAX_ROTATE_DEG: f64 = 30.0;
const MAX_ENHANCE: f64 = 0.9;

pub fn apply<R: Rng + ?Sized>(img: &Image, n: usize, m: usize, rng: &mut R) -> Image {
    let mut out = img.clone();
    for _ in 0..n {
        let t = TRANSFORMS[rng.random_range(0..TRANSFORMS.len())];
        out = apply_transform(&out, t, m, rng);
    }
    out
}

pub fn apply_transform<R: Rng + ?Sized>(img: &Image, t: Transform, m: usize, rng: &mut R) -> Image {
    let frac = m.min(MAX_MAGNITUDE) as f64 / MAX_MAGNITUDE as f64;
    let mut signed = |v: f64| if rng.random_bool(0.5) { -v } else { v };
    let (_, h, w) = img.dims();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    match t {
        Transform::ShearX => {
            let k = signed(frac * MAX_SHEAR);
            warp(img, |y, x| (y, x + k * (y - cy)))
        }
        Transform::ShearY => {
            let k = signed(frac * MAX_SHEAR);
            warp(img, |y, x| (y + k * (x - cx), x))
        }
        Transform::TranslateX => {
            let d = signed((frac * MAX_TRANSLATE * w as f64).round());
            warp(img, |y, x| (y, x - d))
        }
        Transform::TranslateY => {
            let d = signed((frac * MAX_TRANSLATE * h as f64).round());
            warp(img, |y, x| (y - d, x))
        }
        Transform::Rotate => {
            let theta = signed(frac * MAX_ROTATE_DEG).to_radians();
            let (sin, cos) = theta.sin_cos();
            warp(img, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
            })
        }
        Transform::Color => {
            let f = 1.0 + signed(frac * MAX_ENHANCE);
            let degenerate = gray(img, 1.0);
            blend(img, degenerate.data(), f)
        }
        Transform::Contrast => {
            let f = 1.0 + signed(frac * MAX_ENHANCE);
            let mean = img.luma().mean().unwrap_or(0.0);
            let degenerate = Array3::from_elem(img.dims(), mean);
            blend(img, &degenerate, f)
        }
        Transform::Brightness => {
            let f = 1.0 + signed(frac * MAX_ENHANCE);
            blend(img, &Array3::zeros(img.dims()), f)
        }
        Transform::Sharpness => {
            let f = 1.0 + signed(frac * MAX_ENHANCE);
            blend(img, &smooth(img), f)
        }
        Transform::Posterize => {
            let bits = 8 - (frac * 4.0).round() as u32;
            let mask: u32 = !((1u32 << (8 - bits)) - 1) & 0xff;
            Image::new(img.data().mapv(|v| (quantize(v) & mask) as f64 / 255.0))
        }
        Transform::Solarize => {
            let threshold = 1.0 - frac;
            Image::new(img.data().mapv(|v| if v >= threshold { 1.0 - v } else { v }))
        }
        Transform::AutoContrast => {
            let mut out = img.data().clone();
            for mut plane in out.axis_iter_mut(Axis(0)) {
                let lo = plane.fold(f64::INFINITY, |a, &v| a.min(v));
                let hi = plane.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                if hi > lo {
                    plane.mapv_inplace(|v| (v - lo) / (hi - lo));
                }
            }
            Image::new(out)
        }
        Transform::Equalize => {
            let mut out = img.data().clone();
            for mut plane in out.axis_iter_mut(Axis(0)) {
                let q = plane.mapv(quantize);
                let lut = equalize_lut(&q);
                plane.zip_mut_with(&q, |v, &qi| *v = lut[qi as usize] as f64 / 255.0);
            }
            Image::new(out)
        }
        Transform::Identity => img.clone(),
    }
}

fn quantize(v: f64) -> u32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u32
}

/// Histogram equalisation lookup table over 256 bins.
fn equalize_lut(q: &Array2<u32>) -> [u32; 256] {
    let mut hist = [0usize; 256];
    for &v in q {
        hist[v as usize] += 1;
    }
    let mut lut = [0u32; 256];
    for (i, l) in lut.iter_mut().enumerate() {
        *l = i as u32;
    }
    let last = hist.iter().rposition(|&c| c > 0).map(|i| hist[i]).unwrap_or(0);
    let step = (hist.iter().sum::<usize>() - last) / 255;
    if step == 0 {
        return lut;
    }
    let mut n = step / 2;
    for (i, l) in lut.iter_mut().enumerate() {
        *l = (n / step).min(255) as u32;
        n += hist[i];
    }
    lut
}

fn blend(img: &Image, degenerate: &Array3<f64>, factor: f64) -> Image {
    let mut out = img.data().clone();
    out.zip_mut_with(degenerate, |v, &d| *v = (d + factor * (*v - d)).clamp(0.0, 1.0));
    Image::new(out)
}

/// 3×3 smoothing (centre weight 5) with the one-pixel border left untouched.
fn smooth(img: &Image) -> Array3<f64> {
    let (c, h, w) = img.dims();
    let src = img.data();
    let mut out = src.clone();
    if h < 3 || w < 3 {
        return out;
    }
    for ci in 0..c {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = 4.0 * src[[ci, y, x]];
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += src[[ci, y + dy - 1, x + dx - 1]];
                    }
                }
                out[[ci, y, x]] = acc / 13.0;
            }
        }
    }
    out
}

/// Inverse-maps every output pixel through `src_of(y, x)`.
fn warp(img: &Image, src_of: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (c, h, w) = img.dims();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src_of(y as f64, x as f64);
            let (sy, sx) = (sy.round(), sx.round());
            if sy < 0.0 || sx < 0.0 || sy >= h as f64 || sx >= w as f64 {
                continue;
            }
            for ci in 0..c {
                out[[ci, y, x]] = img.data()[[ci, sy as usize, sx as usize]];
            }
        }
    }
    Image::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp() -> Image {
        let n = 3 * 8 * 8;
        Image::from_vec(3, 8, 8, (0..n).map(|i| i as f64 / n as f64).collect()).unwrap()
    }

    #[test]
    fn magnitude_zero_geometric_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ramp();
        for t in [
            Transform::ShearX,
            Transform::ShearY,
            Transform::TranslateX,
            Transform::TranslateY,
            Transform::Rotate,
            Transform::Brightness,
            Transform::Color,
        ] {
            let out = apply_transform(&img, t, 0, &mut rng);
            for (a, b) in out.data().iter().zip(img.data()) {
                assert!((a - b).abs() < 1e-12, "{t:?}");
            }
        }
    }

    #[test]
    fn every_transform_stays_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = ramp();
        for t in TRANSFORMS {
            for m in [0, 9, 30] {
                let out = apply_transform(&img, t, m, &mut rng);
                assert_eq!(out.dims(), img.dims());
                assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)), "{t:?} m={m}");
            }
        }
    }

    #[test]
    fn n_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(apply(&ramp(), 0, 9, &mut rng), ramp());
    }

    #[test]
    fn posterize_full_magnitude_keeps_four_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = apply_transform(&ramp(), Transform::Posterize, 30, &mut rng);
        for v in out.data() {
            assert_eq!(((v * 255.0).round() as u32) & 0x0f, 0);
        }
    }
}
