use ndarray::{s, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use super::image::Image;
use super::policy::{Policy, PolicySpec};
use super::randaugment;
use crate::error::{Error, Result};

/// Applies every component of `policy` in order. The input is never modified.
pub fn apply_policy<R: Rng + ?Sized>(img: &Image, policy: &PolicySpec, rng: &mut R) -> Result<Image> {
    policy.validate()?;
    let mut out = img.clone();
    for p in &policy.components {
        out = apply_one(&out, p, rng)?;
    }
    Ok(out)
}

pub fn apply_one<R: Rng + ?Sized>(img: &Image, policy: &Policy, rng: &mut R) -> Result<Image> {
    let c = img.channels();
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("augmentation expects 1 or 3 channels, got {c}")));
    }
    policy.validate()?;
    Ok(match *policy {
        Policy::Identity => img.clone(),
        Policy::Crop { pad } => random_crop(img, pad, rng),
        Policy::Flip => {
            if rng.random_bool(0.5) {
                hflip(img)
            } else {
                img.clone()
            }
        }
        Policy::Gray { alpha } => gray(img, alpha),
        Policy::Blur { k } => blur(img, k),
        Policy::GridShuffle { g } => grid_shuffle(img, g, rng)?,
        Policy::Mpn { s } => mpn(img, s),
        Policy::RandAugment { n, m } => randaugment::apply(img, n, m, rng),
    })
}

pub fn hflip(img: &Image) -> Image {
    let mut d = img.data().clone();
    d.invert_axis(Axis(2));
    Image::new(d.as_standard_layout().into_owned())
}

fn random_crop<R: Rng + ?Sized>(img: &Image, pad: usize, rng: &mut R) -> Image {
    if pad == 0 {
        return img.clone();
    }
    let (c, h, w) = img.dims();
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let mut out = Array3::<f64>::zeros((c, h, w));
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize + dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            for ci in 0..c {
                out[[ci, y, x]] = img.data()[[ci, sy as usize, sx as usize]];
            }
        }
    }
    Image::new(out)
}

pub fn gray(img: &Image, alpha: f64) -> Image {
    if alpha == 0.0 || img.channels() == 1 {
        return img.clone();
    }
    let luma = img.luma();
    let mut out = img.data().clone();
    for mut plane in out.axis_iter_mut(Axis(0)) {
        plane.zip_mut_with(&luma, |v, &l| *v = alpha * l + (1.0 - alpha) * *v);
    }
    Image::new(out)
}

pub fn blur(img: &Image, k: usize) -> Image {
    if k == 1 {
        return img.clone();
    }
    let (c, h, w) = img.dims();
    let r = (k / 2) as isize;
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let norm = (k * k) as f64;
    let src = img.data();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -r..=r {
                    let sy = clamp(y as isize + dy, h);
                    for dx in -r..=r {
                        acc += src[[ci, sy, clamp(x as isize + dx, w)]];
                    }
                }
                out[[ci, y, x]] = acc / norm;
            }
        }
    }
    Image::new(out)
}

pub fn mpn(img: &Image, s: f64) -> Image {
    Image::new(img.data().mapv(|v| (v * s).clamp(0.0, 1.0)))
}

/// Reflect-pads `len` to the next multiple of `g`; returns `(before, after)`.
fn grid_padding(len: usize, g: usize) -> Result<(usize, usize)> {
    let padded = len.div_ceil(g) * g;
    let total = padded - len;
    let before = total / 2;
    let after = total - before;
    if total > 0 && after >= len {
        return Err(Error::InvalidPolicy(format!(
            "grid shuffle g={g} cannot tile a dimension of {len} pixels by reflect padding"
        )));
    }
    Ok((before, after))
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Splits the image into a `g × g` grid and permutes tile positions uniformly
/// (the identity permutation included). Non-divisible sizes are reflect
/// padded, shuffled and centre-cropped back.
pub fn grid_shuffle<R: Rng + ?Sized>(img: &Image, g: usize, rng: &mut R) -> Result<Image> {
    let (c, h, w) = img.dims();
    let (top, bottom) = grid_padding(h, g)?;
    let (left, right) = grid_padding(w, g)?;
    if g == 1 {
        return Ok(img.clone());
    }
    let (ph, pw) = (h + top + bottom, w + left + right);
    let mut padded = Array3::<f64>::zeros((c, ph, pw));
    for y in 0..ph {
        let sy = reflect(y as isize - top as isize, h);
        for x in 0..pw {
            let sx = reflect(x as isize - left as isize, w);
            for ci in 0..c {
                padded[[ci, y, x]] = img.data()[[ci, sy, sx]];
            }
        }
    }
    let (th, tw) = (ph / g, pw / g);
    let mut order: Vec<usize> = (0..g * g).collect();
    order.shuffle(rng);
    let mut shuffled = Array3::<f64>::zeros((c, ph, pw));
    for (dst, &src) in order.iter().enumerate() {
        let (dy, dx) = (dst / g * th, dst % g * tw);
        let (sy, sx) = (src / g * th, src % g * tw);
        shuffled
            .slice_mut(s![.., dy..dy + th, dx..dx + tw])
            .assign(&padded.slice(s![.., sy..sy + th, sx..sx + tw]));
    }
    Ok(Image::new(
        shuffled.slice(s![.., top..top + h, left..left + w]).to_owned(),
    ))
}
