use ndarray::{s, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::tape::Tensor;

/// A `channels × height × width` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Array3::from_shape_vec((channels, height, width), data)
            .map(Self::new)
            .map_err(|e| Error::Shape(format!("image buffer: {e}")))
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self::new(Array3::from_elem((channels, height, width), value))
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// ITU-R 601-2 luma; single-channel images are returned unchanged.
    pub fn luma(&self) -> ndarray::Array2<f64> {
        if self.channels() < 3 {
            return self.data.index_axis(Axis(0), 0).to_owned();
        }
        let r = self.data.index_axis(Axis(0), 0);
        let g = self.data.index_axis(Axis(0), 1);
        let b = self.data.index_axis(Axis(0), 2);
        let mut out = r.mapv(|v| 0.299 * v);
        out.scaled_add(0.587, &g);
        out.scaled_add(0.114, &b);
        out
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let (c, h, w) = self.dims();
        if (h, w) == (height, width) {
            return self.clone();
        }
        let sy = h as f64 / height as f64;
        let sx = w as f64 / width as f64;
        let axis = |o: usize, scale: f64, len: usize| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        };
        let mut out = Array3::<f64>::zeros((c, height, width));
        for oy in 0..height {
            let (y0, y1, fy) = axis(oy, sy, h);
            for ox in 0..width {
                let (x0, x1, fx) = axis(ox, sx, w);
                for ci in 0..c {
                    let d = &self.data;
                    let top = d[[ci, y0, x0]] * (1.0 - fx) + d[[ci, y0, x1]] * fx;
                    let bot = d[[ci, y1, x0]] * (1.0 - fx) + d[[ci, y1, x1]] * fx;
                    out[[ci, oy, ox]] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Image::new(out)
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Result<Image> {
        let (_, h, w) = self.dims();
        if height > h || width > w {
            return Err(Error::Shape(format!("cannot center-crop {h}x{w} to {height}x{width}")));
        }
        let top = (h - height) / 2;
        let left = (w - width) / 2;
        Ok(Image::new(
            self.data
                .slice(s![.., top..top + height, left..left + width])
                .to_owned(),
        ))
    }
}

/// Stacks equally sized images into a `(B, C, H, W)` tensor.
pub fn stack(images: &[Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty image list".into()))?;
    let (c, h, w) = first.dims();
    let mut out = Array4::<f64>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dims() != (c, h, w) {
            return Err(Error::Shape(format!(
                "image {i} is {:?}, expected {:?}",
                img.dims(),
                (c, h, w)
            )));
        }
        out.index_axis_mut(Axis(0), i).assign(img.data());
    }
    Ok(out.into_dyn())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::filled(3, 8, 8, 0.25);
        assert_eq!(img.resize(8, 8), img);
        let small = img.resize(4, 4);
        assert!(small.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let big = img.resize(16, 12);
        assert_eq!(big.dims(), (3, 16, 12));
    }

    #[test]
    fn center_crop_takes_middle() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let img = Image::from_vec(1, 4, 4, data).unwrap();
        let c = img.center_crop(2, 2).unwrap();
        assert_eq!(c.data().iter().copied().collect::<Vec<_>>(), vec![5.0, 6.0, 9.0, 10.0]);
        assert!(img.center_crop(5, 2).is_err());
    }
}
