use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{stack, Image};
use super::ops::apply_policy;
use super::policy::PolicySpec;
use crate::error::{Error, Result};
use crate::tape::Tensor;

/// Aligned per-level views of one labelled batch. `views[0]` is level 1.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub views: Vec<Vec<Image>>,
    pub labels: Vec<usize>,
    pub seed: u64,
}

impl ViewBatch {
    pub fn levels(&self) -> usize {
        self.views.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(B, C, H, W)` tensor of one level (0-based index).
    pub fn level_tensor(&self, index: usize) -> Result<Tensor> {
        let views = self.views.get(index).ok_or(Error::LevelOutOfRange {
            level: index + 1,
            max: self.views.len(),
        })?;
        stack(views)
    }

    /// The random stream that produced every view of image `index`.
    pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        rng
    }
}

/// Builds `K = graded.len()` views per image.
///
/// Level 1 is `light` followed by the level-1 graded policy (normally
/// `Identity`); every heavier level applies its policy on top of the level-1
/// view, so all levels of a sample share the same crop geometry. Image `i`
/// draws from its own stream of `seed`, see [`ViewBatch::image_rng`].
pub fn make_view_batch(
    images: &[Image],
    labels: &[usize],
    graded: &[PolicySpec],
    light: &[PolicySpec],
    seed: u64,
) -> Result<ViewBatch> {
    if images.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if graded.is_empty() {
        return Err(Error::InvalidPolicy("at least one graded level is required".into()));
    }
    for (i, p) in graded.iter().enumerate() {
        if p.level != 0 && p.level as usize != i + 1 {
            return Err(Error::InvalidPolicy(format!(
                "graded policy {p} carries level {} at position {}",
                p.level,
                i + 1
            )));
        }
    }
    let k = graded.len();
    let mut views: Vec<Vec<Image>> = vec![Vec::with_capacity(images.len()); k];
    for (i, img) in images.iter().enumerate() {
        let mut rng = ViewBatch::image_rng(seed, i);
        let mut base = img.clone();
        for p in light {
            base = apply_policy(&base, p, &mut rng)?;
        }
        let base = apply_policy(&base, &graded[0], &mut rng)?;
        for (j, p) in graded.iter().enumerate().skip(1) {
            views[j].push(apply_policy(&base, p, &mut rng)?);
        }
        views[0].push(base);
    }
    Ok(ViewBatch {
        views,
        labels: labels.to_vec(),
        seed,
    })
}
