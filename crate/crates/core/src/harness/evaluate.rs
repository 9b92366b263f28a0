use serde::{Deserialize, Serialize};

use super::config::EvalProtocol;
use super::data::{resize_short_side, Sample};
use super::model::Network;
use crate::augment::{stack, Image};
use crate::error::{Error, Result};

const EVAL_CHUNK: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Percentages in `[0, 100]`.
    pub top1: f64,
    pub top5: f64,
    pub count: usize,
}

/// Resize the short side, then take the central crop.
pub fn preprocess(img: &Image, protocol: &EvalProtocol) -> Result<Image> {
    protocol.validate()?;
    resize_short_side(img, protocol.resize).center_crop(protocol.crop, protocol.crop)
}

/// Rank of the true class's score among all classes (0 = highest); ties count
/// against the prediction.
fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| i != label && v >= s)
        .count()
}

/// Top-1 and top-5 accuracy of the main head over `samples`.
pub fn evaluate(net: &Network, samples: &[Sample], protocol: &EvalProtocol) -> Result<Accuracy> {
    let classes = net.num_classes();
    if let Some(s) = samples.iter().find(|s| s.label >= classes) {
        return Err(Error::Data(format!(
            "label {} does not fit a {classes}-class head",
            s.label
        )));
    }
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let (mut top1, mut top5) = (0usize, 0usize);
    for chunk in samples.chunks(EVAL_CHUNK) {
        let images = chunk
            .iter()
            .map(|s| preprocess(&s.image, protocol))
            .collect::<Result<Vec<_>>>()?;
        let probs = net.infer_batch(&stack(&images)?)?;
        for (row, s) in probs.rows().into_iter().zip(chunk) {
            let r = rank_of(row.as_slice().expect("standard layout"), s.label);
            top1 += (r == 0) as usize;
            top5 += (r < 5) as usize;
        }
    }
    let n = samples.len() as f64;
    Ok(Accuracy {
        top1: 100.0 * top1 as f64 / n,
        top5: 100.0 * top5 as f64 / n,
        count: samples.len(),
    })
}
