//! Cross-pathway regularisation and the multi-head training objective.
//!
//! The similarity between two pathway outputs `U` and `V` (which may have
//! different channel counts) is the cross-channel Gram penalty
//!
//! ```text
//! G(U, V) = Σ_{u ∈ channels(U)} Σ_{v ∈ channels(V)} (⟨u, v⟩ / P)²
//! ```
//!
//! where `⟨u, v⟩` runs over batch and spatial positions and `P = B·H·W`. It is
//! zero exactly when every cross-pathway channel pair is orthogonal. For a
//! layer evaluated on view level `j`, every pair of the pathway outputs
//! `c^j..c^k` contributes; the regulariser `S` sums over layers and levels.

use serde::{Deserialize, Serialize};

use crate::apconv::PathwayOutput;
use crate::error::{Error, Result};
use crate::tape::{Graph, Tensor, Var};

/// Pathway outputs of one layer on one view level, ordered `c^level..c^k`.
#[derive(Debug, Clone)]
pub struct PathwayFeatures {
    pub level: usize,
    pub pathways: Vec<Var>,
}

impl From<&PathwayOutput> for PathwayFeatures {
    fn from(o: &PathwayOutput) -> Self {
        Self {
            level: o.level,
            pathways: o.pathways.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight-decay coefficient ω.
    pub weight_decay: f64,
    /// Explicit regulariser weight λ; `None` couples it to `0.1 · ω`.
    pub lambda: Option<f64>,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-4,
            lambda: None,
            label_smoothing: 0.0,
        }
    }
}

impl LossConfig {
    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(0.1 * self.weight_decay)
    }

    /// The same config with ω replaced; a coupled λ follows it.
    pub fn with_weight_decay(self, weight_decay: f64) -> Self {
        Self { weight_decay, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight_decay < 0.0 || self.lambda() < 0.0 {
            return Err(Error::Config("λ and ω must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Cross-entropy of head `j` on view `j`.
    pub head_losses: Vec<f64>,
    pub s: f64,
    pub lambda: f64,
    pub weight_decay: f64,
    pub total: f64,
}

/// `S` on the tape. Returns a constant zero when there are no pathway pairs.
pub fn cross_pathway_similarity(g: &mut Graph, features: &[PathwayFeatures]) -> Result<Var> {
    let mut terms = Vec::new();
    for f in features {
        for (a, &u) in f.pathways.iter().enumerate() {
            for &v in &f.pathways[a + 1..] {
                terms.push((g.gram_penalty(u, v)?, 1.0));
            }
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(ndarray::arr0(0.0).into_dyn()));
    }
    g.lin_comb(&terms)
}

/// `G(U, V)` on plain arrays.
pub fn gram_penalty(u: &Tensor, v: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (u, v) = (g.constant(u.clone()), g.constant(v.clone()));
    let s = g.gram_penalty(u, v)?;
    Ok(g.scalar(s))
}

/// `S` on plain arrays: each entry lists one layer/level's pathway outputs.
pub fn similarity(features: &[Vec<Tensor>]) -> Result<f64> {
    let mut s = 0.0;
    for layer in features {
        for (a, u) in layer.iter().enumerate() {
            for v in &layer[a + 1..] {
                s += gram_penalty(u, v)?;
            }
        }
    }
    Ok(s)
}

/// `Σ_j CE(logits_j, labels) + λ·S`, failing on any non-finite component.
pub fn total_loss(
    g: &mut Graph,
    logits: &[Var],
    labels: &[usize],
    s: Var,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if logits.is_empty() {
        return Err(Error::Shape("no heads to train".into()));
    }
    let lambda = cfg.lambda();
    let mut terms = Vec::with_capacity(logits.len() + 1);
    let mut head_losses = Vec::with_capacity(logits.len());
    for (j, &l) in logits.iter().enumerate() {
        let ce = g.cross_entropy(l, labels, cfg.label_smoothing)?;
        let value = g.scalar(ce);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                component: format!("cross-entropy of head {}", j + 1),
                value,
            });
        }
        head_losses.push(value);
        terms.push((ce, 1.0));
    }
    let s_value = g.scalar(s);
    if !s_value.is_finite() {
        return Err(Error::NonFinite {
            component: "cross-pathway similarity".into(),
            value: s_value,
        });
    }
    if lambda != 0.0 {
        terms.push((s, lambda));
    }
    let total = g.lin_comb(&terms)?;
    let total_value = g.scalar(total);
    if !total_value.is_finite() {
        return Err(Error::NonFinite {
            component: "total loss".into(),
            value: total_value,
        });
    }
    Ok((
        total,
        LossBreakdown {
            head_losses,
            s: s_value,
            lambda,
            weight_decay: cfg.weight_decay,
            total: total_value,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn map(c: usize, data: Vec<f64>) -> Tensor {
        let hw = data.len() / c;
        Tensor::from_shape_vec(IxDyn(&[1, c, 1, hw]), data).unwrap()
    }

    #[test]
    fn hand_evaluated_gram_term() {
        // ((1·1 + 2·(−1)) / 2)² = 0.25
        let g = gram_penalty(&map(1, vec![1.0, 2.0]), &map(1, vec![1.0, -1.0])).unwrap();
        assert_eq!(g, 0.25);
    }

    #[test]
    fn orthogonal_and_zero_pathways_give_zero() {
        let u = map(2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let v = map(1, vec![0.0, 0.0, 3.0]);
        assert_eq!(gram_penalty(&u, &v).unwrap(), 0.0);
        let z = map(2, vec![0.0; 6]);
        assert_eq!(similarity(&[vec![u, z]]).unwrap(), 0.0);
    }

    #[test]
    fn lambda_couples_to_weight_decay() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.weight_decay, 1e-4);
        assert!((cfg.lambda() - 1e-5).abs() < 1e-20);
        let cfg = cfg.with_weight_decay(5e-4);
        assert!((cfg.lambda() - 5e-5).abs() < 1e-20);
        let fixed = LossConfig {
            lambda: Some(0.3),
            ..LossConfig::default()
        }
        .with_weight_decay(1.0);
        assert_eq!(fixed.lambda(), 0.3);
    }

    #[test]
    fn lambda_zero_total_is_head_sum() {
        let mut g = Graph::new();
        let l1 = g.constant(Tensor::from_shape_vec(IxDyn(&[2, 3]), vec![0.1, 0.5, -0.2, 1.0, 0.0, 0.3]).unwrap());
        let l2 = g.constant(Tensor::from_shape_vec(IxDyn(&[2, 3]), vec![0.0, 0.0, 0.0, 2.0, -1.0, 0.5]).unwrap());
        let s = g.constant(ndarray::arr0(7.0).into_dyn());
        let cfg = LossConfig {
            lambda: Some(0.0),
            ..LossConfig::default()
        };
        let (_, b) = total_loss(&mut g, &[l1, l2], &[1, 0], s, &cfg).unwrap();
        assert_eq!(b.total, b.head_losses[0] + b.head_losses[1]);
    }

    #[test]
    fn perfect_logits_and_zero_s_give_zero_total() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::from_shape_vec(IxDyn(&[2, 2]), vec![1000.0, 0.0, 0.0, 1000.0]).unwrap());
        let s = g.constant(ndarray::arr0(0.0).into_dyn());
        let (_, b) = total_loss(&mut g, &[l, l], &[0, 1], s, &LossConfig::default()).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn non_finite_components_abort() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::from_shape_vec(IxDyn(&[1, 2]), vec![f64::NAN, 0.0]).unwrap());
        let s = g.constant(ndarray::arr0(0.0).into_dyn());
        assert!(matches!(
            total_loss(&mut g, &[l], &[0], s, &LossConfig::default()),
            Err(Error::NonFinite { .. })
        ));
        let l = g.constant(Tensor::from_shape_vec(IxDyn(&[1, 2]), vec![0.0, 0.0]).unwrap());
        let s = g.constant(ndarray::arr0(f64::INFINITY).into_dyn());
        assert!(total_loss(&mut g, &[l], &[0], s, &LossConfig::default()).is_err());
    }

    #[test]
    fn mismatched_spatial_dims_rejected() {
        let u = Tensor::zeros(IxDyn(&[1, 1, 2, 2]));
        let v = Tensor::zeros(IxDyn(&[1, 1, 2, 3]));
        assert!(gram_penalty(&u, &v).is_err());
    }
}
