//! Augmentation policies and the deviation ordering between them.
//!
//! A view `b` is heavier than a view `a` when either both are produced by the
//! same policy families and `b` uses hyperparameters at least as aggressive
//! everywhere (strictly more somewhere), or the families used for `b` form a
//! proper superset of those used for `a` (with shared components at least as
//! aggressive). `Identity` contributes no family, so it is the lightest view.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the RandAugment magnitude scale.
pub const MAX_MAGNITUDE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Identity,
    Crop,
    Flip,
    Gray,
    Blur,
    GridShuffle,
    Mpn,
    RandAugment,
}

/// One primitive augmentation with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Identity,
    /// Zero-pad by `pad` pixels and take a random crop of the original size.
    Crop {
        pad: usize,
    },
    /// Horizontal flip with probability 1/2.
    Flip,
    /// Blend `alpha * gray + (1 - alpha) * image`.
    Gray {
        alpha: f64,
    },
    /// `k × k` mean filter with edge replication.
    Blur {
        k: usize,
    },
    /// Permute the tiles of a `g × g` grid.
    GridShuffle {
        g: usize,
    },
    /// Multiply pixel values by `s`, then clip to `[0, 1]`.
    Mpn {
        s: f64,
    },
    /// `n` transformations drawn from a fixed list at magnitude `m`.
    RandAugment {
        n: usize,
        m: usize,
    },
}

impl Policy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Identity => PolicyKind::Identity,
            Policy::Crop { .. } => PolicyKind::Crop,
            Policy::Flip => PolicyKind::Flip,
            Policy::Gray { .. } => PolicyKind::Gray,
            Policy::Blur { .. } => PolicyKind::Blur,
            Policy::GridShuffle { .. } => PolicyKind::GridShuffle,
            Policy::Mpn { .. } => PolicyKind::Mpn,
            Policy::RandAugment { .. } => PolicyKind::RandAugment,
        }
    }

    /// Hyperparameters by name.
    pub fn params(&self) -> BTreeMap<&'static str, f64> {
        let mut map = BTreeMap::new();
        match *self {
            Policy::Identity | Policy::Flip => {}
            Policy::Crop { pad } => {
                map.insert("pad", pad as f64);
            }
            Policy::Gray { alpha } => {
                map.insert("alpha", alpha);
            }
            Policy::Blur { k } => {
                map.insert("k", k as f64);
            }
            Policy::GridShuffle { g } => {
                map.insert("g", g as f64);
            }
            Policy::Mpn { s } => {
                map.insert("s", s);
            }
            Policy::RandAugment { n, m } => {
                map.insert("n", n as f64);
                map.insert("m", m as f64);
            }
        }
        map
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPolicy(msg));
        match *self {
            Policy::Gray { alpha } if !(0.0..=1.0).contains(&alpha) => {
                bad(format!("gray alpha {alpha} outside [0, 1]"))
            }
            Policy::Blur { k } if k == 0 || k % 2 == 0 => bad(format!("blur kernel size {k} must be odd and >= 1")),
            Policy::GridShuffle { g: 0 } => bad("grid size g must be >= 1".into()),
            Policy::Mpn { s } if !(s.is_finite() && s > 0.0) => bad(format!("mpn scale {s} must be finite and > 0")),
            Policy::RandAugment { m, .. } if m > MAX_MAGNITUDE => {
                bad(format!("randaugment magnitude {m} exceeds {MAX_MAGNITUDE}"))
            }
            _ => Ok(()),
        }
    }

    /// Hyperparameters oriented so that larger means heavier.
    fn intensity(&self) -> Vec<f64> {
        match *self {
            Policy::Identity | Policy::Flip => vec![],
            Policy::Crop { pad } => vec![pad as f64],
            Policy::Gray { alpha } => vec![alpha],
            Policy::Blur { k } => vec![k as f64],
            Policy::GridShuffle { g } => vec![g as f64],
            Policy::Mpn { s } => vec![s.ln().abs()],
            Policy::RandAugment { n, m } => vec![n as f64, m as f64],
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Policy::Identity => write!(f, "Identity"),
            Policy::Crop { pad } => write!(f, "Crop(pad={pad})"),
            Policy::Flip => write!(f, "Flip"),
            Policy::Gray { alpha } => write!(f, "Gray(alpha={alpha})"),
            Policy::Blur { k } => write!(f, "Blur(k={k})"),
            Policy::GridShuffle { g } => write!(f, "GridShuffle(g={g})"),
            Policy::Mpn { s } => write!(f, "MPN(s={s})"),
            Policy::RandAugment { n, m } => write!(f, "RandAugment({n},{m})"),
        }
    }
}

/// A (possibly composite) policy applied in order, plus its deviation rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PolicySpecRepr", into = "PolicySpecRepr")]
pub struct PolicySpec {
    pub components: Vec<Policy>,
    /// Deviation rank, 1 = lightest. Zero until assigned by [`grade_policies`].
    pub level: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PolicySpecRepr {
    Single(Policy),
    Chain(Vec<Policy>),
}

impl From<PolicySpecRepr> for PolicySpec {
    fn from(r: PolicySpecRepr) -> Self {
        match r {
            PolicySpecRepr::Single(p) => PolicySpec::single(p),
            PolicySpecRepr::Chain(c) => PolicySpec::chain(c),
        }
    }
}

impl From<PolicySpec> for PolicySpecRepr {
    fn from(p: PolicySpec) -> Self {
        if p.components.len() == 1 {
            PolicySpecRepr::Single(p.components.into_iter().next().expect("one component"))
        } else {
            PolicySpecRepr::Chain(p.components)
        }
    }
}

impl PolicySpec {
    pub fn single(policy: Policy) -> Self {
        Self {
            components: vec![policy],
            level: 0,
        }
    }

    pub fn chain(components: Vec<Policy>) -> Self {
        Self { components, level: 0 }
    }

    pub fn identity() -> Self {
        Self::single(Policy::Identity)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in &self.components {
            p.validate()?;
            if p.kind() != PolicyKind::Identity && !seen.insert(p.kind()) {
                return Err(Error::InvalidPolicy(format!(
                    "{self}: family {:?} used twice",
                    p.kind()
                )));
            }
        }
        Ok(())
    }

    fn families(&self) -> BTreeMap<PolicyKind, &Policy> {
        self.components
            .iter()
            .filter(|p| p.kind() != PolicyKind::Identity)
            .map(|p| (p.kind(), p))
            .collect()
    }

    /// Deviation comparison: `Some(Greater)` means `self` is heavier.
    /// `None` when neither rule orders the pair.
    pub fn deviation_cmp(&self, other: &PolicySpec) -> Option<Ordering> {
        let a = self.families();
        let b = other.families();
        let ka: BTreeSet<_> = a.keys().copied().collect();
        let kb: BTreeSet<_> = b.keys().copied().collect();
        let shared = |x: &BTreeMap<PolicyKind, &Policy>, y: &BTreeMap<PolicyKind, &Policy>| {
            let mut ord = Some(Ordering::Equal);
            for (kind, py) in y {
                let px = x[kind];
                for (vx, vy) in px.intensity().iter().zip(py.intensity()) {
                    let c = vx.partial_cmp(&vy)?;
                    ord = match (ord?, c) {
                        (o, Ordering::Equal) => Some(o),
                        (Ordering::Equal, c) => Some(c),
                        (o, c) if o == c => Some(o),
                        _ => None,
                    };
                }
            }
            ord
        };
        if ka == kb {
            shared(&a, &b)
        } else if ka.is_superset(&kb) {
            match shared(&a, &b)? {
                Ordering::Less => None,
                _ => Some(Ordering::Greater),
            }
        } else if kb.is_superset(&ka) {
            match shared(&b, &a)? {
                Ordering::Less => None,
                _ => Some(Ordering::Less),
            }
        } else {
            None
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.components.iter().enumerate() {
            if i > 0 {
                write!(f, "+")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

/// Sorts policies from lightest to heaviest and assigns levels `1..=K`.
///
/// Every pair must be ordered by the deviation rules; a pair that is not
/// yields [`Error::IncomparablePolicies`], and two equally heavy policies
/// yield [`Error::DuplicatePolicy`].
pub fn grade_policies(policies: &[PolicySpec]) -> Result<Vec<PolicySpec>> {
    for p in policies {
        p.validate()?;
    }
    for (i, a) in policies.iter().enumerate() {
        for b in &policies[i + 1..] {
            match a.deviation_cmp(b) {
                None => return Err(Error::IncomparablePolicies(a.to_string(), b.to_string())),
                Some(Ordering::Equal) => return Err(Error::DuplicatePolicy(a.to_string())),
                Some(_) => {}
            }
        }
    }
    let mut sorted = policies.to_vec();
    sorted.sort_by(|a, b| a.deviation_cmp(b).expect("checked total above"));
    for (i, p) in sorted.iter_mut().enumerate() {
        p.level = i as u32 + 1;
    }
    Ok(sorted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ra(n: usize, m: usize) -> PolicySpec {
        PolicySpec::single(Policy::RandAugment { n, m })
    }

    #[test]
    fn validation_rejects_out_of_range() {
        assert!(Policy::Blur { k: 4 }.validate().is_err());
        assert!(Policy::Blur { k: 0 }.validate().is_err());
        assert!(Policy::Gray { alpha: 1.5 }.validate().is_err());
        assert!(Policy::GridShuffle { g: 0 }.validate().is_err());
        assert!(Policy::Mpn { s: 0.0 }.validate().is_err());
        assert!(Policy::Mpn { s: f64::NAN }.validate().is_err());
        assert!(Policy::Blur { k: 5 }.validate().is_ok());
    }

    #[test]
    fn same_family_orders_by_hyperparameter() {
        assert_eq!(ra(2, 9).deviation_cmp(&ra(1, 5)), Some(Ordering::Greater));
        assert_eq!(ra(1, 9).deviation_cmp(&ra(2, 5)), None);
        let g = |g| PolicySpec::single(Policy::GridShuffle { g });
        assert_eq!(g(2).deviation_cmp(&g(7)), Some(Ordering::Less));
    }

    #[test]
    fn superset_is_heavier() {
        let flip = PolicySpec::single(Policy::Flip);
        let flip_gray = PolicySpec::chain(vec![Policy::Flip, Policy::Gray { alpha: 1.0 }]);
        assert_eq!(flip_gray.deviation_cmp(&flip), Some(Ordering::Greater));
        assert_eq!(PolicySpec::identity().deviation_cmp(&flip), Some(Ordering::Less));
    }

    #[test]
    fn serde_accepts_single_and_chain() {
        #[derive(Deserialize)]
        struct W {
            p: Vec<PolicySpec>,
        }
        let w: W = toml::from_str(
            r#"p = [{ kind = "rand_augment", n = 2, m = 9 }, [{ kind = "flip" }, { kind = "gray", alpha = 1.0 }]]"#,
        )
        .unwrap();
        assert_eq!(w.p[0], ra(2, 9));
        assert_eq!(w.p[1].components.len(), 2);
        assert!(toml::from_str::<W>(r#"p = [{ kind = "cutout" }]"#).is_err());
    }
}
