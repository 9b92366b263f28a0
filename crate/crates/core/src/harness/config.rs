//! Experiment configuration, read from TOML.
//!
//! ```toml
//! name = "ap-k2"
//! epochs = 50
//! seeds = [0, 1, 2]
//!
//! [data]
//! format = "synthetic"        # or "packed", "image_tree"
//! per_class = 100
//!
//! [plan]                      # or [heap]
//! backbone = "tiny"
//! num_classes = 10
//! k = 2
//!
//! [augment]
//! light = [{ kind = "crop", pad = 4 }, { kind = "flip" }]
//! graded = [{ kind = "identity" }, { kind = "rand_augment", n = 2, m = 9 }]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::ModelSpec;
use crate::augment::{grade_policies, PolicySpec};
use crate::error::{Error, Result};
use crate::heap::HeapStageSpec;
use crate::objective::LossConfig;
use crate::surgery::NetworkPlan;

/// Environment variable prefixed to relative dataset paths that do not exist.
pub const DATA_ROOT_ENV: &str = "APNET_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Generated shape-classification images; no files needed.
    Synthetic,
    /// Directory of packed binary batches (label byte + 3×32×32 bytes).
    Packed,
    /// `train/<class>/*` and `val/<class>/*` image files.
    ImageTree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub size: usize,
    /// Seed of the generated dataset itself, independent of the run seed.
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 500,
            val_per_class: 100,
            size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Training images kept per class; absent means all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    /// Side length image-tree files are resized to before cropping.
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
}

fn default_image_size() -> usize {
    32
}

impl DataConfig {
    /// The dataset path, falling back to `$APNET_DATA_ROOT/<path>` when the
    /// path is relative and missing.
    pub fn resolved_path(&self) -> Result<PathBuf> {
        let p = self
            .path
            .as_ref()
            .ok_or_else(|| Error::Config(format!("data format {:?} needs a path", self.format)))?;
        Ok(resolve_data_path(
            p,
            std::env::var_os(DATA_ROOT_ENV).as_deref().map(Path::new),
        ))
    }
}

pub fn resolve_data_path(p: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(root) if p.is_relative() && !p.exists() => root.join(p),
        _ => p.to_path_buf(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Applied to every view before the graded policy.
    #[serde(default)]
    pub light: Vec<PolicySpec>,
    /// One policy per view level; graded by deviation.
    pub graded: Vec<PolicySpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Per-step cosine decay to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    #[serde(flatten)]
    pub loss: LossConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            batch_size: 64,
            schedule: Schedule::Cosine,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    /// Short side after resizing.
    pub resize: usize,
    /// Side of the central crop fed to the network.
    pub crop: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { resize: 32, crop: 32 }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!(
                "crop {} must be positive and at most resize {}",
                self.crop, self.resize
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<NetworkPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heap: Option<HeapStageSpec>,
    pub augment: AugmentConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model(&self) -> Result<ModelSpec> {
        match (&self.plan, &self.heap) {
            (Some(p), None) => Ok(ModelSpec::Plan(p.clone())),
            (None, Some(h)) => Ok(ModelSpec::Heap(h.clone())),
            _ => Err(Error::Config("exactly one of [plan] and [heap] is required".into())),
        }
    }

    /// The graded policies sorted by deviation, levels `1..K`.
    pub fn graded(&self) -> Result<Vec<PolicySpec>> {
        grade_policies(&self.augment.graded)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.data.per_class == Some(0) {
            return Err(Error::Config("per_class must be at least 1".into()));
        }
        if self.optim.batch_size == 0 || !(self.optim.lr > 0.0) {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        self.optim.loss.validate()?;
        self.eval.validate()?;
        for p in &self.augment.light {
            p.validate()?;
        }
        let model = self.model()?;
        let graded = self.graded()?;
        if graded.len() != model.k() {
            return Err(Error::Config(format!(
                "{} graded policies for a model with k={}",
                graded.len(),
                model.k()
            )));
        }
        Ok(())
    }
}
