use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::heap::{HeapNetwork, HeapStageSpec};
use crate::nn::{ForwardCtx, ModelState};
use crate::surgery::{NetworkPlan, PathwayNetwork, TrainOutput};
use crate::tape::{Graph, ParamId, Tensor};

/// Either network family, as written in configs and checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    Plan(NetworkPlan),
    Heap(HeapStageSpec),
}

impl ModelSpec {
    pub fn k(&self) -> usize {
        match self {
            ModelSpec::Plan(p) => p.k,
            ModelSpec::Heap(h) => h.k(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Plan(p) => p.num_classes,
            ModelSpec::Heap(h) => h.num_classes,
        }
    }

    pub fn account(&self, input: (usize, usize)) -> Result<ModelAccount> {
        match self {
            ModelSpec::Plan(p) => {
                let a = p.account(input)?;
                Ok(ModelAccount {
                    params_train: a.params_train(),
                    params_infer: a.params_infer(),
                    macs: Some(a.macs_infer()),
                })
            }
            ModelSpec::Heap(h) => Ok(ModelAccount {
                params_train: h.params_train()?,
                params_infer: h.params_infer()?,
                macs: None,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelAccount {
    pub params_train: u64,
    pub params_infer: u64,
    /// Inference multiply-accumulates, when the family supports counting them.
    pub macs: Option<u64>,
}

#[derive(Debug, Clone)]
pub enum Network {
    Pathway(PathwayNetwork),
    Heap(HeapNetwork),
}

impl Network {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Plan(p) => Network::Pathway(PathwayNetwork::surgerize(p, seed)?),
            ModelSpec::Heap(h) => Network::Heap(HeapNetwork::new(h, seed)?),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Network::Pathway(n) => ModelSpec::Plan(n.plan.clone()),
            Network::Heap(n) => ModelSpec::Heap(n.spec.clone()),
        }
    }

    pub fn k(&self) -> usize {
        match self {
            Network::Pathway(n) => n.k(),
            Network::Heap(n) => n.k(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Network::Pathway(n) => n.num_classes(),
            Network::Heap(n) => n.num_classes(),
        }
    }

    pub fn state(&self) -> &ModelState {
        match self {
            Network::Pathway(n) => &n.state,
            Network::Heap(n) => &n.state,
        }
    }

    pub fn state_mut(&mut self) -> &mut ModelState {
        match self {
            Network::Pathway(n) => &mut n.state,
            Network::Heap(n) => &mut n.state,
        }
    }

    pub fn forward_train(&self, g: &mut Graph, views: &[Tensor], ctx: &mut ForwardCtx) -> Result<TrainOutput> {
        match self {
            Network::Pathway(n) => n.forward_train(g, views, ctx),
            Network::Heap(n) => n.forward_train(g, views, ctx),
        }
    }

    pub fn infer_batch(&self, x: &Tensor) -> Result<Array2<f64>> {
        match self {
            Network::Pathway(n) => n.infer_batch(x),
            Network::Heap(n) => n.infer_batch(x),
        }
    }

    pub fn infer(&self, img: &Image) -> Result<Vec<f64>> {
        match self {
            Network::Pathway(n) => n.infer(img),
            Network::Heap(n) => n.infer(img),
        }
    }

    pub fn head_params(&self, level: usize) -> Result<Vec<ParamId>> {
        if level == 0 || level > self.k() {
            return Err(Error::LevelOutOfRange { level, max: self.k() });
        }
        Ok(match self {
            Network::Pathway(n) => n.head_params(level),
            Network::Heap(n) => n.head_params(level),
        })
    }

    pub fn param_count(&self) -> u64 {
        self.state().params.scalar_count() as u64
    }
}
