//! Augmentation pathways: networks that train on a graded family of
//! augmentation policies with pathway-nested convolutions, plus the tooling to
//! train, evaluate and account for them.

pub mod apconv;
pub mod augment;
pub mod error;
pub mod harness;
pub mod heap;
pub mod nn;
pub mod objective;
pub mod surgery;
pub mod tape;

pub use apconv::{ApConv, ApConvSpec};
pub use error::{Error, Result};
pub use heap::{HeapNetwork, HeapStageSpec};
pub use surgery::{BackboneSpec, NetworkPlan, PathwayNetwork};
