//! Light and heavy augmentation policies, their deviation ordering, and
//! multi-view batch construction.

mod image;
mod ops;
mod policy;
pub mod randaugment;
mod views;

pub use image::{stack, Image};
pub use ops::{apply_one, apply_policy, blur, gray, grid_shuffle, hflip, mpn};
pub use policy::{grade_policies, Policy, PolicyKind, PolicySpec, MAX_MAGNITUDE};
pub use views::{make_view_batch, ViewBatch};
