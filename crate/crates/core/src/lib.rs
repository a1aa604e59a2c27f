//! Cross-modal domain adaptation for 3D semantic segmentation.
//!
//! An image stream and a point-cloud stream each predict per-point classes;
//! extra "mimicry" heads let each stream learn from the other on unlabeled
//! target-domain data.

pub mod eval;
pub mod geometry;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod pseudolabel;
pub mod rng;
pub mod sample;
pub mod scenegen;
pub mod tensor;
pub mod trainer;
