//! Automated segmentation of the aorta (inner lumen and outer wall with
//! thrombus) in CT volumes, with or without contrast.
//!
//! The crate covers the whole workflow: synthetic CT phantoms with analytic
//! ground truth, divergence-warp and affine augmentation, plain and
//! attention-gated 3D U-Nets with hand-written backpropagation, soft-Dice
//! training, the two-stage ROI cascade and the evaluation metrics.

pub mod augmentation;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod network;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
