//! Desk-scale score-distillation simulator.
//!
//! A voxel radiance field is optimized by pulling image-space scores from an
//! analytic Gaussian-mixture "diffusion model" back through a differentiable
//! emission-absorption renderer. The mixture carries a controllable bias
//! towards a canonical (front) view, which reproduces the multi-face failure
//! of score distillation. Two cures are provided: elementwise score clipping
//! with a threshold that grows over the run, and removal of prompt words that
//! contradict the active view prompt (pointwise mutual information filter).

pub mod distill;
pub mod error;
pub mod field;
pub mod image;
pub mod metrics;
pub mod prompt;
pub mod renderer;
pub mod rng;
pub mod scene;
pub mod scoremodel;

pub use error::{Error, Result};
