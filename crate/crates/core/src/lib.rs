//! Hyper-connected transformer for two-modality image segmentation, built
//! from scratch: dense tensors, a tape-based reverse-mode autodiff engine,
//! the model and its fusion-ablation variants, synthetic phantom data,
//! a training loop and an evaluation/cross-validation harness.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod seeding;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
