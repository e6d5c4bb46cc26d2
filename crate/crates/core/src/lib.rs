//! Diffusion formulation for dense prediction, reproduced at desk scale.
//!
//! The crate covers the whole loop: procedural scenes with exact depth and
//! normals, a small conditional U-Net trained through a built-in reverse-mode
//! autodiff engine, the three denoiser parameterizations with DDIM sampling,
//! the single-step formulation, the task-switched reconstruction regularizer,
//! and the evaluation and frequency analyses used to compare them.

pub mod autodiff;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod scenes;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
