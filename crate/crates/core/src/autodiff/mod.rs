//! Reverse-mode differentiation, parameters, Adam and checkpoints.

mod adam;
pub mod checkpoint;
mod params;
mod tape;

pub use adam::{adam_step, AdamState, DEFAULT_LR};
pub use checkpoint::Checkpoint;
pub use params::ParamStore;
pub use tape::{Activation, Broadcast, Gradients, Tape, Var};
