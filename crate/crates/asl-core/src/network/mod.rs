//! Differentiable detector: projection, encoder with parallel temporal and
//! channel attention, feature pyramid, dense heads, and the language branch.

pub mod config;
pub mod layers;
pub mod model;

pub use config::{Mode, ModelConfig};
pub use model::{DenseOutput, ForwardOutput, Model, VideoInput};
