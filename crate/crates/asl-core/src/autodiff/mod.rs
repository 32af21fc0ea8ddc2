//! Minimal dense-array computation with reverse-mode differentiation.
//!
//! Built for desk-scale sequence models: 64-bit precision throughout,
//! deterministic sequential reductions, and a dynamic tape rebuilt on every
//! forward pass.

pub mod fdcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use optim::{lr_multiplier, Adam, AdamConfig};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tape::{concat, scaled_dot_attention, Gradients, Tape, Var};
pub use tensor::Tensor;
