//! Desk-scale temporal action localization and natural-language grounding.
//!
//! The toolkit trains a one-stage multiscale detector over precomputed video
//! features. Learnable class-aware Gaussian sensitivity weights recalibrate
//! the classification and localization losses per frame, and the inference
//! side covers dense decoding, SoftNMS, model ensembling and the standard
//! detection/retrieval metrics.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod geom;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod postprocess;
pub mod pyramid;
pub mod sensitivity;
pub mod train;

pub use error::{Error, Result};
