//! Text-conditioned speech inpainting on log-mel spectrograms.

pub mod adversarial;
pub mod data;
pub mod dsp;
pub mod error;
pub mod kv;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
