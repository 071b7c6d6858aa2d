//! Attention-pooled multi-image PASI regression with ranked gradient
//! activation maps and rater-agreement statistics.

pub mod dataio;
pub mod error;
pub mod interpret;
pub mod metrics;
pub mod nnet;
pub mod pasi;
pub mod train;

pub use error::{Error, Result};
