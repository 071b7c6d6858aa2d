//! The per-region attention-pooled regressor and its gradients.
//!
//! Every region has its own encoder, embedding MLP, attention scorer and
//! regression head. The encoder is a small staged convnet whose stages sit
//! at 1/4, 1/8, 1/16 and 1/32 of the input resolution with widths K, 2K,
//! 4K and 8K; its final spatial map is kept so activation maps can be
//! computed from it.

pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod layers;
pub mod model;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::path::PathBuf;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use encoder::{Encoder, ImageFeature};
pub use model::{
    absolute_forward, attention_pool, gradient, init_params, regional_forward, AttentionOutput,
    AttentionParams, Gradients, PsoNetParams, RegionalForward, RegionalModel,
};

/// Floating-point type the network can run in (`f32` for training, `f64`
/// for gradient checks).
pub trait Scalar:
    Float
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: Float
        + NumAssign
        + LinalgScalar
        + ScalarOperand
        + FromPrimitive
        + Sum
        + Default
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

pub const DEFAULT_EMBED_DIM: usize = 768;
pub const DEFAULT_ATTENTION_HIDDEN: usize = 128;
/// Total downsampling of the encoder.
pub const ENCODER_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EncoderVariant {
    /// Randomly initialized desk-scale convnet.
    TinyConv,
    /// Same topology, encoder weights loaded from a checkpoint file.
    PluggablePretrained { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Width K of the first stage; stages are K, 2K, 4K, 8K.
    pub base_width: usize,
    /// `[height, width]` images are assembled to.
    pub input_size: [usize; 2],
}

impl EncoderConfig {
    pub fn stage_dims(&self) -> [usize; 4] {
        let k = self.base_width;
        [k, 2 * k, 4 * k, 8 * k]
    }

    pub fn feature_dim(&self) -> usize {
        8 * self.base_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::validation("base_width", "must be positive"));
        }
        check_input_size(self.input_size[0], self.input_size[1])
    }
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(ENCODER_STRIDE) || !w.is_multiple_of(ENCODER_STRIDE) {
        return Err(Error::validation(
            "input_size",
            format!("{h}x{w} is not a positive multiple of {ENCODER_STRIDE}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub embed_dim: usize,
    pub attention_hidden: usize,
    /// Tie the four regional encoders together (off by default).
    #[serde(default)]
    pub shared_encoder: bool,
}

impl ModelConfig {
    pub fn tiny(base_width: usize, input: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                variant: EncoderVariant::TinyConv,
                base_width,
                input_size: [input, input],
            },
            embed_dim: DEFAULT_EMBED_DIM,
            attention_hidden: DEFAULT_ATTENTION_HIDDEN,
            shared_encoder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::validation("embed_dim", "must be positive"));
        }
        if self.attention_hidden == 0 {
            return Err(Error::validation("attention_hidden", "must be positive"));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::tiny(16, 64)
    }
}
