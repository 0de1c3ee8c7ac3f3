//! The sequence encoder: token embeddings with sinusoidal positions, a
//! stack of multi-head self-attention layers with post-norm residuals, and
//! a linear head producing one distribution over the vocabulary per
//! position.
//!
//! Everything is generic over the float type so the same code path runs in
//! f32 for training and f64 for finite-difference verification.

pub mod forward;
pub mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use forward::{
    attention, attention_masked, layer_norm, positional_encoding, softmax_rows, ForwardCache,
    LayerCache, LnCache, Model,
};
pub use params::{ModelParams, TensorMut, TensorRef};

/// Float type usable throughout the numeric core.
pub trait Scalar:
    Float
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Display
    + Debug
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).unwrap()
    }
    fn to_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting a literal into the working float type.
pub(crate) fn s<F: Scalar>(x: f64) -> F {
    F::from_f64(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Total token ids, reserved tokens included.
    pub vocab_size: usize,
    /// Key embedding width; projected up to `d_model` when they differ.
    pub d_embed: usize,
    /// Width of the attention stack and of the contextual outputs.
    pub d_model: usize,
    /// Hidden width of the position-wise feed-forward block.
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Longest token sequence the encoder accepts, aggregate token included.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_embed: 50,
            d_model: 256,
            d_ff: 256,
            n_heads: 4,
            n_layers: 2,
            max_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < crate::vocab::RESERVED + 1 {
            return Err(Error::Config(format!(
                "vocab_size must cover the reserved tokens plus at least one key, got {}",
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("d_embed", self.d_embed),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        // the sinusoid table interleaves sine and cosine columns
        if self.d_embed % 2 != 0 {
            return Err(Error::Config(format!(
                "d_embed must be even, got {}",
                self.d_embed
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!(
                "max_len must be at least 2, got {}",
                self.max_len
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// The input projection exists only when the embedding and stack widths
    /// differ.
    pub fn has_input_proj(&self) -> bool {
        self.d_embed != self.d_model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_shape() {
        let c = ModelConfig {
            vocab_size: 40,
            ..ModelConfig::default()
        };
        c.validate().unwrap();
        assert_eq!(c.d_head(), 64);
        assert!(c.has_input_proj());
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let base = ModelConfig {
            vocab_size: 40,
            ..ModelConfig::default()
        };
        assert!(ModelConfig { vocab_size: 4, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { d_model: 30, n_heads: 4, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { d_embed: 7, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { max_len: 1, ..base.clone() }.validate().is_err());
        // a zero-layer stack is legal: the head reads the projected input
        assert!(ModelConfig { n_layers: 0, ..base }.validate().is_ok());
    }

    #[test]
    fn scalar_round_trip() {
        assert_eq!(<f32 as Scalar>::from_f64(0.5), 0.5f32);
        assert_eq!(0.25f64.to_f64(), 0.25);
    }
}
