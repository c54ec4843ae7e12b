//! Frozen miniature transformer with trainable prefix prompts.
//!
//! A single [`PrefixPrompt`] is shared across every task. At each prompted
//! layer the prefix keys and values are prepended to the projected keys and
//! values along the sequence axis; queries are left untouched so the output
//! keeps the input sequence length. The feature of a sample is the
//! final-layer class-token embedding after the closing layer norm.
//!
//! Only prompts receive gradients. [`encode_backward`] backpropagates through
//! the frozen layers to every prefix tensor and never materializes gradients
//! for backbone weights.

mod backbone;
mod forward;
mod prompt;

use serde::{Deserialize, Serialize};

pub use backbone::{FrozenBackbone, LayerNorm, LayerWeights};
pub use forward::{encode, encode_backward, encode_cached, ForwardCache};
pub use prompt::{prompt_drift, PrefixPrompt};

use crate::error::{Error, Result};
use crate::kernel::Tensor;

/// Prompt length presets.
pub const ONEPROMPT_LENGTHS: [usize; 5] = [5, 5, 20, 20, 20];
/// The alternative listing `(5, 5, 5, 20, 20)`.
pub const ONEPROMPT_TABLE_LENGTHS: [usize; 5] = [5, 5, 5, 20, 20];
pub const ONEPROMPT_DEEP_LENGTH: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    /// Sequence length including the class token.
    pub token_count: usize,
    pub mlp_dim: usize,
    /// Width of raw inputs fed to the patchifier.
    pub input_dim: usize,
    /// One entry per layer; 0 leaves that layer unprompted.
    pub prompt_lengths: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 5,
            model_dim: 16,
            num_heads: 2,
            token_count: 5,
            mlp_dim: 32,
            input_dim: 8,
            prompt_lengths: ONEPROMPT_LENGTHS.to_vec(),
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn patch_tokens(&self) -> usize {
        self.token_count - 1
    }

    pub fn validate(&self) -> Result<()> {
        let p = |f: &str| format!("encoder.{f}");
        if self.num_layers == 0 {
            return Err(Error::config(p("num_layers"), "must be >= 1"));
        }
        if self.model_dim == 0 || self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                p("num_heads"),
                format!(
                    "model_dim {} must be divisible by num_heads {}",
                    self.model_dim, self.num_heads
                ),
            ));
        }
        if self.token_count < 1 {
            return Err(Error::config(p("token_count"), "must include the class token"));
        }
        if self.mlp_dim == 0 {
            return Err(Error::config(p("mlp_dim"), "must be >= 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::config(p("input_dim"), "must be >= 1"));
        }
        if self.prompt_lengths.len() != self.num_layers {
            return Err(Error::config(
                p("prompt_lengths"),
                format!(
                    "has {} entries, expected one per layer ({})",
                    self.prompt_lengths.len(),
                    self.num_layers
                ),
            ));
        }
        Ok(())
    }
}

/// Where a batch of features came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    Identity,
    Prompted { prompt_checksum: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub features: Tensor,
    pub source: FeatureSource,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Passthrough for inputs that already live in feature space.
pub fn identity_encoder(inputs: &Tensor) -> FeatureBatch {
    FeatureBatch {
        features: inputs.clone(),
        source: FeatureSource::Identity,
    }
}
