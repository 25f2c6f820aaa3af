use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Vision,
    Text,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Vision, Side::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Vision => "vision",
            Side::Text => "text",
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shape of both encoder stacks. Vision and text share every dimension
/// except their input front-ends.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Transformer blocks per encoder (N).
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_proj: usize,
    pub image_grid: usize,
    pub patch: usize,
    pub channels: usize,
    pub vocab: usize,
    pub max_text_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            d_proj: 32,
            image_grid: 16,
            patch: 4,
            channels: 3,
            vocab: 64,
            max_text_len: 8,
        }
    }
}

impl EncoderConfig {
    /// Two-layer, narrow configuration for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            d_proj: 4,
            image_grid: 4,
            patch: 2,
            channels: 3,
            vocab: 48,
            max_text_len: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers < 2 {
            return bad(format!("layers must be >= 2, got {}", self.layers));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.patch == 0 || !self.image_grid.is_multiple_of(self.patch) {
            return bad(format!(
                "image_grid {} not divisible by patch {}",
                self.image_grid, self.patch
            ));
        }
        if [self.d_ff, self.d_proj, self.channels, self.max_text_len].contains(&0) {
            return bad("zero-sized dimension".into());
        }
        if self.vocab < super::CharTokenizer::vocab_size() {
            return bad(format!(
                "vocab {} smaller than tokenizer alphabet {}",
                self.vocab,
                super::CharTokenizer::vocab_size()
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_patches(&self) -> usize {
        let s = self.image_grid / self.patch;
        s * s
    }

    /// Vision sequence length: patches plus the aggregation token.
    pub fn vision_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}
