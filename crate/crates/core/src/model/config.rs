//! Encoder hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimensions of the image encoder and the shared modal encoder.
///
/// `vocab_size` may be left at 0 in config files; the run loader fills it in
/// from the vocabulary file before the model is built.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Width of every token state (`D`).
    pub model_dim: usize,
    /// Transformer blocks in the image encoder.
    pub vit_layers: usize,
    /// Layers in the shared modal encoder (each holds self-attention,
    /// cross-attention and a feed-forward sublayer).
    pub encoder_layers: usize,
    /// Attention heads; must divide `model_dim`.
    pub num_heads: usize,
    /// Hidden width of the feed-forward sublayers.
    pub ffn_dim: usize,
    /// Rows in the token embedding table, including reserved tokens.
    pub vocab_size: usize,
    /// Maximum token positions for text, including the leading CLS.
    pub max_text_len: usize,
    /// Input images are square with this many pixels per side.
    pub image_size: usize,
    /// Square patch edge; must divide `image_size`.
    pub patch_size: usize,
    /// Width of the shared embedding space the projection heads map into.
    pub projection_dim: usize,
    /// Dropout probability applied inside blocks during training; 0 disables.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            model_dim: 32,
            vit_layers: 2,
            encoder_layers: 2,
            num_heads: 4,
            ffn_dim: 64,
            vocab_size: 0,
            max_text_len: 12,
            image_size: 16,
            patch_size: 4,
            projection_dim: 16,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.model_dim", self.model_dim),
            ("encoder.vit_layers", self.vit_layers),
            ("encoder.encoder_layers", self.encoder_layers),
            ("encoder.num_heads", self.num_heads),
            ("encoder.ffn_dim", self.ffn_dim),
            ("encoder.max_text_len", self.max_text_len),
            ("encoder.image_size", self.image_size),
            ("encoder.patch_size", self.patch_size),
            ("encoder.projection_dim", self.projection_dim),
        ];
        for (path, v) in positive {
            if v == 0 {
                return Err(Error::config(path, "must be positive"));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(
                "encoder.num_heads",
                format!("{} does not divide model_dim {}", self.num_heads, self.model_dim),
            ));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "encoder.patch_size",
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            ));
        }
        if self.projection_dim > self.model_dim {
            return Err(Error::config(
                "encoder.projection_dim",
                format!("{} exceeds model_dim {}", self.projection_dim, self.model_dim),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("encoder.dropout", "must be in [0, 1)"));
        }
        if self.max_text_len < 2 {
            return Err(Error::config("encoder.max_text_len", "needs room for CLS plus one token"));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count per image.
    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Image-sequence length: patches plus the CLS slot.
    pub fn image_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Flattened patch vector length (three channels).
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Per-head width.
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}
