use serde::{Deserialize, Serialize};

use super::vocab::VOCAB_SIZE;
use crate::error::{Error, Result};

/// Shape of the denoiser and of the identity encoder that feeds it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Image height and width.
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Prompt length cap L_T, `<bos>` and `S*` included.
    pub prompt_len: usize,
    /// Visual token count N_query.
    pub n_query: usize,
    pub vocab: usize,
    /// Recognizer embedding width D_f.
    pub feature_dim: usize,
    pub encoder_blocks: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 16,
            channels: 3,
            patch: 2,
            width: 64,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            prompt_len: 8,
            n_query: 4,
            vocab: VOCAB_SIZE,
            feature_dim: 32,
            encoder_blocks: 2,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!("image {} not divisible by patch {}", self.image_size, self.patch));
        }
        if !self.width.is_multiple_of(2) {
            return bad("width must be even for the time encoding".into());
        }
        if self.vocab != VOCAB_SIZE {
            return bad(format!("vocabulary is fixed at {VOCAB_SIZE}"));
        }
        if self.channels == 0 || self.blocks == 0 || self.mlp_ratio == 0 {
            return bad("channels, blocks and mlp_ratio must be positive".into());
        }
        if self.n_query == 0 || self.feature_dim == 0 || self.prompt_len < 2 {
            return bad("n_query, feature_dim must be positive and prompt_len ≥ 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Channels of the assembled input `z_t ∥ m ∥ m⊙x₀`.
    pub fn in_channels(&self) -> usize {
        2 * self.channels + 1
    }

    pub fn patch_in_dim(&self) -> usize {
        self.patch * self.patch * self.in_channels()
    }

    pub fn patch_out_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_numel(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}
