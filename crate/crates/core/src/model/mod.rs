pub mod attention;
pub mod encoder;
pub mod params;
pub mod velocity;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{cross_attention, AttentionRecord};
pub use encoder::{lora_forward, InstructionEmbedding, LoRAAdapter};
pub use params::{read_params, write_params, Param, ParamId, ParamStore};
pub use velocity::VelocityModel;

/// Architecture hyperparameters. Stored in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frames: usize,
    pub bins: usize,
    pub vocab: usize,
    pub max_tokens: usize,
    /// Channels at full resolution.
    pub c0: usize,
    /// Channels at half resolution.
    pub c1: usize,
    /// Bottleneck width and attention width.
    pub d_model: usize,
    pub d_text: usize,
    pub heads: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub time_features: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            bins: 16,
            vocab: 14,
            max_tokens: 8,
            c0: 8,
            c1: 16,
            d_model: 32,
            d_text: 32,
            heads: 2,
            lora_rank: 4,
            lora_alpha: 8.0,
            time_features: 16,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// 8x4 latent, width 8: small enough for finite-difference checks.
    pub fn miniature() -> Self {
        Self {
            frames: 8,
            bins: 4,
            c0: 4,
            c1: 4,
            d_model: 8,
            d_text: 8,
            heads: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            time_features: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.frames.is_multiple_of(4)
            || !self.bins.is_multiple_of(4)
            || self.frames == 0
            || self.bins == 0
        {
            return bad(format!(
                "latent {}x{} must be a positive multiple of 4 on both axes",
                self.frames, self.bins
            ));
        }
        if self.heads == 0
            || !self.d_model.is_multiple_of(self.heads)
            || !self.d_text.is_multiple_of(self.heads)
        {
            return bad(format!(
                "{} heads must divide d_model {} and d_text {}",
                self.heads, self.d_model, self.d_text
            ));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_text {
            return bad(format!(
                "lora rank {} outside 1..={}",
                self.lora_rank, self.d_text
            ));
        }
        if [
            self.c0,
            self.c1,
            self.vocab,
            self.max_tokens,
            self.time_features,
        ]
        .contains(&0)
            || !self.time_features.is_multiple_of(2)
        {
            return bad(
                "channel counts, vocabulary, and token limit must be positive; time features even"
                    .into(),
            );
        }
        Ok(())
    }
}
