use serde::{Deserialize, Serialize};

use crate::corpus::EncodeOptions;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    /// Selected positions become MASK 80%, a random ICD token 10%, unchanged 10%.
    #[default]
    Bert,
    /// Every selected position becomes MASK.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Sequence slots, `3 + H`.
    pub max_len: usize,
    pub vocab_size: usize,
    pub use_positional: bool,
    /// Encode real gender/age tokens; when false they are placeholders.
    pub demographics: bool,
    pub dropout: f64,
    pub mask_prob: f64,
    pub masking: MaskingMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl ModelConfig {
    /// d=256, 4 layers, 4 heads, 25% masking, AdamW at 5e-5, batches of 256
    /// for 30 epochs.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            d: 256,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 1024,
            max_len: 131,
            vocab_size,
            use_positional: true,
            demographics: true,
            dropout: 0.1,
            mask_prob: 0.25,
            masking: MaskingMode::Bert,
            lr: 5e-5,
            weight_decay: 0.01,
            batch_size: 256,
            epochs: 30,
            clip_norm: 1.0,
            init_std: 0.02,
        }
    }

    /// Small configuration that trains in minutes on one CPU core.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d: 64,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 256,
            lr: 3e-3,
            dropout: 0.0,
            batch_size: 32,
            epochs: 10,
            ..Self::full(vocab_size)
        }
    }

    pub fn max_events(&self) -> usize {
        self.max_len - 3
    }

    pub fn encode_options(&self) -> EncodeOptions {
        EncodeOptions {
            max_events: self.max_events(),
            demographics: self.demographics,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return bad(format!("d={} must be a positive multiple of n_heads={}", self.d, self.n_heads));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad(format!("mask_prob={} must lie in (0, 1)", self.mask_prob));
        }
        if self.max_len < 4 {
            return bad("max_len must be at least 4".into());
        }
        if self.vocab_size <= crate::corpus::vocab::N_AUX {
            return bad(format!("vocab_size={} leaves no room beyond auxiliary tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout={} must lie in [0, 1)", self.dropout));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.batch_size == 0 {
            return bad("n_layers, ffn_dim and batch_size must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr and weight_decay must be non-negative, clip_norm positive".into());
        }
        Ok(())
    }
}
