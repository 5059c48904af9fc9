use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where extracted candidates are attended to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttendSite {
    /// Candidates form a prefix of the decoder input.
    Decoder,
    /// Candidates are appended to the encoder input.
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_src_len: usize,
    pub max_prefix_len: usize,
    pub max_tgt_len: usize,
    /// Size of the within-candidate relative position table (encoder site).
    pub max_cand_len: usize,
    pub use_type_embeddings: bool,
    pub use_prefix: bool,
    pub attend_site: AttendSite,
    pub max_candidates: usize,
    /// Let prefix positions see each other in both directions.
    pub prefix_bidirectional: bool,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            max_src_len: 64,
            max_prefix_len: 48,
            max_tgt_len: 64,
            max_cand_len: 48,
            use_type_embeddings: true,
            use_prefix: true,
            attend_site: AttendSite::Decoder,
            max_candidates: 1,
            prefix_bidirectional: false,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    /// Transformer-base sizes reported for the full-scale system.
    pub fn transformer_base() -> Self {
        ModelConfig {
            layers: 6,
            hidden_dim: 512,
            heads: 8,
            ffn_dim: 2048,
            ..ModelConfig::default()
        }
    }

    pub fn plain() -> Self {
        ModelConfig {
            use_type_embeddings: false,
            use_prefix: false,
            ..ModelConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Whether candidates feed the model at all.
    pub fn uses_candidates(&self) -> bool {
        self.use_prefix || self.attend_site == AttendSite::Encoder
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.max_src_len == 0 || self.max_prefix_len == 0 || self.max_tgt_len == 0 || self.max_cand_len == 0 {
            return Err(Error::Config("lengths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.max_candidates == 0 {
            return Err(Error::Config("max_candidates must be at least 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size not set".into()));
        }
        if self.use_prefix && self.attend_site == AttendSite::Encoder {
            return Err(Error::Config("use_prefix conflicts with attend_site=encoder".into()));
        }
        Ok(())
    }
}
