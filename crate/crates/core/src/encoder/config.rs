use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the transformer encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl EncoderConfig {
    /// Desk-scale default; `vocab_size` is normally replaced by the size of
    /// the corpus-built vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            heads: 4,
            ffn_dim: 256,
            vocab_size,
            max_seq_len: 128,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config(format!("zero-sized dimension in {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_seq_len < 8 {
            return Err(Error::Config(format!(
                "max_seq_len must be at least 8, got {}",
                self.max_seq_len
            )));
        }
        if self.vocab_size < super::tokenizer::NUM_SPECIAL {
            return Err(Error::Config(
                "vocabulary smaller than the special-token set".into(),
            ));
        }
        Ok(())
    }
}
