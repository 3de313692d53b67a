use serde::{Deserialize, Serialize};

use crate::error::{ElsaError, Result};

/// Shape of the toy transformer and its three-way split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub lora_rank: usize,
    /// Block counts `[p, q, o]` for the client head, edge middle and client tail.
    pub split: [usize; 3],
    pub n_classes: usize,
    /// Width of the block MLP; `0` means `2 * hidden_dim`.
    pub mlp_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            seq_len: 8,
            hidden_dim: 32,
            n_blocks: 3,
            n_heads: 2,
            lora_rank: 4,
            split: [1, 1, 1],
            n_classes: 4,
            mlp_dim: 0,
        }
    }
}

/// One of the three model segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Part {
    Client1,
    Edge,
    Client3,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [p, q, o] = self.split;
        if p == 0 || q == 0 || o == 0 {
            return Err(ElsaError::Config(format!(
                "model.split = [{p}, {q}, {o}]: every part needs at least one block"
            )));
        }
        if p + q + o != self.n_blocks {
            return Err(ElsaError::Config(format!(
                "model.split sums to {} but model.n_blocks = {}",
                p + q + o,
                self.n_blocks
            )));
        }
        if self.lora_rank == 0 || self.lora_rank >= self.hidden_dim {
            return Err(ElsaError::Config(format!(
                "model.lora_rank = {} must be in [1, model.hidden_dim = {})",
                self.lora_rank, self.hidden_dim
            )));
        }
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(ElsaError::Config(format!(
                "model.hidden_dim = {} is not divisible by model.n_heads = {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.vocab_size < 2 || self.seq_len == 0 || self.n_classes < 2 {
            return Err(ElsaError::Config(
                "model.vocab_size >= 2, model.seq_len >= 1 and model.n_classes >= 2 are required"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn mlp_width(&self) -> usize {
        if self.mlp_dim == 0 {
            2 * self.hidden_dim
        } else {
            self.mlp_dim
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    /// Zero-based block indices owned by a part.
    pub fn blocks_of(&self, part: Part) -> std::ops::Range<usize> {
        let [p, q, _] = self.split;
        match part {
            Part::Client1 => 0..p,
            Part::Edge => p..p + q,
            Part::Client3 => p + q..self.n_blocks,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        let cfg = ModelConfig {
            n_blocks: 6,
            split: [3, 2, 1],
            ..ModelConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.blocks_of(Part::Client1), 0..3);
        assert_eq!(cfg.blocks_of(Part::Edge), 3..5);
        assert_eq!(cfg.blocks_of(Part::Client3), 5..6);
    }

    #[test]
    fn rejects_bad_split_and_names_keys() {
        let cfg = ModelConfig {
            split: [1, 1, 2],
            ..ModelConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("model.split") && err.contains("model.n_blocks"));

        let zero_q = ModelConfig {
            split: [2, 0, 1],
            ..ModelConfig::default()
        };
        assert!(zero_q.validate().is_err());
    }

    #[test]
    fn rejects_rank_and_heads() {
        let cfg = ModelConfig {
            lora_rank: 32,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
