use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the mask-predictor transformer. The last vocabulary id is the
/// MASK token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl ModelConfig {
    /// Default experiment scale.
    pub fn toy() -> Self {
        Self {
            vocab_size: 256,
            seq_len: 64,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
        }
    }

    /// Smaller scale used by the test suites and quick examples.
    pub fn desk() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 32,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
        }
    }

    /// One-layer model for gradient and reference-evaluation checks.
    pub fn micro() -> Self {
        Self {
            vocab_size: 16,
            seq_len: 4,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
        }
    }

    /// Looks up `toy`, `desk` or `micro`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "desk" => Ok(Self::desk()),
            "micro" => Ok(Self::micro()),
            _ => Err(Error::Config(format!(
                "unknown model preset {name:?} (toy, desk or micro)"
            ))),
        }
    }

    pub fn mask_id(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.vocab_size,
            self.seq_len,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(
                "vocabulary needs at least one token besides MASK".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}
