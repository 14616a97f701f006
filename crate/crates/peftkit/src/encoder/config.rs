use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Language-modeling objective of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Mlm,
    Clm,
}

/// Transformer-encoder geometry and behaviour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub objective: Objective,
}

fn default_type_vocab() -> usize {
    2
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.hidden == 0
            || self.layers == 0
            || self.heads == 0
            || self.ff_dim == 0
            || self.max_positions == 0
            || self.type_vocab == 0
        {
            return Err(Error::Config("all encoder extents must be >= 1".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Total backbone parameter count, in closed form:
    ///
    /// ```text
    /// embeddings:  V·H + P·H + tv·H + 2H
    /// per layer:   4(H² + H) + 2H  +  (H·ff + ff) + (ff·H + H) + 2H
    /// mlm head:    H² + H + 2H + V     (output projection tied to embeddings)
    /// ```
    pub fn param_count(&self) -> u64 {
        let v = self.vocab_size as u64;
        let h = self.hidden as u64;
        let p = self.max_positions as u64;
        let tv = self.type_vocab as u64;
        let ff = self.ff_dim as u64;
        let l = self.layers as u64;
        let embeddings = v * h + p * h + tv * h + 2 * h;
        let per_layer = 4 * (h * h + h) + 2 * h + (h * ff + ff) + (ff * h + h) + 2 * h;
        let head = h * h + h + 2 * h + v;
        embeddings + l * per_layer + head
    }

    /// Geometry of bert-base-multilingual-cased, the reference point for the
    /// parameter-accounting checks.
    pub fn mbert_base() -> Self {
        EncoderConfig {
            vocab_size: 119_547,
            hidden: 768,
            layers: 12,
            heads: 12,
            ff_dim: 3072,
            max_positions: 512,
            type_vocab: 2,
            dropout: 0.1,
            objective: Objective::Mlm,
        }
    }
}
