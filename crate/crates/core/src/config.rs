//! Model architecture settings.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Architecture of both towers. Zero for `expert_hidden` / `deep_hidden`
/// selects the default widths (4d and 2d).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub cross_layers: usize,
    pub deep_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            experts: 4,
            top_k: 2,
            expert_hidden: 0,
            cross_layers: 2,
            deep_hidden: 0,
        }
    }
}

impl ModelConfig {
    /// Large configuration: 8 layers, width 512, 8 heads, 4 experts, top-2.
    pub fn large() -> Self {
        ModelConfig {
            d_model: 512,
            layers: 8,
            heads: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model;
        if d == 0 || !d.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "d_model must be a positive multiple of 4, got {d}"
            )));
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {d} is not divisible by heads {}",
                self.heads
            )));
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!(
                "top_k must lie in 1..={}, got {}",
                self.experts, self.top_k
            )));
        }
        Ok(())
    }

    pub fn expert_hidden(&self) -> usize {
        if self.expert_hidden == 0 {
            4 * self.d_model
        } else {
            self.expert_hidden
        }
    }

    pub fn deep_hidden(&self) -> usize {
        if self.deep_hidden == 0 {
            2 * self.d_model
        } else {
            self.deep_hidden
        }
    }

    /// Stable identity of the architecture, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let text = format!(
            "d_model={};layers={};heads={};experts={};top_k={};expert_hidden={};cross_layers={};deep_hidden={}",
            self.d_model,
            self.layers,
            self.heads,
            self.experts,
            self.top_k,
            self.expert_hidden(),
            self.cross_layers,
            self.deep_hidden()
        );
        let out = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
    }
}
