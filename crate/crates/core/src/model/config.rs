use serde::{Deserialize, Serialize};

use super::ModelError;

/// Dimensions of the reference model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub ffn_dim: usize,
    pub num_tasks: usize,
    pub max_history_len: usize,
    pub max_candidates: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("head_dim", self.head_dim),
            ("num_blocks", self.num_blocks),
            ("ffn_dim", self.ffn_dim),
            ("num_tasks", self.num_tasks),
            ("max_history_len", self.max_history_len),
            ("max_candidates", self.max_candidates),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.head_dim) {
            return Err(ModelError::InvalidConfig(format!(
                "head_dim {} does not divide hidden_dim {}",
                self.head_dim, self.hidden_dim
            )));
        }
        if !self.max_history_len.is_multiple_of(self.num_blocks) {
            return Err(ModelError::InvalidConfig(format!(
                "max_history_len {} is not a multiple of num_blocks {}",
                self.max_history_len, self.num_blocks
            )));
        }
        Ok(())
    }

    pub fn num_heads(&self) -> usize {
        self.hidden_dim / self.head_dim
    }

    /// Longest sub-sequence a block ever sees.
    pub fn block_len(&self) -> usize {
        self.max_history_len / self.num_blocks
    }
}

#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        head_dim: 4,
        num_blocks: 2,
        layers_per_block: 2,
        ffn_dim: 12,
        num_tasks: 3,
        max_history_len: 32,
        max_candidates: 16,
        seed: 7,
    }
}
