use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};

fn default_d_model() -> usize {
    256
}
fn default_n_heads() -> usize {
    8
}
fn default_n_blocks() -> usize {
    2
}
fn default_max_seq_len() -> usize {
    128
}
fn default_label_vocab() -> usize {
    2
}
fn default_bytes_per_element() -> u32 {
    4
}

/// Structural hyperparameters of the recommender.
///
/// `bytes_per_element` is the element width used for cache byte accounting
/// (4 models fp32 cache entries); it is an accounting convention, not the
/// in-memory representation of this implementation's buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_n_blocks")]
    pub n_blocks: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    /// Item vocabulary size; filled from the dataset when omitted.
    #[serde(default)]
    pub n_items: usize,
    #[serde(default = "default_label_vocab")]
    pub label_vocab: usize,
    #[serde(default = "default_bytes_per_element")]
    pub bytes_per_element: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: default_d_model(),
            n_heads: default_n_heads(),
            n_blocks: default_n_blocks(),
            max_seq_len: default_max_seq_len(),
            n_items: 0,
            label_vocab: default_label_vocab(),
            bytes_per_element: default_bytes_per_element(),
        }
    }
}

impl ModelConfig {
    /// Per-head width; `d_model` must divide evenly across heads.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config(String::from("d_model and n_heads must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not a multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(1..=32).contains(&self.n_blocks) {
            return Err(Error::Config(format!("n_blocks {} outside [1, 32]", self.n_blocks)));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config(String::from("max_seq_len must be positive")));
        }
        if self.n_items == 0 {
            return Err(Error::Config(String::from("n_items must be positive")));
        }
        if self.label_vocab != 2 {
            return Err(Error::Config(format!(
                "label_vocab {} unsupported; binary feedback requires 2",
                self.label_vocab
            )));
        }
        if self.bytes_per_element == 0 {
            return Err(Error::Config(String::from("bytes_per_element must be positive")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig { n_items: 100, ..ModelConfig::default() }
    }

    #[test]
    fn default_shape_is_valid() {
        let config = base();
        config.validate().unwrap();
        assert_eq!(config.d_model, 256);
        assert_eq!(config.n_heads, 8);
        assert_eq!(config.head_dim(), 32);
        assert_eq!(config.bytes_per_element, 4);
    }

    #[test]
    fn head_split_must_be_even() {
        let config = ModelConfig { d_model: 250, ..base() };
        assert!(config.validate().is_err());
    }

    #[test]
    fn block_count_bounds() {
        assert!(ModelConfig { n_blocks: 0, ..base() }.validate().is_err());
        assert!(ModelConfig { n_blocks: 33, ..base() }.validate().is_err());
        assert!(ModelConfig { n_blocks: 32, ..base() }.validate().is_ok());
    }

    #[test]
    fn items_required() {
        assert!(ModelConfig { n_items: 0, ..base() }.validate().is_err());
    }
}
