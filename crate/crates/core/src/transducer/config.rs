use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// HAT decoder: stateless two-token prediction network plus joint network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Output labels, excluding blank.
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Prediction output width and joint hidden width.
    pub joint_dim: usize,
    #[serde(default = "default_order")]
    pub context_order: usize,
}

fn default_order() -> usize {
    2
}

impl DecoderConfig {
    /// Index of the start-of-sequence symbol in the embedding tables.
    pub fn start_symbol(&self) -> usize {
        self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.joint_dim == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.context_order != 2 {
            return Err(Error::Config(format!("context_order must be 2, got {}", self.context_order)));
        }
        Ok(())
    }
}
