use std::path::Path;

use crate::error::Result;
use crate::model::{Checkpoint, Model};

/// A loaded checkpoint together with its content hash, computed once.
#[derive(Debug, Clone)]
pub struct Lab {
    checkpoint: Checkpoint,
    hash: u64,
}

impl Lab {
    pub fn new(checkpoint: Checkpoint) -> Self {
        let hash = checkpoint.hash();
        Self { checkpoint, hash }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(Checkpoint::load(path)?))
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn model(&self) -> &Model {
        &self.checkpoint.model
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn n_layers(&self) -> usize {
        self.checkpoint.model.config.n_layers
    }
}
