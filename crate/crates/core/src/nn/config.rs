use alloc::format;

use crate::error::{Error, Result};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Tokens per cloud (`G`).
    pub group_count: usize,
    /// Points per token (`k`).
    pub group_size: usize,
    /// Hidden width of the point-wise token embedder.
    pub embed_hidden: usize,
    /// Hidden width of the classifier head.
    pub head_hidden: usize,
    /// Dropout probability in the classifier head.
    pub dropout: f64,
    /// Clouds larger than this are randomly subsampled before tokenization.
    pub input_points: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            embed_dim: 64,
            encoder_depth: 3,
            decoder_depth: 1,
            num_heads: 4,
            mlp_ratio: 2,
            num_classes: 8,
            group_count: 32,
            group_size: 32,
            embed_hidden: 32,
            head_hidden: 64,
            dropout: 0.1,
            input_points: 256,
            init_seed: 0,
        }
    }

    /// Depths of the full-size backbone (12 encoder blocks, 4 decoder blocks).
    pub fn full_scale() -> Self {
        Self { encoder_depth: 12, decoder_depth: 4, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.encoder_depth > self.decoder_depth && self.decoder_depth > 0) {
            return Err(Error::InvalidConfig(format!(
                "need encoder_depth > decoder_depth > 0, got {} and {}",
                self.encoder_depth, self.decoder_depth
            )));
        }
        self.validate_shapes()
    }

    /// Checks that hold for every buildable network, including the reduced
    /// configurations used in tests.
    pub fn validate_shapes(&self) -> Result<()> {
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim == 0 || self.embed_hidden == 0 || self.head_hidden == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.group_count < 2 || self.group_size == 0 {
            return Err(Error::InvalidConfig("need at least two tokens of one point".into()));
        }
        if self.input_points < self.group_count.max(self.group_size) {
            return Err(Error::InvalidConfig("input_points smaller than a token layout".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
