use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 5;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "adenocarcinoma",
    "squamous_cell_carcinoma",
    "large_cell_carcinoma",
    "small_cell_lung_cancer",
    "normal",
];

/// Index of the tissue class without a lesion.
pub const NORMAL_CLASS: usize = 4;

/// Convolutional branch: `channels.len()` blocks of 3×3 conv (pad 1) + ReLU
/// + 2×2 max-pool, global average pool, dropout, dense head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl BranchConfig {
    pub fn ct_default() -> Self {
        Self {
            in_channels: 1,
            image_size: 64,
            channels: vec![8, 16, 32],
            kernel: 3,
            pool: 2,
            num_classes: NUM_CLASSES,
            dropout: 0.5,
        }
    }

    pub fn tile_default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            ..Self::ct_default()
        }
    }

    /// Feature dimension D.
    pub fn feature_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    /// Spatial size of the activation of conv block `i` (0-based).
    pub fn activation_size(&self, block: usize) -> usize {
        self.image_size / self.pool.pow(block as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::invalid(format!(
                "class count must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.channels.is_empty() || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::invalid(
                "branch needs at least one conv block with positive channels",
            ));
        }
        if self.kernel.is_multiple_of(2) || self.pool == 0 {
            return Err(Error::invalid("kernel must be odd and pool positive"));
        }
        if self.image_size / self.pool.pow(self.channels.len() as u32) == 0 {
            return Err(Error::invalid(format!(
                "image size {} too small for {} pooling stages",
                self.image_size,
                self.channels.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0,1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub ct: BranchConfig,
    pub tile: BranchConfig,
    pub attention_hidden: usize,
    /// Hidden widths of the clinical MLP; the last is the embedding size.
    pub meta_hidden: Vec<usize>,
    pub meta_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            ct: BranchConfig::ct_default(),
            tile: BranchConfig::tile_default(),
            attention_hidden: 16,
            meta_hidden: vec![64, 32],
            meta_dropout: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn embedding_dim(&self) -> usize {
        self.meta_hidden.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        self.ct.validate()?;
        self.tile.validate()?;
        if self.ct.in_channels != 1 || self.tile.in_channels != 3 {
            return Err(Error::invalid("CT branch takes 1 channel and the tile encoder 3"));
        }
        if self.attention_hidden == 0 || self.meta_hidden.is_empty() || self.meta_hidden.contains(&0) {
            return Err(Error::invalid("attention and metadata widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.meta_dropout) {
            return Err(Error::invalid("metadata dropout must lie in [0,1)"));
        }
        Ok(())
    }
}
