use serde::{Deserialize, Serialize};

use crate::block::BlockShape;
use crate::error::{LtdError, Result};

/// Which token sequences feed the classifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    /// Raw window features and their adjacent-layer differences.
    #[default]
    Both,
    /// Raw window features only.
    Raw,
    /// Adjacent-layer differences only.
    Ltd,
}

impl Branches {
    pub fn has_raw(self) -> bool {
        matches!(self, Branches::Both | Branches::Raw)
    }

    pub fn has_ltd(self) -> bool {
        matches!(self, Branches::Both | Branches::Ltd)
    }

    pub fn count(self) -> usize {
        self.has_raw() as usize + self.has_ltd() as usize
    }
}

/// How often fresh Gumbel noise is drawn during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScope {
    #[default]
    PerImage,
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// First candidate layer (0-indexed, inclusive).
    pub layer_lo: usize,
    /// Last candidate layer (inclusive).
    pub layer_hi: usize,
    /// Number of consecutive layers selected.
    pub window: usize,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    pub shared_block: bool,
    /// Transformer blocks stacked per branch.
    pub trainable_blocks: usize,
    pub head_hidden: usize,
    /// Token width; must equal the backbone width.
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pos_enc: bool,
    pub branches: Branches,
    #[serde(default)]
    pub noise: NoiseScope,
}

impl HeadConfig {
    /// Layers 11–19 with a 5-layer window for 24-layer backbones. Shallower
    /// backbones get layers `depth/4 ..= depth−2` with a 3-layer window.
    pub fn default_for(depth: usize, width: usize) -> Self {
        let (lo, hi, n) = if depth >= 20 {
            (11, 19, 5)
        } else {
            (depth / 4, depth.saturating_sub(2), 3)
        };
        HeadConfig {
            layer_lo: lo,
            layer_hi: hi,
            window: n,
            tau: 1.0,
            shared_block: true,
            trainable_blocks: 1,
            head_hidden: width,
            width,
            heads: 8,
            mlp_ratio: 4,
            pos_enc: true,
            branches: Branches::Both,
            noise: NoiseScope::PerImage,
        }
    }

    /// Number of candidate window starts, `C = (hi − lo + 1) − n + 1`.
    pub fn candidates(&self) -> usize {
        (self.layer_hi + 2).saturating_sub(self.layer_lo + self.window)
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        let err = |m: String| Err(LtdError::Config(m));
        if self.layer_lo > self.layer_hi || self.layer_hi >= depth {
            return err(format!(
                "layer range {}..={} invalid for {depth} layers",
                self.layer_lo, self.layer_hi
            ));
        }
        if self.window < 2 {
            return err(format!("window {} < 2", self.window));
        }
        if self.candidates() < 1 {
            return err(format!(
                "window {} does not fit in layers {}..={}",
                self.window, self.layer_lo, self.layer_hi
            ));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return err(format!("tau {} must be positive", self.tau));
        }
        if self.trainable_blocks == 0 || self.head_hidden == 0 || self.mlp_ratio == 0 {
            return err("trainable_blocks, head_hidden and mlp_ratio must be positive".into());
        }
        self.block_shape().validate()
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            width: self.width,
            heads: self.heads,
            mlp_hidden: self.mlp_ratio * self.width,
        }
    }

    /// Block stacks held: one when shared or single-branch, else one per branch.
    pub fn stacks(&self) -> usize {
        if self.shared_block || self.branches.count() == 1 {
            1
        } else {
            2
        }
    }

    pub fn classifier_in(&self) -> usize {
        self.branches.count() * self.width
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.width;
        let n = self.window;
        let mut count = self.candidates();
        if self.branches.has_raw() {
            count += d + if self.pos_enc { (n + 1) * d } else { 0 };
        }
        if self.branches.has_ltd() {
            count += d + if self.pos_enc { n * d } else { 0 };
        }
        count += self.stacks() * self.trainable_blocks * self.block_shape().param_count();
        count + self.classifier_in() * self.head_hidden + self.head_hidden + self.head_hidden + 1
    }
}
