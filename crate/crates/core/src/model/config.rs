use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extra values appended to each region's statistics:
/// `(x_min/W, y_min/H, x_max/W, y_max/H, w/W, h/H)`.
pub const BOX_DIMS: usize = 6;

/// Statistic count per region of the full-size detector.
pub const FULL_VISUAL_DIMS: usize = 2048;

/// Special token ids shared by every vocabulary.
pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;

/// Segment ids: text span vs. image span.
pub const TEXT_SEGMENT: usize = 0;
pub const IMAGE_SEGMENT: usize = 1;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token embedding width.
    pub embed_dim: usize,
    /// Encoder hidden width; must equal `embed_dim`.
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Visual statistics per region, before the box values.
    pub visual_dims: usize,
    pub answer_count: usize,
    pub vocab_size: usize,
    pub max_question: usize,
    pub max_tags: usize,
    pub max_regions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            visual_dims: 32,
            answer_count: 14,
            vocab_size: 40,
            max_question: 8,
            max_tags: 5,
            max_regions: 5,
        }
    }
}

impl ModelConfig {
    /// Small configuration for gradient checks.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 8,
            hidden_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            visual_dims: 4,
            answer_count: 5,
            vocab_size: 12,
            max_question: 4,
            max_tags: 3,
            max_regions: 3,
        }
    }

    /// Full-width region features (2048 statistics + 6 box values).
    pub fn with_full_visual_dims(mut self) -> Self {
        self.visual_dims = FULL_VISUAL_DIMS;
        self
    }

    pub fn region_input_dims(&self) -> usize {
        self.visual_dims + BOX_DIMS
    }

    /// Rows of the learned position table: the longest possible sequence.
    pub fn max_sequence(&self) -> usize {
        3 + self.max_question + self.max_tags + self.max_regions
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim != self.hidden_dim {
            return Err(Error::Config(format!(
                "embed_dim ({}) must equal hidden_dim ({})",
                self.embed_dim, self.hidden_dim
            )));
        }
        let extents = [
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("visual_dims", self.visual_dims),
            ("answer_count", self.answer_count),
            ("max_question", self.max_question),
            ("max_tags", self.max_tags),
            ("max_regions", self.max_regions),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size <= SEP_ID {
            return Err(Error::Config("vocab_size must cover the special tokens".into()));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }
}
