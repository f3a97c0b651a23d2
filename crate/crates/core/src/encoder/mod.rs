//! Segment-level encoders for line charts and tables.
//!
//! Both sides cut their input into segments, embed each segment, add learned
//! positional embeddings and run pre-norm transformer blocks over the
//! segment sequence of every line (column) independently.

mod chart;
mod dataset;

pub use chart::{ChartEncoder, EncodedChart};
pub use dataset::{frame_normalize, segment_column, DatasetEncoder, EncodedDataset, Expert, Segment, FRAME_CLAMP};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture hyperparameters shared by both encoders and the matcher.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Embedding size K.
    pub embed_dim: usize,
    /// Transformer depth J.
    pub depth: usize,
    pub heads: usize,
    /// Pixel width P1 of a line segment.
    pub line_segment_width: usize,
    /// Value count P2 of a column segment.
    pub column_segment_len: usize,
    /// HMRL depth: each column segment splits into `2^hmrl_depth` leaves.
    pub hmrl_depth: usize,
    pub height: usize,
    pub width: usize,
    /// Rows of the column positional table; bounds N2.
    pub max_column_segments: usize,
    /// Transformation, HMRL and MoE layers in the dataset encoder.
    pub da_layers: bool,
    /// Number of transformation experts (identity first), 1..=5.
    pub experts: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 32,
            depth: 2,
            heads: 4,
            line_segment_width: 60,
            column_segment_len: 64,
            hmrl_depth: 2,
            height: 64,
            width: 240,
            max_column_segments: 16,
            da_layers: true,
            experts: 5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.line_segment_width == 0 || !self.width.is_multiple_of(self.line_segment_width) {
            return fail(format!(
                "width {} must be divisible by line_segment_width {}",
                self.width, self.line_segment_width
            ));
        }
        if self.height == 0 {
            return fail("height must be positive".into());
        }
        let leaves = 1usize
            .checked_shl(self.hmrl_depth as u32)
            .ok_or_else(|| Error::Config("hmrl_depth too large".into()))?;
        if self.column_segment_len == 0 || !self.column_segment_len.is_multiple_of(leaves) {
            return fail(format!(
                "column_segment_len {} must be divisible by 2^hmrl_depth = {leaves}",
                self.column_segment_len
            ));
        }
        if !(1..=5).contains(&self.experts) {
            return fail(format!("experts must be within 1..=5, got {}", self.experts));
        }
        if self.max_column_segments == 0 {
            return fail("max_column_segments must be positive".into());
        }
        Ok(())
    }

    /// N1 = W / P1.
    pub fn line_segments(&self) -> usize {
        self.width / self.line_segment_width
    }

    /// N2 = ceil(N_R / P2).
    pub fn column_segments(&self, n_rows: usize) -> usize {
        n_rows.div_ceil(self.column_segment_len)
    }

    pub fn leaves(&self) -> usize {
        1 << self.hmrl_depth
    }

    /// Sub-segment length P2 / 2^beta.
    pub fn leaf_len(&self) -> usize {
        self.column_segment_len / self.leaves()
    }
}

/// `M x N1 x K` chart representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartEmbedding<T>(pub Tensor<T>);

/// `N_C x N2 x K` table representation.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEmbedding<T>(pub Tensor<T>);

impl<T: Scalar> ChartEmbedding<T> {
    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }
}

impl<T: Scalar> DatasetEmbedding<T> {
    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }
}
