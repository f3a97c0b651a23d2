//! Dataset discovery from line-chart queries.

// Negated float comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod bench;
pub mod chart;
pub mod config;
pub mod encoder;
pub mod error;
pub mod index;
pub mod matcher;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod relevance;
pub mod scalar;
pub mod tabular;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations used by the command line and benchmarks.
pub type Tensor = tensor::Tensor<f64>;
pub type Model = matcher::Model<f64>;
pub type ChartEmbedding = encoder::ChartEmbedding<f64>;
pub type DatasetEmbedding = encoder::DatasetEmbedding<f64>;
pub type Graph = tensor::Graph<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
