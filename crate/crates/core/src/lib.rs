//! Multi-label CNN text classification with an exact token-level
//! decomposition of the document logits, min/max fine-tuning, and
//! class-conditional exemplar auditing against the training set.

pub mod artifacts;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod exemplar;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod netops;
pub mod pipeline;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
