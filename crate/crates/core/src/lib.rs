//! Multi-layer aggregation heads (parallel and hierarchical) with a
//! linear-chain CRF for aspect extraction and a softmax classifier for
//! aspect sentiment classification, on top of a small BERT-style encoder.

pub mod crf;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
