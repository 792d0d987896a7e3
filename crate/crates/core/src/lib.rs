//! Differentiable search over diverse convolutional transformations with
//! representation sharing, for the prediction heads of one-stage detectors.

pub mod error;
pub mod nn;
pub mod oracle;
pub mod search_engine;
pub mod search_space;
pub mod supernet;
pub mod task_harness;
pub mod tensor;

pub use error::{Error, Result};
