pub mod auditor;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod loss;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
