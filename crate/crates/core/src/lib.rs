pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod init;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod trainer;
pub mod transplant;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
