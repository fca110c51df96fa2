pub mod autodiff;
pub mod cli;
pub mod ecgvf;
pub mod erasure;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
pub use tensor::Tensor;
