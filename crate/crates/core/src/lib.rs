pub mod conditioning;
pub mod config;
pub mod data;
pub mod decoder;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod piga;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
