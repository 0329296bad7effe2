pub mod attention;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod contrast;
pub mod datagen;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scenegraph;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Matrix;
