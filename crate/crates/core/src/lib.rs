pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod crossval;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod layers;
pub mod optim;
pub mod seeding;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
