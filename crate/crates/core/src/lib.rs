pub mod autograd;
pub mod checkpoint;
pub mod conditioning;
pub mod datagen;
pub mod degradation;
pub mod denoiser;
pub mod edm;
pub mod error;
pub mod image;
pub mod metrics;
pub mod resample;
pub mod rng;
pub mod tensor;
pub mod trainloop;

pub use error::{Error, Result};
