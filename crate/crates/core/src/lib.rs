//! Approximate convolutional sparse coding.
//!
//! A `K`-step unrolled convolutional ISTA encoder followed by a linear
//! convolutional decoder, trained end to end for denoising and inpainting.
//! Classical dense and convolutional ISTA solvers are included as
//! references for the learned network.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pgm;
pub mod solvers;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelDims, ModelParams};
pub use tensor::{FeatureMaps, FilterBank, Image, PaddingMode};
