pub mod autodiff;
mod conv3x3;
pub mod error;
pub mod eval;
pub mod imgproc;
pub mod kernels;
pub mod model;
pub mod pgm;
pub mod quant;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
