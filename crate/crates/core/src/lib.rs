//! A frozen convolutional backbone feeding a frozen vision
//! transformer adapted with low-rank updates, plus the data pipeline,
//! training loop and evaluation used to classify AD / MCI / CN brain slices.

pub mod autograd;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hybrid;
pub mod kernels;
pub mod lora;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
