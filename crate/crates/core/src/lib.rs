//! Small-footprint keyword spotting with separable temporal convolutions and
//! temporally pooled attention.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod footprint;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod param;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelSpec, Reduction, Variant};
pub use tensor::Tensor;
