//! Domain-adaptive object detection with a frozen diffusion model as the
//! teacher's feature extractor.

pub mod augmentation;
pub mod autograd;
pub mod backbone;
pub mod boxes;
pub mod datasets;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod self_training;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use boxes::{BBox, BoxSet};
pub use error::{Error, Result};
pub use image::Image;
pub use params::{ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
