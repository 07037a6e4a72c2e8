//! Adversarial feature alignment: supervised-contrastive adversarial
//! training together with feature-space separation and clustering analysis.
pub mod align;
pub mod attacks;
pub mod data;
pub mod losses;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use nn::{Model, ModelSpec};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, TensorError, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
