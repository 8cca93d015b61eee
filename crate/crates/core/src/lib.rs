pub mod autograd;
pub mod error;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub mod masking;
pub mod backbone;
pub mod nets;
pub mod nn;
pub mod quantizer;
pub mod losses;
pub mod data;
pub mod tasks;
pub mod trainer;
pub mod eval;
pub mod config;
pub mod pipeline;
pub mod audit;

pub type Tensor64 = autograd::Tensor<f64>;
pub type Tensor32 = autograd::Tensor<f32>;
pub type Tape64<'p> = autograd::Tape<'p, f64>;
pub type Tape32<'p> = autograd::Tape<'p, f32>;
pub type Model64 = tasks::Model<f64>;
pub type Model32 = tasks::Model<f32>;
pub type ModelState64 = trainer::ModelState<f64>;
pub type ModelState32 = trainer::ModelState<f32>;
