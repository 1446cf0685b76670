//! Flow-matching generation and evaluation toolkit on a small reverse-mode
//! tensor engine.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common precisions.

pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod harness;
pub mod melody;
pub mod metrics;
pub mod moe;
pub mod nn;
pub mod notes;
pub mod optim;
pub mod params;
pub mod rq;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use params::ParameterStore;
pub use scalar::{DType, Scalar};
pub use tape::{Reduction, Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Store64 = ParameterStore<f64>;
pub type Store32 = ParameterStore<f32>;
