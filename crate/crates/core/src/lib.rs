//! Small-scale laboratory for knowledge overshadowing in tiny decoder-only
//! transformers.

pub mod error;
pub mod ndtensor;

pub use error::{Error, Result};
pub use ndtensor::{Graph, Precision, Scalar, Tensor, Var};

/// Single-precision instantiations, the default for training.
pub type Tensor32 = Tensor<f32>;
pub type Model32 = nanoformer::Model<f32>;
pub type Trainer32 = dynamics::Trainer<f32>;

/// Double-precision instantiations, used by gradient checks and oracles.
pub type Tensor64 = Tensor<f64>;
pub type Model64 = nanoformer::Model<f64>;
pub type Trainer64 = dynamics::Trainer<f64>;
pub mod nanoformer;
pub mod shadowgen;
pub mod dynamics;
pub mod circuits;
pub mod probes;
pub mod recovery;
