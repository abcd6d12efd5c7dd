//! Multi-token prediction laboratory for autoregressive speech-token
//! decoders: masks, a small autodiff engine, six prediction variants,
//! training and cached generation.

pub mod error;
pub mod inference;
pub mod masks;
pub mod model;
pub mod numerics;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
pub use model::{DecoderModel, ModelConfig, Variant};
pub use numerics::{Scalar, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = DecoderModel<f32>;
pub type Model64 = DecoderModel<f64>;
