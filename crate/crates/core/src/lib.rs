//! Attention-based spatio-temporal neural operator: a temporal transformer
//! encoder that extrapolates the unforced next state, composed with a
//! nonlocal attention operator that learns a forcing-to-state kernel.

pub mod autograd;
pub mod bdf;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod nao;
#[cfg(test)]
mod properties;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
