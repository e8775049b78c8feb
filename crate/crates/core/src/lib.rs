//! Continuous-time sequence encoder with decoupled causal attention for
//! early-warning prediction on irregular clinical time series, plus the
//! training, evaluation, and attribution machinery around it.

pub mod attribution;
pub mod causal;
pub mod cfc;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::Tensor;
