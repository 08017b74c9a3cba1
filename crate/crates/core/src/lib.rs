// negated float comparisons reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod anomaly;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod sampling;
pub mod scalar;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type AeModel32 = models::AeModel<f32>;
pub type AeModel64 = models::AeModel<f64>;
pub type SaeModel32 = models::SaeModel<f32>;
pub type SaeModel64 = models::SaeModel<f64>;
