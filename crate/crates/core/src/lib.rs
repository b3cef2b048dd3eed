pub mod attacks;
pub mod corpus;
pub mod defense;
pub mod dp;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod scalar;
pub mod seeds;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision aliases for the central generic types.
pub type Model64 = model::LanguageModel<f64>;
pub type Model32 = model::LanguageModel<f32>;
pub type Trace64 = model::LogProbTrace<f64>;
pub type Trace32 = model::LogProbTrace<f32>;
