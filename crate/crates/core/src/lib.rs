//! Multi-scale state-space mixture forecaster for radio KPI series.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for callers that do not need the choice.

pub mod artifact;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod scalar;
pub mod sskernel;
pub mod train;

pub use error::{Error, Result};

pub type Mat64 = linalg::Mat<f64>;
pub type Mat32 = linalg::Mat<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type ParamGrads64 = model::ParamGrads<f64>;
pub type ParamGrads32 = model::ParamGrads<f32>;
pub type KernelBank64 = model::KernelBank<f64>;
pub type KernelBank32 = model::KernelBank<f32>;
pub type ForwardTrace64 = model::ForwardTrace<f64>;
pub type ForwardTrace32 = model::ForwardTrace<f32>;
pub type SsmComponent64 = sskernel::SsmComponent<f64>;
pub type SsmComponent32 = sskernel::SsmComponent<f32>;
pub type Taps64 = sskernel::Taps<f64>;
pub type Taps32 = sskernel::Taps<f32>;
