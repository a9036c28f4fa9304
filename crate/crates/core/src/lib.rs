//! Normalizing-constant estimation for continuous-time linear and nonlinear
//! state-space models with single-level and multilevel ensemble Kalman-Bucy
//! filters, plus online parameter estimation by SPSA-driven recursive
//! maximum likelihood.
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`, which the experiments and CLI use.

// `!(x > 0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod enkbf;
pub mod error;
pub mod harness;
pub mod io;
pub mod kalman;
pub mod model;
pub mod multilevel;
pub mod paths;
pub mod scalar;
pub mod spsa;

pub use error::{FilterError, Result};
pub use enkbf::Variant;
pub use paths::{Level, SeedSpec};
pub use scalar::Real;

pub type ModelSpec64 = model::ModelSpec<f64>;
pub type IncrementPath64 = paths::IncrementPath<f64>;
pub type Ensemble64 = enkbf::Ensemble<f64>;
pub type FilterRun64 = enkbf::FilterRun<f64>;
pub type KbfPath64 = kalman::KbfPath<f64>;
pub type MLEstimate64 = multilevel::MLEstimate<f64>;
pub type SpsaTrajectory64 = spsa::SpsaTrajectory<f64>;
pub type ModelSpec32 = model::ModelSpec<f32>;
