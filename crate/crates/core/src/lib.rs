//! Continuous-time two-timescale stochastic approximation (TTSA) for
//! stochastic bilevel optimisation.
//!
//! The crate is organised bottom-up:
//!
//! * [`problem_model`] and [`schedule`]: problem oracles, learning rates and
//!   sampled assumption checks.
//! * [`hypergradient`]: the implicit-function hypergradient and its
//!   finite-difference audits.
//! * [`sde_engine`]: Euler–Maruyama simulation of the coupled recursions.
//! * [`clt_predictor`]: linearization at the optimum and the limiting
//!   covariances of the rescaled errors.
//! * [`mc_verifier`]: replicated runs compared against the predictions.
//! * [`problems`]: built-in problems with closed-form solutions.

// NaN-rejecting guards are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clt_predictor;
pub mod error;
pub mod hypergradient;
pub mod linalg;
pub mod mc_verifier;
pub mod problem_model;
pub mod problems;
pub mod schedule;
pub mod sde_engine;

pub use clt_predictor::{CltPrediction, LinearizationMatrices, NoiseLimits};
pub use error::{Error, Result};
pub use hypergradient::HypergradResult;
pub use mc_verifier::{McConfig, McReport, Tolerances};
pub use problem_model::{BilevelProblem, Matrix, Vector};
pub use schedule::{LearningRateSchedule, SchedulePair};
pub use sde_engine::{NoiseModel, Trajectory, TtsaConfig};
