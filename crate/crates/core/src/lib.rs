//! Data-driven Lyapunov certification of learned velocity-tracking
//! controllers, with a CBF safety filter layered on top.
//!
//! Pipeline: sample tracking-error trajectories ([`dataio`]), fit a
//! neural Cholesky-factor Lyapunov candidate ([`nn`]), bisect on the decay
//! rate ([`certify`]), bound the violation rate on held-out data
//! ([`bounds`]) and filter commanded velocities ([`cbf`]) in closed loop
//! ([`sim`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod cbf;
pub mod certify;
pub mod dataio;
pub mod eigen;
pub mod error;
pub mod exec;
pub mod lyapunov;
pub mod nn;
pub mod sim;

pub use bounds::{chernoff_bound, ViolationBound};
pub use cbf::{safe_velocity, FilterResult, Obstacle, SafetySpec};
pub use certify::{bisect_lambda, compute_epsilon, BisectionConfig, Certificate, CertificateRecord};
pub use dataio::{Dataset, Role, Trajectory};
pub use error::{Error, Result};
pub use exec::Execution;
pub use lyapunov::{CholeskyFactor, LyapunovCandidate, StabilityResidual, StateVector};
pub use nn::{train, TrainConfig, TrainResult};
