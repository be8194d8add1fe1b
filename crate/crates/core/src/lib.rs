//! Two-channel (2C) Kalman/extended-Kalman filtering under intermittent
//! measurements.
//!
//! The crate covers four pieces that fit together:
//!
//! * [`model`] — system models (dynamics, Jacobians, the two benchmark
//!   models) and polytopic over-approximation of the Jacobian set,
//! * [`filter`] — the 2C (E)KF recursions with arrival-dependent updates,
//! * [`stability`] — the expected-covariance operators, LMI boundedness
//!   certificates and semidefinite trace bounds (backed by [`sdp`]),
//! * [`scheduler`] / [`sim`] — rate selection, deterministic read periods,
//!   the iterative relinearizing scheduler, and the Monte-Carlo harness.

pub mod filter;
pub mod linalg;
pub mod model;
pub mod scheduler;
pub mod sim;
pub mod sdp;
pub mod stability;

pub use filter::{ArrivalPair, FilterError, FilterState};
pub use model::{JacobianPolytope, ModelError, SystemModel};
pub use scheduler::{CandidateSet, IterativeState, Period, Schedule, SchedulerError};
pub use sim::{SimConfig, SimError, SimMode, SimResult};
pub use stability::{
    BoundednessResult, Dynamics, FeasibilityCertificate, GainTriple, RatePair, StabilityError,
    TraceBoundResult, TraceBoundStatus,
};
