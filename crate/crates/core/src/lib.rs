//! Selling information to a budget-constrained decision maker.
//!
//! The crate builds and solves polynomial-size linear programs for the
//! consulting mechanisms (direct payment, deposit-and-return, and
//! probabilistic return), evaluates arbitrary interactive selling protocols
//! by backward induction, runs the sample-based pipeline for black-box
//! priors, and verifies incentive compatibility, individual rationality,
//! obedience and budget feasibility of any mechanism without a solver.

pub mod error;
pub mod formats;
pub mod generate;
pub mod lpcore;
pub mod mechanisms;
pub mod model;
pub mod protocol;
pub mod sampling;
pub mod verify;

pub use error::{Error, Result};
pub use mechanisms::{Mechanism, MechanismKind, MechanismSolution};
pub use model::{Beliefs, BuyerType, Instance, Posterior};

/// Tolerance on input probabilities (normalization, independence).
pub const PROB_TOL: f64 = 1e-9;

/// Tolerance on solver outputs and money-valued verification slack.
pub const SOLVER_TOL: f64 = 1e-6;
