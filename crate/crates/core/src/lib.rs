//! Stochastic block Bregman projection (SBBP) for convex feasibility problems.
//!
//! The solver alternates a mini-batch gradient step on the dual iterate with the conjugate
//! gradient map of a strongly convex kernel. Linear feasibility (rows) and split feasibility
//! (blocks with ball constraints) are supported, with Polyak-type and projective stepsizes.

pub mod deviation;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod instances;
pub mod kernel;
pub mod linalg;
pub mod rng;
pub mod sampling;
pub mod solver;
pub mod stepsize;

pub use deviation::{BatchStats, ConstraintKind, LfpProblem, MiniBatch, Problem, SfpBlock, SfpProblem};
pub use error::{Error, Result};
pub use kernel::{IterateState, Kernel};
pub use rng::SeededRng;
