//! Movable-antenna cooperative ISAC simulator.
//!
//! Channels, robust-rate and hybrid CRLB evaluation, the constrained MDP
//! wrapper, a primal-dual DDPG agent and the baseline solvers.

pub mod baselines;
pub mod cdrl;
pub mod channel;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod problem;
pub mod robust_rate;
pub mod scenario;
pub mod sensing;

pub use error::{CisacError, Result};
