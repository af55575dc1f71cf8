//! Safety-constrained reinforcement learning on Markov decision processes.
//!
//! A permissive scheduler that keeps the probability of reaching bad states
//! below a threshold is synthesized first; learning then explores only the
//! actions it allows. Bounds on the optimal expected cost guide further
//! iterations until the performance target is met or optimality is shown.

pub mod analysis;
pub mod benchmarks;
mod certificate;
pub mod error;
pub mod format;
pub mod learning;
pub mod model;
pub mod synth_loop;
pub mod synthesis;

pub use error::{Error, Result};
pub use model::{
    ActionId, CostModel, DetPermissiveScheduler, DetScheduler, Distribution, Mc, Mdp, MdpBuilder,
    PerformanceSpec, RandScheduler, Rational, SafetySpec, StateId,
};
