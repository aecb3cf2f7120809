//! Concurrent training of an optimal agent and divergence-shaped pseudo-agents
//! on a deterministic intersection task, with an exact finite-horizon DP oracle.
//!
//! The crate is organized around the training data flow:
//!
//! * [`mdp`] — actions, observations, transitions, replay buffer, returns
//! * [`env`] — the two-way intersection simulator
//! * [`nn`] — from-scratch MLP, backprop, Adam, checkpoints
//! * [`learner`] — double-Q targets, ε-greedy behaviour, train steps
//! * [`divergence`] — speed histograms, the trajectory-difference metric,
//!   and the terminal pseudo-reward that pushes pseudo-agents apart
//! * [`train`] — the round-robin multi-agent orchestrator and its logs
//! * [`oracle`] — exact backward-induction ground truth over the integer grid
//! * [`eval`] — greedy evaluation, Q-landscapes, α sweeps, perturbation runs

pub mod divergence;
pub mod env;
pub mod error;
pub mod eval;
pub mod learner;
pub mod mdp;
pub mod nn;
pub mod oracle;
pub mod train;

pub use error::Error;

/// Crate-wide `Result` with [`Error`] as the failure type.
pub type Result<T> = std::result::Result<T, Error>;
