//! Counterfactual multi-step action-effect intrinsic rewards for cooperative
//! multi-agent reinforcement learning.
//!
//! The crate bundles everything needed to train and analyze the method at desk
//! scale on deterministic 2-D particle tasks:
//!
//! - [`nn`]: a small dense-network substrate (explicit forward/backward, Adam).
//! - [`env`]: particle-world tasks (predator prey, cooperative navigation)
//!   with team rewards, per-agent observations, and a centralized state vector.
//! - [`backbone`]: a MADDPG-style centralized-training decentralized-execution
//!   learner with replay and target networks.
//! - [`forward_model`]: a learned one-step dynamics model and the closed-loop
//!   rollout engine for factual/counterfactual branch futures.
//! - [`effect`]: branch construction, teammate-feature normalization, branch
//!   distances, and the multi-step action-effect score.
//! - [`gate`]: the extrinsic team-advantage gate and reward composition.
//! - [`oracle`]: exactly simulable twin dynamics and a delayed-effect chain
//!   world for theory checks.
//! - [`diagnostics`]: rollout-reliability metrics (In-MSE, Int-MSE, Sep. AUC),
//!   forward-model corruption, and the sweep runner.
//! - [`runner`]: configuration, seed streams, the training loop, evaluation,
//!   and checkpointing.
//!
//! See the crate examples for runnable entry points covering each capability,
//! and the `magic-marl` binary for the `train` / `evaluate` / `sweep` /
//! `diagnose` subcommands.

pub mod backbone;
pub mod diagnostics;
pub mod effect;
pub mod env;
pub mod forward_model;
pub mod gate;
pub mod instrument;
pub mod nn;
pub mod oracle;
pub mod runner;
pub mod stats;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
