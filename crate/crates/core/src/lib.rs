//! MCEM-NCD: cooperative multi-agent reinforcement learning with
//! cross-entropy policy updates over a monotonic nonlinear critic
//! decomposition, trained off-policy with an n-step λ-return operator.
//!
//! The crate is organized around the training pipeline:
//!
//! * [`approx`] — parameter stores, network evaluation, manual reverse-mode
//!   gradients, Adam, checkpoint framing.
//! * [`policy`] — stochastic per-agent policies (categorical / Gaussian),
//!   main/proposal pairs, and the multi-agent cross-entropy update.
//! * [`critic`] — per-agent critics, the monotonic mixer and its linear
//!   ablation, off-policy return targets, and the critic loss.
//! * [`replay`] — episodic replay buffer with behavior log-probabilities.
//! * [`envs`] — desk-scale environments: continuous predator-prey,
//!   cooperative matrix games, small tabular MDPs.
//! * [`trainer`] — the training loop, evaluation, metrics, checkpointing.
//! * [`oracle`] — independent brute-force references used by tests and the
//!   `verify` CLI subcommand.

pub mod approx;
pub mod critic;
pub mod envs;
pub mod error;
pub mod oracle;
pub mod policy;
pub mod replay;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
