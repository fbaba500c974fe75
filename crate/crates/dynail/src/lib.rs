//! Dyna-style adversarial imitation learning on desk-scale control tasks.
//!
//! The crate implements three imitation learners that share one differentiable
//! core:
//!
//! - **GAIL**: model-free adversarial imitation with score-function (REINFORCE)
//!   policy updates under an adaptive KL penalty.
//! - **MGAIL**: end-to-end differentiable adversarial imitation. Observed
//!   environment transitions are re-parameterized as `s_pred + nu` so the
//!   discriminator's state gradient reaches the policy through a learned
//!   forward model.
//! - **Dyna-AIL**: alternates MGAIL-style learning on real transitions with a
//!   planning phase that updates the policy on synthetic rollouts through the
//!   forward model, consuming no extra environment interactions.
//!
//! Everything differentiates through [`diffcore`], a small reverse-mode tape
//! engine (f64 throughout). Environments live in [`envs`] (CartPole and a
//! torque-limited pendulum swing-up with analytic dynamics), the three
//! networks in [`nets`], multi-step value-gradient machinery in [`svg`],
//! training loops in [`ail`], expert training and demonstration datasets in
//! [`expert`], and the command-line front end in [`cli`].
//!
//! Start with the runnable examples (`cargo run --example ...`); each one
//! exercises a single capability end to end.

pub mod ail;
pub mod cli;
pub mod diffcore;
pub mod envs;
pub mod expert;
pub mod nets;
pub mod svg;

pub use diffcore::{DiffError, Tensor};
