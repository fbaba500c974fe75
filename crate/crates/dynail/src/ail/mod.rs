//! Adversarial imitation training: the Dyna-style loop that alternates
//! model-free learning on real transitions with planning on the learned
//! model, plus the GAIL and MGAIL baselines it is compared against.
//!
//! One iteration of the full loop, in order: sample environment
//! trajectories with the current policy, store them in the replay buffer,
//! take `m` paired discriminator/policy learning steps on the fresh batch,
//! fit the forward model on buffered windows, take `p` planning steps on
//! purely synthetic rollouts, then evaluate. GAIL drops the model and the
//! planning phase and uses score-function policy steps; MGAIL keeps the
//! model for gradient pathways but never plans.
//!
//! Imitation purity: nothing in this module reads an environment reward.
//! The only consumer of true rewards is [`evaluate_policy`], which scores
//! fresh rollouts for reporting.

mod buffer;
mod config;
mod trainer;
mod updates;

pub use buffer::{ReplayBuffer, TaggedTransition};
pub use config::{DynaConfig, PolicyEstimator};
pub use trainer::{
    dyna_ail_train, gail_train, mgail_train, Algo, IterationStats, Trainer, STREAM_DISC_BATCH,
    STREAM_DISC_INIT, STREAM_ENV, STREAM_EVAL, STREAM_FM_INIT, STREAM_FM_TRAIN, STREAM_PLAN,
    STREAM_POLICY_INIT,
};
pub use updates::{
    discriminator_update, evaluate_policy, evaluate_policy_greedy, policy_learning_update,
    policy_planning_update, train_forward_model, GreedyPolicy, KlController, OnPolicyBatch,
};
pub(crate) use updates::{evaluate_agent, kl_reinforce_step};

use crate::diffcore::DiffError;
use crate::envs::{EnvError, Trajectory, Transition};
use crate::svg::SvgError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AilError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Svg(#[from] SvgError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("model-origin trajectory cannot enter the replay buffer")]
    ModelOriginInBuffer,
    #[error("expert dataset does not match environment: {0}")]
    DatasetMismatch(String),
    #[error("on-policy batch is stale: tagged {batch}, policy at {current}")]
    StaleBatch { batch: u64, current: u64 },
}

/// Demonstration trajectories plus the metadata needed to validate them
/// against an environment. Immutable once built.
#[derive(Clone)]
pub struct ExpertDataset {
    env_name: String,
    state_dim: usize,
    action_dim: usize,
    trajectories: Vec<Trajectory>,
}

impl ExpertDataset {
    pub fn new(
        env_name: String,
        state_dim: usize,
        action_dim: usize,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self, AilError> {
        if trajectories.is_empty() || trajectories.iter().any(|t| t.transitions.is_empty()) {
            return Err(AilError::DatasetMismatch(
                "dataset has no transitions".into(),
            ));
        }
        for tr in trajectories.iter().flat_map(|t| &t.transitions) {
            if tr.s.len() != state_dim || tr.a.len() != action_dim {
                return Err(AilError::DatasetMismatch(format!(
                    "transition dims ({}, {}) do not match metadata ({state_dim}, {action_dim})",
                    tr.s.len(),
                    tr.a.len()
                )));
            }
        }
        Ok(ExpertDataset {
            env_name,
            state_dim,
            action_dim,
            trajectories,
        })
    }

    pub fn env_name(&self) -> &str {
        &self.env_name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn total_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn flat_transitions(&self) -> Vec<&Transition> {
        self.trajectories
            .iter()
            .flat_map(|t| &t.transitions)
            .collect()
    }
}

/// Stream-separated seed derivation (splitmix-style). Every consumer of
/// randomness in a run draws from its own stream, so adding or removing one
/// consumer (say, forward-model training) leaves the others' sequences
/// untouched. That is what makes "same seed" comparisons across algorithm
/// variants meaningful.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix(base ^ splitmix(stream.wrapping_add(0xA076_1D64_78BD_642F)) ^ splitmix(index))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
