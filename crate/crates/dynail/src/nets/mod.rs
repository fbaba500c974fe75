//! The three parametric functions of the adversarial imitation loop: a
//! stochastic policy, a discriminator over (state, action) pairs, and a
//! recurrent forward model predicting state deltas.
//!
//! Each network stores its parameters as a flat `Vec<Tensor>` in a fixed
//! declaration order (the order checkpoints serialize) and is inserted into
//! a [`Tape`](crate::diffcore::Tape) per graph build: `insert` adds the
//! parameters as trainable leaves, `insert_const` as frozen ones, and the
//! returned `Taped*` handle can run `forward` any number of times on that
//! tape, so multi-step unrolls share one set of parameter nodes.

mod checkpoint;
mod discriminator;
mod forward_model;
mod policy;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use discriminator::{DiscriminatorNet, TapedDiscriminator, LOGIT_CLAMP};
pub use forward_model::{ForwardModelNet, TapedForwardModel, FM_HIDDEN};
pub use policy::{
    log_prob_of_dist, one_hot_index as policy_one_hot_index, sample_categorical, PolicyDist,
    PolicyNet, PolicyOut, TapedPolicy, LOG_STD_INIT, LOG_STD_MAX, LOG_STD_MIN,
};

use crate::diffcore::{DiffError, NodeId, Tape, Tensor};
use rand::RngCore;

/// Weight matrix `[out, in]` with entries N(0, 1/in) and a zero bias.
pub(crate) fn init_linear(out_dim: usize, in_dim: usize, rng: &mut dyn RngCore) -> (Tensor, Tensor) {
    let scale = 1.0 / (in_dim as f64).sqrt();
    (
        Tensor::randn(&[out_dim, in_dim], scale, rng),
        Tensor::zeros(&[out_dim]),
    )
}

/// `w x + b` on the tape.
pub(crate) fn linear(
    tape: &mut Tape,
    w: NodeId,
    b: NodeId,
    x: NodeId,
) -> Result<NodeId, DiffError> {
    let wx = tape.matmul(w, x)?;
    tape.add(wx, b)
}

/// Inserts a parameter list into a tape, trainable or frozen.
pub(crate) fn insert_params(tape: &mut Tape, params: &[Tensor], trainable: bool) -> Vec<NodeId> {
    params
        .iter()
        .map(|p| {
            if trainable {
                tape.param(p.clone())
            } else {
                tape.constant(p.clone())
            }
        })
        .collect()
}
