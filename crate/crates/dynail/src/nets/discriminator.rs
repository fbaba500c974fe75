use super::{init_linear, insert_params, linear};
use crate::diffcore::{DiffError, NodeId, Tape, Tensor};
use rand::RngCore;

/// Logits are clamped to this magnitude before the sigmoid so that both
/// log(d) and log(1 - d) stay finite.
pub const LOGIT_CLAMP: f64 = 10.0;

const HIDDEN: [usize; 2] = [200, 100];

/// Discriminator over concatenated (state, action): relu MLP with hidden
/// layers [200, 100] and a clamped-logit sigmoid output in (0, 1).
///
/// Parameter order: w1, b1, w2, b2, w_out, b_out.
#[derive(Clone)]
pub struct DiscriminatorNet {
    pub state_dim: usize,
    pub action_dim: usize,
    params: Vec<Tensor>,
}

impl DiscriminatorNet {
    pub fn init(state_dim: usize, action_dim: usize, rng: &mut dyn RngCore) -> Self {
        let input = state_dim + action_dim;
        let (w1, b1) = init_linear(HIDDEN[0], input, rng);
        let (w2, b2) = init_linear(HIDDEN[1], HIDDEN[0], rng);
        let (wo, bo) = init_linear(1, HIDDEN[1], rng);
        DiscriminatorNet {
            state_dim,
            action_dim,
            params: vec![w1, b1, w2, b2, wo, bo],
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) {
        assert_eq!(params.len(), self.params.len(), "parameter list shape");
        for (new, old) in params.iter().zip(&self.params) {
            assert_eq!(new.shape(), old.shape(), "parameter tensor shape");
        }
        self.params = params;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn insert(&self, tape: &mut Tape) -> TapedDiscriminator {
        TapedDiscriminator {
            ids: insert_params(tape, &self.params, true),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
        }
    }

    pub fn insert_const(&self, tape: &mut Tape) -> TapedDiscriminator {
        TapedDiscriminator {
            ids: insert_params(tape, &self.params, false),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
        }
    }

    /// Plain forward: d(s, a) in (0, 1).
    pub fn score(&self, s: &[f64], a: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let td = self.insert_const(&mut tape);
        let sn = tape.constant_vec(s);
        let an = tape.constant_vec(a);
        let d = td.forward(&mut tape, sn, an).expect("discriminator forward");
        tape.value(d).item()
    }
}

pub struct TapedDiscriminator {
    ids: Vec<NodeId>,
    state_dim: usize,
    action_dim: usize,
}

impl TapedDiscriminator {
    pub fn param_ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// d(s, a) as a length-1 node, strictly inside (0, 1).
    pub fn forward(&self, tape: &mut Tape, s: NodeId, a: NodeId) -> Result<NodeId, DiffError> {
        if tape.value(s).len() != self.state_dim || tape.value(a).len() != self.action_dim {
            return Err(DiffError::ShapeMismatch {
                node: tape.len(),
                detail: format!(
                    "discriminator input dims ({}, {}), expected ({}, {})",
                    tape.value(s).len(),
                    tape.value(a).len(),
                    self.state_dim,
                    self.action_dim
                ),
            });
        }
        let x = tape.concat(&[s, a])?;
        let h = linear(tape, self.ids[0], self.ids[1], x)?;
        let h = tape.relu(h)?;
        let h = linear(tape, self.ids[2], self.ids[3], h)?;
        let h = tape.relu(h)?;
        let logit = linear(tape, self.ids[4], self.ids[5], h)?;
        let logit = tape.clamp(logit, -LOGIT_CLAMP, LOGIT_CLAMP)?;
        tape.sigmoid(logit)
    }
}
