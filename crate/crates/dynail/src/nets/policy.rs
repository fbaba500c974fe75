use super::{init_linear, insert_params, linear};
use crate::diffcore::{standard_normal, DiffError, NodeId, Tape, Tensor};
use crate::envs::{Action, ActionKind, Agent, SampledAction};
use rand::{Rng, RngCore};

pub const LOG_STD_INIT: f64 = -0.5;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HIDDEN: [usize; 2] = [100, 50];

/// Stochastic policy: relu MLP with hidden layers [100, 50]. Discrete head
/// is a softmax over k actions; continuous head is a mean vector plus a
/// state-independent log-std parameter (clamped to [-5, 2] wherever used).
///
/// Parameter order: w1, b1, w2, b2, w_head, b_head, then log_std for
/// continuous actions.
#[derive(Clone)]
pub struct PolicyNet {
    pub state_dim: usize,
    pub action_kind: ActionKind,
    params: Vec<Tensor>,
}

/// Distribution parameters from a plain (non-taped) forward pass.
#[derive(Clone, Debug)]
pub enum PolicyDist {
    Categorical { probs: Vec<f64> },
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
}

/// Tape nodes of one policy forward.
pub enum PolicyOut {
    /// Softmax probabilities, shape [k].
    Probs(NodeId),
    /// Mean (shape [dim]) and clamped log-std (shape [dim]).
    Gaussian { mean: NodeId, log_std: NodeId },
}

impl PolicyNet {
    pub fn init(state_dim: usize, action_kind: ActionKind, rng: &mut dyn RngCore) -> Self {
        let head_dim = action_kind.vec_len();
        let mut params = Vec::new();
        let (w1, b1) = init_linear(HIDDEN[0], state_dim, rng);
        let (w2, b2) = init_linear(HIDDEN[1], HIDDEN[0], rng);
        let (wh, bh) = init_linear(head_dim, HIDDEN[1], rng);
        params.extend([w1, b1, w2, b2, wh, bh]);
        if matches!(action_kind, ActionKind::Continuous { .. }) {
            params.push(Tensor::full(&[head_dim], LOG_STD_INIT));
        }
        PolicyNet {
            state_dim,
            action_kind,
            params,
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

    pub fn insert(&self, tape: &mut Tape) -> TapedPolicy {
        self.taped(tape, true)
    }

    pub fn insert_const(&self, tape: &mut Tape) -> TapedPolicy {
        self.taped(tape, false)
    }

    fn taped(&self, tape: &mut Tape, trainable: bool) -> TapedPolicy {
        TapedPolicy {
            ids: insert_params(tape, &self.params, trainable),
            action_kind: self.action_kind,
            state_dim: self.state_dim,
        }
    }

    /// Distribution parameters at `s` without keeping a graph around.
    pub fn dist(&self, s: &[f64]) -> PolicyDist {
        let mut tape = Tape::new();
        let tp = self.insert_const(&mut tape);
        let sn = tape.constant_vec(s);
        let out = tp.forward(&mut tape, sn).expect("policy forward");
        match out {
            PolicyOut::Probs(p) => PolicyDist::Categorical {
                probs: tape.value(p).data().to_vec(),
            },
            PolicyOut::Gaussian { mean, log_std } => PolicyDist::Gaussian {
                mean: tape.value(mean).data().to_vec(),
                log_std: tape.value(log_std).data().to_vec(),
            },
        }
    }

    /// Log-density (discrete: log probability) of a stored action vector.
    pub fn log_prob(&self, s: &[f64], stored: &[f64]) -> f64 {
        log_prob_of_dist(&self.dist(s), stored)
    }
}

/// Log-density of the stored action representation under distribution
/// params: discrete picks the one-hot's coordinate; Gaussian is the
/// diagonal-normal density of the executed action vector.
pub fn log_prob_of_dist(dist: &PolicyDist, stored: &[f64]) -> f64 {
    match dist {
        PolicyDist::Categorical { probs } => {
            let idx = one_hot_index(stored);
            probs[idx].ln()
        }
        PolicyDist::Gaussian { mean, log_std } => {
            let mut lp = 0.0;
            for i in 0..mean.len() {
                let std = log_std[i].exp();
                let z = (stored[i] - mean[i]) / std;
                lp += -0.5 * z * z - log_std[i] - 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
            lp
        }
    }
}

pub fn one_hot_index(stored: &[f64]) -> usize {
    stored
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

/// Inverse-CDF categorical draw.
pub fn sample_categorical(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

impl Agent for PolicyNet {
    fn sample_action(&self, s: &[f64], rng: &mut dyn RngCore) -> SampledAction {
        match self.dist(s) {
            PolicyDist::Categorical { probs } => {
                let idx = sample_categorical(&probs, rng);
                let mut one_hot = vec![0.0; probs.len()];
                one_hot[idx] = 1.0;
                SampledAction {
                    executed: Action::Discrete(idx),
                    stored: one_hot,
                    noise: vec![],
                }
            }
            PolicyDist::Gaussian { mean, log_std } => {
                let ActionKind::Continuous { lo, hi, .. } = self.action_kind else {
                    unreachable!("gaussian head on discrete action kind")
                };
                let noise: Vec<f64> = mean.iter().map(|_| standard_normal(rng)).collect();
                let a: Vec<f64> = mean
                    .iter()
                    .zip(&log_std)
                    .zip(&noise)
                    .map(|((m, ls), e)| (m + ls.exp() * e).clamp(lo, hi))
                    .collect();
                SampledAction {
                    executed: Action::Continuous(a.clone()),
                    stored: a,
                    noise,
                }
            }
        }
    }
}

pub struct TapedPolicy {
    ids: Vec<NodeId>,
    action_kind: ActionKind,
    state_dim: usize,
}

impl TapedPolicy {
    pub fn param_ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn forward(&self, tape: &mut Tape, s: NodeId) -> Result<PolicyOut, DiffError> {
        debug_assert_eq!(tape.value(s).len(), self.state_dim, "state dim");
        let h = linear(tape, self.ids[0], self.ids[1], s)?;
        let h = tape.relu(h)?;
        let h = linear(tape, self.ids[2], self.ids[3], h)?;
        let h = tape.relu(h)?;
        let head = linear(tape, self.ids[4], self.ids[5], h)?;
        match self.action_kind {
            ActionKind::Discrete { .. } => Ok(PolicyOut::Probs(tape.softmax(head)?)),
            ActionKind::Continuous { lo, hi, .. } => {
                // The mean is squashed into the action bounds. An unbounded
                // head diverges under score-function training: clamped
                // samples at a bound keep their advantage while the
                // log-density gradient keeps pointing outward, so the raw
                // head grows without ever changing the executed action.
                let squashed = tape.tanh(head)?;
                let scaled = tape.scale(squashed, 0.5 * (hi - lo))?;
                let mean = tape.add_scalar(scaled, 0.5 * (hi + lo))?;
                let log_std = tape.clamp(self.ids[6], LOG_STD_MIN, LOG_STD_MAX)?;
                Ok(PolicyOut::Gaussian { mean, log_std })
            }
        }
    }

    /// Differentiable action node: the probability vector for discrete
    /// actions, or `clamp(mean + exp(log_std) * eps, bounds)` for
    /// continuous, with `eps` a constant node of recorded noise.
    pub fn reparam_action(
        &self,
        tape: &mut Tape,
        s: NodeId,
        noise: &[f64],
    ) -> Result<NodeId, DiffError> {
        match self.forward(tape, s)? {
            PolicyOut::Probs(p) => Ok(p),
            PolicyOut::Gaussian { mean, log_std } => {
                let ActionKind::Continuous { dim, lo, hi } = self.action_kind else {
                    unreachable!()
                };
                if noise.len() != dim {
                    return Err(DiffError::ShapeMismatch {
                        node: tape.len(),
                        detail: format!("noise dim {} for action dim {dim}", noise.len()),
                    });
                }
                let eps = tape.constant_vec(noise);
                let std = tape.exp(log_std)?;
                let scaled = tape.mul(std, eps)?;
                let a = tape.add(mean, scaled)?;
                tape.clamp(a, lo, hi)
            }
        }
    }
}
