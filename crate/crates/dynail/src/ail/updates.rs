//! The four gradient updates of the training loop plus evaluation.

use super::{AilError, DynaConfig, PolicyEstimator, ReplayBuffer};
use crate::diffcore::{standard_normal, Adam, NodeId, Tape, Tensor};
use crate::envs::{rollout, Action, Agent, Env, SampledAction, Trajectory, Transition};
use crate::nets::{
    DiscriminatorNet, ForwardModelNet, PolicyDist, PolicyNet, PolicyOut, TapedForwardModel,
};
use crate::svg::{
    discounted_to_go, svg_policy_gradient, unroll_env_reparam, Baseline,
    unroll_model,
};
use rand::{Rng, RngCore};

/// Fresh on-policy environment trajectories, tagged with the policy
/// version they were sampled under. Learning updates reject any other tag;
/// reuse within one version is the m-step SGD the loop is built on.
pub struct OnPolicyBatch {
    pub trajs: Vec<Trajectory>,
    pub version: u64,
}

/// One ascent step on E_pi[log D] + E_E[log(1 - D)]. Returns the pre-step
/// objective value.
pub fn discriminator_update(
    disc: &mut DiscriminatorNet,
    batch_pi: &[&Transition],
    batch_e: &[&Transition],
    opt: &mut Adam,
) -> Result<f64, AilError> {
    if batch_pi.is_empty() {
        return Err(AilError::EmptyBatch("policy transitions"));
    }
    if batch_e.is_empty() {
        return Err(AilError::EmptyBatch("expert transitions"));
    }
    let mut tape = Tape::with_capacity(16 * (batch_pi.len() + batch_e.len()));
    let td = disc.insert(&mut tape);
    let one = tape.constant_vec(&[1.0]);
    let mut obj: Option<NodeId> = None;
    let accumulate = |tape: &mut Tape, term: NodeId, obj: &mut Option<NodeId>| {
        *obj = Some(match *obj {
            Some(acc) => tape.add(acc, term).unwrap(),
            None => term,
        });
    };
    for tr in batch_pi {
        let s = tape.constant_vec(&tr.s);
        let a = tape.constant_vec(&tr.a);
        let d = td.forward(&mut tape, s, a)?;
        let ld = tape.log(d)?;
        let term = tape.scale(ld, 1.0 / batch_pi.len() as f64)?;
        accumulate(&mut tape, term, &mut obj);
    }
    for tr in batch_e {
        let s = tape.constant_vec(&tr.s);
        let a = tape.constant_vec(&tr.a);
        let d = td.forward(&mut tape, s, a)?;
        let omd = tape.sub(one, d)?;
        let ld = tape.log(omd)?;
        let term = tape.scale(ld, 1.0 / batch_e.len() as f64)?;
        accumulate(&mut tape, term, &mut obj);
    }
    let obj = obj.unwrap();
    let value = tape.value(obj).item();
    let map = tape.backward(obj)?;
    // Ascent on the objective: feed the optimizer the negated gradient.
    let grads: Vec<Tensor> = td
        .param_ids()
        .iter()
        .map(|&id| {
            let mut g = tape.grad_of(&map, id);
            g.scale_assign(-1.0);
            g
        })
        .collect();
    opt.step(disc.params_mut(), &grads)?;
    Ok(value)
}

/// Adaptive KL trust region for the score-function estimator, standing in
/// for a full trust-region policy step. `begin_epoch` snapshots the policy
/// at the start of an m-step inner loop; each update adds a beta-weighted
/// KL(old, current) penalty, and any step that lands beyond twice the
/// budget is rolled back and stops the loop (`saturated`). `end_epoch`
/// adapts beta toward the budget for the next iteration.
pub struct KlController {
    beta: f64,
    budget: f64,
    reference: Vec<(Vec<f64>, PolicyDist)>,
    saturated: bool,
    /// Backtracking multiplier on the applied step. The beta penalty has
    /// zero gradient exactly at the epoch-start policy, so it cannot tame
    /// the first step of an epoch; shrinking the step itself after a
    /// rollback is what breaks the propose-reject livelock.
    step_scale: f64,
}

impl KlController {
    pub fn new(budget: f64) -> Self {
        KlController {
            beta: 1.0,
            budget,
            reference: Vec::new(),
            saturated: false,
            step_scale: 1.0,
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn step_scale(&self) -> f64 {
        self.step_scale
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn is_saturated(&self) -> bool {
        self.saturated
    }

    pub fn begin_epoch<'a>(&mut self, policy: &PolicyNet, states: impl Iterator<Item = &'a [f64]>) {
        self.reference = states
            .map(|s| (s.to_vec(), policy.dist(s)))
            .collect();
        self.saturated = false;
    }

    /// Mean KL(reference, current) over the snapshot states.
    pub fn measure(&self, policy: &PolicyNet) -> f64 {
        if self.reference.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .reference
            .iter()
            .map(|(s, old)| kl_value(old, &policy.dist(s)))
            .sum();
        total / self.reference.len() as f64
    }

    pub fn end_epoch(&mut self, policy: &PolicyNet) {
        let kl = self.measure(policy);
        if kl > 1.5 * self.budget {
            self.beta = (self.beta * 2.0).min(1e6);
        } else if kl < self.budget / 1.5 && !self.saturated {
            // A rolled-back epoch measures ~0 KL; that must not read as
            // "too conservative" and decay the penalty. The step-size
            // backtracking already reacted, so leave beta alone.
            self.beta = (self.beta * 0.5).max(1e-4);
        }
    }

    /// Gradient of beta * mean KL(old, pi) over the snapshot states,
    /// aligned with the policy parameter order. Constant terms of the KL
    /// (entropy of the frozen reference) drop out of the gradient.
    fn penalty_gradient(&self, policy: &PolicyNet) -> Result<Vec<Tensor>, AilError> {
        let mut grads: Vec<Tensor> = policy
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        if self.reference.is_empty() || self.beta == 0.0 {
            return Ok(grads);
        }
        let mut tape = Tape::with_capacity(64 * self.reference.len());
        let tp = policy.insert(&mut tape);
        let w = self.beta / self.reference.len() as f64;
        let mut obj: Option<NodeId> = None;
        for (s, old) in &self.reference {
            let s_node = tape.constant_vec(s);
            let term = match (tp.forward(&mut tape, s_node)?, old) {
                (PolicyOut::Probs(p), PolicyDist::Categorical { probs }) => {
                    // KL = sum_a p_old (ln p_old - ln p); only the cross
                    // term depends on parameters.
                    let lp = tape.log(p)?;
                    let p_old = tape.constant_vec(probs);
                    let cross = tape.mul(p_old, lp)?;
                    let total = tape.sum(cross)?;
                    tape.neg(total)?
                }
                (
                    PolicyOut::Gaussian { mean, log_std },
                    PolicyDist::Gaussian {
                        mean: mu_old,
                        log_std: ls_old,
                    },
                ) => {
                    // Per dim: ls - ls_old + (var_old + (mu_old - mu)^2)
                    //          * exp(-2 ls) / 2 - 1/2.
                    let mu_old_node = tape.constant_vec(mu_old);
                    let diff = tape.sub(mu_old_node, mean)?;
                    let diff2 = tape.mul(diff, diff)?;
                    let var_old: Vec<f64> = ls_old.iter().map(|l| (2.0 * l).exp()).collect();
                    let var_old_node = tape.constant_vec(&var_old);
                    let num = tape.add(var_old_node, diff2)?;
                    let neg2ls = tape.scale(log_std, -2.0)?;
                    let inv_var = tape.exp(neg2ls)?;
                    let quad = tape.mul(num, inv_var)?;
                    let half_quad = tape.scale(quad, 0.5)?;
                    let ls_old_node = tape.constant_vec(ls_old);
                    let ls_diff = tape.sub(log_std, ls_old_node)?;
                    let body = tape.add(ls_diff, half_quad)?;
                    let shifted = tape.add_scalar(body, -0.5)?;
                    tape.sum(shifted)?
                }
                _ => unreachable!("policy head kind cannot change between snapshots"),
            };
            let weighted = tape.scale(term, w)?;
            obj = Some(match obj {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
        let map = tape.backward(obj.unwrap())?;
        for (slot, &pid) in tp.param_ids().iter().enumerate() {
            grads[slot].add_assign(&tape.grad_of(&map, pid));
        }
        Ok(grads)
    }
}

fn kl_value(old: &PolicyDist, new: &PolicyDist) -> f64 {
    match (old, new) {
        (PolicyDist::Categorical { probs: p }, PolicyDist::Categorical { probs: q }) => p
            .iter()
            .zip(q)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
            .sum(),
        (
            PolicyDist::Gaussian {
                mean: m0,
                log_std: l0,
            },
            PolicyDist::Gaussian {
                mean: m1,
                log_std: l1,
            },
        ) => m0
            .iter()
            .zip(m1)
            .zip(l0.iter().zip(l1))
            .map(|((a, b), (la, lb))| {
                lb - la + ((2.0 * la).exp() + (a - b).powi(2)) / (2.0 * (2.0 * lb).exp()) - 0.5
            })
            .sum(),
        _ => unreachable!("policy head kind cannot change between snapshots"),
    }
}

/// One descent step on the imitation cost E[sum_t gamma^t log D] over the
/// batch, with the estimator picked by the config. Returns the pre-step
/// cost. For the score-function estimator a [`KlController`] may supply a
/// trust region; a step measuring past twice its budget is rolled back.
#[allow(clippy::too_many_arguments)]
pub fn policy_learning_update(
    policy: &mut PolicyNet,
    batch: &OnPolicyBatch,
    policy_version: u64,
    fm: Option<&ForwardModelNet>,
    disc: &DiscriminatorNet,
    cfg: &DynaConfig,
    opt: &mut Adam,
    kl: Option<&mut KlController>,
) -> Result<f64, AilError> {
    if batch.version != policy_version {
        return Err(AilError::StaleBatch {
            batch: batch.version,
            current: policy_version,
        });
    }
    if batch.trajs.is_empty() || batch.trajs.iter().any(|t| t.transitions.is_empty()) {
        return Err(AilError::EmptyBatch("on-policy trajectories"));
    }
    match cfg.estimator {
        PolicyEstimator::EnvReparam => {
            let fm = fm.ok_or_else(|| {
                AilError::BadConfig("env-reparam estimator requires a forward model".into())
            })?;
            let mut grads = zeros_like(policy.params());
            let mut cost = 0.0;
            for traj in &batch.trajs {
                let unrolled = unroll_env_reparam(traj, policy, fm, disc, cfg.gamma)?;
                cost += unrolled.total_value();
                for (acc, g) in grads.iter_mut().zip(svg_policy_gradient(&unrolled)?) {
                    acc.add_assign(&g);
                }
            }
            let n = batch.trajs.len() as f64;
            cost /= n;
            scale_all(&mut grads, 1.0 / n);
            clip_global_norm(&mut grads, cfg.grad_clip);
            opt.step(policy.params_mut(), &grads)?;
            Ok(cost)
        }
        PolicyEstimator::ScoreFunction => {
            let step_costs: Vec<Vec<f64>> = batch
                .trajs
                .iter()
                .map(|traj| {
                    traj.transitions
                        .iter()
                        .map(|tr| disc.score(&tr.s, &tr.a).ln())
                        .collect()
                })
                .collect();
            kl_reinforce_step(
                policy,
                &batch.trajs,
                &step_costs,
                cfg.gamma,
                cfg.grad_clip,
                false,
                Baseline::TimestepMean,
                opt,
                kl,
            )
        }
    }
}

/// One likelihood-ratio descent step on arbitrary per-step costs; this is
/// the engine behind both the imitation score-function update (costs =
/// log D) and the true-reward expert trainer (costs = -reward, whitened).
/// With a controller attached it adds the beta-weighted KL penalty and
/// rolls back any step that lands past twice the budget, backing the step
/// size off. Returns the mean discounted cost from t = 0 (pre-step).
#[allow(clippy::too_many_arguments)]
pub(crate) fn kl_reinforce_step(
    policy: &mut PolicyNet,
    trajs: &[Trajectory],
    step_costs: &[Vec<f64>],
    gamma: f64,
    grad_clip: f64,
    standardize: bool,
    baseline: Baseline,
    opt: &mut Adam,
    kl: Option<&mut KlController>,
) -> Result<f64, AilError> {
    let mut grads = crate::svg::score_gradient_with_costs(
        trajs, step_costs, policy, gamma, standardize, baseline,
    )?;
    let cost = step_costs
        .iter()
        .map(|c| discounted_to_go(c, gamma)[0])
        .sum::<f64>()
        / step_costs.len() as f64;
    match kl {
        Some(kl) => {
            for (g, pg) in grads.iter_mut().zip(kl.penalty_gradient(policy)?) {
                g.add_assign(&pg);
            }
            clip_global_norm(&mut grads, grad_clip);
            let before: Vec<Tensor> = policy.params().to_vec();
            opt.step_scaled(policy.params_mut(), &grads, kl.step_scale)?;
            if kl.measure(policy) > 2.0 * kl.budget {
                policy.set_params(before);
                kl.saturated = true;
                kl.step_scale = (kl.step_scale * 0.5).max(1.0 / 1024.0);
            } else {
                kl.step_scale = (kl.step_scale * 1.5).min(1.0);
            }
        }
        None => {
            clip_global_norm(&mut grads, grad_clip);
            opt.step(policy.params_mut(), &grads)?;
        }
    }
    Ok(cost)
}

/// Fits the forward model on contiguous buffered windows: `cfg.fm_steps`
/// Adam steps on L = mean over windows of sum_t 0.5 || s_pred - s' ||^2,
/// with the recurrent state zeroed per window and backpropagated through
/// the window (truncated BPTT). Returns the post-training loss on a fresh
/// batch, or None (no-op) when the buffer has no full window.
pub fn train_forward_model(
    fm: &mut ForwardModelNet,
    buffer: &ReplayBuffer,
    cfg: &DynaConfig,
    opt: &mut Adam,
    rng: &mut dyn RngCore,
) -> Result<Option<f64>, AilError> {
    if buffer.window_starts(cfg.fm_window).is_empty() {
        return Ok(None);
    }
    for _ in 0..cfg.fm_steps {
        let windows = buffer
            .sample_windows(cfg.fm_window, cfg.fm_batch, rng)
            .unwrap();
        let (_, grads) = window_loss(fm, &windows, true)?;
        opt.step(fm.params_mut(), &grads.unwrap())?;
    }
    let windows = buffer
        .sample_windows(cfg.fm_window, cfg.fm_batch, rng)
        .unwrap();
    let (loss, _) = window_loss(fm, &windows, false)?;
    Ok(Some(loss))
}

fn window_loss(
    fm: &ForwardModelNet,
    windows: &[Vec<Transition>],
    want_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>), AilError> {
    let mut tape = Tape::with_capacity(64 * windows.len() * windows[0].len());
    let tf: TapedForwardModel = if want_grads {
        fm.insert(&mut tape)
    } else {
        fm.insert_const(&mut tape)
    };
    let mut total: Option<NodeId> = None;
    for window in windows {
        let mut h = tape.constant_vec(&fm.zero_hidden());
        for tr in window {
            let s = tape.constant_vec(&tr.s);
            let a = tape.constant_vec(&tr.a);
            let (s_pred, h_next) = tf.forward(&mut tape, h, s, a)?;
            let target = tape.constant_vec(&tr.s_next);
            let err = tape.squared_error(s_pred, target)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, err)?,
                None => err,
            });
            h = h_next;
        }
    }
    let loss = tape.scale(total.unwrap(), 1.0 / windows.len() as f64)?;
    let value = tape.value(loss).item();
    if !want_grads {
        return Ok((value, None));
    }
    let map = tape.backward(loss)?;
    let grads = tf
        .param_ids()
        .iter()
        .map(|&id| tape.grad_of(&map, id))
        .collect();
    Ok((value, Some(grads)))
}

/// One descent step on the planning cost: synthetic `t_p`-step rollouts
/// through the (frozen) model from each start state, differentiated by the
/// value-gradient recursion. Touches no environment; the only inputs are
/// buffered start states and the nets. Returns the pre-step mean cost, or
/// None (no-op) when no start states were supplied.
pub fn policy_planning_update(
    policy: &mut PolicyNet,
    fm: &ForwardModelNet,
    disc: &DiscriminatorNet,
    start_states: &[Vec<f64>],
    cfg: &DynaConfig,
    opt: &mut Adam,
    rng: &mut dyn RngCore,
) -> Result<Option<f64>, AilError> {
    if start_states.is_empty() {
        return Ok(None);
    }
    let noise_dim = match policy.action_kind {
        crate::envs::ActionKind::Continuous { dim, .. } => dim,
        crate::envs::ActionKind::Discrete { .. } => 0,
    };
    let mut grads = zeros_like(policy.params());
    let mut cost = 0.0;
    for s0 in start_states {
        let noise: Vec<Vec<f64>> = (0..cfg.t_p)
            .map(|_| (0..noise_dim).map(|_| standard_normal(rng)).collect())
            .collect();
        let unrolled = unroll_model(s0, policy, fm, disc, cfg.gamma, cfg.t_p, &noise)?;
        cost += unrolled.total_value();
        for (acc, g) in grads.iter_mut().zip(svg_policy_gradient(&unrolled)?) {
            acc.add_assign(&g);
        }
    }
    let n = start_states.len() as f64;
    scale_all(&mut grads, 1.0 / n);
    clip_global_norm(&mut grads, cfg.grad_clip);
    opt.step(policy.params_mut(), &grads)?;
    Ok(Some(cost / n))
}

/// Acts with the distribution mode instead of a sample: argmax probability
/// for discrete heads, clamped mean for Gaussian heads.
pub struct GreedyPolicy<'a> {
    pub policy: &'a PolicyNet,
}

impl Agent for GreedyPolicy<'_> {
    fn sample_action(&self, s: &[f64], _rng: &mut dyn RngCore) -> SampledAction {
        match self.policy.dist(s) {
            PolicyDist::Categorical { probs } => {
                let k = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                let mut one_hot = vec![0.0; probs.len()];
                one_hot[k] = 1.0;
                SampledAction {
                    executed: Action::Discrete(k),
                    stored: one_hot,
                    noise: vec![],
                }
            }
            PolicyDist::Gaussian { mean, .. } => {
                let crate::envs::ActionKind::Continuous { lo, hi, .. } = self.policy.action_kind
                else {
                    unreachable!()
                };
                let a: Vec<f64> = mean.iter().map(|m| m.clamp(lo, hi)).collect();
                SampledAction {
                    executed: Action::Continuous(a.clone()),
                    stored: a,
                    noise: vec![0.0; mean.len()],
                }
            }
        }
    }
}

/// True-reward returns over stochastic evaluation episodes. This is the
/// single place training-side code reads environment rewards; its output
/// feeds reporting only, never a gradient.
pub fn evaluate_policy(
    env: Env,
    policy: &PolicyNet,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64), AilError> {
    let (mean, std, _) = evaluate_agent(env, policy, episodes, seed)?;
    Ok((mean, std))
}

/// Same, acting greedily (argmax / mean action).
pub fn evaluate_policy_greedy(
    env: Env,
    policy: &PolicyNet,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64), AilError> {
    let (mean, std, _) = evaluate_agent(env, &GreedyPolicy { policy }, episodes, seed)?;
    Ok((mean, std))
}

/// Episode seeds are seed XOR episode-index, so a fixed seed pins the
/// whole evaluation. Returns (mean, population std, transitions used).
pub(crate) fn evaluate_agent(
    env: Env,
    agent: &dyn Agent,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64, u64), AilError> {
    if episodes == 0 {
        return Err(AilError::BadConfig("eval needs at least one episode".into()));
    }
    let cap = env.spec().max_episode_len;
    let mut returns = Vec::with_capacity(episodes);
    let mut transitions = 0u64;
    for i in 0..episodes {
        let traj = rollout(env, agent, cap, seed ^ i as u64)?;
        transitions += traj.len() as u64;
        returns.push(traj.total_true_reward());
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt(), transitions))
}

fn zeros_like(params: &[Tensor]) -> Vec<Tensor> {
    params.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

fn scale_all(grads: &mut [Tensor], c: f64) {
    for g in grads {
        g.scale_assign(c);
    }
}

/// Scales the whole gradient set down to `max_norm` when its global L2
/// norm exceeds it. `max_norm = 0` disables clipping.
pub(crate) fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        scale_all(grads, max_norm / norm);
    }
}

/// Samples `n` items uniformly with replacement.
pub(crate) fn sample_refs<'a, T: ?Sized>(
    pool: &[&'a T],
    n: usize,
    rng: &mut dyn RngCore,
) -> Vec<&'a T> {
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}
