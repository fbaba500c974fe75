//! The iteration loop shared by all three algorithms.

use super::{
    derive_seed, AilError, DynaConfig, ExpertDataset, KlController, OnPolicyBatch,
    PolicyEstimator, ReplayBuffer,
};
use super::updates::{
    discriminator_update, evaluate_agent, policy_learning_update, policy_planning_update,
    sample_refs, train_forward_model, GreedyPolicy,
};
use crate::diffcore::{Adam, AdamConfig};
use crate::envs::{rollout, Env, Transition};
use crate::nets::{DiscriminatorNet, ForwardModelNet, PolicyNet, FM_HIDDEN};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// One RNG stream per consumer of randomness (see `derive_seed`).
pub const STREAM_POLICY_INIT: u64 = 1;
pub const STREAM_DISC_INIT: u64 = 2;
pub const STREAM_FM_INIT: u64 = 3;
pub const STREAM_ENV: u64 = 4;
pub const STREAM_DISC_BATCH: u64 = 5;
pub const STREAM_FM_TRAIN: u64 = 6;
pub const STREAM_PLAN: u64 = 7;
pub const STREAM_EVAL: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    /// Alternates model-free learning on real transitions with planning on
    /// the learned model.
    Dyna,
    /// Model-based gradients along real trajectories, no planning phase.
    Mgail,
    /// Model-free: score-function policy steps, no forward model at all.
    Gail,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Dyna => "dyna-ail",
            Algo::Mgail => "mgail",
            Algo::Gail => "gail",
        }
    }

    pub fn from_name(name: &str) -> Option<Algo> {
        match name {
            "dyna-ail" | "dyna" => Some(Algo::Dyna),
            "mgail" => Some(Algo::Mgail),
            "gail" => Some(Algo::Gail),
            _ => None,
        }
    }
}

/// Per-iteration record; the counters are cumulative over the run.
/// `env_transitions` counts training rollouts only, the `_with_eval`
/// variant adds evaluation episodes, and `env_trajectories` counts both
/// kinds of episode. Losses are means of the pre-step values across the
/// iteration's gradient steps; `fm_loss` is NaN when no model exists or
/// training skipped.
#[derive(Clone, Debug)]
pub struct IterationStats {
    pub iteration: usize,
    pub env_trajectories: u64,
    pub env_transitions: u64,
    pub env_transitions_with_eval: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub d_loss: f64,
    pub fm_loss: f64,
    pub policy_cost: f64,
}

/// Owns the nets, buffer, optimizers, and counters of one training run.
/// `run_iteration` advances one full loop iteration; on error the trainer
/// is left intact so callers can checkpoint the partial state.
pub struct Trainer {
    pub algo: Algo,
    pub cfg: DynaConfig,
    pub env: Env,
    pub policy: PolicyNet,
    pub disc: DiscriminatorNet,
    pub fm: Option<ForwardModelNet>,
    pub buffer: ReplayBuffer,
    pub stats: Vec<IterationStats>,
    expert_flat: Vec<Transition>,
    opt_pi: Adam,
    opt_d: Adam,
    opt_f: Option<Adam>,
    kl: KlController,
    policy_version: u64,
    iteration: usize,
    env_trajectories: u64,
    env_transitions: u64,
    eval_transitions: u64,
}

impl Trainer {
    pub fn new(algo: Algo, mut cfg: DynaConfig, env: Env, expert: &ExpertDataset) -> Result<Self, AilError> {
        match algo {
            Algo::Dyna => {}
            Algo::Mgail => {
                cfg.p = 0;
                cfg.estimator = PolicyEstimator::EnvReparam;
            }
            Algo::Gail => {
                cfg.p = 0;
                cfg.estimator = PolicyEstimator::ScoreFunction;
            }
        }
        cfg.validate()?;
        let spec = env.spec();
        if expert.env_name() != spec.name {
            return Err(AilError::DatasetMismatch(format!(
                "dataset is for '{}', environment is '{}'",
                expert.env_name(),
                spec.name
            )));
        }
        if expert.state_dim() != spec.state_dim
            || expert.action_dim() != spec.action_kind.vec_len()
        {
            return Err(AilError::DatasetMismatch(format!(
                "dataset dims ({}, {}) vs environment ({}, {})",
                expert.state_dim(),
                expert.action_dim(),
                spec.state_dim,
                spec.action_kind.vec_len()
            )));
        }
        let action_dim = spec.action_kind.vec_len();
        let policy = PolicyNet::init(
            spec.state_dim,
            spec.action_kind,
            &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_POLICY_INIT, 0)),
        );
        let disc = DiscriminatorNet::init(
            spec.state_dim,
            action_dim,
            &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_DISC_INIT, 0)),
        );
        let fm = match algo {
            Algo::Gail => None,
            _ => Some(ForwardModelNet::init(
                spec.state_dim,
                action_dim,
                FM_HIDDEN,
                &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_FM_INIT, 0)),
            )),
        };
        if cfg.p > 0 && fm.is_none() {
            return Err(AilError::BadConfig(
                "planning requires a forward model".into(),
            ));
        }
        let opt_pi = Adam::new(AdamConfig::with_lr(cfg.alpha_pi), policy.params());
        let opt_d = Adam::new(AdamConfig::with_lr(cfg.alpha_d), disc.params());
        let opt_f = fm
            .as_ref()
            .map(|f| Adam::new(AdamConfig::with_lr(cfg.alpha_f), f.params()));
        let kl = KlController::new(cfg.kl_budget);
        Ok(Trainer {
            algo,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            expert_flat: expert.flat_transitions().into_iter().cloned().collect(),
            policy,
            disc,
            fm,
            opt_pi,
            opt_d,
            opt_f,
            kl,
            cfg,
            env,
            stats: Vec::new(),
            policy_version: 0,
            iteration: 0,
            env_trajectories: 0,
            env_transitions: 0,
            eval_transitions: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn policy_version(&self) -> u64 {
        self.policy_version
    }

    pub fn env_transitions(&self) -> u64 {
        self.env_transitions
    }

    pub fn run_iteration(&mut self) -> Result<IterationStats, AilError> {
        let cfg = self.cfg.clone();
        let it = self.iteration;
        let cap = self.env.spec().max_episode_len;

        // Sample fresh on-policy trajectories and bank them.
        let mut fresh = Vec::with_capacity(cfg.env_trajs_per_iter);
        for k in 0..cfg.env_trajs_per_iter {
            let seed = derive_seed(
                cfg.seed,
                STREAM_ENV,
                (it * cfg.env_trajs_per_iter + k) as u64,
            );
            let traj = rollout(self.env, &self.policy, cap, seed)?;
            self.env_trajectories += 1;
            self.env_transitions += traj.len() as u64;
            self.buffer.push_trajectory(&traj)?;
            fresh.push(traj);
        }
        let batch = OnPolicyBatch {
            trajs: fresh,
            version: self.policy_version,
        };

        // m paired discriminator / policy learning steps on the fresh batch.
        let flat: Vec<&Transition> = batch.trajs.iter().flat_map(|t| &t.transitions).collect();
        let expert_refs: Vec<&Transition> = self.expert_flat.iter().collect();
        let mut rng_b =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_DISC_BATCH, it as u64));
        if cfg.estimator == PolicyEstimator::ScoreFunction {
            self.kl.begin_epoch(
                &self.policy,
                batch
                    .trajs
                    .iter()
                    .flat_map(|t| &t.transitions)
                    .map(|tr| tr.s.as_slice()),
            );
        }
        let half = cfg.disc_batch / 2;
        let (mut d_sum, mut c_sum, mut c_n) = (0.0, 0.0, 0u32);
        for _ in 0..cfg.m {
            let bp = sample_refs(&flat, half, &mut rng_b);
            let be = sample_refs(&expert_refs, half, &mut rng_b);
            d_sum += discriminator_update(&mut self.disc, &bp, &be, &mut self.opt_d)?;
            let skip_policy =
                cfg.estimator == PolicyEstimator::ScoreFunction && self.kl.is_saturated();
            if !skip_policy {
                let kl_opt =
                    (cfg.estimator == PolicyEstimator::ScoreFunction).then_some(&mut self.kl);
                c_sum += policy_learning_update(
                    &mut self.policy,
                    &batch,
                    self.policy_version,
                    self.fm.as_ref(),
                    &self.disc,
                    &cfg,
                    &mut self.opt_pi,
                    kl_opt,
                )?;
                c_n += 1;
            }
        }
        if cfg.estimator == PolicyEstimator::ScoreFunction {
            self.kl.end_epoch(&self.policy);
        }

        // Fit the forward model on buffered windows.
        let fm_loss = match (&mut self.fm, &mut self.opt_f) {
            (Some(fm), Some(opt)) => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_FM_TRAIN, it as u64));
                train_forward_model(fm, &self.buffer, &cfg, opt, &mut rng)?.unwrap_or(f64::NAN)
            }
            _ => f64::NAN,
        };

        // Planning: synthetic rollouts only; the env counters must not move.
        let env_before = (self.env_trajectories, self.env_transitions);
        if cfg.p > 0 {
            let fm = self.fm.as_ref().expect("validated at construction");
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_PLAN, it as u64));
            for _ in 0..cfg.p {
                let starts = self.buffer.sample_start_states(cfg.plan_batch, &mut rng);
                policy_planning_update(
                    &mut self.policy,
                    fm,
                    &self.disc,
                    &starts,
                    &cfg,
                    &mut self.opt_pi,
                    &mut rng,
                )?;
            }
        }
        assert_eq!(
            env_before,
            (self.env_trajectories, self.env_transitions),
            "planning consumed environment interactions"
        );

        // Evaluate on true reward (reporting only).
        let eval_seed = derive_seed(cfg.seed, STREAM_EVAL, it as u64);
        let (mean_return, std_return, eval_tr) = if cfg.greedy_eval {
            evaluate_agent(
                self.env,
                &GreedyPolicy {
                    policy: &self.policy,
                },
                cfg.eval_episodes,
                eval_seed,
            )?
        } else {
            evaluate_agent(self.env, &self.policy, cfg.eval_episodes, eval_seed)?
        };
        self.env_trajectories += cfg.eval_episodes as u64;
        self.eval_transitions += eval_tr;

        let stats = IterationStats {
            iteration: it,
            env_trajectories: self.env_trajectories,
            env_transitions: self.env_transitions,
            env_transitions_with_eval: self.env_transitions + self.eval_transitions,
            mean_return,
            std_return,
            d_loss: d_sum / cfg.m as f64,
            fm_loss,
            policy_cost: c_sum / c_n.max(1) as f64,
        };
        self.stats.push(stats.clone());
        self.policy_version += 1;
        self.iteration += 1;
        Ok(stats)
    }

    /// Runs until `cfg.iterations` or until `cfg.target_return` is met.
    pub fn run(&mut self) -> Result<(), AilError> {
        while self.iteration < self.cfg.iterations {
            let st = self.run_iteration()?;
            if let Some(target) = self.cfg.target_return {
                if st.mean_return >= target {
                    break;
                }
            }
        }
        Ok(())
    }
}

pub fn dyna_ail_train(
    cfg: DynaConfig,
    env: Env,
    expert: &ExpertDataset,
) -> Result<Vec<IterationStats>, AilError> {
    let mut t = Trainer::new(Algo::Dyna, cfg, env, expert)?;
    t.run()?;
    Ok(t.stats)
}

pub fn mgail_train(
    cfg: DynaConfig,
    env: Env,
    expert: &ExpertDataset,
) -> Result<Vec<IterationStats>, AilError> {
    let mut t = Trainer::new(Algo::Mgail, cfg, env, expert)?;
    t.run()?;
    Ok(t.stats)
}

pub fn gail_train(
    cfg: DynaConfig,
    env: Env,
    expert: &ExpertDataset,
) -> Result<Vec<IterationStats>, AilError> {
    let mut t = Trainer::new(Algo::Gail, cfg, env, expert)?;
    t.run()?;
    Ok(t.stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mediocre demonstrations are fine for loop tests; only format and
    /// dims matter here.
    fn uniform_expert(env: Env, n: usize) -> ExpertDataset {
        let spec = env.spec();
        let mut policy = PolicyNet::init(
            spec.state_dim,
            spec.action_kind,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        for p in policy.params_mut() {
            p.scale_assign(0.0);
        }
        let trajs = (0..n)
            .map(|i| rollout(env, &policy, spec.max_episode_len, 1000 + i as u64).unwrap())
            .collect();
        ExpertDataset::new(
            spec.name.to_string(),
            spec.state_dim,
            spec.action_kind.vec_len(),
            trajs,
        )
        .unwrap()
    }

    fn tiny_cfg(seed: u64) -> DynaConfig {
        DynaConfig {
            m: 2,
            p: 1,
            t_p: 2,
            disc_batch: 8,
            fm_batch: 4,
            fm_window: 3,
            fm_steps: 2,
            plan_batch: 2,
            eval_episodes: 2,
            iterations: 2,
            seed,
            ..DynaConfig::default()
        }
    }

    fn stats_bits(s: &IterationStats) -> Vec<u64> {
        vec![
            s.iteration as u64,
            s.env_trajectories,
            s.env_transitions,
            s.env_transitions_with_eval,
            s.mean_return.to_bits(),
            s.std_return.to_bits(),
            s.d_loss.to_bits(),
            s.fm_loss.to_bits(),
            s.policy_cost.to_bits(),
        ]
    }

    #[test]
    fn fixed_seed_reproduces_bitwise() {
        let expert = uniform_expert(Env::CartPole, 3);
        let a = dyna_ail_train(tiny_cfg(5), Env::CartPole, &expert).unwrap();
        let b = dyna_ail_train(tiny_cfg(5), Env::CartPole, &expert).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(stats_bits(x), stats_bits(y));
        }
        let c = dyna_ail_train(tiny_cfg(6), Env::CartPole, &expert).unwrap();
        assert_ne!(stats_bits(&a[0]), stats_bits(&c[0]));
    }

    #[test]
    fn mgail_equals_dyna_without_planning() {
        let expert = uniform_expert(Env::CartPole, 3);
        let mut cfg = tiny_cfg(7);
        cfg.p = 0;
        let a = dyna_ail_train(cfg.clone(), Env::CartPole, &expert).unwrap();
        let mut cfg_m = tiny_cfg(7);
        cfg_m.p = 99; // mgail_train forces p = 0 regardless
        let b = mgail_train(cfg_m, Env::CartPole, &expert).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(stats_bits(x), stats_bits(y));
        }
    }

    #[test]
    fn gail_equals_dyna_without_planning_and_with_score_function() {
        let expert = uniform_expert(Env::CartPole, 3);
        let mut cfg = tiny_cfg(9);
        cfg.p = 0;
        cfg.estimator = PolicyEstimator::ScoreFunction;
        let mut dyna = Trainer::new(Algo::Dyna, cfg.clone(), Env::CartPole, &expert).unwrap();
        dyna.run().unwrap();
        let mut gail = Trainer::new(Algo::Gail, tiny_cfg(9), Env::CartPole, &expert).unwrap();
        gail.run().unwrap();
        // Same trajectories: the replay buffers match transition for
        // transition, and every stat except the model loss matches.
        assert_eq!(dyna.buffer.len(), gail.buffer.len());
        for i in 0..dyna.buffer.len() {
            let (a, b) = (dyna.buffer.get(i), gail.buffer.get(i));
            assert_eq!(a.transition.s, b.transition.s);
            assert_eq!(a.transition.a, b.transition.a);
            assert_eq!(a.transition.s_next, b.transition.s_next);
        }
        for (x, y) in dyna.stats.iter().zip(&gail.stats) {
            assert_eq!(x.mean_return.to_bits(), y.mean_return.to_bits());
            assert_eq!(x.d_loss.to_bits(), y.d_loss.to_bits());
            assert_eq!(x.policy_cost.to_bits(), y.policy_cost.to_bits());
            assert_eq!(x.env_transitions, y.env_transitions);
            assert!(x.fm_loss.is_finite() && y.fm_loss.is_nan());
        }
    }

    #[test]
    fn counters_are_monotone_and_account_for_eval() {
        let expert = uniform_expert(Env::CartPole, 3);
        let cfg = tiny_cfg(11);
        let stats = dyna_ail_train(cfg.clone(), Env::CartPole, &expert).unwrap();
        for w in stats.windows(2) {
            assert!(w[1].env_trajectories > w[0].env_trajectories);
            assert!(w[1].env_transitions >= w[0].env_transitions);
            assert!(w[1].env_transitions_with_eval >= w[0].env_transitions_with_eval);
        }
        for (i, st) in stats.iter().enumerate() {
            let iters = (i + 1) as u64;
            assert_eq!(
                st.env_trajectories,
                iters * (cfg.env_trajs_per_iter + cfg.eval_episodes) as u64
            );
            assert!(st.env_transitions_with_eval > st.env_transitions);
        }
    }

    #[test]
    fn corrupted_expert_rewards_change_nothing() {
        let expert = uniform_expert(Env::CartPole, 3);
        let corrupted = ExpertDataset::new(
            expert.env_name().to_string(),
            expert.state_dim(),
            expert.action_dim(),
            expert
                .trajectories()
                .iter()
                .map(|t| crate::envs::Trajectory {
                    transitions: t
                        .transitions
                        .iter()
                        .map(|tr| {
                            Transition::new(
                                tr.s.clone(),
                                tr.a.clone(),
                                tr.noise.clone(),
                                tr.s_next.clone(),
                                tr.done,
                                12345.678,
                            )
                        })
                        .collect(),
                    origin: t.origin,
                })
                .collect(),
        )
        .unwrap();
        let a = dyna_ail_train(tiny_cfg(13), Env::CartPole, &expert).unwrap();
        let b = dyna_ail_train(tiny_cfg(13), Env::CartPole, &corrupted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(stats_bits(x), stats_bits(y));
        }
    }

    #[test]
    fn target_return_stops_early() {
        let expert = uniform_expert(Env::CartPole, 3);
        let mut cfg = tiny_cfg(15);
        cfg.iterations = 50;
        cfg.target_return = Some(f64::NEG_INFINITY);
        let stats = dyna_ail_train(cfg, Env::CartPole, &expert).unwrap();
        assert_eq!(stats.len(), 1);
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let expert = uniform_expert(Env::Pendulum, 2);
        let Err(err) = Trainer::new(Algo::Dyna, tiny_cfg(17), Env::CartPole, &expert) else {
            panic!("mismatched dataset was accepted");
        };
        assert!(matches!(err, AilError::DatasetMismatch(_)));
    }

    #[test]
    fn pendulum_loop_runs_all_algorithms() {
        let expert = uniform_expert(Env::Pendulum, 2);
        let mut cfg = tiny_cfg(19);
        cfg.iterations = 1;
        for algo in [Algo::Dyna, Algo::Mgail, Algo::Gail] {
            let mut t = Trainer::new(algo, cfg.clone(), Env::Pendulum, &expert).unwrap();
            t.run().unwrap();
            assert_eq!(t.stats.len(), 1);
            assert!(t.stats[0].mean_return.is_finite());
        }
    }
}
