//! Training configuration shared by all three algorithms.

use super::AilError;

/// How the learning-phase policy gradient is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyEstimator {
    /// Pathwise gradient through the model along observed trajectories,
    /// with the residual correction keeping states pinned to observations.
    EnvReparam,
    /// Likelihood-ratio (REINFORCE) gradient with a KL trust region;
    /// model-free, used by the GAIL baseline.
    ScoreFunction,
}

#[derive(Clone, Debug)]
pub struct DynaConfig {
    pub gamma: f64,
    /// Learning-phase gradient steps per iteration (paired D and policy).
    pub m: usize,
    /// Planning-phase gradient steps per iteration; 0 disables planning.
    pub p: usize,
    /// Planning rollout horizon.
    pub t_p: usize,
    pub buffer_capacity: usize,
    /// Total discriminator batch; half policy, half expert transitions.
    pub disc_batch: usize,
    /// Windows per forward-model gradient step.
    pub fm_batch: usize,
    /// Transitions per forward-model window (truncated BPTT length).
    pub fm_window: usize,
    /// Forward-model gradient steps per iteration.
    pub fm_steps: usize,
    /// Synthetic rollouts per planning gradient step.
    pub plan_batch: usize,
    pub alpha_d: f64,
    pub alpha_pi: f64,
    pub alpha_f: f64,
    pub iterations: usize,
    pub eval_episodes: usize,
    pub env_trajs_per_iter: usize,
    /// Target per-update KL(old, new) for the score-function estimator.
    pub kl_budget: f64,
    /// Global-norm clip on policy gradients; 0 disables.
    pub grad_clip: f64,
    pub estimator: PolicyEstimator,
    pub greedy_eval: bool,
    /// Stop once mean evaluation return reaches this value.
    pub target_return: Option<f64>,
    pub seed: u64,
}

impl Default for DynaConfig {
    fn default() -> Self {
        DynaConfig {
            gamma: 0.99,
            m: 50,
            p: 50,
            t_p: 10,
            buffer_capacity: 50_000,
            disc_batch: 128,
            fm_batch: 32,
            fm_window: 8,
            fm_steps: 10,
            plan_batch: 4,
            alpha_d: 3e-4,
            alpha_pi: 1e-4,
            alpha_f: 1e-3,
            iterations: 1000,
            eval_episodes: 10,
            env_trajs_per_iter: 1,
            kl_budget: 0.01,
            grad_clip: 10.0,
            estimator: PolicyEstimator::EnvReparam,
            greedy_eval: false,
            target_return: None,
            seed: 0,
        }
    }
}

impl DynaConfig {
    pub fn validate(&self) -> Result<(), AilError> {
        let bad = |msg: String| Err(AilError::BadConfig(msg));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if self.m == 0 || self.t_p == 0 {
            return bad("m and t_p must be >= 1".into());
        }
        if self.buffer_capacity == 0 {
            return bad("buffer capacity must be positive".into());
        }
        if self.disc_batch < 2 || !self.disc_batch.is_multiple_of(2) {
            return bad("disc_batch must be even and >= 2".into());
        }
        if self.fm_batch == 0 || self.fm_window == 0 || self.plan_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        for (name, lr) in [
            ("alpha_d", self.alpha_d),
            ("alpha_pi", self.alpha_pi),
            ("alpha_f", self.alpha_f),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return bad(format!("{name} = {lr} is not a valid learning rate"));
            }
        }
        if self.iterations == 0 || self.eval_episodes == 0 || self.env_trajs_per_iter == 0 {
            return bad("iterations, eval_episodes, env_trajs_per_iter must be >= 1".into());
        }
        if !self.kl_budget.is_finite() || self.kl_budget <= 0.0 {
            return bad(format!("kl_budget {} must be positive", self.kl_budget));
        }
        if !self.grad_clip.is_finite() || self.grad_clip < 0.0 {
            return bad(format!("grad_clip {} must be >= 0", self.grad_clip));
        }
        Ok(())
    }
}
