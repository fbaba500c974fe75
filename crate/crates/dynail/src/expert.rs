//! Expert policies trained on true rewards, and the demonstration datasets
//! they produce. The trainer is the same KL-penalized likelihood-ratio
//! update the imitation baseline uses, just driven by environment reward
//! instead of a discriminator: one trainer, two reward sources.

use crate::ail::{derive_seed, evaluate_agent, kl_reinforce_step, AilError, ExpertDataset, KlController};
use crate::diffcore::{Adam, AdamConfig};
use crate::envs::{rollout, ActionKind, Env, EnvError, Trajectory, Transition};
use crate::nets::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, PolicyNet};
use crate::svg::Baseline;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const STREAM_EXPERT_INIT: u64 = 101;
pub const STREAM_EXPERT_ROLLOUT: u64 = 102;
pub const STREAM_EXPERT_EVAL: u64 = 103;
pub const STREAM_DEMO: u64 = 104;

const DEMOS_MAGIC: &[u8; 10] = b"DAIL-DEMOS";
const DEMOS_VERSION: u32 = 1;
const MAX_STR: usize = 1 << 16;
const MAX_TRAJS: usize = 1 << 20;
const MAX_LEN: usize = 1 << 20;
const MAX_DIM: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ail(#[from] AilError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("not a demo dataset (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated dataset file while reading {0}")]
    Truncated(&'static str),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("expert is below threshold (mean return {mean_return}); force to generate demos anyway")]
    SubExpert { mean_return: f64 },
    #[error("environment mismatch: {0}")]
    EnvMismatch(String),
}

/// A trained expert: the policy plus the metadata needed to trust it.
/// `mean_return` is the last evaluation (fresh seeds) before training
/// stopped; `sub_expert` is set when the budget ran out below threshold.
#[derive(Clone)]
pub struct ExpertArtifact {
    pub policy: PolicyNet,
    pub env_name: String,
    pub seed: u64,
    pub mean_return: f64,
    pub algorithm: String,
    pub sub_expert: bool,
    /// Env transitions spent training this artifact, evaluations included.
    pub transitions_used: u64,
}

/// Per-env bar an artifact must clear to count as an expert.
pub fn expert_threshold(env: Env) -> f64 {
    match env {
        Env::CartPole => 195.0,
        Env::Pendulum => -250.0,
    }
}

/// Reasonable on-one-core budget for reaching the threshold.
pub fn default_expert_budget(env: Env) -> u64 {
    match env {
        Env::CartPole => 400_000,
        Env::Pendulum => 12_000_000,
    }
}

#[derive(Clone, Debug)]
pub struct ExpertConfig {
    pub gamma: f64,
    pub batch_episodes: usize,
    /// Gradient steps reusing each batch (with the KL trust region
    /// bounding the total move).
    pub inner_steps: usize,
    pub lr: f64,
    pub kl_budget: f64,
    pub grad_clip: f64,
    pub eval_episodes: usize,
    pub threshold: f64,
    /// Total env transitions allowed, training rollouts and evaluations
    /// both counted.
    pub budget: u64,
    pub seed: u64,
    /// Pin the Gaussian log-std at this value for the whole run (ignored
    /// for discrete heads). Swing-up trains far more reliably with a
    /// fixed exploration scale: a learned one first inflates while noise
    /// is the only thing finding the upright, then that extra noise caps
    /// the return well short of the threshold.
    pub fixed_log_std: Option<f64>,
    /// Called after every iteration with (iteration, batch mean return,
    /// transitions used so far). Plain fn pointer so the config stays
    /// Copy-friendly; None keeps training silent.
    pub progress: Option<fn(u64, f64, u64)>,
}

impl ExpertConfig {
    pub fn for_env(env: Env) -> Self {
        let common = ExpertConfig {
            gamma: 0.99,
            batch_episodes: 8,
            inner_steps: 4,
            lr: 5e-3,
            kl_budget: 0.02,
            grad_clip: 10.0,
            eval_episodes: 10,
            threshold: expert_threshold(env),
            budget: default_expert_budget(env),
            seed: 0,
            fixed_log_std: None,
            progress: None,
        };
        match env {
            Env::CartPole => common,
            // Swing-up wants short effective horizons (the dense cost makes
            // long-gamma cost-to-go far noisier than CartPole's survival
            // signal), big batches, and single steps per batch; repeated
            // steps on a stale batch measurably slow it down.
            Env::Pendulum => ExpertConfig {
                gamma: 0.9,
                batch_episodes: 64,
                inner_steps: 1,
                lr: 1e-2,
                kl_budget: 0.15,
                fixed_log_std: Some(-0.3),
                ..common
            },
        }
    }

    fn validate(&self) -> Result<(), ExpertError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(ExpertError::BadConfig(format!("gamma {} not in [0, 1]", self.gamma)));
        }
        if self.batch_episodes == 0 || self.inner_steps == 0 || self.eval_episodes == 0 {
            return Err(ExpertError::BadConfig(
                "batch_episodes, inner_steps and eval_episodes must be at least 1".into(),
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(ExpertError::BadConfig(format!("bad learning rate {}", self.lr)));
        }
        if !self.kl_budget.is_finite() || self.kl_budget <= 0.0 {
            return Err(ExpertError::BadConfig(format!("bad kl budget {}", self.kl_budget)));
        }
        if !self.threshold.is_finite() {
            return Err(ExpertError::BadConfig("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Trains an expert on true reward with per-env default hyperparameters.
/// Stops at the threshold or when `budget` env transitions (training plus
/// evaluation) are spent, whichever comes first; a budget-exhausted run
/// still reports its last evaluation and is flagged `sub_expert`.
pub fn train_expert(env: Env, seed: u64, budget: u64) -> Result<ExpertArtifact, ExpertError> {
    let cfg = ExpertConfig {
        seed,
        budget,
        ..ExpertConfig::for_env(env)
    };
    train_expert_with(env, &cfg)
}

pub fn train_expert_with(env: Env, cfg: &ExpertConfig) -> Result<ExpertArtifact, ExpertError> {
    cfg.validate()?;
    let spec = env.spec();
    let mut rng_init =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EXPERT_INIT, 0));
    let mut policy = PolicyNet::init(spec.state_dim, spec.action_kind, &mut rng_init);
    let pin_log_std = match (cfg.fixed_log_std, spec.action_kind) {
        (Some(ls), ActionKind::Continuous { .. }) => Some(ls),
        _ => None,
    };
    let pin = |policy: &mut PolicyNet| {
        if let Some(ls) = pin_log_std {
            for v in policy.params_mut().last_mut().unwrap().data_mut() {
                *v = ls;
            }
        }
    };
    pin(&mut policy);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), policy.params());
    let mut kl = KlController::new(cfg.kl_budget);
    let mut used: u64 = 0;
    let mut it: u64 = 0;
    // Evaluations are expensive, so one only runs when the training batch
    // itself clears the threshold (a cheap, already-paid-for signal) or
    // the budget is gone. A failed confirmation backs off a few
    // iterations so a hovering batch mean cannot burn the budget on
    // evals.
    let mut next_confirm_it: u64 = 0;
    loop {
        if used >= cfg.budget {
            let (mean, _, spent) = evaluate(env, &policy, cfg, it)?;
            return Ok(finish(policy, spec.name, cfg, mean, used + spent));
        }
        let mut trajs = Vec::with_capacity(cfg.batch_episodes);
        let mut batch_return = 0.0;
        for k in 0..cfg.batch_episodes {
            let roll_seed = derive_seed(
                cfg.seed,
                STREAM_EXPERT_ROLLOUT,
                it * cfg.batch_episodes as u64 + k as u64,
            );
            let traj = rollout(env, &policy, spec.max_episode_len, roll_seed)?;
            used += traj.len() as u64;
            batch_return += traj.total_true_reward();
            trajs.push(traj);
        }
        batch_return /= cfg.batch_episodes as f64;
        let costs: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| t.transitions.iter().map(|tr| -tr.true_reward()).collect())
            .collect();
        kl.begin_epoch(&policy, trajs.iter().flat_map(|t| t.transitions.iter().map(|tr| tr.s.as_slice())));
        for _ in 0..cfg.inner_steps {
            if kl.is_saturated() {
                break;
            }
            kl_reinforce_step(
                &mut policy,
                &trajs,
                &costs,
                cfg.gamma,
                cfg.grad_clip,
                true,
                Baseline::LinearState,
                &mut opt,
                Some(&mut kl),
            )?;
            pin(&mut policy);
        }
        kl.end_epoch(&policy);
        it += 1;
        if let Some(report) = cfg.progress {
            report(it, batch_return, used);
        }
        if batch_return >= cfg.threshold && it >= next_confirm_it {
            let (mean, _, spent) = evaluate(env, &policy, cfg, it)?;
            used += spent;
            if mean >= cfg.threshold {
                return Ok(finish(policy, spec.name, cfg, mean, used));
            }
            next_confirm_it = it + 5;
        }
    }
}

fn evaluate(
    env: Env,
    policy: &PolicyNet,
    cfg: &ExpertConfig,
    it: u64,
) -> Result<(f64, f64, u64), ExpertError> {
    let seed = derive_seed(cfg.seed, STREAM_EXPERT_EVAL, it);
    Ok(evaluate_agent(env, policy, cfg.eval_episodes, seed)?)
}

fn finish(
    policy: PolicyNet,
    env_name: &str,
    cfg: &ExpertConfig,
    mean: f64,
    used: u64,
) -> ExpertArtifact {
    ExpertArtifact {
        policy,
        env_name: env_name.to_string(),
        seed: cfg.seed,
        mean_return: mean,
        algorithm: "kl-reinforce".to_string(),
        sub_expert: mean < cfg.threshold,
        transitions_used: used,
    }
}

/// Rolls out `n_t` demonstration episodes, each capped at
/// min(`n`, env episode cap). Per-trajectory seeds make the set
/// order-independent and reproducible. Sub-expert artifacts are refused
/// unless `force` is set.
pub fn generate_demos(
    expert: &ExpertArtifact,
    n_t: usize,
    n: usize,
    seed: u64,
    force: bool,
) -> Result<ExpertDataset, ExpertError> {
    if expert.sub_expert && !force {
        return Err(ExpertError::SubExpert {
            mean_return: expert.mean_return,
        });
    }
    if n_t == 0 || n == 0 {
        return Err(ExpertError::BadConfig("n_T and N must be at least 1".into()));
    }
    let env = Env::from_name(&expert.env_name).ok_or_else(|| {
        ExpertError::EnvMismatch(format!("unknown environment '{}'", expert.env_name))
    })?;
    let spec = env.spec();
    if expert.policy.state_dim != spec.state_dim || expert.policy.action_kind != spec.action_kind {
        return Err(ExpertError::EnvMismatch(format!(
            "policy built for state_dim {} / {:?}, environment '{}' has {} / {:?}",
            expert.policy.state_dim,
            expert.policy.action_kind,
            spec.name,
            spec.state_dim,
            spec.action_kind
        )));
    }
    let cap = n.min(spec.max_episode_len);
    let mut trajs = Vec::with_capacity(n_t);
    for i in 0..n_t {
        trajs.push(rollout(
            env,
            &expert.policy,
            cap,
            derive_seed(seed, STREAM_DEMO, i as u64),
        )?);
    }
    Ok(ExpertDataset::new(
        spec.name.to_string(),
        spec.state_dim,
        spec.action_kind.vec_len(),
        trajs,
    )?)
}

// ---- dataset files ------------------------------------------------------

pub fn save_dataset(ds: &ExpertDataset, path: &Path) -> Result<(), ExpertError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DEMOS_MAGIC)?;
    w.write_all(&DEMOS_VERSION.to_le_bytes())?;
    let name = ds.env_name().as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&(ds.state_dim() as u32).to_le_bytes())?;
    w.write_all(&(ds.action_dim() as u32).to_le_bytes())?;
    w.write_all(&action_kind_code(ds).to_le_bytes())?;
    w.write_all(&(ds.trajectories().len() as u32).to_le_bytes())?;
    for traj in ds.trajectories() {
        w.write_all(&(traj.len() as u32).to_le_bytes())?;
        for tr in &traj.transitions {
            write_f64s(&mut w, &tr.s)?;
            write_f64s(&mut w, &tr.a)?;
            write_f64s(&mut w, &tr.s_next)?;
            w.write_all(&[tr.done as u8])?;
            w.write_all(&tr.true_reward().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// 0 = discrete one-hot, 1 = continuous. Known environments answer from
/// their spec; otherwise the stored actions decide.
fn action_kind_code(ds: &ExpertDataset) -> u32 {
    match Env::from_name(ds.env_name()).map(|e| e.spec().action_kind) {
        Some(ActionKind::Discrete { .. }) => 0,
        Some(ActionKind::Continuous { .. }) => 1,
        None => {
            let one_hot = ds.trajectories().iter().all(|t| {
                t.transitions.iter().all(|tr| {
                    tr.a.iter().all(|&x| x == 0.0 || x == 1.0)
                        && tr.a.iter().sum::<f64>() == 1.0
                })
            });
            if one_hot {
                0
            } else {
                1
            }
        }
    }
}

pub fn load_dataset(path: &Path) -> Result<ExpertDataset, ExpertError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 10];
    fill(&mut r, &mut magic, "magic")?;
    if &magic != DEMOS_MAGIC {
        return Err(ExpertError::BadMagic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != DEMOS_VERSION {
        return Err(ExpertError::UnsupportedVersion(version));
    }
    let name_len = read_u32(&mut r, "env name length")? as usize;
    if name_len > MAX_STR {
        return Err(ExpertError::Inconsistent(format!("env name of {name_len} bytes")));
    }
    let mut name_buf = vec![0u8; name_len];
    fill(&mut r, &mut name_buf, "env name")?;
    let env_name = String::from_utf8(name_buf)
        .map_err(|_| ExpertError::Inconsistent("env name is not utf-8".into()))?;
    let state_dim = read_u32(&mut r, "state_dim")? as usize;
    let action_dim = read_u32(&mut r, "action_dim")? as usize;
    if state_dim == 0 || action_dim == 0 || state_dim > MAX_DIM || action_dim > MAX_DIM {
        return Err(ExpertError::Inconsistent(format!(
            "dims ({state_dim}, {action_dim}) out of range"
        )));
    }
    let kind = read_u32(&mut r, "action_kind")?;
    if kind > 1 {
        return Err(ExpertError::Inconsistent(format!("action_kind {kind} not in {{0, 1}}")));
    }
    if let Some(env) = Env::from_name(&env_name) {
        let spec = env.spec();
        let spec_kind = match spec.action_kind {
            ActionKind::Discrete { .. } => 0,
            ActionKind::Continuous { .. } => 1,
        };
        if state_dim != spec.state_dim
            || action_dim != spec.action_kind.vec_len()
            || kind != spec_kind
        {
            return Err(ExpertError::Inconsistent(format!(
                "header says ({state_dim}, {action_dim}, kind {kind}) but environment '{env_name}' \
                 has ({}, {}, kind {spec_kind})",
                spec.state_dim,
                spec.action_kind.vec_len()
            )));
        }
    }
    let n_t = read_u32(&mut r, "trajectory count")? as usize;
    if n_t == 0 || n_t > MAX_TRAJS {
        return Err(ExpertError::Inconsistent(format!("{n_t} trajectories")));
    }
    let mut trajs = Vec::with_capacity(n_t);
    for _ in 0..n_t {
        let len = read_u32(&mut r, "trajectory length")? as usize;
        if len == 0 || len > MAX_LEN {
            return Err(ExpertError::Inconsistent(format!("trajectory of length {len}")));
        }
        let mut transitions = Vec::with_capacity(len);
        for _ in 0..len {
            let s = read_f64s(&mut r, state_dim, "state")?;
            let a = read_f64s(&mut r, action_dim, "action")?;
            let s_next = read_f64s(&mut r, state_dim, "next state")?;
            let mut done_byte = [0u8; 1];
            fill(&mut r, &mut done_byte, "done flag")?;
            if done_byte[0] > 1 {
                return Err(ExpertError::Inconsistent(format!("done byte {}", done_byte[0])));
            }
            let reward = read_f64s(&mut r, 1, "reward")?[0];
            transitions.push(Transition::new(s, a, vec![], s_next, done_byte[0] == 1, reward));
        }
        trajs.push(Trajectory {
            transitions,
            origin: crate::envs::Origin::Environment,
        });
    }
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => {}
        _ => return Err(ExpertError::Inconsistent("trailing bytes after last trajectory".into())),
    }
    ExpertDataset::new(env_name, state_dim, action_dim, trajs)
        .map_err(|e| ExpertError::Inconsistent(e.to_string()))
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), ExpertError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => ExpertError::Truncated(what),
        _ => ExpertError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32, ExpertError> {
    let mut b = [0u8; 4];
    fill(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize, what: &'static str) -> Result<Vec<f64>, ExpertError> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        fill(r, &mut b, what)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<(), ExpertError> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

// ---- artifact files -----------------------------------------------------

/// Saves the artifact as a standard model checkpoint. Floats in the
/// metadata go through their bit pattern in hex so the round trip is
/// exact.
pub fn save_artifact(artifact: &ExpertArtifact, path: &Path) -> Result<(), ExpertError> {
    let (kind_code, head, lo, hi) = match artifact.policy.action_kind {
        ActionKind::Discrete { k } => (0u32, k as u32, 0.0, 0.0),
        ActionKind::Continuous { dim, lo, hi } => (1u32, dim as u32, lo, hi),
    };
    let ckpt = Checkpoint {
        env: artifact.env_name.clone(),
        arch: vec![artifact.policy.state_dim as u32, kind_code, head],
        meta: vec![
            ("kind".into(), "expert-policy".into()),
            ("algorithm".into(), artifact.algorithm.clone()),
            ("seed".into(), artifact.seed.to_string()),
            ("mean_return_bits".into(), format!("{:016x}", artifact.mean_return.to_bits())),
            ("sub_expert".into(), if artifact.sub_expert { "1" } else { "0" }.into()),
            ("transitions_used".into(), artifact.transitions_used.to_string()),
            ("action_lo_bits".into(), format!("{:016x}", lo.to_bits())),
            ("action_hi_bits".into(), format!("{:016x}", hi.to_bits())),
        ],
        tensors: artifact.policy.params().to_vec(),
    };
    save_checkpoint(path, &ckpt)?;
    Ok(())
}

pub fn load_artifact(path: &Path) -> Result<ExpertArtifact, ExpertError> {
    let ckpt = load_checkpoint(path)?;
    let &[state_dim, kind_code, head] = &ckpt.arch[..] else {
        return Err(ExpertError::Inconsistent(format!(
            "expected 3 arch entries, found {}",
            ckpt.arch.len()
        )));
    };
    let action_kind = match kind_code {
        0 => ActionKind::Discrete { k: head as usize },
        1 => ActionKind::Continuous {
            dim: head as usize,
            lo: meta_bits(&ckpt, "action_lo_bits")?,
            hi: meta_bits(&ckpt, "action_hi_bits")?,
        },
        _ => return Err(ExpertError::Inconsistent(format!("action kind code {kind_code}"))),
    };
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let mut policy = PolicyNet::init(state_dim as usize, action_kind, &mut dummy);
    if ckpt.tensors.len() != policy.params().len()
        || ckpt
            .tensors
            .iter()
            .zip(policy.params())
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(ExpertError::Inconsistent(
            "checkpoint tensors do not match the declared architecture".into(),
        ));
    }
    policy.set_params(ckpt.tensors.clone());
    let seed = ckpt
        .meta_value("seed")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ExpertError::Inconsistent("missing or bad seed".into()))?;
    let sub_expert = match ckpt.meta_value("sub_expert") {
        Some("0") => false,
        Some("1") => true,
        _ => return Err(ExpertError::Inconsistent("missing or bad sub_expert flag".into())),
    };
    let transitions_used = ckpt
        .meta_value("transitions_used")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ExpertError::Inconsistent("missing or bad transitions_used".into()))?;
    Ok(ExpertArtifact {
        policy,
        env_name: ckpt.env.clone(),
        seed,
        mean_return: meta_bits(&ckpt, "mean_return_bits")?,
        algorithm: ckpt
            .meta_value("algorithm")
            .ok_or_else(|| ExpertError::Inconsistent("missing algorithm".into()))?
            .to_string(),
        sub_expert,
        transitions_used,
    })
}

fn meta_bits(ckpt: &Checkpoint, key: &str) -> Result<f64, ExpertError> {
    let v = ckpt
        .meta_value(key)
        .ok_or_else(|| ExpertError::Inconsistent(format!("missing {key}")))?;
    let bits = u64::from_str_radix(v, 16)
        .map_err(|_| ExpertError::Inconsistent(format!("bad {key}")))?;
    Ok(f64::from_bits(bits))
}
