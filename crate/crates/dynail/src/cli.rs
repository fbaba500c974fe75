//! Command-line front end: experiment orchestration, run manifests, CSV
//! export of learning curves, and a small SVG plotter.
//!
//! Layering rule: all science lives in `curve.csv` files (fixed schema,
//! see [`CURVE_HEADER`]); the plot command is a pure consumer of those
//! files, so any external tool can re-plot a run from its directory.
//!
//! Exit codes follow the usual convention: 0 success, 1 runtime failure,
//! 2 usage or validation error. Config precedence for imitation runs is
//! built-in defaults, then a `key = value` config file, then flags; the
//! resolved result is written into the run manifest so defaults stay
//! auditable per run.

use crate::ail::{derive_seed, Algo, DynaConfig, IterationStats, PolicyEstimator, Trainer};
use crate::envs::Env;
use crate::expert::{
    default_expert_budget, expert_threshold, generate_demos, load_artifact, load_dataset,
    save_artifact, save_dataset, train_expert, ExpertError,
};
use crate::nets::{save_checkpoint, Checkpoint};
use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Default root for relative output paths.
pub const OUT_DIR_ENV: &str = "DAIL_OUT_DIR";

/// A command failure carrying its process exit code: 1 for runtime
/// failures, 2 for usage and validation errors.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

fn usage_err(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

fn run_err(message: impl Into<String>) -> CliError {
    CliError {
        code: 1,
        message: message.into(),
    }
}

impl From<ExpertError> for CliError {
    fn from(e: ExpertError) -> Self {
        run_err(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        run_err(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "dail",
    about = "Adversarial imitation learning with model-based planning on desk-scale control tasks",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an expert policy on true reward and save the artifact.
    TrainExpert(TrainExpertArgs),
    /// Roll demonstration trajectories from a saved expert artifact.
    GenDemos(GenDemosArgs),
    /// Run one imitation job; writes curve.csv, manifest, and checkpoint.
    Imitate(ImitateArgs),
    /// Run the planning-horizon grid and summarize sample efficiency.
    Ablate(AblateArgs),
    /// Render curve.csv files into a single SVG chart.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct TrainExpertArgs {
    /// Environment name: cartpole or pendulum.
    #[arg(long)]
    pub env: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output path for the expert artifact.
    #[arg(long)]
    pub out: PathBuf,
    /// Env-transition budget; defaults to a per-environment value.
    #[arg(long)]
    pub budget: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenDemosArgs {
    /// Path to a saved expert artifact.
    #[arg(long)]
    pub expert: PathBuf,
    /// Number of demonstration trajectories.
    #[arg(long, default_value_t = 50)]
    pub n_traj: usize,
    /// Per-trajectory step cap (the environment's own cap still applies).
    #[arg(long, default_value_t = 1000)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output path for the dataset.
    #[arg(long)]
    pub out: PathBuf,
    /// Allow demos from an artifact flagged below the expert threshold.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigOverrides {
    /// Config file with `key = value` lines (overridden by flags).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Planning horizon T_p (default 10).
    #[arg(long)]
    pub tp: Option<usize>,
    /// Learning-phase gradient steps per iteration (default 50).
    #[arg(long)]
    pub m: Option<usize>,
    /// Planning-phase gradient steps per iteration (default 50).
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha_pi: Option<f64>,
    #[arg(long)]
    pub alpha_d: Option<f64>,
    #[arg(long)]
    pub alpha_f: Option<f64>,
    #[arg(long)]
    pub kl_budget: Option<f64>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub env_trajs_per_iter: Option<usize>,
    /// Stop a run once mean evaluation return reaches this value.
    #[arg(long)]
    pub target_return: Option<f64>,
    /// Evaluate with the distribution mode instead of sampling.
    #[arg(long)]
    pub greedy_eval: bool,
}

#[derive(Args, Debug)]
pub struct ImitateArgs {
    /// Algorithm: dyna, mgail, or gail.
    #[arg(long)]
    pub algo: String,
    /// Path to a demonstration dataset.
    #[arg(long)]
    pub demos: PathBuf,
    /// Environment name; must match the dataset when given.
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory for curve.csv, manifest, and checkpoint.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    /// Print progress every N iterations (0 silences progress).
    #[arg(long, default_value_t = 10)]
    pub progress_every: usize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Algorithm for every cell (default dyna).
    #[arg(long, default_value = "dyna")]
    pub algo: String,
    /// Path to a demonstration dataset.
    #[arg(long)]
    pub demos: PathBuf,
    /// Comma-separated planning horizons.
    #[arg(long, default_value = "5,10,50")]
    pub tp_list: String,
    /// Seed indices: a comma list (0,1,2) or inclusive range (0..4).
    #[arg(long, default_value = "0..4")]
    pub seeds: String,
    /// Base seed; each cell derives its seed from (base, T_p, index).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid output root; each cell writes tp<T>/seed<I>/.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Return level used for the trajectories-to-threshold summary;
    /// defaults to the environment's expert threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Parallel cells.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// curve.csv files to plot.
    #[arg(required = true)]
    pub csvs: Vec<PathBuf>,
    /// Output SVG path.
    #[arg(long, default_value = "curves.svg")]
    pub out: PathBuf,
    /// Comma-separated series labels, one per CSV; CSVs sharing a label
    /// are aggregated into a mean line with a +-1 std band.
    #[arg(long)]
    pub labels: Option<String>,
    #[arg(long)]
    pub title: Option<String>,
}

/// Parses argv and runs the selected command, returning the process exit
/// code. Kept separate from `main` so tests can drive it directly.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::TrainExpert(a) => cmd_train_expert(a),
        Command::GenDemos(a) => cmd_gen_demos(a),
        Command::Imitate(a) => cmd_imitate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

fn parse_env(name: &str) -> Result<Env, CliError> {
    Env::from_name(name).ok_or_else(|| {
        usage_err(format!(
            "unknown environment '{name}' (expected 'cartpole' or 'pendulum')"
        ))
    })
}

fn parse_algo(name: &str) -> Result<Algo, CliError> {
    Algo::from_name(name).ok_or_else(|| {
        usage_err(format!(
            "unknown algorithm '{name}' (expected 'dyna', 'mgail', or 'gail')"
        ))
    })
}

/// Relative output paths are rooted at `$DAIL_OUT_DIR` when it is set.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn ensure_parent_dir(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| run_err(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Config resolution: defaults < file < flags.

/// Applies one `key = value` pair onto the config. Key names mirror the
/// config struct fields; `tp` and `iters` aliases match the flag names.
fn apply_config_kv(cfg: &mut DynaConfig, key: &str, value: &str) -> Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
        value
            .parse()
            .map_err(|_| format!("bad value '{value}' for {key}"))
    }
    match key {
        "gamma" => cfg.gamma = num(key, value)?,
        "m" => cfg.m = num(key, value)?,
        "p" => cfg.p = num(key, value)?,
        "t_p" | "tp" => cfg.t_p = num(key, value)?,
        "buffer_capacity" => cfg.buffer_capacity = num(key, value)?,
        "disc_batch" => cfg.disc_batch = num(key, value)?,
        "fm_batch" => cfg.fm_batch = num(key, value)?,
        "fm_window" => cfg.fm_window = num(key, value)?,
        "fm_steps" => cfg.fm_steps = num(key, value)?,
        "plan_batch" => cfg.plan_batch = num(key, value)?,
        "alpha_d" => cfg.alpha_d = num(key, value)?,
        "alpha_pi" => cfg.alpha_pi = num(key, value)?,
        "alpha_f" => cfg.alpha_f = num(key, value)?,
        "iterations" | "iters" => cfg.iterations = num(key, value)?,
        "eval_episodes" => cfg.eval_episodes = num(key, value)?,
        "env_trajs_per_iter" => cfg.env_trajs_per_iter = num(key, value)?,
        "kl_budget" => cfg.kl_budget = num(key, value)?,
        "grad_clip" => cfg.grad_clip = num(key, value)?,
        "greedy_eval" => cfg.greedy_eval = num(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        "estimator" => {
            cfg.estimator = match value {
                "env-reparam" => PolicyEstimator::EnvReparam,
                "score-function" => PolicyEstimator::ScoreFunction,
                _ => {
                    return Err(format!(
                        "bad value '{value}' for estimator (env-reparam or score-function)"
                    ))
                }
            }
        }
        "target_return" => {
            cfg.target_return = if value == "none" {
                None
            } else {
                Some(num(key, value)?)
            }
        }
        _ => return Err(format!("unknown config key '{key}'")),
    }
    Ok(())
}

/// Reads a `key = value` config file. `#` starts a comment; blank lines
/// are skipped. Errors name the offending line.
fn apply_config_file(cfg: &mut DynaConfig, path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage_err(format!("cannot read config {}: {e}", path.display())))?;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(usage_err(format!(
                "{}:{}: expected 'key = value', got '{raw}'",
                path.display(),
                idx + 1
            )));
        };
        apply_config_kv(cfg, key.trim(), value.trim())
            .map_err(|e| usage_err(format!("{}:{}: {e}", path.display(), idx + 1)))?;
    }
    Ok(())
}

/// Builds the resolved config for an imitation run: struct defaults, then
/// the config file, then explicit flags, then the run's own seed.
fn resolve_config(ov: &ConfigOverrides, seed: u64) -> Result<DynaConfig, CliError> {
    let mut cfg = DynaConfig::default();
    if let Some(path) = &ov.config {
        apply_config_file(&mut cfg, path)?;
    }
    if let Some(v) = ov.tp {
        cfg.t_p = v;
    }
    if let Some(v) = ov.m {
        cfg.m = v;
    }
    if let Some(v) = ov.p {
        cfg.p = v;
    }
    if let Some(v) = ov.iters {
        cfg.iterations = v;
    }
    if let Some(v) = ov.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = ov.alpha_pi {
        cfg.alpha_pi = v;
    }
    if let Some(v) = ov.alpha_d {
        cfg.alpha_d = v;
    }
    if let Some(v) = ov.alpha_f {
        cfg.alpha_f = v;
    }
    if let Some(v) = ov.kl_budget {
        cfg.kl_budget = v;
    }
    if let Some(v) = ov.eval_episodes {
        cfg.eval_episodes = v;
    }
    if let Some(v) = ov.env_trajs_per_iter {
        cfg.env_trajs_per_iter = v;
    }
    if let Some(v) = ov.target_return {
        cfg.target_return = Some(v);
    }
    if ov.greedy_eval {
        cfg.greedy_eval = true;
    }
    cfg.seed = seed;
    cfg.validate()
        .map_err(|e| usage_err(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

// ---------------------------------------------------------------------
// Run manifests.

/// The reproducibility record written into every run directory: the fully
/// resolved configuration, a content hash over it, and timestamps. The
/// manifest is written after the run completes, so its presence marks a
/// finished cell for grid resume.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub algo: String,
    pub env: String,
    pub demos: String,
    pub out_dir: String,
    pub config_hash: String,
    pub created: String,
    pub finished: String,
    pub cfg: DynaConfig,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Canonical `key = value` rendering of a resolved config; this exact
/// text feeds the content hash, so field order is fixed.
pub fn config_text(algo: &str, env: &str, cfg: &DynaConfig) -> String {
    let estimator = match cfg.estimator {
        PolicyEstimator::EnvReparam => "env-reparam",
        PolicyEstimator::ScoreFunction => "score-function",
    };
    let target = match cfg.target_return {
        Some(v) => v.to_string(),
        None => "none".into(),
    };
    let mut s = String::new();
    let _ = writeln!(s, "algo = {algo}");
    let _ = writeln!(s, "env = {env}");
    let _ = writeln!(s, "gamma = {}", cfg.gamma);
    let _ = writeln!(s, "m = {}", cfg.m);
    let _ = writeln!(s, "p = {}", cfg.p);
    let _ = writeln!(s, "t_p = {}", cfg.t_p);
    let _ = writeln!(s, "buffer_capacity = {}", cfg.buffer_capacity);
    let _ = writeln!(s, "disc_batch = {}", cfg.disc_batch);
    let _ = writeln!(s, "fm_batch = {}", cfg.fm_batch);
    let _ = writeln!(s, "fm_window = {}", cfg.fm_window);
    let _ = writeln!(s, "fm_steps = {}", cfg.fm_steps);
    let _ = writeln!(s, "plan_batch = {}", cfg.plan_batch);
    let _ = writeln!(s, "alpha_d = {}", cfg.alpha_d);
    let _ = writeln!(s, "alpha_pi = {}", cfg.alpha_pi);
    let _ = writeln!(s, "alpha_f = {}", cfg.alpha_f);
    let _ = writeln!(s, "iterations = {}", cfg.iterations);
    let _ = writeln!(s, "eval_episodes = {}", cfg.eval_episodes);
    let _ = writeln!(s, "env_trajs_per_iter = {}", cfg.env_trajs_per_iter);
    let _ = writeln!(s, "kl_budget = {}", cfg.kl_budget);
    let _ = writeln!(s, "grad_clip = {}", cfg.grad_clip);
    let _ = writeln!(s, "estimator = {estimator}");
    let _ = writeln!(s, "greedy_eval = {}", cfg.greedy_eval);
    let _ = writeln!(s, "target_return = {target}");
    let _ = writeln!(s, "seed = {}", cfg.seed);
    s
}

pub fn config_hash(algo: &str, env: &str, cfg: &DynaConfig) -> String {
    let mut h = Sha256::new();
    h.update(config_text(algo, env, cfg).as_bytes());
    let digest = h.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

impl RunManifest {
    pub fn new(
        algo: &str,
        env: &str,
        demos: &Path,
        out_dir: &Path,
        cfg: &DynaConfig,
        created: String,
    ) -> Self {
        RunManifest {
            algo: algo.to_string(),
            env: env.to_string(),
            demos: demos.display().to_string(),
            out_dir: out_dir.display().to_string(),
            config_hash: config_hash(algo, env, cfg),
            created,
            finished: now_stamp(),
            cfg: cfg.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# run manifest");
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let _ = writeln!(s, "demos = {}", self.demos);
        let _ = writeln!(s, "out_dir = {}", self.out_dir);
        let _ = writeln!(s, "created = {}", self.created);
        let _ = writeln!(s, "finished = {}", self.finished);
        s.push_str(&config_text(&self.algo, &self.env, &self.cfg));
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::write(dir.join(MANIFEST_FILE), self.to_text())
            .map_err(|e| run_err(format!("cannot write manifest: {e}")))?;
        Ok(())
    }
}

fn now_stamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

// ---------------------------------------------------------------------
// curve.csv writing and reading.

pub const CURVE_HEADER: &str = "iteration,env_trajectories,env_transitions,\
env_transitions_with_eval,mean_return,std_return,d_loss,fm_loss,policy_cost";

pub fn write_curve_csv(path: &Path, stats: &[IterationStats]) -> Result<(), CliError> {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for st in stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            st.iteration,
            st.env_trajectories,
            st.env_transitions,
            st.env_transitions_with_eval,
            st.mean_return,
            st.std_return,
            st.d_loss,
            st.fm_loss,
            st.policy_cost
        );
    }
    fs::write(path, out).map_err(|e| run_err(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// One parsed curve.csv row; fields mirror the fixed header.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub iteration: u64,
    pub env_trajectories: f64,
    pub env_transitions: f64,
    pub env_transitions_with_eval: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub d_loss: f64,
    pub fm_loss: f64,
    pub policy_cost: f64,
}

/// Reads and validates a curve.csv: exact header, 9 numeric columns, and
/// non-decreasing environment-budget columns. Errors name the file and
/// line so a corrupt run is easy to locate.
pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| run_err(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(run_err(format!("{}:1: empty file", path.display())));
    };
    if header.trim_end() != CURVE_HEADER {
        return Err(run_err(format!(
            "{}:1: unexpected header '{header}'",
            path.display()
        )));
    }
    let mut points: Vec<CurvePoint> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(run_err(format!(
                "{}:{lineno}: expected 9 columns, found {}",
                path.display(),
                fields.len()
            )));
        }
        let mut nums = [0.0f64; 9];
        for (i, f) in fields.iter().enumerate() {
            nums[i] = f.trim().parse().map_err(|_| {
                run_err(format!(
                    "{}:{lineno}: column {} is not a number: '{f}'",
                    path.display(),
                    i + 1
                ))
            })?;
        }
        let point = CurvePoint {
            iteration: nums[0] as u64,
            env_trajectories: nums[1],
            env_transitions: nums[2],
            env_transitions_with_eval: nums[3],
            mean_return: nums[4],
            std_return: nums[5],
            d_loss: nums[6],
            fm_loss: nums[7],
            policy_cost: nums[8],
        };
        if let Some(prev) = points.last() {
            let budgets = [
                ("env_trajectories", prev.env_trajectories, point.env_trajectories),
                ("env_transitions", prev.env_transitions, point.env_transitions),
                (
                    "env_transitions_with_eval",
                    prev.env_transitions_with_eval,
                    point.env_transitions_with_eval,
                ),
            ];
            for (name, a, b) in budgets {
                if b < a {
                    return Err(run_err(format!(
                        "{}:{lineno}: {name} decreases ({a} -> {b}); corrupt run",
                        path.display()
                    )));
                }
            }
        }
        points.push(point);
    }
    if points.is_empty() {
        return Err(run_err(format!("{}:2: no data rows", path.display())));
    }
    Ok(points)
}

// ---------------------------------------------------------------------
// Commands.

pub fn cmd_train_expert(args: &TrainExpertArgs) -> Result<(), CliError> {
    let env = parse_env(&args.env)?;
    let out = resolve_out(&args.out);
    ensure_parent_dir(&out)?;
    let budget = args.budget.unwrap_or_else(|| default_expert_budget(env));
    println!(
        "training {} expert, seed {}, budget {} transitions",
        env.spec().name,
        args.seed,
        budget
    );
    let artifact = train_expert(env, args.seed, budget)?;
    save_artifact(&artifact, &out)?;
    println!(
        "final return {:.2} (threshold {}), {} transitions used{}",
        artifact.mean_return,
        expert_threshold(env),
        artifact.transitions_used,
        if artifact.sub_expert {
            "; SUB-EXPERT: threshold not reached"
        } else {
            ""
        }
    );
    println!("artifact written to {}", out.display());
    Ok(())
}

pub fn cmd_gen_demos(args: &GenDemosArgs) -> Result<(), CliError> {
    if args.n_traj == 0 || args.max_len == 0 {
        return Err(usage_err("--n-traj and --max-len must be at least 1"));
    }
    let artifact = load_artifact(&args.expert)?;
    let out = resolve_out(&args.out);
    ensure_parent_dir(&out)?;
    let ds = match generate_demos(&artifact, args.n_traj, args.max_len, args.seed, args.force) {
        Ok(ds) => ds,
        Err(e @ ExpertError::SubExpert { .. }) => {
            return Err(run_err(format!("{e}; pass --force to generate anyway")))
        }
        Err(e) => return Err(e.into()),
    };
    save_dataset(&ds, &out)?;
    let mean = ds
        .trajectories()
        .iter()
        .map(|t| t.total_true_reward())
        .sum::<f64>()
        / ds.trajectories().len() as f64;
    println!(
        "wrote {} trajectories ({} transitions, mean return {:.2}) to {}",
        ds.trajectories().len(),
        ds.total_transitions(),
        mean,
        out.display()
    );
    Ok(())
}

/// Shared body of `imitate` and one ablation cell; returns the stats the
/// caller may summarize further.
fn run_imitation(
    algo: Algo,
    demos_path: &Path,
    env_flag: Option<&str>,
    cfg: &DynaConfig,
    out_dir: &Path,
    progress_every: usize,
    label: &str,
) -> Result<Vec<IterationStats>, CliError> {
    let created = now_stamp();
    let dataset = load_dataset(demos_path)?;
    let env = match env_flag {
        Some(name) => {
            let env = parse_env(name)?;
            if env.spec().name != dataset.env_name() {
                return Err(run_err(format!(
                    "demos are for '{}' but --env is '{}'",
                    dataset.env_name(),
                    env.spec().name
                )));
            }
            env
        }
        None => parse_env(dataset.env_name())
            .map_err(|_| run_err(format!("dataset names unknown env '{}'", dataset.env_name())))?,
    };
    fs::create_dir_all(out_dir)
        .map_err(|e| run_err(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut trainer = Trainer::new(algo, cfg.clone(), env, &dataset)
        .map_err(|e| run_err(format!("cannot start training: {e}")))?;
    // Trainer::new folds the algorithm's constraints (for example p = 0
    // for the baselines) into its copy; mirror that in the manifest.
    let resolved = trainer.cfg.clone();
    while trainer.iteration() < resolved.iterations {
        let st = trainer
            .run_iteration()
            .map_err(|e| run_err(format!("iteration {} failed: {e}", trainer.iteration())))?;
        if progress_every > 0 && (st.iteration % progress_every == 0) {
            println!(
                "{label}it {:>4}  return {:>8.2} +- {:<7.2} trajs {:>6}  d_loss {:.3}  fm_loss {:.4}",
                st.iteration,
                st.mean_return,
                st.std_return,
                st.env_trajectories,
                st.d_loss,
                st.fm_loss
            );
        }
        if let Some(target) = resolved.target_return {
            if st.mean_return >= target {
                break;
            }
        }
    }
    write_curve_csv(&out_dir.join("curve.csv"), &trainer.stats)?;
    let spec = env.spec();
    let ckpt = Checkpoint {
        env: spec.name.to_string(),
        arch: vec![spec.state_dim as u32, spec.action_kind.vec_len() as u32],
        meta: vec![
            ("kind".into(), "imitation-policy".into()),
            ("algo".into(), algo.name().into()),
            ("seed".into(), resolved.seed.to_string()),
            ("iterations".into(), trainer.iteration().to_string()),
        ],
        tensors: trainer.policy.params().to_vec(),
    };
    save_checkpoint(&out_dir.join("policy.dail"), &ckpt)
        .map_err(|e| run_err(format!("cannot write checkpoint: {e}")))?;
    RunManifest::new(algo.name(), spec.name, demos_path, out_dir, &resolved, created)
        .write(out_dir)?;
    Ok(trainer.stats)
}

pub fn cmd_imitate(args: &ImitateArgs) -> Result<(), CliError> {
    let algo = parse_algo(&args.algo)?;
    if algo != Algo::Dyna && args.overrides.p.is_some() {
        eprintln!(
            "warning: --p only affects the planning phase; {} ignores it",
            algo.name()
        );
    }
    if args.overrides.tp == Some(0) {
        return Err(usage_err("--tp must be at least 1"));
    }
    let cfg = resolve_config(&args.overrides, args.seed)?;
    let out_dir = resolve_out(&args.out_dir);
    let stats = run_imitation(
        algo,
        &args.demos,
        args.env.as_deref(),
        &cfg,
        &out_dir,
        args.progress_every,
        "",
    )?;
    let last = stats.last().expect("at least one iteration");
    println!(
        "done: {} iterations, final return {:.2} +- {:.2}, {} env trajectories",
        stats.len(),
        last.mean_return,
        last.std_return,
        last.env_trajectories
    );
    println!("run directory: {}", out_dir.display());
    Ok(())
}

/// First env-trajectory count at which the evaluation return reaches the
/// threshold; infinity when the curve never crosses it.
pub fn trajectories_to_threshold(points: &[CurvePoint], threshold: f64) -> f64 {
    points
        .iter()
        .find(|p| p.mean_return >= threshold)
        .map(|p| p.env_trajectories)
        .unwrap_or(f64::INFINITY)
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

struct CellOutcome {
    t_p: usize,
    resumed: bool,
    result: Result<(f64, f64), String>, // (trajs to threshold, final return)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let algo = parse_algo(&args.algo)?;
    let tp_list = parse_usize_list(&args.tp_list)
        .map_err(|e| usage_err(format!("bad --tp-list: {e}")))?;
    if tp_list.contains(&0) {
        return Err(usage_err("--tp-list entries must be at least 1"));
    }
    let seed_indices =
        parse_seed_indices(&args.seeds).map_err(|e| usage_err(format!("bad --seeds: {e}")))?;
    let dataset = load_dataset(&args.demos)?;
    let env = parse_env(dataset.env_name())
        .map_err(|_| run_err(format!("dataset names unknown env '{}'", dataset.env_name())))?;
    let threshold = args.threshold.unwrap_or_else(|| expert_threshold(env));
    let out_root = resolve_out(&args.out_dir);
    fs::create_dir_all(&out_root)
        .map_err(|e| run_err(format!("cannot create {}: {e}", out_root.display())))?;

    let mut cells: Vec<(usize, u64)> = Vec::new();
    for &t_p in &tp_list {
        for &si in &seed_indices {
            cells.push((t_p, si));
        }
    }
    println!(
        "ablation grid: T_p in {:?}, {} seeds, threshold {}, {} cells ({} jobs)",
        tp_list,
        seed_indices.len(),
        threshold,
        cells.len(),
        args.jobs.max(1)
    );

    let run_cell = |&(t_p, si): &(usize, u64)| -> CellOutcome {
        let dir = out_root.join(format!("tp{t_p}")).join(format!("seed{si}"));
        let label = format!("[tp{t_p} seed{si}] ");
        let finished = dir.join(MANIFEST_FILE).exists();
        let outcome = if finished {
            read_curve_csv(&dir.join("curve.csv"))
                .map(|pts| {
                    (
                        trajectories_to_threshold(&pts, threshold),
                        pts.last().map(|p| p.mean_return).unwrap_or(f64::NAN),
                    )
                })
                .map_err(|e| e.message)
        } else {
            let cell_seed = derive_seed(args.seed, t_p as u64, si);
            let mut ov = args.overrides.clone();
            ov.tp = Some(t_p);
            // Cells stop once they confirm the threshold unless the caller
            // pinned an explicit target.
            if ov.target_return.is_none() {
                ov.target_return = Some(threshold);
            }
            resolve_config(&ov, cell_seed)
                .and_then(|cfg| {
                    run_imitation(algo, &args.demos, None, &cfg, &dir, 0, &label)
                })
                .map(|stats| {
                    let last = stats.last().expect("at least one iteration");
                    let mut pts: Vec<CurvePoint> = Vec::with_capacity(stats.len());
                    for st in &stats {
                        pts.push(CurvePoint {
                            iteration: st.iteration as u64,
                            env_trajectories: st.env_trajectories as f64,
                            env_transitions: st.env_transitions as f64,
                            env_transitions_with_eval: st.env_transitions_with_eval as f64,
                            mean_return: st.mean_return,
                            std_return: st.std_return,
                            d_loss: st.d_loss,
                            fm_loss: st.fm_loss,
                            policy_cost: st.policy_cost,
                        });
                    }
                    (trajectories_to_threshold(&pts, threshold), last.mean_return)
                })
                .map_err(|e| e.message)
        };
        match &outcome {
            Ok((ttt, ret)) => println!(
                "{label}{} trajs-to-threshold {}, final return {ret:.2}",
                if finished { "resumed:" } else { "done:" },
                fmt_ttt(*ttt)
            ),
            Err(e) => eprintln!("{label}FAILED: {e}"),
        }
        CellOutcome {
            t_p,
            resumed: finished,
            result: outcome,
        }
    };

    let outcomes: Vec<CellOutcome> = if args.jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build()
            .map_err(|e| run_err(format!("cannot build thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run_cell).collect())
    } else {
        cells.iter().map(run_cell).collect()
    };

    // Summary: per T_p, the median sample cost of reaching the threshold
    // and the spread of final returns across seeds.
    let mut summary = String::from(
        "t_p,cells,failures,median_trajs_to_threshold,mean_final_return,variance_final_return\n",
    );
    let mut table = String::from(
        "  t_p  cells  failures  med-trajs-to-thresh  mean-final-ret  var-final-ret\n",
    );
    for &t_p in &tp_list {
        let group: Vec<&CellOutcome> = outcomes.iter().filter(|c| c.t_p == t_p).collect();
        let failures = group.iter().filter(|c| c.result.is_err()).count();
        let mut ttts: Vec<f64> = group
            .iter()
            .filter_map(|c| c.result.as_ref().ok().map(|r| r.0))
            .collect();
        let finals: Vec<f64> = group
            .iter()
            .filter_map(|c| c.result.as_ref().ok().map(|r| r.1))
            .collect();
        let med = median(&mut ttts);
        let mean_final = finals.iter().sum::<f64>() / finals.len().max(1) as f64;
        let var_final = finals
            .iter()
            .map(|v| (v - mean_final) * (v - mean_final))
            .sum::<f64>()
            / finals.len().max(1) as f64;
        let _ = writeln!(
            summary,
            "{t_p},{},{failures},{},{mean_final},{var_final}",
            group.len(),
            fmt_ttt(med)
        );
        let _ = writeln!(
            table,
            "{t_p:>5}  {:>5}  {failures:>8}  {:>19}  {mean_final:>14.2}  {var_final:>13.2}",
            group.len(),
            fmt_ttt(med)
        );
    }
    fs::write(out_root.join("summary.csv"), &summary)
        .map_err(|e| run_err(format!("cannot write summary: {e}")))?;
    print!("{table}");
    println!("summary written to {}", out_root.join("summary.csv").display());
    let failed = outcomes.iter().filter(|c| c.result.is_err()).count();
    let resumed = outcomes.iter().filter(|c| c.resumed).count();
    if resumed > 0 {
        println!("{resumed} cells resumed from existing manifests");
    }
    if failed > 0 {
        return Err(run_err(format!("{failed} of {} cells failed", outcomes.len())));
    }
    Ok(())
}

fn fmt_ttt(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<usize>()
                .map_err(|_| format!("'{part}' is not a number"))?,
        );
    }
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

/// Seed indices accept `0,1,2` or the inclusive range form `0..4`.
fn parse_seed_indices(text: &str) -> Result<Vec<u64>, String> {
    let text = text.trim();
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| format!("'{lo}' is not a number"))?;
        let hi: u64 = hi.trim().parse().map_err(|_| format!("'{hi}' is not a number"))?;
        if hi < lo {
            return Err(format!("range {lo}..{hi} is empty"));
        }
        return Ok((lo..=hi).collect());
    }
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<u64>()
                .map_err(|_| format!("'{part}' is not a number"))?,
        );
    }
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Plotting: mean return against cumulative env trajectories.

struct Series {
    label: String,
    xs: Vec<f64>,
    mean: Vec<f64>,
    band: Option<(Vec<f64>, Vec<f64>)>, // lo, hi
}

pub fn cmd_plot(args: &PlotArgs) -> Result<(), CliError> {
    let labels: Vec<String> = match &args.labels {
        Some(text) => {
            let ls: Vec<String> = text.split(',').map(|s| s.trim().to_string()).collect();
            if ls.len() != args.csvs.len() {
                return Err(usage_err(format!(
                    "--labels has {} entries for {} files",
                    ls.len(),
                    args.csvs.len()
                )));
            }
            ls
        }
        None => args.csvs.iter().map(|p| infer_label(p)).collect(),
    };
    let mut curves: Vec<(String, Vec<CurvePoint>)> = Vec::new();
    for (path, label) in args.csvs.iter().zip(&labels) {
        curves.push((label.clone(), read_curve_csv(path)?));
    }
    // Group by label, preserving first-appearance order.
    let mut order: Vec<String> = Vec::new();
    for (label, _) in &curves {
        if !order.contains(label) {
            order.push(label.clone());
        }
    }
    let mut series = Vec::new();
    for label in order {
        let members: Vec<&Vec<CurvePoint>> = curves
            .iter()
            .filter(|(l, _)| *l == label)
            .map(|(_, pts)| pts)
            .collect();
        series.push(aggregate(label, &members));
    }
    let out = resolve_out(&args.out);
    ensure_parent_dir(&out)?;
    let title = args.title.clone().unwrap_or_else(|| "learning curves".into());
    let svg = render_svg(&series, &title);
    fs::write(&out, svg).map_err(|e| run_err(format!("cannot write {}: {e}", out.display())))?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Label for a CSV path: `.../tp5/seed2/curve.csv` becomes `tp5`,
/// otherwise the parent directory (or file stem) names the series.
fn infer_label(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "curve".into());
    let Some(parent) = path.parent().and_then(|p| p.file_name()) else {
        return stem;
    };
    let parent = parent.to_string_lossy().to_string();
    let is_seed_dir = parent
        .strip_prefix("seed")
        .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()));
    if is_seed_dir {
        if let Some(grand) = path
            .parent()
            .and_then(|p| p.parent())
            .and_then(|p| p.file_name())
        {
            return grand.to_string_lossy().to_string();
        }
    }
    if stem == "curve" {
        parent
    } else {
        stem
    }
}

/// Aligns a label's runs by iteration index (truncating to the shortest)
/// and aggregates: mean line, +-1 population-std band when there are at
/// least two runs.
fn aggregate(label: String, members: &[&Vec<CurvePoint>]) -> Series {
    let n = members.iter().map(|m| m.len()).min().unwrap_or(0);
    let mut xs = Vec::with_capacity(n);
    let mut mean = Vec::with_capacity(n);
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for i in 0..n {
        let x = members.iter().map(|m| m[i].env_trajectories).sum::<f64>() / members.len() as f64;
        let vals: Vec<f64> = members.iter().map(|m| m[i].mean_return).collect();
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64;
        let sd = var.sqrt();
        xs.push(x);
        mean.push(mu);
        lo.push(mu - sd);
        hi.push(mu + sd);
    }
    Series {
        label,
        xs,
        mean,
        band: (members.len() > 1).then_some((lo, hi)),
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// Hand-rolled SVG: axes with ticks, one polyline per series, shaded
/// bands, and a legend. No external renderer needed to look at a run.
fn render_svg(series: &[Series], title: &str) -> String {
    let (w, h) = (800.0, 500.0);
    let (ml, mr, mt, mb) = (80.0, 20.0, 40.0, 55.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);

    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &x in &s.xs {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
        }
        for &y in &s.mean {
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        if let Some((lo, hi)) = &s.band {
            for &y in lo {
                ymin = ymin.min(y);
            }
            for &y in hi {
                ymax = ymax.max(y);
            }
        }
    }
    if !xmin.is_finite() {
        xmin = 0.0;
        xmax = 1.0;
    }
    if !ymin.is_finite() {
        ymin = 0.0;
        ymax = 1.0;
    }
    if xmax - xmin < 1e-12 {
        xmax += 1.0;
    }
    let ypad = 0.05 * (ymax - ymin).max(1e-9);
    ymin -= ypad;
    ymax += ypad;

    let px = |x: f64| ml + (x - xmin) / (xmax - xmin) * pw;
    let py = |y: f64| mt + (ymax - y) / (ymax - ymin) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        ml + pw / 2.0,
        xml_escape(title)
    );

    for (v, label_y) in ticks(ymin, ymax, 6) {
        let y = py(v);
        let _ = writeln!(
            s,
            "<line x1=\"{ml}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>",
            ml + pw
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{label_y}</text>",
            ml - 6.0,
            y + 4.0
        );
    }
    for (v, label_x) in ticks(xmin, xmax, 7) {
        let x = px(v);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{mt}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#eeeeee\"/>",
            mt + ph
        );
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{label_x}</text>",
            mt + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444444\"/>"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">environment trajectories</text>",
        ml + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        "<text x=\"18\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">mean return</text>",
        mt + ph / 2.0,
        mt + ph / 2.0
    );

    for (i, sr) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some((lo, hi)) = &sr.band {
            let mut d = String::from("M");
            for (j, (&x, &y)) in sr.xs.iter().zip(hi).enumerate() {
                if j > 0 {
                    d.push('L');
                }
                let _ = write!(d, "{:.1} {:.1}", px(x), py(y));
            }
            for (&x, &y) in sr.xs.iter().zip(lo).rev() {
                let _ = write!(d, "L{:.1} {:.1}", px(x), py(y));
            }
            d.push('Z');
            let _ = writeln!(s, "<path d=\"{d}\" fill=\"{color}\" fill-opacity=\"0.15\"/>");
        }
        let mut pts = String::new();
        for (&x, &y) in sr.xs.iter().zip(&sr.mean) {
            let _ = write!(pts, "{:.1},{:.1} ", px(x), py(y));
        }
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>",
            pts.trim_end()
        );
        let ly = mt + 16.0 + i as f64 * 18.0;
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2.5\"/>",
            ml + pw - 150.0,
            ml + pw - 126.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            ml + pw - 120.0,
            ly + 4.0,
            xml_escape(&sr.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Round tick positions covering [lo, hi] with a 1/2/5-scaled step.
fn ticks(lo: f64, hi: f64, target: usize) -> Vec<(f64, String)> {
    let range = (hi - lo).max(1e-12);
    let raw = range / target.max(2) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    } * mag;
    let mut v = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while v <= hi + 1e-9 * range {
        let rounded = (v / step).round() * step;
        out.push((rounded, fmt_tick(rounded)));
        v += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1e6 {
        format!("{:.1}M", v / 1e6)
    } else if a >= 1e4 {
        format!("{:.0}k", v / 1e3)
    } else if a >= 1.0 {
        let s = format!("{v:.1}");
        s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
    } else {
        format!("{v:.3}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_row(i: usize, trajs: u64, ret: f64) -> IterationStats {
        IterationStats {
            iteration: i,
            env_trajectories: trajs,
            env_transitions: trajs * 10,
            env_transitions_with_eval: trajs * 12,
            mean_return: ret,
            std_return: 1.0,
            d_loss: 0.5,
            fm_loss: f64::NAN,
            policy_cost: -2.0,
        }
    }

    #[test]
    fn curve_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let stats = vec![stats_row(0, 3, 12.5), stats_row(1, 6, 20.0)];
        write_curve_csv(&path, &stats).unwrap();
        let pts = read_curve_csv(&path).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[1].env_trajectories, 6.0);
        assert_eq!(pts[1].mean_return, 20.0);
        assert!(pts[0].fm_loss.is_nan());
    }

    #[test]
    fn malformed_csv_errors_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        fs::write(&path, format!("{CURVE_HEADER}\n1,2,3\n")).unwrap();
        let err = read_curve_csv(&path).unwrap_err();
        assert_eq!(err.code, 1);
        assert!(err.message.contains("curve.csv:2"), "{}", err.message);

        fs::write(&path, format!("{CURVE_HEADER}\n0,1,10,12,x,1,1,1,1\n")).unwrap();
        let err = read_curve_csv(&path).unwrap_err();
        assert!(err.message.contains(":2"), "{}", err.message);
        assert!(err.message.contains("column 5"), "{}", err.message);

        fs::write(&path, "wrong,header\n").unwrap();
        let err = read_curve_csv(&path).unwrap_err();
        assert!(err.message.contains(":1"), "{}", err.message);
    }

    #[test]
    fn non_monotone_budget_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        fs::write(
            &path,
            format!("{CURVE_HEADER}\n0,5,50,60,1,0,0,0,0\n1,4,60,70,1,0,0,0,0\n"),
        )
        .unwrap();
        let err = read_curve_csv(&path).unwrap_err();
        assert!(err.message.contains("env_trajectories decreases"), "{}", err.message);
        assert!(err.message.contains(":3"), "{}", err.message);
    }

    #[test]
    fn config_precedence_is_defaults_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.txt");
        fs::write(&file, "gamma = 0.5\nm = 7\n# comment\ntp = 25\n").unwrap();
        let ov = ConfigOverrides {
            config: Some(file),
            tp: None,
            m: Some(9),
            p: None,
            iters: None,
            gamma: None,
            alpha_pi: None,
            alpha_d: None,
            alpha_f: None,
            kl_budget: None,
            eval_episodes: None,
            env_trajs_per_iter: None,
            target_return: None,
            greedy_eval: false,
        };
        let cfg = resolve_config(&ov, 3).unwrap();
        assert_eq!(cfg.gamma, 0.5); // file beats default
        assert_eq!(cfg.m, 9); // flag beats file
        assert_eq!(cfg.t_p, 25); // file beats default
        assert_eq!(cfg.p, 50); // untouched default
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn bad_config_keys_and_values_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("cfg.txt");
        fs::write(&file, "nosuch = 1\n").unwrap();
        let mut cfg = DynaConfig::default();
        let err = apply_config_file(&mut cfg, &file).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("cfg.txt:1"), "{}", err.message);

        fs::write(&file, "gamma 0.5\n").unwrap();
        assert!(apply_config_file(&mut cfg, &file).is_err());

        fs::write(&file, "gamma = eleven\n").unwrap();
        assert!(apply_config_file(&mut cfg, &file).is_err());
    }

    #[test]
    fn config_hash_tracks_content_not_seed_alone() {
        let cfg = DynaConfig::default();
        let a = config_hash("dyna-ail", "cartpole", &cfg);
        assert_eq!(a, config_hash("dyna-ail", "cartpole", &cfg));
        let mut cfg2 = cfg.clone();
        cfg2.t_p = 50;
        assert_ne!(a, config_hash("dyna-ail", "cartpole", &cfg2));
        assert_ne!(a, config_hash("mgail", "cartpole", &cfg));
    }

    #[test]
    fn manifest_text_contains_resolved_config_and_hash() {
        let cfg = DynaConfig::default();
        let m = RunManifest::new(
            "dyna-ail",
            "cartpole",
            Path::new("demos.dail"),
            Path::new("out/run1"),
            &cfg,
            now_stamp(),
        );
        let text = m.to_text();
        assert!(text.contains("config_hash = "));
        assert!(text.contains("t_p = 10"));
        assert!(text.contains("algo = dyna-ail"));
        assert!(text.contains(&m.config_hash));
    }

    #[test]
    fn seed_index_parsing_handles_ranges_and_lists() {
        assert_eq!(parse_seed_indices("0..4").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_seed_indices("3,1").unwrap(), vec![3, 1]);
        assert_eq!(parse_seed_indices(" 2 ").unwrap(), vec![2]);
        assert!(parse_seed_indices("4..2").is_err());
        assert!(parse_seed_indices("x").is_err());
        assert_eq!(parse_usize_list("5,10,50").unwrap(), vec![5, 10, 50]);
        assert!(parse_usize_list("").is_err());
    }

    #[test]
    fn label_inference_groups_grid_cells() {
        assert_eq!(infer_label(Path::new("out/tp5/seed0/curve.csv")), "tp5");
        assert_eq!(infer_label(Path::new("out/tp5/seed12/curve.csv")), "tp5");
        assert_eq!(infer_label(Path::new("runs/dyna/curve.csv")), "dyna");
        assert_eq!(infer_label(Path::new("mgail.csv")), "mgail");
        assert_eq!(infer_label(Path::new("out/seedless/curve.csv")), "seedless");
    }

    #[test]
    fn trajectories_to_threshold_finds_first_crossing() {
        let pts = vec![
            CurvePoint {
                iteration: 0,
                env_trajectories: 5.0,
                env_transitions: 0.0,
                env_transitions_with_eval: 0.0,
                mean_return: 10.0,
                std_return: 0.0,
                d_loss: 0.0,
                fm_loss: 0.0,
                policy_cost: 0.0,
            },
            CurvePoint {
                iteration: 1,
                env_trajectories: 11.0,
                env_transitions: 0.0,
                env_transitions_with_eval: 0.0,
                mean_return: 196.0,
                std_return: 0.0,
                d_loss: 0.0,
                fm_loss: 0.0,
                policy_cost: 0.0,
            },
        ];
        assert_eq!(trajectories_to_threshold(&pts, 195.0), 11.0);
        assert!(trajectories_to_threshold(&pts, 200.0).is_infinite());
        let mut vals = vec![3.0, 1.0, 2.0];
        assert_eq!(median(&mut vals), 2.0);
        let mut vals = vec![f64::INFINITY, 1.0];
        assert!(median(&mut vals).is_infinite());
    }

    #[test]
    fn svg_output_contains_series_and_bands() {
        let series = vec![
            Series {
                label: "dyna".into(),
                xs: vec![0.0, 10.0, 20.0],
                mean: vec![50.0, 120.0, 190.0],
                band: Some((vec![40.0, 110.0, 185.0], vec![60.0, 130.0, 195.0])),
            },
            Series {
                label: "mgail".into(),
                xs: vec![0.0, 10.0, 20.0],
                mean: vec![50.0, 90.0, 150.0],
                band: None,
            },
        ];
        let svg = render_svg(&series, "cartpole");
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("dyna"));
        assert!(svg.contains("mgail"));
        assert!(svg.contains("fill-opacity"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("environment trajectories"));
    }

    #[test]
    fn tick_generation_covers_range_with_round_steps() {
        let ts = ticks(0.0, 100.0, 6);
        assert!(ts.len() >= 4 && ts.len() <= 8);
        assert_eq!(ts.first().unwrap().0, 0.0);
        let ts = ticks(-250.0, -100.0, 6);
        assert!(ts.iter().all(|(v, _)| *v >= -250.0 && *v <= -100.0 + 1e-9));
        assert_eq!(fmt_tick(20000.0), "20k");
        assert_eq!(fmt_tick(1_500_000.0), "1.5M");
        assert_eq!(fmt_tick(0.0), "0");
    }
}
