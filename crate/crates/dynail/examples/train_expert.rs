//! Trains a true-reward expert policy and reports its evaluation return.
//!
//!     cargo run --release --example train_expert -- [cartpole|pendulum] [seed] [budget]
//!
//! Prints one progress line per training iteration (batch mean return is
//! the cheap signal; a proper fresh-seed evaluation only runs when that
//! signal clears the threshold) and the final artifact summary.

use dynail::envs::Env;
use dynail::expert::{expert_threshold, train_expert_with, ExpertConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let env_name = args.get(1).map(String::as_str).unwrap_or("cartpole");
    let env = Env::from_name(env_name).expect("environment must be cartpole or pendulum");
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = ExpertConfig::for_env(env);
    cfg.seed = seed;
    if let Some(budget) = args.get(3).and_then(|s| s.parse().ok()) {
        cfg.budget = budget;
    }
    cfg.progress = Some(|it, batch_return, used| {
        if it % 10 == 0 {
            println!("iter {it:>5}  batch return {batch_return:>9.2}  transitions {used}");
        }
    });

    let start = Instant::now();
    let artifact = train_expert_with(env, &cfg).expect("training failed");
    println!(
        "{env_name} expert: mean return {:.2} (threshold {}), sub_expert={}, \
         {} transitions, {:.1?}",
        artifact.mean_return,
        expert_threshold(env),
        artifact.sub_expert,
        artifact.transitions_used,
        start.elapsed()
    );
}
