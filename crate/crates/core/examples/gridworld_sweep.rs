//! Batch vs online on the default gridworld with 5000 expert steps.
//!
//! `cargo run --release -p hil-core --example gridworld_sweep`

use std::time::Instant;

use hil_core::envs::{build_gridworld, generate_demonstrations, value_iteration, GridworldSpec};
use hil_core::eval::{evaluate_policy, expert_policy, sweep, SweepConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = build_gridworld(&GridworldSpec::default())?;
    let vi = value_iteration(&env, 1e-8)?;
    let config = SweepConfig::default();
    let expert = expert_policy(&env, &vi.greedy_policy, config.train.n_options)?;
    let expert_mean = evaluate_policy(&expert, &env, config.n_eval_episodes, config.eval_seed)?.mean;
    let demos = generate_demonstrations(&env, &vi.greedy_policy, 5000, 0.05, 0)?;
    let start = Instant::now();
    let result = sweep(&env, &demos, expert_mean, &config)?;
    println!("expert mean {expert_mean:.4}");
    for r in &result.rows {
        println!(
            "{} seed {} normalized {:?} steps {:?} {}",
            r.trainer.as_str(),
            r.seed,
            r.normalized_reward,
            r.gradient_steps,
            r.error.as_deref().unwrap_or("")
        );
    }
    for r in &result.reports {
        println!("{} mean {:?} std {:?}", r.trainer.as_str(), r.normalized_reward, r.std_over_seeds);
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
