use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use hil_core::envs::{generate_demonstrations, value_iteration};
use hil_core::eval::{evaluate_policy_with, expert_policy, normalized_reward, sweep, train};
use hil_core::oracle::run_oracle_suite;
use hil_core::persist::{
    batch_log_csv, online_log_csv, read_checkpoint, read_demos, read_expert, report_csv, summary_csv, values_csv, write_checkpoint,
    write_demos, write_expert, ExpertFile, FORMAT_VERSION,
};
use serde::Serialize;

use crate::config::RunConfig;

pub const EXPERT_FILE: &str = "expert.json";
pub const EXPERT_POLICY_FILE: &str = "expert_policy.json";
pub const VALUES_FILE: &str = "values.csv";
pub const DEMO_FILE: &str = "demos.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ORACLE_FILE: &str = "oracle_report.json";

/// Resolved settings shared by every subcommand.
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    pub seed_flag: Option<u64>,
}

impl Run {
    /// `--seed` when given, else the first configured seed.
    fn seed(&self) -> u64 {
        self.seed_flag.unwrap_or(self.config.seeds[0])
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create_out(&self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating output directory {}", self.out.display()))
    }

    fn write(&self, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn need(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(anyhow!("missing {what} {} (run the earlier step first)", path.display()))
    }
}

fn json_line<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn cmd_expert(ctx: &Run) -> anyhow::Result<()> {
    let env = ctx.config.environment()?;
    let vi = value_iteration(&env, ctx.config.value_tolerance)?;
    ctx.create_out()?;
    let expert = ExpertFile {
        version: FORMAT_VERSION,
        env: env.name.clone(),
        greedy_policy: vi.greedy_policy.clone(),
        values: vi.values.clone(),
    };
    write_expert(&ctx.path(EXPERT_FILE), &expert)?;
    ctx.write(VALUES_FILE, &values_csv(&expert))?;
    let policy = expert_policy(&env, &vi.greedy_policy, ctx.config.n_options)?;
    write_checkpoint(&ctx.path(EXPERT_POLICY_FILE), &policy)?;
    println!("value iteration converged after {} sweeps", vi.sweeps);
    for (s, v) in vi.values.iter().enumerate().take(12) {
        println!("  V({s}) = {v:.6}  action {}", vi.greedy_policy[s]);
    }
    if vi.values.len() > 12 {
        println!("  ... {} states in {}", vi.values.len(), ctx.path(VALUES_FILE).display());
    }
    Ok(())
}

fn load_expert(ctx: &Run, n_states: usize) -> anyhow::Result<ExpertFile> {
    let path = ctx.path(EXPERT_FILE);
    need(&path, "expert file")?;
    let expert = read_expert(&path)?;
    if expert.greedy_policy.len() != n_states {
        return Err(anyhow!("expert file {} does not match the environment", path.display()));
    }
    Ok(expert)
}

pub fn cmd_demo(ctx: &Run) -> anyhow::Result<()> {
    let env = ctx.config.environment()?;
    let expert = load_expert(ctx, env.n_states)?;
    let demos = generate_demonstrations(&env, &expert.greedy_policy, ctx.config.demo_steps(), ctx.config.epsilon, ctx.seed())?;
    ctx.create_out()?;
    write_demos(&ctx.path(DEMO_FILE), &demos)?;
    println!(
        "recorded {} steps in {} episodes to {}",
        demos.total_steps(),
        demos.episodes.len(),
        ctx.path(DEMO_FILE).display()
    );
    Ok(())
}

fn load_demos(ctx: &Run) -> anyhow::Result<hil_core::envs::DemonstrationSet> {
    let path = ctx.path(DEMO_FILE);
    need(&path, "demonstration file")?;
    read_demos(&path).with_context(|| format!("reading {}", path.display()))
}

pub fn cmd_train(ctx: &Run) -> anyhow::Result<()> {
    let env = ctx.config.environment()?;
    let demos = load_demos(ctx)?;
    let out = train(ctx.config.algorithm, &demos, &env, &ctx.config.train_spec(), ctx.seed())?;
    ctx.create_out()?;
    write_checkpoint(&ctx.path(CHECKPOINT_FILE), &out.policy)?;
    let log = match (&out.batch_log, &out.online_log) {
        (Some(b), _) => batch_log_csv(b),
        (_, Some(o)) => online_log_csv(o),
        _ => String::new(),
    };
    ctx.write(TRAIN_LOG_FILE, &log)?;
    println!(
        "trained {} on {} steps: {} gradient steps, checkpoint {}",
        ctx.config.algorithm.as_str(),
        demos.total_steps(),
        out.gradient_steps,
        ctx.path(CHECKPOINT_FILE).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    checkpoint: String,
    n_episodes: usize,
    eval_seed: u64,
    mean_reward: f64,
    std_reward: f64,
    expert_mean: f64,
    normalized_reward: f64,
}

fn expert_mean(ctx: &Run, env: &hil_core::envs::Environment) -> anyhow::Result<f64> {
    let expert = load_expert(ctx, env.n_states)?;
    let policy = expert_policy(env, &expert.greedy_policy, ctx.config.n_options)?;
    let cfg = &ctx.config;
    Ok(evaluate_policy_with(&policy, env, cfg.n_eval_episodes, cfg.eval_seed, cfg.reward_mode)?.mean)
}

pub fn cmd_eval(ctx: &Run) -> anyhow::Result<()> {
    let env = ctx.config.environment()?;
    let ck = ctx.config.checkpoint.clone().unwrap_or_else(|| ctx.path(CHECKPOINT_FILE));
    need(&ck, "checkpoint")?;
    let policy = read_checkpoint(&ck).with_context(|| format!("reading {}", ck.display()))?;
    let cfg = &ctx.config;
    let stats = evaluate_policy_with(&policy, &env, cfg.n_eval_episodes, cfg.eval_seed, cfg.reward_mode)?;
    let expert = expert_mean(ctx, &env)?;
    let summary = EvalSummary {
        // File name only, so the report does not depend on where the run lives.
        checkpoint: ck.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        n_episodes: cfg.n_eval_episodes,
        eval_seed: cfg.eval_seed,
        mean_reward: stats.mean,
        std_reward: stats.std,
        expert_mean: expert,
        normalized_reward: normalized_reward(stats.mean, expert)?,
    };
    ctx.create_out()?;
    ctx.write(EVAL_FILE, &json_line(&summary)?)?;
    println!(
        "mean reward {:.4} (std {:.4}) over {} episodes, normalized {:.4}",
        summary.mean_reward, summary.std_reward, summary.n_episodes, summary.normalized_reward
    );
    Ok(())
}

pub fn cmd_compare(ctx: &Run) -> anyhow::Result<()> {
    let env = ctx.config.environment()?;
    let demos = load_demos(ctx)?;
    let expert = expert_mean(ctx, &env)?;
    let result = sweep(&env, &demos, expert, &ctx.config.sweep_config())?;
    ctx.create_out()?;
    ctx.write(REPORT_FILE, &report_csv(&result.rows))?;
    ctx.write(SUMMARY_FILE, &summary_csv(&result.reports))?;
    for row in result.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "cell {} size {} seed {} failed: {}",
            row.trainer.as_str(),
            row.demo_size,
            row.seed,
            row.error.as_deref().unwrap_or_default()
        );
    }
    println!("trainer  size  seeds  normalized  std");
    for r in &result.reports {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:<8} {:>5} {:>6}  {:>10}  {}",
            r.trainer.as_str(),
            r.demo_size,
            r.n_seeds,
            fmt(r.normalized_reward),
            fmt(r.std_over_seeds)
        );
    }
    Ok(())
}

/// Runs the enumeration suite. Returns whether every check passed.
pub fn cmd_oracle_check(ctx: &Run) -> anyhow::Result<bool> {
    let opts = hil_core::oracle::OracleOptions {
        seed: ctx.seed_flag.unwrap_or(ctx.config.oracle.seed),
        ..ctx.config.oracle
    };
    let report = run_oracle_suite(&opts)?;
    ctx.create_out()?;
    ctx.write(ORACLE_FILE, &json_line(&report)?)?;
    for c in &report.checks {
        println!(
            "{} {:<28} instances {:>4}  max deviation {:.3e}  tolerance {:.0e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.instances,
            c.max_deviation,
            c.tolerance
        );
    }
    Ok(report.passed())
}
