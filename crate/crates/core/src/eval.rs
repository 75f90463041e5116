//! Scoring learned policies against the expert and sweeping over training
//! set sizes and seeds.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch_em::{run_batch_bw, BatchConfig, BatchLogRecord, MStep};
use crate::envs::{DemonstrationSet, Environment};
use crate::error::{HilError, Result};
use crate::online_em::{equalized_mstep_every, run_online_bw, OnlineConfig, OnlineLogRecord, OnlineMStep};
use crate::opgm::{rollout_with_rng, ActionId, ModelDims};
use crate::policies::{HierarchicalPolicy, MlpSpec, ParamKind};
use crate::regularizers::RegularizerConfig;

/// Which per-step reward an evaluation episode accumulates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// The expected reward `R(s, a)`; reward noise is averaged out.
    #[default]
    Expected,
    /// The realized reward including noise.
    Sampled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStats {
    pub mean: f64,
    /// Sample standard deviation (zero for a single episode).
    pub std: f64,
    pub returns: Vec<f64>,
}

impl EpisodeStats {
    fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let std = if returns.len() > 1 {
            (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        EpisodeStats { mean, std, returns }
    }
}

/// [`evaluate_policy_with`] using expected rewards.
pub fn evaluate_policy(policy: &HierarchicalPolicy, env: &Environment, n_episodes: usize, seed: u64) -> Result<EpisodeStats> {
    evaluate_policy_with(policy, env, n_episodes, seed, RewardMode::Expected)
}

/// Runs `n_episodes` hierarchical rollouts of at most `env.horizon` steps
/// with `o_0` uniform and `s_1` from the initial distribution. Episode `k`
/// draws from stream `k` of a generator seeded with `seed`, so the first
/// episodes do not depend on how many are run.
pub fn evaluate_policy_with(
    policy: &HierarchicalPolicy,
    env: &Environment,
    n_episodes: usize,
    seed: u64,
    mode: RewardMode,
) -> Result<EpisodeStats> {
    if n_episodes == 0 {
        return Err(HilError::config("n_episodes must be >= 1"));
    }
    let tables = policy.tables();
    let no = policy.dims().n_options;
    let mut returns = Vec::with_capacity(n_episodes);
    for k in 0..n_episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let o0 = rng.random_range(0..no);
        let s1 = env.sample_initial_state(&mut rng);
        let r = rollout_with_rng(&tables, env, o0, s1, env.horizon, &mut rng)?;
        returns.push(match mode {
            RewardMode::Expected => r.expected_reward,
            RewardMode::Sampled => r.total_reward,
        });
    }
    Ok(EpisodeStats::from_returns(returns))
}

/// Wraps a greedy action table as a policy with `n_options` identical options.
pub fn expert_policy(env: &Environment, greedy: &[ActionId], n_options: usize) -> Result<HierarchicalPolicy> {
    let dims = ModelDims::new(env.n_states, env.n_actions, n_options)?;
    HierarchicalPolicy::from_flat_policy(dims, env.state_table.clone(), greedy)
}

pub fn normalized_reward(mean: f64, expert_mean: f64) -> Result<f64> {
    if !(expert_mean.abs() > 1e-12) {
        return Err(HilError::Numeric(format!("expert mean reward {expert_mean} cannot normalize")));
    }
    Ok(mean / expert_mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainer {
    Batch,
    Online,
}

impl Trainer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Trainer::Batch => "batch",
            Trainer::Online => "online",
        }
    }
}

/// Everything needed to train one policy from demonstrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub kind: ParamKind,
    pub n_options: usize,
    pub mlp: MlpSpec,
    pub batch: BatchConfig,
    pub online: OnlineConfig,
    pub regularizers: RegularizerConfig,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            kind: ParamKind::Mlp,
            n_options: 2,
            mlp: MlpSpec::default(),
            batch: BatchConfig::default(),
            online: OnlineConfig::default(),
            regularizers: RegularizerConfig::default(),
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_options == 0 {
            return Err(HilError::config("n_options must be >= 1"));
        }
        self.mlp.validate()?;
        self.batch.validate()?;
        self.online.validate()?;
        self.regularizers.validate()
    }

    /// Online config whose gradient-step total on `n_samples` matches the
    /// batch config's, when both use gradient M-steps.
    pub fn equalized_online(&self, n_samples: usize) -> OnlineConfig {
        let mut online = self.online;
        if let (MStep::Gradient { .. }, OnlineMStep::Gradient { steps, .. }) = (self.batch.mstep, self.online.mstep) {
            online.mstep_every = equalized_mstep_every(n_samples, online.t_min, steps, self.batch.gradient_budget());
        }
        online
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial: HierarchicalPolicy,
    pub policy: HierarchicalPolicy,
    pub gradient_steps: usize,
    pub batch_log: Option<Vec<BatchLogRecord>>,
    pub online_log: Option<Vec<OnlineLogRecord>>,
    pub wall_ms: f64,
}

/// Fresh random initialization from `seed`, then one training run.
pub fn train(trainer: Trainer, demos: &DemonstrationSet, env: &Environment, spec: &TrainSpec, seed: u64) -> Result<TrainOutcome> {
    train_with(trainer, demos, env, spec, &spec.online, seed)
}

fn train_with(
    trainer: Trainer,
    demos: &DemonstrationSet,
    env: &Environment,
    spec: &TrainSpec,
    online: &OnlineConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    spec.validate()?;
    if demos.n_states != env.n_states || demos.n_actions != env.n_actions {
        return Err(HilError::dim("demonstrations and environment dimensions differ"));
    }
    let dims = ModelDims::new(env.n_states, env.n_actions, spec.n_options)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = HierarchicalPolicy::random_init(spec.kind, dims, env.state_table.clone(), spec.mlp, &mut rng)?;
    let start = Instant::now();
    let outcome = match trainer {
        Trainer::Batch => {
            let out = run_batch_bw(&demos.episodes, &spec.batch, &initial, &spec.regularizers, rng.random())?;
            TrainOutcome {
                initial,
                policy: out.policy,
                gradient_steps: out.gradient_steps,
                batch_log: Some(out.log),
                online_log: None,
                wall_ms: 0.0,
            }
        }
        Trainer::Online => {
            let out = run_online_bw(&demos.episodes, online, &initial, &spec.regularizers)?;
            TrainOutcome {
                initial,
                policy: out.policy,
                gradient_steps: out.gradient_steps,
                batch_log: None,
                online_log: Some(out.log),
                wall_ms: 0.0,
            }
        }
    };
    Ok(TrainOutcome {
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        ..outcome
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub trainers: Vec<Trainer>,
    pub demo_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_eval_episodes: usize,
    pub eval_seed: u64,
    pub reward_mode: RewardMode,
    /// Thin the online M-steps to the batch gradient-step budget.
    pub equalize_budget: bool,
    pub timing: bool,
    pub train: TrainSpec,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            trainers: vec![Trainer::Batch, Trainer::Online],
            demo_sizes: vec![5000],
            seeds: (0..5).collect(),
            n_eval_episodes: 100,
            eval_seed: 0,
            reward_mode: RewardMode::Expected,
            equalize_budget: true,
            timing: false,
            train: TrainSpec::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trainers.is_empty() || self.demo_sizes.is_empty() || self.seeds.is_empty() {
            return Err(HilError::config("trainers, demo_sizes and seeds must be non-empty"));
        }
        if self.demo_sizes.contains(&0) {
            return Err(HilError::config("demo sizes must be >= 1"));
        }
        if self.n_eval_episodes == 0 {
            return Err(HilError::config("n_eval_episodes must be >= 1"));
        }
        self.train.validate()
    }
}

/// One `(trainer, size, seed)` cell. Failed cells carry the error message
/// and no numbers.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub trainer: Trainer,
    pub demo_size: usize,
    pub seed: u64,
    pub mean_reward: Option<f64>,
    pub normalized_reward: Option<f64>,
    pub gradient_steps: Option<usize>,
    pub wall_ms: Option<f64>,
    pub error: Option<String>,
}

/// Aggregate over the seeds of one `(trainer, size)` pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub trainer: Trainer,
    pub demo_size: usize,
    pub mean_reward: Option<f64>,
    pub normalized_reward: Option<f64>,
    /// Population standard deviation of the per-seed normalized rewards.
    pub std_over_seeds: Option<f64>,
    pub n_episodes: usize,
    pub n_seeds: usize,
    pub n_failed: usize,
    /// Mean training time per seed in seconds, when timing is on.
    pub wall_time_train: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub expert_mean: f64,
    pub training_set_sizes: Vec<usize>,
    pub rows: Vec<SweepRow>,
    pub reports: Vec<EvalReport>,
}

/// Mean and population standard deviation.
pub fn mean_and_population_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub fn aggregate(rows: &[SweepRow], n_episodes: usize) -> Vec<EvalReport> {
    let mut keys: Vec<(Trainer, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.trainer, r.demo_size)) {
            keys.push((r.trainer, r.demo_size));
        }
    }
    keys.into_iter()
        .map(|(trainer, demo_size)| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.trainer == trainer && r.demo_size == demo_size).collect();
            let ok: Vec<&SweepRow> = cell.iter().copied().filter(|r| r.error.is_none()).collect();
            let means: Vec<f64> = ok.iter().filter_map(|r| r.mean_reward).collect();
            let norms: Vec<f64> = ok.iter().filter_map(|r| r.normalized_reward).collect();
            let walls: Vec<f64> = ok.iter().filter_map(|r| r.wall_ms).collect();
            let norm_stats = mean_and_population_std(&norms);
            EvalReport {
                trainer,
                demo_size,
                mean_reward: mean_and_population_std(&means).map(|m| m.0),
                normalized_reward: norm_stats.map(|m| m.0),
                std_over_seeds: norm_stats.map(|m| m.1),
                n_episodes,
                n_seeds: ok.len(),
                n_failed: cell.len() - ok.len(),
                wall_time_train: (walls.len() == ok.len() && !walls.is_empty())
                    .then(|| walls.iter().sum::<f64>() / walls.len() as f64 / 1e3),
            }
        })
        .collect()
}

/// Trains every `(trainer, size, seed)` cell on the first `size` steps of
/// `demos`, evaluates it, and aggregates per `(trainer, size)`. Cells run in
/// parallel; the row order is fixed by the config.
pub fn sweep(env: &Environment, demos: &DemonstrationSet, expert_mean: f64, config: &SweepConfig) -> Result<SweepResult> {
    config.validate()?;
    normalized_reward(1.0, expert_mean)?;
    let mut cells = Vec::new();
    for &trainer in &config.trainers {
        for &size in &config.demo_sizes {
            for &seed in &config.seeds {
                cells.push((trainer, size, seed));
            }
        }
    }
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(trainer, size, seed)| {
            let run = || -> Result<(f64, f64, usize, f64)> {
                let data = demos.truncated(size);
                let online = if config.equalize_budget {
                    config.train.equalized_online(data.total_steps())
                } else {
                    config.train.online
                };
                let out = train_with(trainer, &data, env, &config.train, &online, seed)?;
                let stats = evaluate_policy_with(&out.policy, env, config.n_eval_episodes, config.eval_seed, config.reward_mode)?;
                Ok((stats.mean, normalized_reward(stats.mean, expert_mean)?, out.gradient_steps, out.wall_ms))
            };
            match run() {
                Ok((mean, norm, steps, wall)) => SweepRow {
                    trainer,
                    demo_size: size,
                    seed,
                    mean_reward: Some(mean),
                    normalized_reward: Some(norm),
                    gradient_steps: Some(steps),
                    wall_ms: config.timing.then_some(wall),
                    error: None,
                },
                Err(e) => SweepRow {
                    trainer,
                    demo_size: size,
                    seed,
                    mean_reward: None,
                    normalized_reward: None,
                    gradient_steps: None,
                    wall_ms: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let reports = aggregate(&rows, config.n_eval_episodes);
    Ok(SweepResult {
        expert_mean,
        training_set_sizes: config.demo_sizes.clone(),
        rows,
        reports,
    })
}
