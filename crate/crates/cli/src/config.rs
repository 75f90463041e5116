use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use hil_core::batch_em::BatchConfig;
use hil_core::envs::{Environment, EnvSpec};
use hil_core::eval::{RewardMode, SweepConfig, TrainSpec, Trainer};
use hil_core::online_em::OnlineConfig;
use hil_core::oracle::OracleOptions;
use hil_core::regularizers::RegularizerConfig;
use hil_core::{MlpSpec, ParamKind};
use serde::{Deserialize, Serialize};

/// Bad flags, an unreadable or invalid config, or a missing referenced path.
/// Maps to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// One JSON document drives every subcommand. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Environment spec file.
    pub env: Option<PathBuf>,
    pub algorithm: Trainer,
    pub policy_kind: ParamKind,
    pub n_options: usize,
    pub mlp: MlpSpec,
    pub batch: BatchConfig,
    pub online: OnlineConfig,
    pub regularizers: RegularizerConfig,
    pub seeds: Vec<u64>,
    pub demo_sizes: Vec<usize>,
    pub out_dir: PathBuf,

    pub value_tolerance: f64,
    /// Exploration probability of the demonstrating expert.
    pub epsilon: f64,
    /// Steps to record; the largest demo size when unset.
    pub demo_steps: Option<usize>,

    /// Policy to evaluate; `<out_dir>/checkpoint.json` when unset.
    pub checkpoint: Option<PathBuf>,
    pub n_eval_episodes: usize,
    pub eval_seed: u64,
    pub reward_mode: RewardMode,

    /// Trainers compared by `compare`.
    pub trainers: Vec<Trainer>,
    pub equalize_budget: bool,
    pub timing: bool,

    pub oracle: OracleOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        let train = TrainSpec::default();
        RunConfig {
            env: None,
            algorithm: Trainer::Batch,
            policy_kind: train.kind,
            n_options: train.n_options,
            mlp: train.mlp,
            batch: train.batch,
            online: train.online,
            regularizers: train.regularizers,
            seeds: sweep.seeds,
            demo_sizes: sweep.demo_sizes,
            out_dir: PathBuf::from("out"),
            value_tolerance: 1e-8,
            epsilon: 0.05,
            demo_steps: None,
            checkpoint: None,
            n_eval_episodes: sweep.n_eval_episodes,
            eval_seed: sweep.eval_seed,
            reward_mode: sweep.reward_mode,
            trainers: sweep.trainers,
            equalize_budget: sweep.equalize_budget,
            timing: false,
            oracle: OracleOptions::default(),
        }
    }
}

impl RunConfig {
    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.env.as_mut().map(resolve);
        cfg.checkpoint.as_mut().map(resolve);
        resolve(&mut cfg.out_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        for p in self.env.iter().chain(&self.checkpoint) {
            if !p.exists() {
                return Err(config_err(format!("referenced path {} does not exist", p.display())));
            }
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds must be non-empty"));
        }
        if self.demo_sizes.is_empty() || self.demo_sizes.contains(&0) {
            return Err(config_err("demo_sizes must be non-empty and positive"));
        }
        if self.demo_steps == Some(0) {
            return Err(config_err("demo_steps must be positive"));
        }
        if !(self.value_tolerance > 0.0) {
            return Err(config_err("value_tolerance must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(config_err("epsilon must lie in [0, 1]"));
        }
        if self.n_eval_episodes == 0 {
            return Err(config_err("n_eval_episodes must be >= 1"));
        }
        if self.trainers.is_empty() {
            return Err(config_err("trainers must be non-empty"));
        }
        self.train_spec().validate().map_err(|e| config_err(e.to_string()))
    }

    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec {
            kind: self.policy_kind,
            n_options: self.n_options,
            mlp: self.mlp,
            batch: self.batch,
            online: self.online,
            regularizers: self.regularizers,
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            trainers: self.trainers.clone(),
            demo_sizes: self.demo_sizes.clone(),
            seeds: self.seeds.clone(),
            n_eval_episodes: self.n_eval_episodes,
            eval_seed: self.eval_seed,
            reward_mode: self.reward_mode,
            equalize_budget: self.equalize_budget,
            timing: self.timing,
            train: self.train_spec(),
        }
    }

    pub fn demo_steps(&self) -> usize {
        self.demo_steps
            .unwrap_or_else(|| self.demo_sizes.iter().copied().max().unwrap_or(1))
    }

    pub fn environment(&self) -> anyhow::Result<Environment> {
        let path = self.env.as_ref().ok_or_else(|| config_err("config does not name an `env` spec file"))?;
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read env spec {}: {e}", path.display())))?;
        let spec: EnvSpec =
            serde_json::from_str(&text).map_err(|e| config_err(format!("invalid env spec {}: {e}", path.display())))?;
        spec.build().map_err(|e| config_err(format!("env spec {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seedz": [1]}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"batch": {"n_iteration": 3}}"#).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/env.json"), r#"{"kind":"two_state_chain"}"#).unwrap();
        fs::write(dir.path().join("sub/run.json"), r#"{"env":"env.json","out_dir":"o"}"#).unwrap();
        let cfg = RunConfig::load(&dir.path().join("sub/run.json")).unwrap();
        assert_eq!(cfg.env.as_deref(), Some(dir.path().join("sub/env.json").as_path()));
        assert_eq!(cfg.out_dir, dir.path().join("sub/o"));
        assert_eq!(cfg.environment().unwrap().n_states, 2);
    }

    #[test]
    fn missing_referenced_path_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.json"), r#"{"env":"nope.json"}"#).unwrap();
        let e = RunConfig::load(&dir.path().join("run.json")).unwrap_err();
        assert!(e.downcast_ref::<ConfigError>().is_some());
    }
}
