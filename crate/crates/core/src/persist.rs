//! On-disk formats: demonstration files, policy checkpoints, expert files,
//! training logs and evaluation reports.
//!
//! Every writer produces bytes that depend only on its input, and floats are
//! printed in shortest round-trip form, so reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batch_em::BatchLogRecord;
use crate::envs::DemonstrationSet;
use crate::error::{HilError, Result};
use crate::eval::{EvalReport, SweepRow};
use crate::online_em::OnlineLogRecord;
use crate::opgm::{ActionId, Step, Trajectory};
use crate::policies::HierarchicalPolicy;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoHeader {
    version: u32,
    n_states: usize,
    n_actions: usize,
    env: String,
}

/// Demo file text: a JSON header line, then `episode,t,state,action` rows
/// with `t` counted from 0 within each episode.
pub fn demos_to_string(demos: &DemonstrationSet) -> Result<String> {
    let header = DemoHeader {
        version: FORMAT_VERSION,
        n_states: demos.n_states,
        n_actions: demos.n_actions,
        env: demos.env_name.clone(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for (e, traj) in demos.episodes.iter().enumerate() {
        for (t, st) in traj.steps.iter().enumerate() {
            writeln!(out, "{e},{t},{},{}", st.state, st.action).expect("writing to a String");
        }
    }
    Ok(out)
}

pub fn demos_from_str(text: &str) -> Result<DemonstrationSet> {
    let mut lines = text.split('\n').enumerate();
    let (_, first) = lines.next().ok_or(HilError::Parse { line: 1, msg: "empty file".into() })?;
    let header: DemoHeader = serde_json::from_str(first).map_err(|e| HilError::Parse { line: 1, msg: e.to_string() })?;
    if header.version != FORMAT_VERSION {
        return Err(HilError::Parse {
            line: 1,
            msg: format!("unsupported version {}", header.version),
        });
    }
    let mut episodes: Vec<Trajectory> = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| HilError::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let mut nums = [0usize; 4];
        for (n, f) in nums.iter_mut().zip(&fields) {
            *n = f.parse().map_err(|_| err(format!("`{f}` is not a non-negative integer")))?;
        }
        let [e, t, s, a] = nums;
        if s >= header.n_states || a >= header.n_actions {
            return Err(err(format!("state {s} or action {a} out of range")));
        }
        if e == episodes.len() {
            let mut traj = Trajectory::new(Vec::new(), 0);
            traj.episode_id = e;
            episodes.push(traj);
        } else if e + 1 != episodes.len() {
            return Err(err(format!("episode {e} out of order")));
        }
        let traj = episodes.last_mut().expect("pushed above");
        if t != traj.steps.len() {
            return Err(err(format!("step {t} out of order in episode {e}")));
        }
        traj.steps.push(Step::new(s, a));
    }
    Ok(DemonstrationSet {
        env_name: header.env,
        n_states: header.n_states,
        n_actions: header.n_actions,
        episodes,
    })
}

pub fn write_demos(path: &Path, demos: &DemonstrationSet) -> Result<()> {
    fs::write(path, demos_to_string(demos)?)?;
    Ok(())
}

pub fn read_demos(path: &Path) -> Result<DemonstrationSet> {
    demos_from_str(&fs::read_to_string(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    policy: HierarchicalPolicy,
}

pub fn checkpoint_to_string(policy: &HierarchicalPolicy) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&Checkpoint {
        version: FORMAT_VERSION,
        policy: policy.clone(),
    })?;
    s.push('\n');
    Ok(s)
}

/// Parses a checkpoint and re-validates the policy.
pub fn checkpoint_from_str(text: &str) -> Result<HierarchicalPolicy> {
    let ck: Checkpoint = serde_json::from_str(text)?;
    if ck.version != FORMAT_VERSION {
        return Err(HilError::Parse {
            line: 1,
            msg: format!("unsupported checkpoint version {}", ck.version),
        });
    }
    let p = ck.policy;
    HierarchicalPolicy::new(p.params().clone(), *p.dims(), p.state_table().clone(), p.spec().copied())
}

pub fn write_checkpoint(path: &Path, policy: &HierarchicalPolicy) -> Result<()> {
    fs::write(path, checkpoint_to_string(policy)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<HierarchicalPolicy> {
    checkpoint_from_str(&fs::read_to_string(path)?)
}

/// Value-iteration output for an environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertFile {
    pub version: u32,
    pub env: String,
    pub greedy_policy: Vec<ActionId>,
    pub values: Vec<f64>,
}

pub fn write_expert(path: &Path, expert: &ExpertFile) -> Result<()> {
    let mut s = serde_json::to_string_pretty(expert)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_expert(path: &Path) -> Result<ExpertFile> {
    let e: ExpertFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if e.version != FORMAT_VERSION || e.greedy_policy.len() != e.values.len() {
        return Err(HilError::Parse {
            line: 1,
            msg: "malformed expert file".into(),
        });
    }
    Ok(e)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// `state,value,action` table.
pub fn values_csv(expert: &ExpertFile) -> String {
    let mut out = String::from("state,value,action\n");
    for (s, (v, a)) in expert.values.iter().zip(&expert.greedy_policy).enumerate() {
        writeln!(out, "{s},{v},{a}").expect("writing to a String");
    }
    out
}

pub fn batch_log_csv(log: &[BatchLogRecord]) -> String {
    let mut out = String::from("iteration,loglik,q_value,wall_ms\n");
    for r in log {
        writeln!(out, "{},{},{},{}", r.iteration, r.loglik, r.q_value, opt(r.wall_ms)).expect("writing to a String");
    }
    out
}

pub fn online_log_csv(log: &[OnlineLogRecord]) -> String {
    let mut out = String::from("t,q_value,wall_us\n");
    for r in log {
        writeln!(out, "{},{},{}", r.t, opt(r.q_value), opt(r.wall_us)).expect("writing to a String");
    }
    out
}

pub fn report_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("trainer,demo_size,seed,mean_reward,normalized_reward,wall_ms\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.trainer.as_str(),
            r.demo_size,
            r.seed,
            opt(r.mean_reward),
            opt(r.normalized_reward),
            opt(r.wall_ms)
        )
        .expect("writing to a String");
    }
    out
}

pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(
        "trainer,demo_size,n_seeds,n_failed,n_episodes,mean_reward,normalized_reward,std_over_seeds,wall_time_train_s\n",
    );
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.trainer.as_str(),
            r.demo_size,
            r.n_seeds,
            r.n_failed,
            r.n_episodes,
            opt(r.mean_reward),
            opt(r.normalized_reward),
            opt(r.std_over_seeds),
            opt(r.wall_time_train)
        )
        .expect("writing to a String");
    }
    out
}
