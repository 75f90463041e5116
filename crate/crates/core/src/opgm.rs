//! The options probabilistic graphical model.
//!
//! At every step `t` the agent first draws a termination bit
//! `b_t ~ pi_b(.|s_t, o_{t-1})`; when `b_t = 1` a fresh option is drawn from
//! `pi_hi(.|s_t)`, otherwise the previous option carries over. The action is
//! then drawn from `pi_lo(.|s_t, o_t)` and the environment moves to
//! `s_{t+1} ~ P(.|s_t, a_t)`.
//!
//! Likelihoods in this module exclude the environment transition product
//! unless a kernel is passed explicitly: it does not depend on the policy
//! parameters and only shifts the log-likelihood by a constant.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envs::Environment;
use crate::error::{HilError, Result};
use crate::logspace::{safe_ln, LOG_ZERO};
use crate::policies::{HierarchicalPolicy, PolicyTables};

pub type StateId = usize;
pub type ActionId = usize;
pub type OptionId = usize;

/// Cardinalities of the indexed state, action and option sets. The
/// termination set always has two elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_options: usize,
}

impl ModelDims {
    pub const N_TERM: usize = 2;

    pub fn new(n_states: usize, n_actions: usize, n_options: usize) -> Result<Self> {
        let dims = ModelDims {
            n_states,
            n_actions,
            n_options,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 || self.n_options == 0 {
            return Err(HilError::dim(format!(
                "all cardinalities must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn check_state(&self, s: StateId) -> Result<()> {
        if s >= self.n_states {
            return Err(HilError::dim(format!("state {s} out of range (n_states = {})", self.n_states)));
        }
        Ok(())
    }

    pub fn check_action(&self, a: ActionId) -> Result<()> {
        if a >= self.n_actions {
            return Err(HilError::dim(format!("action {a} out of range (n_actions = {})", self.n_actions)));
        }
        Ok(())
    }

    pub fn check_option(&self, o: OptionId) -> Result<()> {
        if o >= self.n_options {
            return Err(HilError::dim(format!("option {o} out of range (n_options = {})", self.n_options)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub state: StateId,
    pub action: ActionId,
}

impl Step {
    pub fn new(state: StateId, action: ActionId) -> Self {
        Step { state, action }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentStep {
    pub option: OptionId,
    pub terminate: bool,
}

impl LatentStep {
    pub fn new(option: OptionId, terminate: bool) -> Self {
        LatentStep { option, terminate }
    }

    #[inline]
    pub fn bit(&self) -> usize {
        self.terminate as usize
    }
}

/// One expert episode `(s_t, a_t)_{1:T}` together with the option `o_0`
/// active before the first step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub initial_option: OptionId,
    pub episode_id: usize,
}

impl Trajectory {
    pub fn new(steps: Vec<Step>, initial_option: OptionId) -> Self {
        Trajectory {
            steps,
            initial_option,
            episode_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        if self.steps.is_empty() {
            return Err(HilError::Shape("trajectory must contain at least one step".into()));
        }
        dims.check_option(self.initial_option)?;
        for step in &self.steps {
            dims.check_state(step.state)?;
            dims.check_action(step.action)?;
        }
        Ok(())
    }
}

/// How the option before the first step is treated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Condition on the trajectory's own `initial_option`.
    #[default]
    Fixed,
    /// Marginalize `o_0` under a uniform prior.
    UniformPrior,
}

impl Conditioning {
    /// Belief vector over `O_0` for a trajectory.
    pub fn belief(&self, trajectory: &Trajectory, n_options: usize) -> Vec<f64> {
        match self {
            Conditioning::Fixed => point_belief(trajectory.initial_option, n_options),
            Conditioning::UniformPrior => vec![1.0 / n_options as f64; n_options],
        }
    }
}

pub fn point_belief(o: OptionId, n_options: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_options];
    v[o] = 1.0;
    v
}

/// Per-state feature vectors used as network inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateTable {
    pub feature_dim: usize,
    /// Row-major `n_states x feature_dim`.
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl StateTable {
    pub fn new(feature_dim: usize, features: Vec<f64>) -> Result<Self> {
        if feature_dim == 0 || !features.len().is_multiple_of(feature_dim) {
            return Err(HilError::Shape(format!(
                "feature table of length {} is not a multiple of feature_dim {feature_dim}",
                features.len()
            )));
        }
        Ok(StateTable {
            feature_dim,
            features,
            labels: None,
        })
    }

    /// One-hot features, one per state.
    pub fn one_hot(n_states: usize) -> Self {
        let mut features = vec![0.0; n_states * n_states];
        for s in 0..n_states {
            features[s * n_states + s] = 1.0;
        }
        StateTable {
            feature_dim: n_states,
            features,
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Self {
        self.labels = Some(labels);
        self
    }

    pub fn n_states(&self) -> usize {
        self.features.len() / self.feature_dim
    }

    pub fn feature(&self, s: StateId) -> &[f64] {
        &self.features[s * self.feature_dim..(s + 1) * self.feature_dim]
    }
}

/// The augmented high-level policy: copies the previous option when `b = 0`
/// and defers to `pi_hi` when `b = 1`.
pub fn tilde_pi_hi(
    policy: &HierarchicalPolicy,
    o: OptionId,
    o_prev: OptionId,
    s: StateId,
    b: usize,
) -> Result<f64> {
    let dims = policy.dims();
    dims.check_option(o)?;
    dims.check_option(o_prev)?;
    dims.check_state(s)?;
    match b {
        1 => Ok(policy.eval_pi_hi(s)?[o]),
        0 => Ok(if o == o_prev { 1.0 } else { 0.0 }),
        _ => Err(HilError::dim(format!("termination bit must be 0 or 1, got {b}"))),
    }
}

/// Table-backed variant of [`tilde_pi_hi`] used in the inner loops.
#[inline]
pub(crate) fn tilde_from_tables(tables: &PolicyTables, o: OptionId, o_prev: OptionId, s: StateId, b: usize) -> f64 {
    if b == 1 {
        tables.hi(s, o)
    } else if o == o_prev {
        1.0
    } else {
        0.0
    }
}

/// Log of the joint probability of a trajectory and a latent path, given
/// `o_0` and `s_1`. With `transition` set, the environment factor
/// `prod_{t<T} P(s_{t+1}|s_t,a_t)` is included as well. Returns `-inf` when
/// any factor vanishes.
pub fn joint_log_prob(
    policy: &HierarchicalPolicy,
    trajectory: &Trajectory,
    latents: &[LatentStep],
    transition: Option<&Environment>,
) -> Result<f64> {
    let dims = policy.dims();
    trajectory.validate(dims)?;
    if latents.len() != trajectory.len() {
        return Err(HilError::Shape(format!(
            "latents has length {}, trajectory has length {}",
            latents.len(),
            trajectory.len()
        )));
    }
    for l in latents {
        dims.check_option(l.option)?;
    }
    let tables = policy.tables();
    let mut total = 0.0;
    let mut o_prev = trajectory.initial_option;
    for (step, latent) in trajectory.steps.iter().zip(latents) {
        let s = step.state;
        let b = latent.bit();
        let o = latent.option;
        total += safe_ln(tables.term(s, o_prev, b));
        total += safe_ln(tilde_from_tables(&tables, o, o_prev, s, b));
        total += safe_ln(tables.lo(s, o, step.action));
        if total == LOG_ZERO {
            return Ok(LOG_ZERO);
        }
        o_prev = o;
    }
    if let Some(env) = transition {
        for pair in trajectory.steps.windows(2) {
            env.check_state(pair[0].state)?;
            total += safe_ln(env.transition_prob(pair[0].state, pair[0].action, pair[1].state));
        }
    }
    Ok(total)
}

/// `log P(s_{2:T}, a_{1:T} | o_0, s_1)` with latent options and terminations
/// summed out, via the normalized forward recursion. The environment
/// transition product is excluded (it is constant in the parameters).
pub fn marginal_log_likelihood(policy: &HierarchicalPolicy, trajectory: &Trajectory) -> Result<f64> {
    trajectory.validate(policy.dims())?;
    let tables = policy.tables();
    let belief = point_belief(trajectory.initial_option, policy.dims().n_options);
    crate::batch_em::forward_log_likelihood(&tables, trajectory, &belief)
}

/// Same as [`marginal_log_likelihood`] but with an arbitrary belief over `O_0`.
pub fn marginal_log_likelihood_with_prior(
    policy: &HierarchicalPolicy,
    trajectory: &Trajectory,
    prior: &[f64],
) -> Result<f64> {
    trajectory.validate(policy.dims())?;
    if prior.len() != policy.dims().n_options {
        return Err(HilError::Shape("prior length must equal n_options".into()));
    }
    let tables = policy.tables();
    crate::batch_em::forward_log_likelihood(&tables, trajectory, prior)
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub latents: Vec<LatentStep>,
    /// Realized return including reward noise.
    pub total_reward: f64,
    /// Return with every reward replaced by its expectation `R(s, a)`.
    pub expected_reward: f64,
    /// Whether a terminal state was reached before the horizon.
    pub reached_terminal: bool,
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative sum; fall back to the last
    // outcome with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Samples one hierarchical episode of at most `horizon` steps.
pub fn rollout(
    policy: &HierarchicalPolicy,
    env: &Environment,
    o0: OptionId,
    s1: StateId,
    horizon: usize,
    rng_seed: u64,
) -> Result<Rollout> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let tables = policy.tables();
    rollout_with_rng(&tables, env, o0, s1, horizon, &mut rng)
}

pub fn rollout_with_rng<R: Rng + ?Sized>(
    tables: &PolicyTables,
    env: &Environment,
    o0: OptionId,
    s1: StateId,
    horizon: usize,
    rng: &mut R,
) -> Result<Rollout> {
    let dims = tables.dims();
    if horizon == 0 {
        return Err(HilError::config("horizon must be >= 1"));
    }
    if dims.n_states != env.n_states() || dims.n_actions != env.n_actions() {
        return Err(HilError::dim("policy and environment dimensions differ"));
    }
    dims.check_option(o0)?;
    env.check_state(s1)?;
    if env.is_terminal(s1) {
        return Err(HilError::config(format!("initial state {s1} is terminal")));
    }
    let noise = if env.reward_noise_std() > 0.0 {
        Some(Normal::new(0.0, env.reward_noise_std()).map_err(|e| HilError::Numeric(e.to_string()))?)
    } else {
        None
    };

    let mut steps = Vec::with_capacity(horizon);
    let mut latents = Vec::with_capacity(horizon);
    let mut total_reward = 0.0;
    let mut expected_reward = 0.0;
    let mut reached_terminal = false;
    let mut s = s1;
    let mut o_prev = o0;
    let mut buf = vec![0.0; dims.n_options.max(dims.n_actions).max(2)];

    for _ in 0..horizon {
        for b in 0..2 {
            buf[b] = tables.term(s, o_prev, b);
        }
        let b = sample_categorical(&buf[..2], rng);
        let o = if b == 1 {
            for o in 0..dims.n_options {
                buf[o] = tables.hi(s, o);
            }
            sample_categorical(&buf[..dims.n_options], rng)
        } else {
            o_prev
        };
        for a in 0..dims.n_actions {
            buf[a] = tables.lo(s, o, a);
        }
        let a = sample_categorical(&buf[..dims.n_actions], rng);
        steps.push(Step::new(s, a));
        latents.push(LatentStep::new(o, b == 1));

        let r = env.reward(s, a);
        expected_reward += r;
        total_reward += r + noise.as_ref().map_or(0.0, |n| n.sample(rng));

        let next = sample_categorical(env.transition_row(s, a), rng);
        if env.is_terminal(next) {
            let terminal_reward = env.terminal_reward(next);
            total_reward += terminal_reward;
            expected_reward += terminal_reward;
            reached_terminal = true;
            break;
        }
        s = next;
        o_prev = o;
    }

    Ok(Rollout {
        trajectory: Trajectory::new(steps, o0),
        latents,
        total_reward,
        expected_reward,
        reached_terminal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_two_state_chain, two_state_chain};
    use crate::policies::HierarchicalPolicy;
    use rand::SeedableRng;

    fn uniform_policy(n_states: usize, n_actions: usize, n_options: usize) -> HierarchicalPolicy {
        let dims = ModelDims::new(n_states, n_actions, n_options).unwrap();
        HierarchicalPolicy::tabular_uniform(dims, StateTable::one_hot(n_states))
    }

    #[test]
    fn tilde_pi_hi_cases() {
        let p = uniform_policy(2, 2, 4);
        assert_eq!(tilde_pi_hi(&p, 1, 1, 0, 0).unwrap(), 1.0);
        assert_eq!(tilde_pi_hi(&p, 2, 1, 0, 0).unwrap(), 0.0);
        assert!((tilde_pi_hi(&p, 2, 1, 0, 1).unwrap() - 0.25).abs() < 1e-15);
        assert!(tilde_pi_hi(&p, 4, 1, 0, 1).is_err());
        assert!(tilde_pi_hi(&p, 0, 0, 0, 2).is_err());
    }

    #[test]
    fn tilde_pi_hi_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = ModelDims::new(3, 2, 3).unwrap();
        let p = HierarchicalPolicy::tabular_random(dims, StateTable::one_hot(3), -2.0, 2.0, &mut rng);
        for s in 0..3 {
            for o_prev in 0..3 {
                for b in 0..2 {
                    let sum: f64 = (0..3).map(|o| tilde_pi_hi(&p, o, o_prev, s, b).unwrap()).sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn joint_log_prob_uniform_single_step() {
        let p = uniform_policy(2, 2, 2);
        let traj = Trajectory::new(vec![Step::new(0, 1)], 0);
        let lp = joint_log_prob(&p, &traj, &[LatentStep::new(1, true)], None).unwrap();
        assert!((lp - (0.125f64).ln()).abs() < 1e-12);
        assert!((lp + 2.0794).abs() < 1e-4);
    }

    #[test]
    fn joint_log_prob_impossible_switch() {
        let p = uniform_policy(2, 2, 2);
        let traj = Trajectory::new(vec![Step::new(0, 1), Step::new(1, 0)], 0);
        let latents = [LatentStep::new(0, false), LatentStep::new(1, false)];
        assert_eq!(joint_log_prob(&p, &traj, &latents, None).unwrap(), LOG_ZERO);
    }

    #[test]
    fn joint_log_prob_length_mismatch() {
        let p = uniform_policy(2, 2, 2);
        let traj = Trajectory::new(vec![Step::new(0, 1), Step::new(1, 0)], 0);
        assert!(matches!(
            joint_log_prob(&p, &traj, &[LatentStep::new(0, true)], None),
            Err(HilError::Shape(_))
        ));
    }

    #[test]
    fn joint_log_prob_includes_transitions_when_given() {
        let env = build_two_state_chain();
        let p = uniform_policy(2, 2, 2);
        let traj = Trajectory::new(vec![Step::new(0, 1), Step::new(1, 0)], 0);
        let latents = [LatentStep::new(0, false), LatentStep::new(0, false)];
        let without = joint_log_prob(&p, &traj, &latents, None).unwrap();
        let with = joint_log_prob(&p, &traj, &latents, Some(&env)).unwrap();
        assert!((with - without - 0.7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn marginal_single_step_uniform() {
        let p = uniform_policy(2, 2, 2);
        let traj = Trajectory::new(vec![Step::new(1, 0)], 1);
        let ll = marginal_log_likelihood(&p, &traj).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn marginal_of_deterministic_expert_is_zero() {
        let dims = ModelDims::new(2, 2, 2).unwrap();
        let p = HierarchicalPolicy::from_flat_policy(dims, StateTable::one_hot(2), &[1, 0]).unwrap();
        let traj = Trajectory::new(vec![Step::new(0, 1), Step::new(1, 0), Step::new(1, 0), Step::new(0, 1)], 0);
        assert_eq!(marginal_log_likelihood(&p, &traj).unwrap(), 0.0);
    }

    #[test]
    fn rollout_is_deterministic_per_seed() {
        let env = build_two_state_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = ModelDims::new(2, 2, 2).unwrap();
        let p = HierarchicalPolicy::tabular_random(dims, StateTable::one_hot(2), -1.0, 1.0, &mut rng);
        let a = rollout(&p, &env, 0, 0, 30, 42).unwrap();
        let b = rollout(&p, &env, 0, 0, 30, 42).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.latents, b.latents);
        assert_eq!(a.total_reward, b.total_reward);
    }

    #[test]
    fn deterministic_rollout_independent_of_seed() {
        let env = two_state_chain(1.0, 0.0, 0.9, 20).unwrap();
        let dims = ModelDims::new(2, 2, 1).unwrap();
        let p = HierarchicalPolicy::from_flat_policy(dims, StateTable::one_hot(2), &[1, 0]).unwrap();
        let a = rollout(&p, &env, 0, 0, 10, 1).unwrap();
        let b = rollout(&p, &env, 0, 0, 10, 2).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        let states: Vec<_> = a.trajectory.steps.iter().map(|s| s.state).collect();
        assert_eq!(states, vec![0, 1, 1, 1, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn rollout_rejects_zero_horizon() {
        let env = build_two_state_chain();
        let p = uniform_policy(2, 2, 2);
        assert!(rollout(&p, &env, 0, 0, 0, 1).is_err());
    }

    #[test]
    fn termination_frequency_matches_policy() {
        // Fix (s, o_prev) by rolling single steps from the same start.
        let env = build_two_state_chain();
        let dims = ModelDims::new(2, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = HierarchicalPolicy::tabular_random(dims, StateTable::one_hot(2), -1.5, 1.5, &mut rng);
        let tables = p.tables();
        let expected = tables.term(0, 1, 1);
        let n = 100_000;
        let mut hits = 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..n {
            let r = rollout_with_rng(&tables, &env, 1, 0, 1, &mut rng).unwrap();
            hits += r.latents[0].bit();
        }
        let freq = hits as f64 / n as f64;
        let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((freq - expected).abs() < 3.0 * sigma, "freq {freq} expected {expected}");
    }
}
