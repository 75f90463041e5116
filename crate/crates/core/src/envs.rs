//! Discrete MDPs used to produce expert data and to score learned policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HilError, Result};
use crate::opgm::{sample_categorical, ActionId, StateId, StateTable, Step, Trajectory};

const ROW_TOL: f64 = 1e-12;

/// A finite MDP. Rewards and the discount are only used for expert
/// construction and evaluation; learners see state-action pairs alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub name: String,
    pub n_states: usize,
    pub n_actions: usize,
    /// `P(s'|s,a)` at `(s * n_actions + a) * n_states + s'`.
    pub transition: Vec<f64>,
    /// Expected reward `R(s,a)` at `s * n_actions + a`.
    pub reward: Vec<f64>,
    /// Standard deviation of the zero-mean Gaussian added to each step reward.
    pub reward_noise_std: f64,
    pub initial_distribution: Vec<f64>,
    pub terminal: Vec<bool>,
    /// Reward collected on arrival in a terminal state.
    pub terminal_reward: Vec<f64>,
    pub discount: f64,
    pub horizon: usize,
    pub state_table: StateTable,
}

impl Environment {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(HilError::Model("environment needs at least one state and action".into()));
        }
        if self.transition.len() != ns * na * ns
            || self.reward.len() != ns * na
            || self.initial_distribution.len() != ns
            || self.terminal.len() != ns
            || self.terminal_reward.len() != ns
            || self.state_table.n_states() != ns
        {
            return Err(HilError::Model("environment table sizes are inconsistent".into()));
        }
        for (i, row) in self.transition.chunks(ns).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                return Err(HilError::Model(format!(
                    "transition row (s={}, a={}) is not a distribution (sum {sum})",
                    i / na,
                    i % na
                )));
            }
        }
        let init: f64 = self.initial_distribution.iter().sum();
        if self.initial_distribution.iter().any(|&p| !(p >= 0.0)) || (init - 1.0).abs() > 1e-9 {
            return Err(HilError::Model("initial distribution does not sum to 1".into()));
        }
        if self.initial_distribution.iter().zip(&self.terminal).any(|(&p, &t)| t && p > 0.0) {
            return Err(HilError::Model("initial distribution puts mass on a terminal state".into()));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(HilError::Model(format!("discount must lie in (0, 1), got {}", self.discount)));
        }
        if self.horizon == 0 {
            return Err(HilError::Model("horizon must be >= 1".into()));
        }
        if !(self.reward_noise_std >= 0.0) || self.reward.iter().chain(&self.terminal_reward).any(|r| !r.is_finite()) {
            return Err(HilError::Model("rewards must be finite".into()));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn check_state(&self, s: StateId) -> Result<()> {
        if s < self.n_states {
            Ok(())
        } else {
            Err(HilError::dim(format!("state {s} out of range for {} states", self.n_states)))
        }
    }

    pub fn is_terminal(&self, s: StateId) -> bool {
        self.terminal[s]
    }

    pub fn reward_noise_std(&self) -> f64 {
        self.reward_noise_std
    }

    pub fn reward(&self, s: StateId, a: ActionId) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn terminal_reward(&self, s: StateId) -> f64 {
        self.terminal_reward[s]
    }

    pub fn transition_row(&self, s: StateId, a: ActionId) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_states;
        &self.transition[i..i + self.n_states]
    }

    pub fn transition_prob(&self, s: StateId, a: ActionId, next: StateId) -> f64 {
        self.transition_row(s, a)[next]
    }

    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> StateId {
        sample_categorical(&self.initial_distribution, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub slip_prob: f64,
    pub reward_noise_std: f64,
    /// `(x, y)` cells.
    pub goal_cells: Vec<(usize, usize)>,
    pub start_cells: Vec<(usize, usize)>,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub discount: f64,
    pub horizon: usize,
}

impl Default for GridworldSpec {
    fn default() -> Self {
        GridworldSpec {
            width: 10,
            height: 10,
            slip_prob: 0.2,
            reward_noise_std: 0.5,
            goal_cells: vec![(9, 9)],
            start_cells: vec![(0, 0)],
            step_reward: -0.01,
            goal_reward: 1.0,
            discount: 0.99,
            horizon: 100,
        }
    }
}

/// Grid actions; `North` increases `y`.
pub const NORTH: ActionId = 0;
pub const EAST: ActionId = 1;
pub const SOUTH: ActionId = 2;
pub const WEST: ActionId = 3;

impl GridworldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(HilError::config("grid must be at least 1x1"));
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return Err(HilError::config(format!("slip_prob must lie in [0, 1), got {}", self.slip_prob)));
        }
        if !(self.reward_noise_std >= 0.0 && self.reward_noise_std.is_finite()) {
            return Err(HilError::config("reward_noise_std must be finite and >= 0"));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(HilError::config("discount must lie in (0, 1)"));
        }
        if self.horizon == 0 {
            return Err(HilError::config("horizon must be >= 1"));
        }
        if self.start_cells.is_empty() {
            return Err(HilError::config("at least one start cell is required"));
        }
        for &(x, y) in self.goal_cells.iter().chain(&self.start_cells) {
            if x >= self.width || y >= self.height {
                return Err(HilError::config(format!("cell ({x}, {y}) is outside the grid")));
            }
        }
        if self.start_cells.iter().any(|c| self.goal_cells.contains(c)) {
            return Err(HilError::config("a start cell is also a goal cell"));
        }
        Ok(())
    }

    pub fn state_of(&self, x: usize, y: usize) -> StateId {
        y * self.width + x
    }

    pub fn cell_of(&self, s: StateId) -> (usize, usize) {
        (s % self.width, s / self.width)
    }
}

/// Builds the slippery gridworld. Each action moves in its direction with
/// probability `1 - slip_prob` and to either perpendicular neighbour with
/// `slip_prob / 2`; moves into a wall leave the agent in place.
pub fn build_gridworld(spec: &GridworldSpec) -> Result<Environment> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let ns = w * h;
    let na = 4;
    let step = |x: usize, y: usize, a: ActionId| -> StateId {
        let (nx, ny) = match a {
            NORTH if y + 1 < h => (x, y + 1),
            EAST if x + 1 < w => (x + 1, y),
            SOUTH if y > 0 => (x, y - 1),
            WEST if x > 0 => (x - 1, y),
            _ => (x, y),
        };
        spec.state_of(nx, ny)
    };
    let mut terminal = vec![false; ns];
    let mut terminal_reward = vec![0.0; ns];
    for &(x, y) in &spec.goal_cells {
        terminal[spec.state_of(x, y)] = true;
        terminal_reward[spec.state_of(x, y)] = spec.goal_reward;
    }
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na];
    for s in 0..ns {
        let (x, y) = spec.cell_of(s);
        for a in 0..na {
            let row = &mut transition[(s * na + a) * ns..(s * na + a + 1) * ns];
            if terminal[s] {
                row[s] = 1.0;
                continue;
            }
            reward[s * na + a] = spec.step_reward;
            let lateral = if a == NORTH || a == SOUTH { [EAST, WEST] } else { [NORTH, SOUTH] };
            row[step(x, y, a)] += 1.0 - spec.slip_prob;
            for l in lateral {
                row[step(x, y, l)] += spec.slip_prob / 2.0;
            }
        }
    }
    let mut initial_distribution = vec![0.0; ns];
    for &(x, y) in &spec.start_cells {
        initial_distribution[spec.state_of(x, y)] += 1.0 / spec.start_cells.len() as f64;
    }
    let features: Vec<f64> = (0..ns)
        .flat_map(|s| {
            let (x, y) = spec.cell_of(s);
            [x as f64 / w as f64, y as f64 / h as f64]
        })
        .collect();
    let labels = (0..ns)
        .map(|s| {
            let (x, y) = spec.cell_of(s);
            format!("({x},{y})")
        })
        .collect();
    let env = Environment {
        name: format!("gridworld_{w}x{h}"),
        n_states: ns,
        n_actions: na,
        transition,
        reward,
        reward_noise_std: spec.reward_noise_std,
        initial_distribution,
        terminal,
        terminal_reward,
        discount: spec.discount,
        horizon: spec.horizon,
        state_table: StateTable::new(2, features)?.with_labels(labels),
    };
    env.validate()?;
    Ok(env)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSpec {
    /// Probability that action 1 moves state 0 to state 1.
    pub success_prob: f64,
    /// Probability that state 1 falls back to state 0, whatever the action.
    pub decay_prob: f64,
    pub discount: f64,
    pub horizon: usize,
}

impl Default for ChainSpec {
    fn default() -> Self {
        ChainSpec {
            success_prob: 0.7,
            decay_prob: 0.3,
            discount: 0.9,
            horizon: 50,
        }
    }
}

/// Two states, two actions; every action in state 1 earns reward 1.
pub fn two_state_chain(success_prob: f64, decay_prob: f64, discount: f64, horizon: usize) -> Result<Environment> {
    for (name, p) in [("success_prob", success_prob), ("decay_prob", decay_prob)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(HilError::config(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    if !(discount > 0.0 && discount < 1.0) {
        return Err(HilError::config("discount must lie in (0, 1)"));
    }
    if horizon == 0 {
        return Err(HilError::config("horizon must be >= 1"));
    }
    #[rustfmt::skip]
    let transition = vec![
        // s = 0: action 0 stays, action 1 tries to move up.
        1.0, 0.0,
        1.0 - success_prob, success_prob,
        // s = 1: both actions decay with the same probability.
        decay_prob, 1.0 - decay_prob,
        decay_prob, 1.0 - decay_prob,
    ];
    let env = Environment {
        name: "two_state_chain".into(),
        n_states: 2,
        n_actions: 2,
        transition,
        reward: vec![0.0, 0.0, 1.0, 1.0],
        reward_noise_std: 0.0,
        initial_distribution: vec![1.0, 0.0],
        terminal: vec![false, false],
        terminal_reward: vec![0.0, 0.0],
        discount,
        horizon,
        state_table: StateTable::one_hot(2),
    };
    env.validate()?;
    Ok(env)
}

pub fn build_two_state_chain() -> Environment {
    let c = ChainSpec::default();
    two_state_chain(c.success_prob, c.decay_prob, c.discount, c.horizon).expect("default chain is valid")
}

/// Serialized environment description, tagged by `kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    Gridworld(GridworldSpec),
    TwoStateChain(ChainSpec),
}

impl EnvSpec {
    pub fn build(&self) -> Result<Environment> {
        match self {
            EnvSpec::Gridworld(g) => build_gridworld(g),
            EnvSpec::TwoStateChain(c) => two_state_chain(c.success_prob, c.decay_prob, c.discount, c.horizon),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueIteration {
    pub values: Vec<f64>,
    pub greedy_policy: Vec<ActionId>,
    pub sweeps: usize,
}

fn action_value(env: &Environment, values: &[f64], s: StateId, a: ActionId) -> f64 {
    let next: f64 = env.transition_row(s, a).iter().zip(values).map(|(p, v)| p * v).sum();
    env.reward(s, a) + env.discount * next
}

/// One synchronous Bellman optimality backup with expected rewards.
/// Terminal states keep their arrival reward.
pub fn bellman_backup(env: &Environment, values: &[f64]) -> Vec<f64> {
    (0..env.n_states)
        .map(|s| {
            if env.is_terminal(s) {
                env.terminal_reward(s)
            } else {
                (0..env.n_actions)
                    .map(|a| action_value(env, values, s, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect()
}

/// Iterates [`bellman_backup`] from zero until the sup-norm change drops
/// below `tol * (1 - discount)`, which bounds the distance to the fixed
/// point by `tol`. Ties in the greedy policy go to the lowest action index.
pub fn value_iteration(env: &Environment, tol: f64) -> Result<ValueIteration> {
    env.validate()?;
    if !(tol > 0.0) {
        return Err(HilError::config("tolerance must be > 0"));
    }
    let threshold = tol * (1.0 - env.discount);
    let mut values = vec![0.0; env.n_states];
    let mut sweeps = 0;
    loop {
        let next = bellman_backup(env, &values);
        sweeps += 1;
        let residual = next.iter().zip(&values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        values = next;
        if residual < threshold {
            break;
        }
        if sweeps > 10_000_000 {
            return Err(HilError::Numeric("value iteration did not converge".into()));
        }
    }
    let greedy_policy = (0..env.n_states)
        .map(|s| {
            let mut best = 0;
            let mut best_q = f64::NEG_INFINITY;
            for a in 0..env.n_actions {
                let q = action_value(env, &values, s, a);
                if q > best_q {
                    best = a;
                    best_q = q;
                }
            }
            best
        })
        .collect();
    Ok(ValueIteration {
        values,
        greedy_policy,
        sweeps,
    })
}

/// Expert trajectories with episode boundaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub env_name: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub episodes: Vec<Trajectory>,
}

impl DemonstrationSet {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Trajectory::len).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.episodes.iter().flat_map(|e| e.steps.iter())
    }

    /// Sorted distinct states visited by the expert.
    pub fn explored_states(&self) -> Vec<StateId> {
        let mut seen = vec![false; self.n_states];
        for st in self.steps() {
            seen[st.state] = true;
        }
        (0..self.n_states).filter(|&s| seen[s]).collect()
    }

    pub fn explored_actions(&self) -> Vec<ActionId> {
        let mut seen = vec![false; self.n_actions];
        for st in self.steps() {
            seen[st.action] = true;
        }
        (0..self.n_actions).filter(|&a| seen[a]).collect()
    }

    /// The first `n_steps` steps, cutting the last episode if needed.
    pub fn truncated(&self, n_steps: usize) -> DemonstrationSet {
        let mut left = n_steps;
        let mut episodes = Vec::new();
        for e in &self.episodes {
            if left == 0 {
                break;
            }
            let mut e = e.clone();
            e.steps.truncate(left);
            left -= e.steps.len();
            episodes.push(e);
        }
        DemonstrationSet {
            episodes,
            ..self.clone()
        }
    }
}

/// Rolls out the epsilon-greedy version of a flat expert until at least
/// `n_steps` steps are recorded. With probability `epsilon` an action is
/// drawn uniformly (possibly the greedy one).
pub fn generate_demonstrations(
    env: &Environment,
    expert: &[ActionId],
    n_steps: usize,
    epsilon: f64,
    seed: u64,
) -> Result<DemonstrationSet> {
    env.validate()?;
    if expert.len() != env.n_states || expert.iter().any(|&a| a >= env.n_actions) {
        return Err(HilError::dim("expert policy does not match the environment"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(HilError::config(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::new();
    let mut total = 0;
    while total < n_steps {
        let mut s = env.sample_initial_state(&mut rng);
        let mut steps = Vec::new();
        for _ in 0..env.horizon {
            let a = if rng.random::<f64>() < epsilon {
                rng.random_range(0..env.n_actions)
            } else {
                expert[s]
            };
            steps.push(Step::new(s, a));
            let next = sample_categorical(env.transition_row(s, a), &mut rng);
            if env.is_terminal(next) {
                break;
            }
            s = next;
        }
        total += steps.len();
        let mut traj = Trajectory::new(steps, 0);
        traj.episode_id = episodes.len();
        episodes.push(traj);
    }
    Ok(DemonstrationSet {
        env_name: env.name.clone(),
        n_states: env.n_states,
        n_actions: env.n_actions,
        episodes,
    })
}
