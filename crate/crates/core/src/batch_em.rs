//! Batch Baum-Welch: forward-backward smoothing over whole trajectories and
//! the EM loop around it.
//!
//! The step factor linking `(o_{t-1}) -> (o_t, b_t)` at step `t` is
//! `M_t(o', b, o) = pi_b(b|s_t,o') * tilde_pi_hi(o|o',s_t,b) * pi_lo(a_t|s_t,o)`.
//! Both recursions are rescaled by the per-step normalizer `c_t` of the
//! forward pass, so `sum_t ln c_t` is the marginal log-likelihood.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HilError, Result};
use crate::opgm::{point_belief, Conditioning, OptionId, Trajectory};
use crate::policies::{objective_gradient, Adamax, HierarchicalPolicy, ParamKind, PolicyParams, PolicyTables, WeightedLogTerms};
use crate::regularizers::{Penalty, RegularizerConfig};

/// Forward and backward variables and the smoothed marginals of one trajectory.
///
/// All per-step blocks are `|O| x 2` laid out as `o * 2 + b`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SmoothingTables {
    pub n_options: usize,
    /// Filtered `P(O_t, B_t | data_{1:t})`, one block per step.
    pub alpha: Vec<f64>,
    /// Backward messages rescaled by the forward normalizers; constant in `b`.
    pub beta: Vec<f64>,
    /// Smoothed `P(O_t, B_t | data)`.
    pub gamma: Vec<f64>,
    /// Smoothed `P(O_{t-1}, B_t | data)` for steps `2..=T`; `T - 1` blocks.
    pub xi: Vec<f64>,
    /// Smoothed `P(O_0, B_1 | data)`.
    pub initial_xi: Vec<f64>,
    /// Forward normalizers `c_t`.
    pub normalizers: Vec<f64>,
}

impl SmoothingTables {
    pub fn len(&self) -> usize {
        self.normalizers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalizers.is_empty()
    }

    pub fn loglik(&self) -> f64 {
        self.normalizers.iter().map(|c| c.ln()).sum()
    }

    fn block(v: &[f64], t: usize, no: usize) -> &[f64] {
        &v[t * no * 2..(t + 1) * no * 2]
    }

    /// `gamma` at 0-based step `t`.
    pub fn gamma_at(&self, t: usize) -> &[f64] {
        Self::block(&self.gamma, t, self.n_options)
    }

    /// Posterior over `(o_{t-1}, b_t)` at 0-based step `t`; step 0 gives
    /// [`SmoothingTables::initial_xi`].
    pub fn xi_at(&self, t: usize) -> &[f64] {
        if t == 0 {
            &self.initial_xi
        } else {
            Self::block(&self.xi, t - 1, self.n_options)
        }
    }
}

fn check_inputs(tables: &PolicyTables, trajectory: &Trajectory, belief: &[f64]) -> Result<()> {
    if trajectory.is_empty() {
        return Err(HilError::Shape("trajectory must contain at least one step".into()));
    }
    trajectory.validate(tables.dims())?;
    if belief.len() != tables.dims().n_options {
        return Err(HilError::Shape("initial belief length must equal n_options".into()));
    }
    Ok(())
}

/// Forward pass for step `t` from the option marginal of the previous step
/// (or the initial belief). Returns the normalizer.
fn forward_step(tables: &PolicyTables, trajectory: &Trajectory, t: usize, prev: &[f64], out: &mut [f64]) -> Result<f64> {
    let no = prev.len();
    let step = trajectory.steps[t];
    let s = step.state;
    let switch: f64 = (0..no).map(|o| prev[o] * tables.term(s, o, 1)).sum();
    let mut c = 0.0;
    for o in 0..no {
        let lo = tables.lo(s, o, step.action);
        out[o * 2] = prev[o] * tables.term(s, o, 0) * lo;
        out[o * 2 + 1] = switch * tables.hi(s, o) * lo;
        c += out[o * 2] + out[o * 2 + 1];
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(HilError::DegenerateTrajectory { t: t + 1 });
    }
    for v in out.iter_mut() {
        *v /= c;
    }
    Ok(c)
}

fn option_marginal(block: &[f64], out: &mut [f64]) {
    for (o, m) in out.iter_mut().enumerate() {
        *m = block[o * 2] + block[o * 2 + 1];
    }
}

/// `log P(a_{1:T}, s_{2:T} | belief over O_0, s_1)` without environment
/// factors, by the forward recursion alone.
pub fn forward_log_likelihood(tables: &PolicyTables, trajectory: &Trajectory, belief: &[f64]) -> Result<f64> {
    check_inputs(tables, trajectory, belief)?;
    let no = belief.len();
    let mut prev = belief.to_vec();
    let mut block = vec![0.0; no * 2];
    let mut total = 0.0;
    for t in 0..trajectory.len() {
        total += forward_step(tables, trajectory, t, &prev, &mut block)?.ln();
        option_marginal(&block, &mut prev);
    }
    Ok(total)
}

/// Smoothing under the policy, conditioning on the trajectory's `o_0`.
pub fn forward_backward(policy: &HierarchicalPolicy, trajectory: &Trajectory) -> Result<SmoothingTables> {
    let belief = point_belief(trajectory.initial_option, policy.dims().n_options);
    forward_backward_with_tables(&policy.tables(), trajectory, &belief)
}

/// `sum_o pi_hi(o|s) pi_lo(a|s,o) w(o)` and the stay term for the backward pass.
#[inline]
fn switch_mass(tables: &PolicyTables, s: usize, a: usize, weights: &[f64]) -> f64 {
    (0..weights.len()).map(|o| tables.hi(s, o) * tables.lo(s, o, a) * weights[o]).sum()
}

/// Forward-backward from precomputed probability tables and an arbitrary
/// belief over `O_0`. Accepts any `T >= 1`.
pub fn forward_backward_with_tables(tables: &PolicyTables, trajectory: &Trajectory, belief: &[f64]) -> Result<SmoothingTables> {
    let mut out = SmoothingTables::default();
    forward_backward_into(tables, trajectory, belief, &mut out)?;
    Ok(out)
}

fn reset(v: &mut Vec<f64>, len: usize) {
    v.clear();
    v.resize(len, 0.0);
}

/// [`forward_backward_with_tables`] writing into `out`, reusing its buffers.
/// On error the contents of `out` are unspecified.
pub fn forward_backward_into(tables: &PolicyTables, trajectory: &Trajectory, belief: &[f64], out: &mut SmoothingTables) -> Result<()> {
    check_inputs(tables, trajectory, belief)?;
    let no = belief.len();
    let len = trajectory.len();
    let w = no * 2;
    out.n_options = no;
    let SmoothingTables {
        alpha,
        beta,
        gamma,
        xi,
        initial_xi,
        normalizers,
        ..
    } = out;

    reset(alpha, len * w);
    reset(normalizers, len);
    let mut prev = belief.to_vec();
    for t in 0..len {
        let block = &mut alpha[t * w..(t + 1) * w];
        normalizers[t] = forward_step(tables, trajectory, t, &prev, block)?;
        option_marginal(block, &mut prev);
    }

    // beta_t(o) = sum_{b,o''} M_{t+1}(o,b,o'') beta_{t+1}(o'') / c_{t+1}
    reset(beta, len * w);
    let mut msg = vec![1.0; no];
    beta[(len - 1) * w..].fill(1.0);
    for t in (0..len - 1).rev() {
        let next = trajectory.steps[t + 1];
        let (s, a) = (next.state, next.action);
        let switch = switch_mass(tables, s, a, &msg);
        let c = normalizers[t + 1];
        for (o, m) in msg.iter_mut().enumerate() {
            *m = (tables.term(s, o, 0) * tables.lo(s, o, a) * *m + tables.term(s, o, 1) * switch) / c;
            beta[t * w + o * 2] = *m;
            beta[t * w + o * 2 + 1] = *m;
        }
    }

    let normalize = |block: &mut [f64]| {
        let z: f64 = block.iter().sum();
        if z > 0.0 {
            for v in block.iter_mut() {
                *v /= z;
            }
        }
    };

    gamma.clear();
    gamma.extend(alpha.iter().zip(beta.iter()).map(|(a, b)| a * b));
    for block in gamma.chunks_mut(w) {
        normalize(block);
    }

    // xi_t(o', b) is proportional to the previous option marginal times
    // pi_b(b|s_t,o') times the b-transition into the smoothed future.
    let mut fut = vec![0.0; no];
    let mut xi_block = |t: usize, prev_marginal: &[f64], out: &mut [f64]| {
        let step = trajectory.steps[t];
        let (s, a) = (step.state, step.action);
        let future = &beta[t * w..(t + 1) * w];
        for (o, f) in fut.iter_mut().enumerate() {
            *f = future[o * 2];
        }
        let switch = switch_mass(tables, s, a, &fut);
        for o in 0..no {
            out[o * 2] = prev_marginal[o] * tables.term(s, o, 0) * tables.lo(s, o, a) * fut[o];
            out[o * 2 + 1] = prev_marginal[o] * tables.term(s, o, 1) * switch;
        }
        normalize(out);
    };

    reset(initial_xi, w);
    xi_block(0, belief, initial_xi);
    reset(xi, (len - 1) * w);
    let mut marginal = vec![0.0; no];
    for t in 1..len {
        option_marginal(&alpha[(t - 1) * w..t * w], &mut marginal);
        xi_block(t, &marginal, &mut xi[(t - 1) * w..t * w]);
    }

    Ok(())
}

/// Adds the expected complete-data log-likelihood weights of one trajectory
/// into `terms`, each scaled by `scale`. `include_initial` controls the
/// `pi_b(b_1|s_1,o_0)` term.
pub fn accumulate_terms(
    smoothing: &SmoothingTables,
    trajectory: &Trajectory,
    include_initial: bool,
    scale: f64,
    terms: &mut WeightedLogTerms,
) -> Result<()> {
    if smoothing.len() != trajectory.len() || smoothing.n_options != terms.dims().n_options {
        return Err(HilError::Shape("smoothing tables do not match the trajectory".into()));
    }
    for t in 0..trajectory.len() {
        accumulate_step(smoothing, trajectory, t, include_initial, scale, terms);
    }
    Ok(())
}

fn accumulate_step(
    smoothing: &SmoothingTables,
    trajectory: &Trajectory,
    t: usize,
    include_initial: bool,
    scale: f64,
    terms: &mut WeightedLogTerms,
) {
    let no = smoothing.n_options;
    let step = trajectory.steps[t];
    let s = step.state;
    if t > 0 || include_initial {
        let xi = smoothing.xi_at(t);
        for o_prev in 0..no {
            for b in 0..2 {
                terms.add_term(s, o_prev, b, scale * xi[o_prev * 2 + b]);
            }
        }
    }
    let g = smoothing.gamma_at(t);
    for o in 0..no {
        terms.add_hi(s, o, scale * g[o * 2 + 1]);
        terms.add_lo(s, o, step.action, scale * (g[o * 2] + g[o * 2 + 1]));
    }
}

/// The batch auxiliary function `Q(theta_new | theta_old)` averaged over the
/// `T` steps, including the initial termination term.
pub fn batch_q(policy_new: &HierarchicalPolicy, smoothing: &SmoothingTables, trajectory: &Trajectory) -> Result<f64> {
    batch_q_multi(policy_new, &[(smoothing, trajectory)], true)
}

/// Sum over trajectories divided by the total number of steps.
pub fn batch_q_multi(
    policy_new: &HierarchicalPolicy,
    data: &[(&SmoothingTables, &Trajectory)],
    include_initial: bool,
) -> Result<f64> {
    let terms = batch_terms(*policy_new.dims(), data, include_initial)?;
    Ok(terms.evaluate(&policy_new.tables()))
}

fn batch_terms(
    dims: crate::ModelDims,
    data: &[(&SmoothingTables, &Trajectory)],
    include_initial: bool,
) -> Result<WeightedLogTerms> {
    let total: usize = data.iter().map(|(_, t)| t.len()).sum();
    if total == 0 {
        return Err(HilError::Shape("no steps to average over".into()));
    }
    let mut terms = WeightedLogTerms::new(dims);
    for (sm, traj) in data {
        accumulate_terms(sm, traj, include_initial, 1.0 / total as f64, &mut terms)?;
    }
    Ok(terms)
}

/// Smallest probability written by the closed-form M-step.
pub const MSTEP_FLOOR: f64 = 1e-12;

/// Exact maximizer of `sum w log p` over tabular policies: each row becomes
/// its normalized weights. Rows with no weight keep their previous logits.
pub fn tabular_m_step(previous: &HierarchicalPolicy, terms: &WeightedLogTerms) -> Result<PolicyParams> {
    if previous.kind() != ParamKind::Tabular {
        return Err(HilError::config("the closed-form M-step requires a tabular policy"));
    }
    if terms.dims() != previous.dims() {
        return Err(HilError::dim("objective and policy dimensions differ"));
    }
    terms.check_finite()?;
    let d = previous.dims();
    let mut params = previous.params().clone();
    let fit = |weights: &[f64], logits: &mut [f64], row: usize| {
        for (w, z) in weights.chunks(row).zip(logits.chunks_mut(row)) {
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                continue;
            }
            for (z, &w) in z.iter_mut().zip(w) {
                *z = (w / total).max(MSTEP_FLOOR).ln();
            }
        }
    };
    fit(&terms.hi, &mut params.theta_hi, d.n_options);
    fit(&terms.lo, &mut params.theta_lo, d.n_actions);
    fit(&terms.term, &mut params.theta_b, 2);
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MStep {
    ClosedFormTabular,
    Gradient { steps: usize, minibatch: usize, lr: f64 },
}

impl Default for MStep {
    fn default() -> Self {
        MStep::Gradient {
            steps: 50,
            minibatch: 32,
            lr: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchConfig {
    pub n_iterations: usize,
    pub mstep: MStep,
    /// Leave the `pi_b(b_1|s_1,o_0)` term out of the auxiliary function.
    pub drop_initial_termination: bool,
    pub conditioning: Conditioning,
    /// Record wall-clock times in the log.
    pub timing: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            n_iterations: 20,
            mstep: MStep::default(),
            drop_initial_termination: false,
            conditioning: Conditioning::Fixed,
            timing: false,
        }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(HilError::config("n_iterations must be >= 1"));
        }
        if let MStep::Gradient { steps, minibatch, lr } = self.mstep {
            if steps == 0 || minibatch == 0 {
                return Err(HilError::config("gradient steps and minibatch size must be >= 1"));
            }
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(HilError::config("learning rate must be > 0"));
            }
        }
        Ok(())
    }

    /// Gradient steps taken over a whole run.
    pub fn gradient_budget(&self) -> usize {
        match self.mstep {
            MStep::ClosedFormTabular => 0,
            MStep::Gradient { steps, .. } => steps * self.n_iterations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLogRecord {
    pub iteration: usize,
    /// Marginal log-likelihood of all trajectories after this iteration.
    pub loglik: f64,
    /// Auxiliary function of the new parameters under the E-step of this iteration.
    pub q_value: f64,
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub policy: HierarchicalPolicy,
    pub initial_loglik: f64,
    pub log: Vec<BatchLogRecord>,
    pub gradient_steps: usize,
}

/// Smooths every trajectory into `out`, reusing its buffers.
fn e_step(
    tables: &PolicyTables,
    trajectories: &[Trajectory],
    conditioning: Conditioning,
    out: &mut Vec<SmoothingTables>,
) -> Result<()> {
    let no = tables.dims().n_options;
    out.resize_with(trajectories.len(), SmoothingTables::default);
    out.par_iter_mut()
        .zip(trajectories)
        .try_for_each(|(sm, traj)| forward_backward_into(tables, traj, &conditioning.belief(traj, no), sm))
}

/// Sum of marginal log-likelihoods under the given conditioning.
pub fn total_log_likelihood(policy: &HierarchicalPolicy, trajectories: &[Trajectory], conditioning: Conditioning) -> Result<f64> {
    let tables = policy.tables();
    let no = policy.dims().n_options;
    let parts: Result<Vec<f64>> = trajectories
        .par_iter()
        .map(|traj| forward_log_likelihood(&tables, traj, &conditioning.belief(traj, no)))
        .collect();
    Ok(parts?.iter().sum())
}

/// Runs `n_iterations` rounds of E-step and M-step. `seed` drives the
/// minibatch order of the gradient M-step.
pub fn run_batch_bw(
    trajectories: &[Trajectory],
    config: &BatchConfig,
    initial: &HierarchicalPolicy,
    penalties: &RegularizerConfig,
    seed: u64,
) -> Result<BatchOutcome> {
    config.validate()?;
    penalties.validate()?;
    if trajectories.is_empty() || trajectories.iter().all(|t| t.is_empty()) {
        return Err(HilError::Shape("no demonstration steps".into()));
    }
    let dims = *initial.dims();
    for traj in trajectories {
        if traj.is_empty() {
            return Err(HilError::Shape(format!("episode {} is empty", traj.episode_id)));
        }
        traj.validate(&dims)?;
    }
    if matches!(config.mstep, MStep::ClosedFormTabular) && !penalties.is_zero() {
        return Err(HilError::config("the closed-form M-step cannot include regularizers; use the gradient M-step"));
    }
    let include_initial = !config.drop_initial_termination;
    let penalty = if penalties.is_zero() {
        None
    } else {
        Some(Penalty::batch(*penalties, dims.n_options, trajectories)?)
    };

    // Global step index -> (trajectory, step) for minibatching.
    let index: Vec<(usize, usize)> = trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, tr)| (0..tr.len()).map(move |t| (i, t)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut policy = initial.clone();
    let mut optimizer = Adamax::new(policy.params().dim(), 0.0);
    let mut log = Vec::with_capacity(config.n_iterations);
    let mut gradient_steps = 0;
    let mut smoothing = Vec::new();
    let initial_loglik = total_log_likelihood(&policy, trajectories, config.conditioning)?;

    for iteration in 1..=config.n_iterations {
        let start = Instant::now();
        let tables = policy.tables();
        e_step(&tables, trajectories, config.conditioning, &mut smoothing)?;
        let pairs: Vec<(&SmoothingTables, &Trajectory)> = smoothing.iter().zip(trajectories).collect();
        let full_terms = batch_terms(dims, &pairs, include_initial)?;

        match config.mstep {
            MStep::ClosedFormTabular => {
                let params = tabular_m_step(&policy, &full_terms)?;
                policy = policy.with_params(params)?;
            }
            MStep::Gradient { steps, minibatch, lr } => {
                optimizer.lr = lr;
                let batch = minibatch.min(index.len());
                let mut terms = WeightedLogTerms::new(dims);
                for _ in 0..steps {
                    terms.clear();
                    for _ in 0..batch {
                        if cursor == order.len() {
                            order = (0..index.len()).collect();
                            order.shuffle(&mut rng);
                            cursor = 0;
                        }
                        let (i, t) = index[order[cursor]];
                        cursor += 1;
                        accumulate_step(&smoothing[i], &trajectories[i], t, include_initial, 1.0 / batch as f64, &mut terms);
                    }
                    let grad = objective_gradient(&policy, &terms, penalty.as_ref())?;
                    optimizer.ascend(policy.params_mut(), &grad)?;
                    if !policy.params().all_finite() {
                        return Err(HilError::Numeric(format!("parameters became non-finite at iteration {iteration}")));
                    }
                    gradient_steps += 1;
                }
            }
        }

        let q_value = full_terms.evaluate(&policy.tables());
        let loglik = total_log_likelihood(&policy, trajectories, config.conditioning)?;
        log.push(BatchLogRecord {
            iteration,
            loglik,
            q_value,
            wall_ms: config.timing.then(|| start.elapsed().as_secs_f64() * 1e3),
        });
    }

    Ok(BatchOutcome {
        policy,
        initial_loglik,
        log,
        gradient_steps,
    })
}

/// The option with the largest smoothed probability at each step.
pub fn most_likely_options(smoothing: &SmoothingTables) -> Vec<OptionId> {
    (0..smoothing.len())
        .map(|t| {
            let g = smoothing.gamma_at(t);
            let mut best = 0;
            for o in 1..smoothing.n_options {
                if g[o * 2] + g[o * 2 + 1] > g[best * 2] + g[best * 2 + 1] {
                    best = o;
                }
            }
            best
        })
        .collect()
}
