//! Online Baum-Welch.
//!
//! After `T` samples the learner holds
//!
//! * the filter `chi_T(o) = P(O_T = o | data_{1:T})`, and
//! * `rho_T(o', b, o, s, a | o'')`, the time-averaged smoothed indicator of
//!   `(O_{t-1}, B_t, O_t, S_t, A_t) = (o', b, o, s, a)` conditioned on the
//!   current option `O_T = o''`.
//!
//! Their contraction `phi_T = sum_{o''} rho_T(., o'') chi_T(o'')` is the
//! sufficient statistic of the auxiliary function. Each new sample updates
//! both in `O(|O|^3 * |pairs|)` time, independent of `T`.
//!
//! `rho` is stored only for the `(s, a)` pairs seen so far. For any unseen
//! pair it is identically zero, so nothing is lost.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::batch_em::tabular_m_step;
use crate::error::{HilError, Result};
use crate::opgm::{ActionId, Conditioning, ModelDims, OptionId, StateId, Trajectory};
use crate::policies::{objective_gradient, Adamax, HierarchicalPolicy, PolicyTables, WeightedLogTerms};
use crate::regularizers::{Penalty, RegularizerConfig};

const NO_PAIR: usize = usize::MAX;

/// Recursive filter and auxiliary statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct OnlineStatistics {
    dims: ModelDims,
    chi: Vec<f64>,
    t: usize,
    /// `(s, a)` pairs in order of first sight.
    pairs: Vec<(StateId, ActionId)>,
    pair_slot: Vec<usize>,
    /// Per pair, `|O| * 2 * |O| * |O|` entries at `((o' * 2 + b) * O + o) * O + o''`.
    rho: Vec<f64>,
    state_seen: Vec<bool>,
    action_seen: Vec<bool>,
    explored_states: Vec<StateId>,
    explored_actions: Vec<ActionId>,
}

fn check_prior(prior: &[f64], n_options: usize) -> Result<()> {
    if prior.len() != n_options {
        return Err(HilError::config(format!("prior has length {}, expected {n_options}", prior.len())));
    }
    let sum: f64 = prior.iter().sum();
    if prior.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(HilError::config("prior over O_0 must be a probability vector"));
    }
    Ok(())
}

/// Statistics before any sample: `chi = prior`, `rho = 0`, `t = 0`.
pub fn init_statistics(dims: ModelDims, prior: &[f64]) -> Result<OnlineStatistics> {
    dims.validate()?;
    check_prior(prior, dims.n_options)?;
    Ok(OnlineStatistics {
        dims,
        chi: prior.to_vec(),
        t: 0,
        pairs: Vec::new(),
        pair_slot: vec![NO_PAIR; dims.n_states * dims.n_actions],
        rho: Vec::new(),
        state_seen: vec![false; dims.n_states],
        action_seen: vec![false; dims.n_actions],
        explored_states: Vec::new(),
        explored_actions: Vec::new(),
    })
}

/// Functional form of [`OnlineStatistics::update`].
pub fn e_step_update(stats: &OnlineStatistics, policy: &HierarchicalPolicy, s: StateId, a: ActionId) -> Result<OnlineStatistics> {
    let mut next = stats.clone();
    next.update(&policy.tables(), s, a)?;
    Ok(next)
}

/// Statistic of one sample (see [`OnlineStatistics::compose_phi`]).
pub fn compose_phi(stats: &OnlineStatistics) -> Result<PhiStatistic> {
    stats.compose_phi()
}

impl OnlineStatistics {
    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn chi(&self) -> &[f64] {
        &self.chi
    }

    /// Number of samples absorbed.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn pairs(&self) -> &[(StateId, ActionId)] {
        &self.pairs
    }

    /// Explored states in order of first sight.
    pub fn explored_states(&self) -> &[StateId] {
        &self.explored_states
    }

    pub fn explored_actions(&self) -> &[ActionId] {
        &self.explored_actions
    }

    fn block_len(&self) -> usize {
        let no = self.dims.n_options;
        no * 2 * no * no
    }

    #[inline]
    fn cell(no: usize, o_prev: OptionId, b: usize, o: OptionId, o_last: OptionId) -> usize {
        ((o_prev * 2 + b) * no + o) * no + o_last
    }

    /// `rho_T(o', b, o, s, a | o'')`; zero for pairs never observed.
    pub fn rho(&self, o_prev: OptionId, b: usize, o: OptionId, s: StateId, a: ActionId, o_last: OptionId) -> f64 {
        let slot = self.pair_slot[s * self.dims.n_actions + a];
        if slot == NO_PAIR {
            return 0.0;
        }
        self.rho[slot * self.block_len() + Self::cell(self.dims.n_options, o_prev, b, o, o_last)]
    }

    /// `sum_{o',b,o,s,a} rho(., o'')` for one conditioning option.
    pub fn rho_mass(&self, o_last: OptionId) -> f64 {
        let no = self.dims.n_options;
        self.rho.iter().skip(o_last).step_by(no).sum()
    }

    fn slot_for(&mut self, s: StateId, a: ActionId) -> usize {
        let key = s * self.dims.n_actions + a;
        if self.pair_slot[key] == NO_PAIR {
            self.pair_slot[key] = self.pairs.len();
            self.pairs.push((s, a));
            let len = self.block_len();
            self.rho.resize(self.rho.len() + len, 0.0);
        }
        if !self.state_seen[s] {
            self.state_seen[s] = true;
            self.explored_states.push(s);
        }
        if !self.action_seen[a] {
            self.action_seen[a] = true;
            self.explored_actions.push(a);
        }
        self.pair_slot[key]
    }

    /// Absorbs the sample `(s, a)` under fixed policy tables.
    pub fn update(&mut self, tables: &PolicyTables, s: StateId, a: ActionId) -> Result<()> {
        if tables.dims() != &self.dims {
            return Err(HilError::dim("policy and statistic dimensions differ"));
        }
        self.dims.check_state(s)?;
        self.dims.check_action(a)?;
        let no = self.dims.n_options;
        let new_t = self.t + 1;

        // Backward kernel P(O_{T-1} = o''', B_T = b' | O_T = o'', data_{1:T})
        // at kernel[(o'' * O + o''') * 2 + b'], built from chi_{T-1}.
        let mut kernel = vec![0.0; no * no * 2];
        let mut reach = vec![0.0; no];
        for o_last in 0..no {
            let row = &mut kernel[o_last * no * 2..(o_last + 1) * no * 2];
            row[o_last * 2] = tables.term(s, o_last, 0) * self.chi[o_last];
            let hi = tables.hi(s, o_last);
            for o_prev in 0..no {
                row[o_prev * 2 + 1] = hi * tables.term(s, o_prev, 1) * self.chi[o_prev];
            }
            let z: f64 = row.iter().sum();
            reach[o_last] = z;
            if z > 0.0 {
                row.iter_mut().for_each(|v| *v /= z);
            } else {
                row.fill(0.0);
            }
        }

        let mut chi: Vec<f64> = (0..no).map(|o| tables.lo(s, o, a) * reach[o]).collect();
        let norm: f64 = chi.iter().sum();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(HilError::DegenerateSample { t: new_t });
        }
        chi.iter_mut().for_each(|v| *v /= norm);

        let slot = self.slot_for(s, a);
        let len = self.block_len();
        let keep = 1.0 - 1.0 / new_t as f64;
        let fresh = 1.0 / new_t as f64;
        // Option-to-option part of the kernel, summed over b'.
        let mix: Vec<f64> = (0..no * no)
            .map(|k| kernel[k * 2] + kernel[k * 2 + 1])
            .collect();
        let mut out = vec![0.0; no];
        if keep > 0.0 {
            for block in self.rho.chunks_mut(len) {
                for cells in block.chunks_mut(no) {
                    for (o_last, v) in out.iter_mut().enumerate() {
                        let m = &mix[o_last * no..(o_last + 1) * no];
                        *v = keep * m.iter().zip(cells.iter()).map(|(k, r)| k * r).sum::<f64>();
                    }
                    cells.copy_from_slice(&out);
                }
            }
        } else {
            self.rho.fill(0.0);
        }
        let block = &mut self.rho[slot * len..(slot + 1) * len];
        for o_last in 0..no {
            for o_prev in 0..no {
                for b in 0..2 {
                    block[Self::cell(no, o_prev, b, o_last, o_last)] += fresh * kernel[(o_last * no + o_prev) * 2 + b];
                }
            }
        }

        self.chi = chi;
        self.t = new_t;
        Ok(())
    }

    /// Starts a new, independent episode. The statistic of the finished
    /// episodes no longer depends on the current option, so every
    /// conditional slice `rho(., o'')` is replaced by `phi` and the filter is
    /// reset to `prior`.
    pub fn begin_episode(&mut self, prior: &[f64]) -> Result<()> {
        check_prior(prior, self.dims.n_options)?;
        if self.t > 0 {
            let no = self.dims.n_options;
            for cells in self.rho.chunks_mut(no) {
                let v: f64 = cells.iter().zip(&self.chi).map(|(r, c)| r * c).sum();
                cells.fill(v);
            }
        }
        self.chi = prior.to_vec();
        Ok(())
    }

    pub fn compose_phi(&self) -> Result<PhiStatistic> {
        if self.t == 0 {
            return Err(HilError::EmptyStatistic);
        }
        let no = self.dims.n_options;
        let values = self
            .rho
            .chunks(no)
            .map(|cells| cells.iter().zip(&self.chi).map(|(r, c)| r * c).sum())
            .collect();
        Ok(PhiStatistic {
            dims: self.dims,
            pairs: self.pairs.clone(),
            values,
        })
    }

    /// Test hook that corrupts the filter after an update.
    #[doc(hidden)]
    pub fn perturb_chi(&mut self, delta: f64) {
        self.chi[0] += delta;
        let z: f64 = self.chi.iter().sum();
        self.chi.iter_mut().for_each(|v| *v /= z);
    }
}

/// `phi(o', b, o, s, a)`, stored per observed `(s, a)` pair as
/// `|O| * 2 * |O|` blocks at `(o' * 2 + b) * O + o`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiStatistic {
    dims: ModelDims,
    pairs: Vec<(StateId, ActionId)>,
    values: Vec<f64>,
}

impl PhiStatistic {
    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn pairs(&self) -> &[(StateId, ActionId)] {
        &self.pairs
    }

    fn block_len(&self) -> usize {
        let no = self.dims.n_options;
        no * 2 * no
    }

    pub fn get(&self, o_prev: OptionId, b: usize, o: OptionId, s: StateId, a: ActionId) -> f64 {
        let no = self.dims.n_options;
        match self.pairs.iter().position(|&p| p == (s, a)) {
            Some(slot) => self.values[slot * self.block_len() + (o_prev * 2 + b) * no + o],
            None => 0.0,
        }
    }

    /// Dense copy indexed `(((o' * 2 + b) * O + o) * S + s) * A + a`.
    pub fn to_dense(&self) -> Vec<f64> {
        let d = self.dims;
        let (no, ns, na) = (d.n_options, d.n_states, d.n_actions);
        let mut dense = vec![0.0; no * 2 * no * ns * na];
        for (slot, &(s, a)) in self.pairs.iter().enumerate() {
            for k in 0..self.block_len() {
                dense[(k * ns + s) * na + a] = self.values[slot * self.block_len() + k];
            }
        }
        dense
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_non_negative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    /// The weights of `log pi_b`, `log pi_hi` and `log pi_lo` in the
    /// auxiliary function.
    pub fn to_terms(&self) -> WeightedLogTerms {
        let no = self.dims.n_options;
        let mut terms = WeightedLogTerms::new(self.dims);
        for (block, &(s, a)) in self.values.chunks(self.block_len()).zip(&self.pairs) {
            for o_prev in 0..no {
                for b in 0..2 {
                    for o in 0..no {
                        let w = block[(o_prev * 2 + b) * no + o];
                        if w == 0.0 {
                            continue;
                        }
                        terms.add_term(s, o_prev, b, w);
                        if b == 1 {
                            terms.add_hi(s, o, w);
                        }
                        terms.add_lo(s, o, a, w);
                    }
                }
            }
        }
        terms
    }
}

/// The online auxiliary function of `policy_new` given `phi`.
pub fn online_q(policy_new: &HierarchicalPolicy, phi: &PhiStatistic) -> Result<f64> {
    if policy_new.dims() != phi.dims() {
        return Err(HilError::dim("policy and statistic dimensions differ"));
    }
    Ok(phi.to_terms().evaluate(&policy_new.tables()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OnlineMStep {
    ClosedFormTabular,
    /// Full-statistic Adamax steps per M-step.
    Gradient { steps: usize, lr: f64 },
}

impl Default for OnlineMStep {
    fn default() -> Self {
        OnlineMStep::Gradient { steps: 30, lr: 1e-2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    /// M-steps are inhibited while `t <= t_min`.
    pub t_min: usize,
    /// After `t_min`, run an M-step on every `mstep_every`-th sample.
    pub mstep_every: usize,
    pub mstep: OnlineMStep,
    pub conditioning: Conditioning,
    pub timing: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            t_min: 100,
            mstep_every: 1,
            mstep: OnlineMStep::default(),
            conditioning: Conditioning::Fixed,
            timing: false,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_min == 0 {
            return Err(HilError::config("t_min must be >= 1"));
        }
        if self.mstep_every == 0 {
            return Err(HilError::config("mstep_every must be >= 1"));
        }
        if let OnlineMStep::Gradient { steps, lr } = self.mstep {
            if steps == 0 || !(lr > 0.0 && lr.is_finite()) {
                return Err(HilError::config("gradient M-step needs steps >= 1 and lr > 0"));
            }
        }
        Ok(())
    }

    pub fn fires_at(&self, t: usize) -> bool {
        t > self.t_min && (t - self.t_min - 1).is_multiple_of(self.mstep_every)
    }

    /// Gradient steps taken on a stream of `n_samples`.
    pub fn gradient_budget(&self, n_samples: usize) -> usize {
        match self.mstep {
            OnlineMStep::ClosedFormTabular => 0,
            OnlineMStep::Gradient { steps, .. } => steps * self.mstep_count(n_samples),
        }
    }

    pub fn mstep_count(&self, n_samples: usize) -> usize {
        n_samples.saturating_sub(self.t_min).div_ceil(self.mstep_every)
    }
}

/// The `mstep_every` that makes a stream of `n_samples` use about
/// `target_steps` gradient steps of `steps_per_mstep` each.
pub fn equalized_mstep_every(n_samples: usize, t_min: usize, steps_per_mstep: usize, target_steps: usize) -> usize {
    let available = n_samples.saturating_sub(t_min);
    if target_steps == 0 || available == 0 {
        return 1;
    }
    (available * steps_per_mstep).div_ceil(target_steps).max(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineLogRecord {
    pub t: usize,
    /// Auxiliary function after the M-step; `None` when no M-step ran.
    pub q_value: Option<f64>,
    pub wall_us: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct OnlineOutcome {
    pub policy: HierarchicalPolicy,
    pub log: Vec<OnlineLogRecord>,
    pub statistics: OnlineStatistics,
    pub gradient_steps: usize,
    pub mstep_count: usize,
}

/// Streams the episodes in order, one sample at a time.
pub fn run_online_bw(
    episodes: &[Trajectory],
    config: &OnlineConfig,
    initial: &HierarchicalPolicy,
    penalties: &RegularizerConfig,
) -> Result<OnlineOutcome> {
    config.validate()?;
    penalties.validate()?;
    let dims = *initial.dims();
    if episodes.iter().all(|e| e.is_empty()) {
        return Err(HilError::Shape("the demonstration stream is empty".into()));
    }
    for e in episodes {
        e.validate(&dims)?;
    }
    if matches!(config.mstep, OnlineMStep::ClosedFormTabular) && !penalties.is_zero() {
        return Err(HilError::config("the closed-form M-step cannot include regularizers; use the gradient M-step"));
    }
    let no = dims.n_options;
    let mut policy = initial.clone();
    let mut tables = policy.tables();
    let mut optimizer = Adamax::new(policy.params().dim(), 0.0);
    let mut stats: Option<OnlineStatistics> = None;
    let mut log = Vec::new();
    let mut gradient_steps = 0;
    let mut mstep_count = 0;

    for episode in episodes.iter().filter(|e| !e.is_empty()) {
        let prior = config.conditioning.belief(episode, no);
        match stats.as_mut() {
            None => stats = Some(init_statistics(dims, &prior)?),
            Some(st) => st.begin_episode(&prior)?,
        }
        let st = stats.as_mut().expect("initialized above");
        for step in &episode.steps {
            let start = Instant::now();
            st.update(&tables, step.state, step.action)?;
            let t = st.t();
            let mut q_value = None;
            if config.fires_at(t) {
                let phi = st.compose_phi()?;
                let terms = phi.to_terms();
                match config.mstep {
                    OnlineMStep::ClosedFormTabular => {
                        policy = policy.with_params(tabular_m_step(&policy, &terms)?)?;
                    }
                    OnlineMStep::Gradient { steps, lr } => {
                        optimizer.lr = lr;
                        let penalty = if penalties.is_zero() {
                            None
                        } else {
                            Some(Penalty::online(*penalties, no, st.explored_states(), (step.state, step.action))?)
                        };
                        for _ in 0..steps {
                            let grad = objective_gradient(&policy, &terms, penalty.as_ref())?;
                            optimizer.ascend(policy.params_mut(), &grad)?;
                            gradient_steps += 1;
                        }
                        if !policy.params().all_finite() {
                            return Err(HilError::Numeric(format!("parameters became non-finite at t = {t}")));
                        }
                    }
                }
                tables = policy.tables();
                q_value = Some(terms.evaluate(&tables));
                mstep_count += 1;
            }
            log.push(OnlineLogRecord {
                t,
                q_value,
                wall_us: config.timing.then(|| start.elapsed().as_secs_f64() * 1e6),
            });
        }
    }

    Ok(OnlineOutcome {
        policy,
        log,
        statistics: stats.expect("stream is non-empty"),
        gradient_steps,
        mstep_count,
    })
}
