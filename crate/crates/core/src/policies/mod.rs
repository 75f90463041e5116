//! Parameterizations of the policy triplet `(pi_hi, pi_lo, pi_b)`.
//!
//! Two kinds share one parameter layout convention, `theta = theta_hi ++
//! theta_lo ++ theta_b`:
//!
//! * [`ParamKind::Tabular`] stores one logit row per conditioning input and
//!   applies a softmax.
//! * [`ParamKind::Mlp`] uses one-hidden-layer ReLU networks over the state
//!   features. The high-level policy is a single network; the low-level and
//!   termination policies have one network per option, each fed the state
//!   features concatenated with a one-hot encoding of that option.

mod adamax;
mod gradient;
mod mlp;

pub use adamax::{adamax_step, Adamax, AdamaxState};
pub use gradient::{objective_gradient, objective_value, Head, LogTerm, WeightedLogTerms};
pub(crate) use mlp::Net;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HilError, Result};
use crate::logspace::softmax_into;
use crate::opgm::{ActionId, ModelDims, OptionId, StateId, StateTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Tabular,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    pub kind: ParamKind,
    pub theta_hi: Vec<f64>,
    pub theta_lo: Vec<f64>,
    pub theta_b: Vec<f64>,
}

impl PolicyParams {
    pub fn dim(&self) -> usize {
        self.theta_hi.len() + self.theta_lo.len() + self.theta_b.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.theta_hi.iter().chain(&self.theta_lo).chain(&self.theta_b)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.theta_hi
            .iter_mut()
            .chain(self.theta_lo.iter_mut())
            .chain(self.theta_b.iter_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.dim() {
            return Err(HilError::Shape(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                self.dim()
            )));
        }
        for (p, &v) in self.iter_mut().zip(flat) {
            *p = v;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpSpec {
    pub hidden_units_lo_b: usize,
    pub hidden_units_hi: usize,
    pub activation: Activation,
    pub init_low: f64,
    pub init_high: f64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        MlpSpec {
            hidden_units_lo_b: 30,
            hidden_units_hi: 100,
            activation: Activation::Relu,
            init_low: -0.5,
            init_high: 0.5,
        }
    }
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units_hi == 0 || self.hidden_units_lo_b == 0 {
            return Err(HilError::config("hidden unit counts must be >= 1"));
        }
        if !(self.init_low < self.init_high) {
            return Err(HilError::config("init_low must be < init_high"));
        }
        Ok(())
    }
}

/// Dense probability tables of the three heads for every indexed state.
///
/// Layouts: `hi[s*O + o]`, `lo[(s*O + o)*A + a]`, `term[(s*O + o_prev)*2 + b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTables {
    dims: ModelDims,
    pub(crate) hi: Vec<f64>,
    pub(crate) lo: Vec<f64>,
    pub(crate) term: Vec<f64>,
}

impl PolicyTables {
    /// Builds tables from explicit probabilities; rows are checked for
    /// normalization.
    pub fn from_probs(dims: ModelDims, hi: Vec<f64>, lo: Vec<f64>, term: Vec<f64>) -> Result<Self> {
        let (s, o, a) = (dims.n_states, dims.n_options, dims.n_actions);
        if hi.len() != s * o || lo.len() != s * o * a || term.len() != s * o * 2 {
            return Err(HilError::Shape("probability table sizes do not match dims".into()));
        }
        let check = |v: &[f64], row: usize| -> Result<()> {
            for r in v.chunks(row) {
                let sum: f64 = r.iter().sum();
                if r.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(HilError::Numeric(format!("row {r:?} is not a probability vector")));
                }
            }
            Ok(())
        };
        check(&hi, o)?;
        check(&lo, a)?;
        check(&term, 2)?;
        Ok(PolicyTables { dims, hi, lo, term })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    #[inline]
    pub fn hi(&self, s: StateId, o: OptionId) -> f64 {
        self.hi[s * self.dims.n_options + o]
    }

    #[inline]
    pub fn lo(&self, s: StateId, o: OptionId, a: ActionId) -> f64 {
        self.lo[(s * self.dims.n_options + o) * self.dims.n_actions + a]
    }

    #[inline]
    pub fn term(&self, s: StateId, o_prev: OptionId, b: usize) -> f64 {
        self.term[(s * self.dims.n_options + o_prev) * 2 + b]
    }

    pub fn hi_row(&self, s: StateId) -> &[f64] {
        let o = self.dims.n_options;
        &self.hi[s * o..(s + 1) * o]
    }

    pub fn lo_row(&self, s: StateId, o: OptionId) -> &[f64] {
        let a = self.dims.n_actions;
        let base = (s * self.dims.n_options + o) * a;
        &self.lo[base..base + a]
    }

    pub fn term_row(&self, s: StateId, o_prev: OptionId) -> &[f64] {
        let base = (s * self.dims.n_options + o_prev) * 2;
        &self.term[base..base + 2]
    }
}

/// The policy triplet together with the metadata needed to evaluate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalPolicy {
    params: PolicyParams,
    dims: ModelDims,
    state_table: StateTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spec: Option<MlpSpec>,
}

/// Logit gap used to encode a deterministic choice in a softmax row.
/// `exp(-800)` underflows to exactly zero.
const DETERMINISTIC_LOGIT: f64 = 800.0;

impl HierarchicalPolicy {
    pub fn new(params: PolicyParams, dims: ModelDims, state_table: StateTable, spec: Option<MlpSpec>) -> Result<Self> {
        dims.validate()?;
        if state_table.n_states() != dims.n_states {
            return Err(HilError::dim(format!(
                "state table has {} rows, dims say {} states",
                state_table.n_states(),
                dims.n_states
            )));
        }
        if !params.all_finite() {
            return Err(HilError::Numeric("policy parameters must be finite".into()));
        }
        let (hi, lo, b) = match params.kind {
            ParamKind::Tabular => Self::tabular_sizes(&dims),
            ParamKind::Mlp => {
                let spec = spec.ok_or_else(|| HilError::config("MLP policy requires an MlpSpec"))?;
                spec.validate()?;
                Self::mlp_sizes(&dims, &spec, state_table.feature_dim)
            }
        };
        if params.theta_hi.len() != hi || params.theta_lo.len() != lo || params.theta_b.len() != b {
            return Err(HilError::Shape(format!(
                "parameter blocks ({}, {}, {}) do not match expected ({hi}, {lo}, {b})",
                params.theta_hi.len(),
                params.theta_lo.len(),
                params.theta_b.len()
            )));
        }
        let spec = if params.kind == ParamKind::Mlp { spec } else { None };
        Ok(HierarchicalPolicy {
            params,
            dims,
            state_table,
            spec,
        })
    }

    fn tabular_sizes(d: &ModelDims) -> (usize, usize, usize) {
        (
            d.n_states * d.n_options,
            d.n_states * d.n_options * d.n_actions,
            d.n_states * d.n_options * 2,
        )
    }

    fn mlp_sizes(d: &ModelDims, spec: &MlpSpec, feature_dim: usize) -> (usize, usize, usize) {
        let (hi, lo, b) = Self::nets(d, spec, feature_dim);
        (hi.param_count(), d.n_options * lo.param_count(), d.n_options * b.param_count())
    }

    pub(crate) fn nets(d: &ModelDims, spec: &MlpSpec, feature_dim: usize) -> (Net, Net, Net) {
        let cond = feature_dim + d.n_options;
        (
            Net::new(feature_dim, spec.hidden_units_hi, d.n_options),
            Net::new(cond, spec.hidden_units_lo_b, d.n_actions),
            Net::new(cond, spec.hidden_units_lo_b, 2),
        )
    }

    pub fn tabular_uniform(dims: ModelDims, state_table: StateTable) -> Self {
        let (hi, lo, b) = Self::tabular_sizes(&dims);
        let params = PolicyParams {
            kind: ParamKind::Tabular,
            theta_hi: vec![0.0; hi],
            theta_lo: vec![0.0; lo],
            theta_b: vec![0.0; b],
        };
        Self::new(params, dims, state_table, None).expect("uniform tabular policy is valid")
    }

    /// Tabular logits drawn i.i.d. from `U(low, high)`.
    pub fn tabular_random<R: Rng + ?Sized>(dims: ModelDims, state_table: StateTable, low: f64, high: f64, rng: &mut R) -> Self {
        let (hi, lo, b) = Self::tabular_sizes(&dims);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(low..high)).collect::<Vec<_>>();
        let params = PolicyParams {
            kind: ParamKind::Tabular,
            theta_hi: draw(hi),
            theta_lo: draw(lo),
            theta_b: draw(b),
        };
        Self::new(params, dims, state_table, None).expect("random tabular policy is valid")
    }

    /// Tabular policy from explicit probability tables; zero probabilities
    /// are encoded with a logit gap large enough to underflow to zero.
    pub fn tabular_from_tables(tables: &PolicyTables, state_table: StateTable) -> Result<Self> {
        let to_logits = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&p| if p > 0.0 { p.ln() } else { -DETERMINISTIC_LOGIT })
                .collect()
        };
        let params = PolicyParams {
            kind: ParamKind::Tabular,
            theta_hi: to_logits(&tables.hi),
            theta_lo: to_logits(&tables.lo),
            theta_b: to_logits(&tables.term),
        };
        Self::new(params, *tables.dims(), state_table, None)
    }

    /// Wraps a flat deterministic policy (one action per state): every
    /// option plays the same action, `pi_hi` and `pi_b` are uniform.
    pub fn from_flat_policy(dims: ModelDims, state_table: StateTable, actions: &[ActionId]) -> Result<Self> {
        if actions.len() != dims.n_states {
            return Err(HilError::Shape("flat policy must give one action per state".into()));
        }
        let mut p = Self::tabular_uniform(dims, state_table);
        for (s, &a) in actions.iter().enumerate() {
            dims.check_action(a)?;
            for o in 0..dims.n_options {
                let base = (s * dims.n_options + o) * dims.n_actions;
                for a2 in 0..dims.n_actions {
                    p.params.theta_lo[base + a2] = if a2 == a { 0.0 } else { -DETERMINISTIC_LOGIT };
                }
            }
        }
        Ok(p)
    }

    /// MLP policy with weights from `U(init_low, init_high)` and zero biases.
    pub fn mlp_random<R: Rng + ?Sized>(dims: ModelDims, state_table: StateTable, spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (hi, lo, b) = Self::nets(&dims, &spec, state_table.feature_dim);
        let mut init = |net: &Net, copies: usize| {
            let mut v = vec![0.0; net.param_count() * copies];
            for c in 0..copies {
                net.init_uniform(&mut v[c * net.param_count()..(c + 1) * net.param_count()], spec.init_low, spec.init_high, rng);
            }
            v
        };
        let params = PolicyParams {
            kind: ParamKind::Mlp,
            theta_hi: init(&hi, 1),
            theta_lo: init(&lo, dims.n_options),
            theta_b: init(&b, dims.n_options),
        };
        Self::new(params, dims, state_table, Some(spec))
    }

    pub fn mlp_zeros(dims: ModelDims, state_table: StateTable, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let (hi, lo, b) = Self::mlp_sizes(&dims, &spec, state_table.feature_dim);
        let params = PolicyParams {
            kind: ParamKind::Mlp,
            theta_hi: vec![0.0; hi],
            theta_lo: vec![0.0; lo],
            theta_b: vec![0.0; b],
        };
        Self::new(params, dims, state_table, Some(spec))
    }

    /// Fresh initialization of the given kind: `U(-0.5, 0.5)` logits for
    /// tabular, [`Self::mlp_random`] for MLP.
    pub fn random_init<R: Rng + ?Sized>(
        kind: ParamKind,
        dims: ModelDims,
        state_table: StateTable,
        spec: MlpSpec,
        rng: &mut R,
    ) -> Result<Self> {
        match kind {
            ParamKind::Tabular => Ok(Self::tabular_random(dims, state_table, spec.init_low, spec.init_high, rng)),
            ParamKind::Mlp => Self::mlp_random(dims, state_table, spec, rng),
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn state_table(&self) -> &StateTable {
        &self.state_table
    }

    pub fn spec(&self) -> Option<&MlpSpec> {
        self.spec.as_ref()
    }

    pub fn kind(&self) -> ParamKind {
        self.params.kind
    }

    /// Replaces the parameters, keeping the architecture.
    pub fn with_params(&self, params: PolicyParams) -> Result<Self> {
        Self::new(params, self.dims, self.state_table.clone(), self.spec)
    }

    pub(crate) fn params_mut(&mut self) -> &mut PolicyParams {
        &mut self.params
    }

    pub fn eval_pi_hi(&self, s: StateId) -> Result<Vec<f64>> {
        self.dims.check_state(s)?;
        let mut out = vec![0.0; self.dims.n_options];
        self.hi_into(s, &mut out);
        Ok(out)
    }

    pub fn eval_pi_lo(&self, s: StateId, o: OptionId) -> Result<Vec<f64>> {
        self.dims.check_state(s)?;
        self.dims.check_option(o)?;
        let mut out = vec![0.0; self.dims.n_actions];
        self.lo_into(s, o, &mut out);
        Ok(out)
    }

    pub fn eval_pi_b(&self, s: StateId, o_prev: OptionId) -> Result<Vec<f64>> {
        self.dims.check_state(s)?;
        self.dims.check_option(o_prev)?;
        let mut out = vec![0.0; 2];
        self.term_into(s, o_prev, &mut out);
        Ok(out)
    }

    fn hi_into(&self, s: StateId, out: &mut [f64]) {
        let d = &self.dims;
        match self.params.kind {
            ParamKind::Tabular => softmax_into(&self.params.theta_hi[s * d.n_options..(s + 1) * d.n_options], out),
            ParamKind::Mlp => {
                let (net, _, _) = self.mlp_nets();
                let mut logits = vec![0.0; d.n_options];
                net.forward(&self.params.theta_hi, self.state_table.feature(s), &mut logits, None);
                softmax_into(&logits, out);
            }
        }
    }

    fn lo_into(&self, s: StateId, o: OptionId, out: &mut [f64]) {
        let d = &self.dims;
        match self.params.kind {
            ParamKind::Tabular => {
                let base = (s * d.n_options + o) * d.n_actions;
                softmax_into(&self.params.theta_lo[base..base + d.n_actions], out)
            }
            ParamKind::Mlp => {
                let (_, net, _) = self.mlp_nets();
                let input = self.conditioned_input(s, o);
                let mut logits = vec![0.0; d.n_actions];
                net.forward(net.block(&self.params.theta_lo, o), &input, &mut logits, None);
                softmax_into(&logits, out);
            }
        }
    }

    fn term_into(&self, s: StateId, o_prev: OptionId, out: &mut [f64]) {
        let d = &self.dims;
        match self.params.kind {
            ParamKind::Tabular => {
                let base = (s * d.n_options + o_prev) * 2;
                softmax_into(&self.params.theta_b[base..base + 2], out)
            }
            ParamKind::Mlp => {
                let (_, _, net) = self.mlp_nets();
                let input = self.conditioned_input(s, o_prev);
                let mut logits = [0.0; 2];
                net.forward(net.block(&self.params.theta_b, o_prev), &input, &mut logits, None);
                softmax_into(&logits, out);
            }
        }
    }

    pub(crate) fn mlp_nets(&self) -> (Net, Net, Net) {
        let spec = self.spec.expect("MLP policy carries a spec");
        Self::nets(&self.dims, &spec, self.state_table.feature_dim)
    }

    /// State features followed by the one-hot code of `o`.
    pub(crate) fn conditioned_input(&self, s: StateId, o: OptionId) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.state_table.feature_dim + self.dims.n_options);
        input.extend_from_slice(self.state_table.feature(s));
        input.extend((0..self.dims.n_options).map(|k| if k == o { 1.0 } else { 0.0 }));
        input
    }

    /// Probability tables for every indexed state.
    pub fn tables(&self) -> PolicyTables {
        let d = self.dims;
        let mut hi = vec![0.0; d.n_states * d.n_options];
        let mut lo = vec![0.0; d.n_states * d.n_options * d.n_actions];
        let mut term = vec![0.0; d.n_states * d.n_options * 2];
        for s in 0..d.n_states {
            self.hi_into(s, &mut hi[s * d.n_options..(s + 1) * d.n_options]);
            for o in 0..d.n_options {
                let base = (s * d.n_options + o) * d.n_actions;
                self.lo_into(s, o, &mut lo[base..base + d.n_actions]);
                let base = (s * d.n_options + o) * 2;
                self.term_into(s, o, &mut term[base..base + 2]);
            }
        }
        PolicyTables { dims: d, hi, lo, term }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> MlpSpec {
        MlpSpec {
            hidden_units_lo_b: 4,
            hidden_units_hi: 5,
            ..MlpSpec::default()
        }
    }

    fn grid_features(n: usize) -> StateTable {
        let f: Vec<f64> = (0..n).flat_map(|s| [s as f64 / n as f64, (s % 3) as f64 / 3.0]).collect();
        StateTable::new(2, f).unwrap()
    }

    #[test]
    fn zero_logit_tabular_is_uniform() {
        let dims = ModelDims::new(3, 4, 2).unwrap();
        let p = HierarchicalPolicy::tabular_uniform(dims, StateTable::one_hot(3));
        assert_eq!(p.eval_pi_hi(1).unwrap(), vec![0.5, 0.5]);
        assert_eq!(p.eval_pi_lo(2, 1).unwrap(), vec![0.25; 4]);
        assert_eq!(p.eval_pi_b(0, 0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn zero_weight_mlp_is_uniform() {
        let dims = ModelDims::new(4, 3, 2).unwrap();
        let p = HierarchicalPolicy::mlp_zeros(dims, grid_features(4), small_spec()).unwrap();
        for s in 0..4 {
            assert_eq!(p.eval_pi_hi(s).unwrap(), vec![0.5, 0.5]);
            assert_eq!(p.eval_pi_b(s, 1).unwrap(), vec![0.5, 0.5]);
            for &q in &p.eval_pi_lo(s, 0).unwrap() {
                assert!((q - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn heads_are_normalized_for_both_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = ModelDims::new(5, 3, 3).unwrap();
        let tab = HierarchicalPolicy::tabular_random(dims, grid_features(5), -3.0, 3.0, &mut rng);
        let mlp = HierarchicalPolicy::mlp_random(dims, grid_features(5), small_spec(), &mut rng).unwrap();
        for p in [&tab, &mlp] {
            let t = p.tables();
            for chunk in t.hi.chunks(3).chain(t.lo.chunks(3)).chain(t.term.chunks(2)) {
                assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(chunk.iter().all(|&q| q >= 0.0));
            }
            let hi = p.eval_pi_hi(2).unwrap();
            let sum: f64 = hi.iter().sum();
            let renorm: Vec<f64> = hi.iter().map(|q| q / sum).collect();
            for (x, y) in hi.iter().zip(&renorm) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn perturbing_hi_block_leaves_lo_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dims = ModelDims::new(4, 3, 2).unwrap();
        let p = HierarchicalPolicy::mlp_random(dims, grid_features(4), small_spec(), &mut rng).unwrap();
        let mut params = p.params().clone();
        for v in params.theta_hi.iter_mut() {
            *v += 0.3;
        }
        let q = p.with_params(params).unwrap();
        for s in 0..4 {
            for o in 0..2 {
                assert_eq!(p.eval_pi_lo(s, o).unwrap(), q.eval_pi_lo(s, o).unwrap());
                assert_eq!(p.eval_pi_b(s, o).unwrap(), q.eval_pi_b(s, o).unwrap());
            }
        }
        assert_ne!(p.eval_pi_hi(1).unwrap(), q.eval_pi_hi(1).unwrap());
    }

    #[test]
    fn new_rejects_wrong_sizes_and_nonfinite() {
        let dims = ModelDims::new(2, 2, 2).unwrap();
        let mut params = HierarchicalPolicy::tabular_uniform(dims, StateTable::one_hot(2)).params().clone();
        params.theta_b.pop();
        assert!(HierarchicalPolicy::new(params.clone(), dims, StateTable::one_hot(2), None).is_err());
        params.theta_b.push(f64::NAN);
        assert!(HierarchicalPolicy::new(params, dims, StateTable::one_hot(2), None).is_err());
    }

    #[test]
    fn mlp_init_respects_range_and_zero_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = ModelDims::new(3, 2, 2).unwrap();
        let p = HierarchicalPolicy::mlp_random(dims, grid_features(3), small_spec(), &mut rng).unwrap();
        assert!(p.params().iter().all(|&w| (-0.5..0.5).contains(&w)));
        let (hi, _, _) = p.mlp_nets();
        assert!(hi.biases(&p.params().theta_hi).all(|b| b == 0.0));
    }

    #[test]
    fn flat_policy_is_deterministic() {
        let dims = ModelDims::new(3, 3, 2).unwrap();
        let p = HierarchicalPolicy::from_flat_policy(dims, StateTable::one_hot(3), &[2, 0, 1]).unwrap();
        assert_eq!(p.eval_pi_lo(0, 1).unwrap(), vec![0.0, 0.0, 1.0]);
        assert_eq!(p.eval_pi_lo(2, 0).unwrap(), vec![0.0, 1.0, 0.0]);
    }
}
