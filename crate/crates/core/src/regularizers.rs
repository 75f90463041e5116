//! Option regularizers added to the M-step objective.
//!
//! * `L_b = sum_o | mean_s pi_hi(o|s) - tau |` pulls the average activation
//!   of every option towards the target `tau` (minimized).
//! * `L_v = sum_o var_s pi_hi(o|s)` rewards options that are strongly
//!   active in some states and inactive elsewhere (maximized).
//! * `L_KL = sum_o sum_{o' != o} mean pi_lo(a|s,o) log(pi_lo(a|s,o) / pi_lo(a|s,o'))`
//!   over evaluation points `(s, a)`, pushing low-level policies apart
//!   (maximized).
//!
//! The batch trainer averages over every demonstrated step; the online
//! trainer averages `L_b`/`L_v` uniformly over the explored states and
//! evaluates `L_KL` on the newest sample only. Both are expressed as a
//! [`Penalty`] with weighted averaging sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HilError, Result};
use crate::opgm::{ActionId, StateId, Trajectory};
use crate::policies::{HierarchicalPolicy, PolicyTables};

/// Floor applied to the denominator probability inside the KL logarithm.
pub const KL_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    pub lambda_b: f64,
    pub lambda_v: f64,
    pub lambda_kl: f64,
    /// Target mean activation; `None` means `1 / |O|`.
    pub tau: Option<f64>,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            lambda_b: 1.0,
            lambda_v: 0.1,
            lambda_kl: 0.01,
            tau: None,
        }
    }
}

impl RegularizerConfig {
    /// All weights zero.
    pub fn none() -> Self {
        RegularizerConfig {
            lambda_b: 0.0,
            lambda_v: 0.0,
            lambda_kl: 0.0,
            tau: None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.lambda_b == 0.0 && self.lambda_v == 0.0 && self.lambda_kl == 0.0
    }

    pub fn tau_for(&self, n_options: usize) -> f64 {
        self.tau.unwrap_or(1.0 / n_options as f64)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_b", self.lambda_b), ("lambda_v", self.lambda_v), ("lambda_kl", self.lambda_kl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HilError::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(HilError::config(format!("tau must lie in (0, 1], got {tau}")));
            }
        }
        Ok(())
    }
}

fn normalized<K: Ord + Copy>(items: impl IntoIterator<Item = (K, f64)>) -> Result<Vec<(K, f64)>> {
    let mut acc = BTreeMap::new();
    for (k, w) in items {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(HilError::config(format!("averaging weight must be finite and >= 0, got {w}")));
        }
        *acc.entry(k).or_insert(0.0) += w;
    }
    let total: f64 = acc.values().sum();
    if acc.is_empty() || total <= 0.0 {
        return Err(HilError::config("averaging set is empty"));
    }
    Ok(acc.into_iter().map(|(k, w)| (k, w / total)).collect())
}

fn lb_from_tables(tables: &PolicyTables, states: &[(StateId, f64)], tau: f64) -> f64 {
    let no = tables.dims().n_options;
    (0..no)
        .map(|o| {
            let mean: f64 = states.iter().map(|&(s, w)| w * tables.hi(s, o)).sum();
            (mean - tau).abs()
        })
        .sum()
}

fn lv_from_tables(tables: &PolicyTables, states: &[(StateId, f64)]) -> f64 {
    let no = tables.dims().n_options;
    (0..no)
        .map(|o| {
            let mean: f64 = states.iter().map(|&(s, w)| w * tables.hi(s, o)).sum();
            states.iter().map(|&(s, w)| w * (tables.hi(s, o) - mean).powi(2)).sum::<f64>()
        })
        .sum()
}

fn kl_pair(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p.ln() - q.max(KL_FLOOR).ln())
    }
}

fn lkl_from_tables(tables: &PolicyTables, points: &[((StateId, ActionId), f64)]) -> f64 {
    let no = tables.dims().n_options;
    let mut total = 0.0;
    for &((s, a), w) in points {
        for o in 0..no {
            for o2 in 0..no {
                if o != o2 {
                    total += w * kl_pair(tables.lo(s, o, a), tables.lo(s, o2, a));
                }
            }
        }
    }
    total
}

fn check_states(policy: &HierarchicalPolicy, states: &[StateId]) -> Result<Vec<(StateId, f64)>> {
    for &s in states {
        policy.dims().check_state(s)?;
    }
    normalized(states.iter().map(|&s| (s, 1.0)))
}

/// Mean-activation penalty over the multiset `states`.
pub fn l_b(policy: &HierarchicalPolicy, states: &[StateId], tau: f64) -> Result<f64> {
    let w = check_states(policy, states)?;
    Ok(lb_from_tables(&policy.tables(), &w, tau))
}

/// Summed population variance of `pi_hi(o|.)` over the multiset `states`.
pub fn l_v(policy: &HierarchicalPolicy, states: &[StateId]) -> Result<f64> {
    let w = check_states(policy, states)?;
    Ok(lv_from_tables(&policy.tables(), &w))
}

/// Ordered-pair KL between low-level policies, averaged over `points`.
pub fn l_kl(policy: &HierarchicalPolicy, points: &[(StateId, ActionId)]) -> Result<f64> {
    for &(s, a) in points {
        policy.dims().check_state(s)?;
        policy.dims().check_action(a)?;
    }
    let w = normalized(points.iter().map(|&p| (p, 1.0)))?;
    Ok(lkl_from_tables(&policy.tables(), &w))
}

pub fn penalized_objective(q_value: f64, l_b: f64, l_v: f64, l_kl: f64, config: &RegularizerConfig) -> f64 {
    q_value - config.lambda_b * l_b + config.lambda_v * l_v + config.lambda_kl * l_kl
}

/// Penalty part of an M-step objective: `-lambda_b L_b + lambda_v L_v + lambda_kl L_KL`
/// with fixed averaging sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Penalty {
    config: RegularizerConfig,
    tau: f64,
    hi_states: Vec<(StateId, f64)>,
    kl_points: Vec<((StateId, ActionId), f64)>,
}

impl Penalty {
    /// `hi_states` and `kl_points` carry non-negative weights; duplicates are
    /// merged and weights normalized to sum to one.
    pub fn new(
        config: RegularizerConfig,
        n_options: usize,
        hi_states: Vec<(StateId, f64)>,
        kl_points: Vec<(StateId, ActionId, f64)>,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Penalty {
            config,
            tau: config.tau_for(n_options),
            hi_states: normalized(hi_states)?,
            kl_points: normalized(kl_points.into_iter().map(|(s, a, w)| ((s, a), w)))?,
        })
    }

    /// Time-averaged estimators over every step of every trajectory.
    pub fn batch(config: RegularizerConfig, n_options: usize, trajectories: &[Trajectory]) -> Result<Self> {
        let steps = trajectories.iter().flat_map(|t| t.steps.iter());
        Self::new(
            config,
            n_options,
            steps.clone().map(|st| (st.state, 1.0)).collect(),
            steps.map(|st| (st.state, st.action, 1.0)).collect(),
        )
    }

    /// Online estimators: uniform over the explored states, KL on the newest sample.
    pub fn online(config: RegularizerConfig, n_options: usize, explored_states: &[StateId], last: (StateId, ActionId)) -> Result<Self> {
        Self::new(
            config,
            n_options,
            explored_states.iter().map(|&s| (s, 1.0)).collect(),
            vec![(last.0, last.1, 1.0)],
        )
    }

    pub fn config(&self) -> &RegularizerConfig {
        &self.config
    }

    /// `(L_b, L_v, L_KL)` under the given tables.
    pub fn components(&self, tables: &PolicyTables) -> (f64, f64, f64) {
        (
            lb_from_tables(tables, &self.hi_states, self.tau),
            lv_from_tables(tables, &self.hi_states),
            lkl_from_tables(tables, &self.kl_points),
        )
    }

    pub fn value(&self, tables: &PolicyTables) -> f64 {
        let (lb, lv, lkl) = self.components(tables);
        penalized_objective(0.0, lb, lv, lkl, &self.config)
    }

    /// Adds the gradient of [`Penalty::value`] with respect to the head
    /// probabilities into `g_hi` and `g_lo` (layouts of [`PolicyTables`]).
    pub(crate) fn grad_probs(&self, tables: &PolicyTables, g_hi: &mut [f64], g_lo: &mut [f64]) {
        let d = *tables.dims();
        let (no, na) = (d.n_options, d.n_actions);
        let c = &self.config;
        if c.lambda_b != 0.0 || c.lambda_v != 0.0 {
            for o in 0..no {
                let mean: f64 = self.hi_states.iter().map(|&(s, w)| w * tables.hi(s, o)).sum();
                let diff = mean - self.tau;
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                for &(s, w) in &self.hi_states {
                    // The mean's own derivative cancels in the variance term.
                    g_hi[s * no + o] += -c.lambda_b * sign * w + c.lambda_v * 2.0 * w * (tables.hi(s, o) - mean);
                }
            }
        }
        if c.lambda_kl != 0.0 {
            for &((s, a), w) in &self.kl_points {
                for o in 0..no {
                    let p = tables.lo(s, o, a);
                    if p == 0.0 {
                        continue;
                    }
                    for o2 in 0..no {
                        if o == o2 {
                            continue;
                        }
                        let q = tables.lo(s, o2, a);
                        let scale = c.lambda_kl * w;
                        g_lo[(s * no + o) * na + a] += scale * (p.ln() + 1.0 - q.max(KL_FLOOR).ln());
                        if q > KL_FLOOR {
                            g_lo[(s * no + o2) * na + a] -= scale * p / q;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opgm::{ModelDims, StateTable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy_with_hi(rows: &[[f64; 2]]) -> HierarchicalPolicy {
        let n = rows.len();
        let dims = ModelDims::new(n, 2, 2).unwrap();
        let uniform = HierarchicalPolicy::tabular_uniform(dims, StateTable::one_hot(n)).tables();
        let hi: Vec<f64> = rows.iter().flatten().copied().collect();
        let t = PolicyTables::from_probs(dims, hi, uniform.lo.clone(), uniform.term.clone()).unwrap();
        HierarchicalPolicy::tabular_from_tables(&t, StateTable::one_hot(n)).unwrap()
    }

    #[test]
    fn lb_zero_at_target() {
        let dims = ModelDims::new(3, 2, 4).unwrap();
        let p = HierarchicalPolicy::tabular_uniform(dims, StateTable::one_hot(3));
        assert!(l_b(&p, &[0, 1, 2], 0.25).unwrap().abs() < 1e-12);
    }

    #[test]
    fn lb_point_mass() {
        let p = policy_with_hi(&[[1.0, 0.0], [1.0, 0.0]]);
        assert!((l_b(&p, &[0, 1], 0.5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lb_invariant_to_duplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = ModelDims::new(4, 2, 3).unwrap();
        let p = HierarchicalPolicy::tabular_random(dims, StateTable::one_hot(4), -2.0, 2.0, &mut rng);
        let once = l_b(&p, &[0, 1, 3, 3], 0.3).unwrap();
        let twice = l_b(&p, &[0, 1, 3, 3, 0, 1, 3, 3], 0.3).unwrap();
        assert!((once - twice).abs() < 1e-12);
    }

    #[test]
    fn lv_values() {
        let constant = policy_with_hi(&[[0.3, 0.7], [0.3, 0.7]]);
        assert!(l_v(&constant, &[0, 1]).unwrap().abs() < 1e-12);
        let split = policy_with_hi(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!((l_v(&split, &[0, 1]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_sets_are_config_errors() {
        let dims = ModelDims::new(2, 2, 2).unwrap();
        let p = HierarchicalPolicy::tabular_uniform(dims, StateTable::one_hot(2));
        assert!(matches!(l_b(&p, &[], 0.5), Err(HilError::Config(_))));
        assert!(matches!(l_v(&p, &[]), Err(HilError::Config(_))));
        assert!(matches!(l_kl(&p, &[]), Err(HilError::Config(_))));
    }

    #[test]
    fn kl_zero_for_identical_low_policies() {
        let dims = ModelDims::new(2, 3, 3).unwrap();
        let p = HierarchicalPolicy::from_flat_policy(dims, StateTable::one_hot(2), &[1, 2]).unwrap();
        assert_eq!(l_kl(&p, &[(0, 1), (1, 0)]).unwrap(), 0.0);
        let u = HierarchicalPolicy::tabular_uniform(dims, StateTable::one_hot(2));
        assert!(l_kl(&u, &[(0, 1), (1, 2)]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_sums_both_ordered_pairs() {
        let dims = ModelDims::new(1, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = HierarchicalPolicy::tabular_random(dims, StateTable::one_hot(1), -2.0, 2.0, &mut rng);
        let p0 = p.eval_pi_lo(0, 0).unwrap()[1];
        let p1 = p.eval_pi_lo(0, 1).unwrap()[1];
        let expected = p0 * (p0 / p1).ln() + p1 * (p1 / p0).ln();
        assert!((l_kl(&p, &[(0, 1)]).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn kl_floor_dominates_for_point_masses() {
        // Option 0 plays action 0 surely, option 1 never does.
        let dims = ModelDims::new(1, 2, 2).unwrap();
        let t = PolicyTables::from_probs(dims, vec![0.5, 0.5], vec![1.0, 0.0, 0.0, 1.0], vec![0.5; 4]).unwrap();
        let p = HierarchicalPolicy::tabular_from_tables(&t, StateTable::one_hot(1)).unwrap();
        let v = l_kl(&p, &[(0, 0)]).unwrap();
        assert!((v - (-KL_FLOOR.ln())).abs() < 1e-9, "{v}");
    }

    #[test]
    fn penalized_objective_arithmetic() {
        let none = RegularizerConfig::none();
        assert_eq!(penalized_objective(-3.2, 1.0, 2.0, 3.0, &none), -3.2);
        let only_b = RegularizerConfig { lambda_b: 1.0, ..none };
        assert_eq!(penalized_objective(0.0, 1.0, 0.0, 0.0, &only_b), -1.0);
        let d = RegularizerConfig::default();
        let v = penalized_objective(-2.0, 0.4, 0.3, 5.0, &d);
        assert!((v - (-2.0 - 0.4 + 0.1 * 0.3 + 0.01 * 5.0)).abs() < 1e-15);
    }

    #[test]
    fn variance_raises_penalized_objective() {
        let cfg = RegularizerConfig { lambda_b: 0.0, lambda_v: 0.1, lambda_kl: 0.0, tau: None };
        let flat = policy_with_hi(&[[0.5, 0.5], [0.5, 0.5]]);
        let spread = policy_with_hi(&[[0.9, 0.1], [0.1, 0.9]]);
        let pen = Penalty::new(cfg, 2, vec![(0, 1.0), (1, 1.0)], vec![(0, 0, 1.0)]).unwrap();
        assert!(pen.value(&spread.tables()) > pen.value(&flat.tables()));
    }

    #[test]
    fn batch_and_online_lb_agree_on_uniform_multiplicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = ModelDims::new(3, 2, 2).unwrap();
        let p = HierarchicalPolicy::tabular_random(dims, StateTable::one_hot(3), -1.0, 1.0, &mut rng);
        let traj = Trajectory::new(
            vec![crate::Step::new(0, 0), crate::Step::new(1, 1), crate::Step::new(2, 0)],
            0,
        );
        let cfg = RegularizerConfig::default();
        let batch = Penalty::batch(cfg, 2, std::slice::from_ref(&traj)).unwrap();
        let online = Penalty::online(cfg, 2, &[0, 1, 2], (2, 0)).unwrap();
        let t = p.tables();
        assert_eq!(batch.components(&t).0, online.components(&t).0);
        assert_eq!(batch.components(&t).1, online.components(&t).1);
    }

    #[test]
    fn config_validation() {
        assert!(RegularizerConfig { lambda_b: -1.0, ..Default::default() }.validate().is_err());
        assert!(RegularizerConfig { tau: Some(0.0), ..Default::default() }.validate().is_err());
        assert!(RegularizerConfig::default().validate().is_ok());
    }
}
