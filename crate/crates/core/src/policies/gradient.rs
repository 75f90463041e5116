use crate::error::{HilError, Result};
use crate::logspace::xlogy;
use crate::opgm::{ActionId, ModelDims, OptionId, StateId};
use crate::regularizers::Penalty;

use super::{HierarchicalPolicy, ParamKind, PolicyTables};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// `pi_hi(outcome = o | s)`.
    Hi,
    /// `pi_lo(outcome = a | s, option)`.
    Lo,
    /// `pi_b(outcome = b | s, option = o_prev)`.
    Term,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogTerm {
    pub weight: f64,
    pub head: Head,
    pub state: StateId,
    /// Conditioning option; ignored for [`Head::Hi`].
    pub option: OptionId,
    pub outcome: usize,
}

/// A weighted sum of policy log-probabilities, `sum_i w_i log head_i(outcome_i | input_i)`.
///
/// Terms sharing a head and input are merged, so the storage is one dense
/// weight table per head with the same layout as [`PolicyTables`]. The
/// E-steps of both EM variants produce one of these; the M-step either
/// normalizes it (closed-form tabular) or ascends it.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedLogTerms {
    dims: ModelDims,
    pub(crate) hi: Vec<f64>,
    pub(crate) lo: Vec<f64>,
    pub(crate) term: Vec<f64>,
}

impl WeightedLogTerms {
    pub fn new(dims: ModelDims) -> Self {
        WeightedLogTerms {
            dims,
            hi: vec![0.0; dims.n_states * dims.n_options],
            lo: vec![0.0; dims.n_states * dims.n_options * dims.n_actions],
            term: vec![0.0; dims.n_states * dims.n_options * 2],
        }
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn push(&mut self, t: LogTerm) -> Result<()> {
        if !t.weight.is_finite() {
            return Err(HilError::Numeric(format!("non-finite weight {}", t.weight)));
        }
        self.dims.check_state(t.state)?;
        match t.head {
            Head::Hi => {
                self.dims.check_option(t.outcome)?;
                self.add_hi(t.state, t.outcome, t.weight);
            }
            Head::Lo => {
                self.dims.check_option(t.option)?;
                self.dims.check_action(t.outcome)?;
                self.add_lo(t.state, t.option, t.outcome, t.weight);
            }
            Head::Term => {
                self.dims.check_option(t.option)?;
                if t.outcome > 1 {
                    return Err(HilError::dim("termination outcome must be 0 or 1"));
                }
                self.add_term(t.state, t.option, t.outcome, t.weight);
            }
        }
        Ok(())
    }

    #[inline]
    pub fn add_hi(&mut self, s: StateId, o: OptionId, w: f64) {
        self.hi[s * self.dims.n_options + o] += w;
    }

    #[inline]
    pub fn add_lo(&mut self, s: StateId, o: OptionId, a: ActionId, w: f64) {
        self.lo[(s * self.dims.n_options + o) * self.dims.n_actions + a] += w;
    }

    #[inline]
    pub fn add_term(&mut self, s: StateId, o_prev: OptionId, b: usize, w: f64) {
        self.term[(s * self.dims.n_options + o_prev) * 2 + b] += w;
    }

    pub fn hi_weight(&self, s: StateId, o: OptionId) -> f64 {
        self.hi[s * self.dims.n_options + o]
    }

    pub fn lo_weight(&self, s: StateId, o: OptionId, a: ActionId) -> f64 {
        self.lo[(s * self.dims.n_options + o) * self.dims.n_actions + a]
    }

    pub fn term_weight(&self, s: StateId, o_prev: OptionId, b: usize) -> f64 {
        self.term[(s * self.dims.n_options + o_prev) * 2 + b]
    }

    pub fn scale(&mut self, factor: f64) {
        for w in self.hi.iter_mut().chain(self.lo.iter_mut()).chain(self.term.iter_mut()) {
            *w *= factor;
        }
    }

    pub fn clear(&mut self) {
        for w in self.hi.iter_mut().chain(self.lo.iter_mut()).chain(self.term.iter_mut()) {
            *w = 0.0;
        }
    }

    pub fn add_assign(&mut self, other: &WeightedLogTerms) {
        for (a, b) in self.hi.iter_mut().zip(&other.hi) {
            *a += b;
        }
        for (a, b) in self.lo.iter_mut().zip(&other.lo) {
            *a += b;
        }
        for (a, b) in self.term.iter_mut().zip(&other.term) {
            *a += b;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.hi.iter().chain(&self.lo).chain(&self.term).all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(HilError::Numeric("non-finite weight in objective".into()))
        }
    }

    /// `sum_i w_i log p_i` with `0 log 0 = 0`; `-inf` when a positive weight
    /// meets a zero probability.
    pub fn evaluate(&self, tables: &PolicyTables) -> f64 {
        let sum = |w: &[f64], p: &[f64]| w.iter().zip(p).map(|(&w, &p)| xlogy(w, p)).sum::<f64>();
        sum(&self.term, &tables.term) + sum(&self.hi, &tables.hi) + sum(&self.lo, &tables.lo)
    }
}

/// Value of `sum w log p` plus the optional penalty terms.
pub fn objective_value(policy: &HierarchicalPolicy, terms: &WeightedLogTerms, penalty: Option<&Penalty>) -> Result<f64> {
    terms.check_finite()?;
    let tables = policy.tables();
    let mut v = terms.evaluate(&tables);
    if let Some(p) = penalty {
        v += p.value(&tables);
    }
    Ok(v)
}

/// Adds the softmax Jacobian-vector product `p * (g - <p, g>)` to `dz`.
fn softmax_backward(p: &[f64], g: &[f64], dz: &mut [f64]) {
    let dot: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
    for ((dz, &p), &g) in dz.iter_mut().zip(p).zip(g) {
        *dz += p * (g - dot);
    }
}

/// Exact gradient of [`objective_value`] with respect to the flat parameter
/// vector `theta_hi ++ theta_lo ++ theta_b`.
pub fn objective_gradient(policy: &HierarchicalPolicy, terms: &WeightedLogTerms, penalty: Option<&Penalty>) -> Result<Vec<f64>> {
    terms.check_finite()?;
    let d = *policy.dims();
    if terms.dims() != &d {
        return Err(HilError::dim("objective and policy dimensions differ"));
    }
    let tables = policy.tables();
    let (no, na) = (d.n_options, d.n_actions);

    // Gradient of the objective with respect to each head's logits.
    let mut dz_hi = vec![0.0; tables.hi.len()];
    let mut dz_lo = vec![0.0; tables.lo.len()];
    let mut dz_term = vec![0.0; tables.term.len()];

    let log_term_grad = |w: &[f64], p: &[f64], dz: &mut [f64], row: usize| {
        for ((w, p), dz) in w.chunks(row).zip(p.chunks(row)).zip(dz.chunks_mut(row)) {
            let total: f64 = w.iter().sum();
            if total == 0.0 {
                continue;
            }
            for k in 0..row {
                dz[k] += w[k] - total * p[k];
            }
        }
    };
    log_term_grad(&terms.hi, &tables.hi, &mut dz_hi, no);
    log_term_grad(&terms.lo, &tables.lo, &mut dz_lo, na);
    log_term_grad(&terms.term, &tables.term, &mut dz_term, 2);

    if let Some(pen) = penalty {
        let mut g_hi = vec![0.0; tables.hi.len()];
        let mut g_lo = vec![0.0; tables.lo.len()];
        pen.grad_probs(&tables, &mut g_hi, &mut g_lo);
        for ((p, g), dz) in tables.hi.chunks(no).zip(g_hi.chunks(no)).zip(dz_hi.chunks_mut(no)) {
            if g.iter().any(|&x| x != 0.0) {
                softmax_backward(p, g, dz);
            }
        }
        for ((p, g), dz) in tables.lo.chunks(na).zip(g_lo.chunks(na)).zip(dz_lo.chunks_mut(na)) {
            if g.iter().any(|&x| x != 0.0) {
                softmax_backward(p, g, dz);
            }
        }
    }

    let params = policy.params();
    let mut grad = vec![0.0; params.dim()];
    let (n_hi, n_lo) = (params.theta_hi.len(), params.theta_lo.len());
    match policy.kind() {
        ParamKind::Tabular => {
            grad[..n_hi].copy_from_slice(&dz_hi);
            grad[n_hi..n_hi + n_lo].copy_from_slice(&dz_lo);
            grad[n_hi + n_lo..].copy_from_slice(&dz_term);
        }
        ParamKind::Mlp => {
            let (hi_net, lo_net, b_net) = policy.mlp_nets();
            let (g_hi, rest) = grad.split_at_mut(n_hi);
            let (g_lo, g_b) = rest.split_at_mut(n_lo);
            let mut pre = Vec::new();
            let mut logits = vec![0.0; no.max(na).max(2)];
            for s in 0..d.n_states {
                let dz = &dz_hi[s * no..(s + 1) * no];
                if dz.iter().any(|&x| x != 0.0) {
                    let x = policy.state_table().feature(s);
                    hi_net.forward(&params.theta_hi, x, &mut logits[..no], Some(&mut pre));
                    hi_net.backward(&params.theta_hi, x, &pre, dz, g_hi);
                }
                for o in 0..no {
                    let dz_l = &dz_lo[(s * no + o) * na..(s * no + o + 1) * na];
                    let dz_b = &dz_term[(s * no + o) * 2..(s * no + o + 1) * 2];
                    let lo_active = dz_l.iter().any(|&x| x != 0.0);
                    let b_active = dz_b.iter().any(|&x| x != 0.0);
                    if !lo_active && !b_active {
                        continue;
                    }
                    let x = policy.conditioned_input(s, o);
                    if lo_active {
                        let w = lo_net.block(&params.theta_lo, o);
                        lo_net.forward(w, &x, &mut logits[..na], Some(&mut pre));
                        lo_net.backward(w, &x, &pre, dz_l, lo_net.block_mut(g_lo, o));
                    }
                    if b_active {
                        let w = b_net.block(&params.theta_b, o);
                        b_net.forward(w, &x, &mut logits[..2], Some(&mut pre));
                        b_net.backward(w, &x, &pre, dz_b, b_net.block_mut(g_b, o));
                    }
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opgm::StateTable;
    use crate::policies::MlpSpec;
    use crate::regularizers::RegularizerConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central differences on the flat parameter vector.
    fn numeric_gradient(policy: &HierarchicalPolicy, terms: &WeightedLogTerms, penalty: Option<&Penalty>, h: f64) -> Vec<f64> {
        let base = policy.params().to_flat();
        let mut out = vec![0.0; base.len()];
        let mut params = policy.params().clone();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            params.set_flat(&plus).unwrap();
            let fp = objective_value(&policy.with_params(params.clone()).unwrap(), terms, penalty).unwrap();
            let mut minus = base.clone();
            minus[i] -= h;
            params.set_flat(&minus).unwrap();
            let fm = objective_value(&policy.with_params(params.clone()).unwrap(), terms, penalty).unwrap();
            out[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn rel_error(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    fn random_terms<R: Rng>(dims: ModelDims, rng: &mut R) -> WeightedLogTerms {
        let mut t = WeightedLogTerms::new(dims);
        for _ in 0..12 {
            let s = rng.random_range(0..dims.n_states);
            let o = rng.random_range(0..dims.n_options);
            t.add_hi(s, rng.random_range(0..dims.n_options), rng.random::<f64>());
            t.add_lo(s, o, rng.random_range(0..dims.n_actions), rng.random::<f64>());
            t.add_term(s, o, rng.random_range(0..2), rng.random::<f64>());
        }
        t
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let dims = ModelDims::new(3, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = HierarchicalPolicy::tabular_random(dims, StateTable::one_hot(3), -1.0, 1.0, &mut rng);
        let g = objective_gradient(&p, &WeightedLogTerms::new(dims), None).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_tabular_term_matches_softmax_formula() {
        let dims = ModelDims::new(2, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = HierarchicalPolicy::tabular_random(dims, StateTable::one_hot(2), -1.0, 1.0, &mut rng);
        let mut t = WeightedLogTerms::new(dims);
        let w = 0.7;
        t.push(LogTerm { weight: w, head: Head::Lo, state: 1, option: 0, outcome: 2 }).unwrap();
        let g = objective_gradient(&p, &t, None).unwrap();
        let probs = p.eval_pi_lo(1, 0).unwrap();
        let off = p.params().theta_hi.len() + (1 * 2 + 0) * 3;
        for k in 0..3 {
            let e = if k == 2 { 1.0 } else { 0.0 };
            assert!((g[off + k] - w * (e - probs[k])).abs() < 1e-14);
        }
        let numeric = numeric_gradient(&p, &t, None, 1e-5);
        assert!(rel_error(&g, &numeric) < 1e-7);
    }

    #[test]
    fn non_finite_weight_is_rejected() {
        let dims = ModelDims::new(2, 2, 2).unwrap();
        let mut t = WeightedLogTerms::new(dims);
        assert!(t.push(LogTerm { weight: f64::NAN, head: Head::Hi, state: 0, option: 0, outcome: 0 }).is_err());
        t.add_hi(0, 0, f64::INFINITY);
        let p = HierarchicalPolicy::tabular_uniform(dims, StateTable::one_hot(2));
        assert!(matches!(objective_gradient(&p, &t, None), Err(HilError::Numeric(_))));
    }

    #[test]
    fn gradient_matches_finite_differences_tabular_and_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dims = ModelDims::new(4, 3, 2).unwrap();
        let features: Vec<f64> = (0..4).flat_map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let table = StateTable::new(2, features).unwrap();
        let spec = MlpSpec { hidden_units_lo_b: 4, hidden_units_hi: 5, ..MlpSpec::default() };
        let cfg = RegularizerConfig::default();
        for _ in 0..10 {
            let terms = random_terms(dims, &mut rng);
            let penalty = Penalty::new(
                cfg,
                dims.n_options,
                (0..4).map(|s| (s, rng.random::<f64>() + 0.1)).collect(),
                vec![(0, 1, 0.5), (2, 0, 0.3), (3, 2, 0.2)],
            )
            .unwrap();
            let tab = HierarchicalPolicy::tabular_random(dims, table.clone(), -1.0, 1.0, &mut rng);
            let mut mlp = HierarchicalPolicy::mlp_random(dims, table.clone(), spec, &mut rng).unwrap();
            // Non-zero biases keep every hidden unit away from its kink.
            for b in mlp.params_mut().iter_mut() {
                *b += rng.random_range(-0.1..0.1);
            }
            for p in [&tab, &mlp] {
                let g = objective_gradient(p, &terms, Some(&penalty)).unwrap();
                let n = numeric_gradient(p, &terms, Some(&penalty), 1e-5);
                let err = rel_error(&g, &n);
                assert!(err < 1e-5, "relative error {err}");
            }
        }
    }

    #[test]
    fn hi_block_gradient_of_lo_only_objective_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dims = ModelDims::new(3, 2, 2).unwrap();
        let spec = MlpSpec { hidden_units_lo_b: 3, hidden_units_hi: 3, ..MlpSpec::default() };
        let p = HierarchicalPolicy::mlp_random(dims, StateTable::one_hot(3), spec, &mut rng).unwrap();
        let mut t = WeightedLogTerms::new(dims);
        t.add_lo(1, 0, 1, 1.0);
        t.add_lo(2, 1, 0, 0.5);
        let g = objective_gradient(&p, &t, None).unwrap();
        let n_hi = p.params().theta_hi.len();
        assert!(g[..n_hi].iter().all(|&x| x == 0.0));
        assert!(g[n_hi..].iter().any(|&x| x != 0.0));
    }
}
