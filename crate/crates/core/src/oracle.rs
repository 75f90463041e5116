//! Brute-force references for the smoothing code.
//!
//! [`enumerate`] walks every latent path `(o_0, (o_t, b_t)_{1:T})` and
//! accumulates the joint probability directly from the policy tables. It
//! shares no code with the recursions it checks and is exponential in `T`,
//! so it is only meant for tiny instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::batch_em::{batch_q_multi, forward_backward_with_tables};
use crate::error::{HilError, Result};
use crate::online_em::{init_statistics, online_q};
use crate::opgm::{point_belief, ModelDims, StateTable, Step, Trajectory};
use crate::policies::{HierarchicalPolicy, PolicyTables};

/// Exact posterior quantities of one trajectory.
#[derive(Clone, Debug)]
pub struct Enumeration {
    pub log_marginal: f64,
    /// `P(O_t, B_t | data)`, blocks of `|O| x 2` per step.
    pub gamma: Vec<f64>,
    /// `P(O_{t-1}, B_t | data)` for every step including the first.
    pub xi: Vec<f64>,
    /// `(1/T) sum_t P(O_{t-1}, B_t, O_t, S_t, A_t | data)`, laid out as
    /// [`crate::online_em::PhiStatistic::to_dense`].
    pub phi: Vec<f64>,
}

const MAX_PATHS: f64 = 5e7;

pub fn enumerate(tables: &PolicyTables, trajectory: &Trajectory, belief: &[f64]) -> Result<Enumeration> {
    let d = *tables.dims();
    let (no, ns, na) = (d.n_options, d.n_states, d.n_actions);
    let len = trajectory.len();
    if len == 0 || belief.len() != no {
        return Err(HilError::Shape("enumeration needs T >= 1 and a belief over O_0".into()));
    }
    trajectory.validate(&d)?;
    if (no as f64) * ((2 * no) as f64).powi(len as i32) > MAX_PATHS {
        return Err(HilError::config("instance too large to enumerate"));
    }

    let mut gamma = vec![0.0; len * no * 2];
    let mut xi = vec![0.0; len * no * 2];
    let mut phi = vec![0.0; no * 2 * no * ns * na];
    let mut total = 0.0;

    // Iterate over all latent paths with an odometer over (o_t, b_t).
    let mut path = vec![(0usize, 0usize); len];
    for o0 in 0..no {
        if belief[o0] == 0.0 {
            continue;
        }
        path.iter_mut().for_each(|p| *p = (0, 0));
        loop {
            let mut w = belief[o0];
            let mut prev = o0;
            for (t, &(o, b)) in path.iter().enumerate() {
                let Step { state: s, action: a } = trajectory.steps[t];
                let pi_b = tables.term[(s * no + prev) * 2 + b];
                let pi_tilde = if b == 1 {
                    tables.hi[s * no + o]
                } else if o == prev {
                    1.0
                } else {
                    0.0
                };
                w *= pi_b * pi_tilde * tables.lo[(s * no + o) * na + a];
                if w == 0.0 {
                    break;
                }
                prev = o;
            }
            if w > 0.0 {
                total += w;
                let mut prev = o0;
                for (t, &(o, b)) in path.iter().enumerate() {
                    let Step { state: s, action: a } = trajectory.steps[t];
                    gamma[(t * no + o) * 2 + b] += w;
                    xi[(t * no + prev) * 2 + b] += w;
                    phi[((((prev * 2 + b) * no) + o) * ns + s) * na + a] += w;
                    prev = o;
                }
            }
            // Advance the odometer.
            let mut k = 0;
            loop {
                if k == len {
                    break;
                }
                let (o, b) = &mut path[k];
                *b += 1;
                if *b == 2 {
                    *b = 0;
                    *o += 1;
                }
                if *o == no {
                    *o = 0;
                    k += 1;
                } else {
                    break;
                }
            }
            if k == len {
                break;
            }
        }
    }

    if total <= 0.0 {
        return Err(HilError::DegenerateTrajectory { t: 0 });
    }
    gamma.iter_mut().chain(xi.iter_mut()).for_each(|v| *v /= total);
    phi.iter_mut().for_each(|v| *v /= total * len as f64);
    Ok(Enumeration {
        log_marginal: total.ln(),
        gamma,
        xi,
        phi,
    })
}

/// A random tabular policy and a random trajectory for it.
#[derive(Clone, Debug)]
pub struct Instance {
    pub policy: HierarchicalPolicy,
    pub trajectory: Trajectory,
}

pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    n_states: usize,
    n_actions: usize,
    n_options: usize,
    len: usize,
) -> Result<Instance> {
    let dims = ModelDims::new(n_states, n_actions, n_options)?;
    let policy = HierarchicalPolicy::tabular_random(dims, StateTable::one_hot(n_states), -2.0, 2.0, rng);
    let steps = (0..len)
        .map(|_| Step::new(rng.random_range(0..n_states), rng.random_range(0..n_actions)))
        .collect();
    let trajectory = Trajectory::new(steps, rng.random_range(0..n_options));
    Ok(Instance { policy, trajectory })
}

/// `|S|, |A|, |O|` each drawn from `{2, 3}` and `T` from `1..=max_len`.
pub fn random_small_instance<R: Rng + ?Sized>(rng: &mut R, max_len: usize) -> Result<Instance> {
    let (ns, na, no) = (rng.random_range(2..=3), rng.random_range(2..=3), rng.random_range(2..=3));
    let len = rng.random_range(1..=max_len);
    random_instance(rng, ns, na, no, len)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleOptions {
    pub n_instances: usize,
    /// Longest trajectory for the enumeration checks.
    pub max_len: usize,
    /// Number of instances and longest trajectory for the auxiliary-function check.
    pub q_instances: usize,
    pub q_max_len: usize,
    pub seed: u64,
    /// Fault injection: added to `chi[0]` after every online update.
    pub chi_perturbation: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            n_instances: 200,
            max_len: 8,
            q_instances: 50,
            q_max_len: 50,
            seed: 0,
            chi_perturbation: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub instances: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Tracker {
    name: &'static str,
    tolerance: f64,
    worst: f64,
    count: usize,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Tracker {
            name,
            tolerance,
            worst: 0.0,
            count: 0,
        }
    }

    fn record(&mut self, dev: f64) {
        self.count += 1;
        // NaN deviations must fail the check.
        if dev.is_nan() || dev > self.worst {
            self.worst = if dev.is_nan() { f64::INFINITY } else { dev };
        }
    }

    fn finish(self) -> OracleCheck {
        OracleCheck {
            name: self.name.into(),
            instances: self.count,
            max_deviation: self.worst,
            tolerance: self.tolerance,
            passed: self.worst < self.tolerance,
        }
    }
}

/// Runs smoothing, online-statistic and auxiliary-function checks on
/// random instances with `|S|, |A| in {2,3}` and `|O| in {2,3}`.
pub fn run_oracle_suite(options: &OracleOptions) -> Result<OracleReport> {
    if options.max_len == 0 || options.q_max_len == 0 {
        return Err(HilError::config("trajectory lengths must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut loglik = Tracker::new("loglik_vs_enumeration", 1e-10);
    let mut gamma = Tracker::new("gamma_vs_enumeration", 1e-10);
    let mut xi = Tracker::new("xi_vs_enumeration", 1e-10);
    let mut phi = Tracker::new("online_phi_vs_enumeration", 1e-10);
    let mut q = Tracker::new("online_q_vs_batch_q", 1e-9);

    let absorb = |inst: &Instance, tables: &PolicyTables, prior: &[f64]| -> Result<_> {
        let mut st = init_statistics(*tables.dims(), prior)?;
        for step in &inst.trajectory.steps {
            st.update(tables, step.state, step.action)?;
            if options.chi_perturbation != 0.0 {
                st.perturb_chi(options.chi_perturbation);
            }
        }
        st.compose_phi()
    };

    for _ in 0..options.n_instances {
        let inst = random_small_instance(&mut rng, options.max_len)?;
        let tables = inst.policy.tables();
        let no = tables.dims().n_options;
        let prior = point_belief(inst.trajectory.initial_option, no);
        let en = enumerate(&tables, &inst.trajectory, &prior)?;
        let sm = forward_backward_with_tables(&tables, &inst.trajectory, &prior)?;
        loglik.record((sm.loglik() - en.log_marginal).abs());
        gamma.record(sup(&sm.gamma, &en.gamma));
        let xi_dev = sup(&sm.initial_xi, &en.xi[..no * 2]).max(sup(&sm.xi, &en.xi[no * 2..]));
        xi.record(xi_dev);
        let online = absorb(&inst, &tables, &prior)?;
        phi.record(sup(&online.to_dense(), &en.phi));
    }

    for _ in 0..options.q_instances {
        let inst = random_small_instance(&mut rng, options.q_max_len)?;
        let tables = inst.policy.tables();
        let dims = *tables.dims();
        let prior = point_belief(inst.trajectory.initial_option, dims.n_options);
        let sm = forward_backward_with_tables(&tables, &inst.trajectory, &prior)?;
        let online = absorb(&inst, &tables, &prior)?;
        let probe = HierarchicalPolicy::tabular_random(dims, StateTable::one_hot(dims.n_states), -2.0, 2.0, &mut rng);
        let qb = batch_q_multi(&probe, &[(&sm, &inst.trajectory)], true)?;
        let qo = online_q(&probe, &online)?;
        q.record((qb - qo).abs());
    }

    Ok(OracleReport {
        checks: vec![loglik.finish(), gamma.finish(), xi.finish(), phi.finish(), q.finish()],
    })
}
