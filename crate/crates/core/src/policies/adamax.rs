use serde::{Deserialize, Serialize};

use crate::error::{HilError, Result};

use super::PolicyParams;

/// First-moment EMA and infinity-norm second moment, one entry per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamaxState {
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub t: u64,
}

impl AdamaxState {
    pub fn new(dim: usize) -> Self {
        AdamaxState {
            m: vec![0.0; dim],
            u: vec![0.0; dim],
            t: 0,
        }
    }
}

/// Adamax (the infinity-norm Adam variant), used here for gradient *ascent*.
#[derive(Clone, Debug)]
pub struct Adamax {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamaxState,
}

impl Adamax {
    pub fn new(dim: usize, lr: f64) -> Self {
        Adamax {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamaxState::new(dim),
        }
    }

    /// One ascent step on `params` along `grad`.
    pub fn ascend(&mut self, params: &mut PolicyParams, grad: &[f64]) -> Result<()> {
        if grad.len() != params.dim() || self.state.m.len() != grad.len() {
            return Err(HilError::Shape(format!(
                "gradient of length {} for {} parameters",
                grad.len(),
                params.dim()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(HilError::Numeric("non-finite gradient".into()));
        }
        let st = &mut self.state;
        st.t += 1;
        let step = self.lr / (1.0 - self.beta1.powi(st.t as i32));
        for (i, p) in params.iter_mut().enumerate() {
            let g = grad[i];
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
            st.u[i] = (self.beta2 * st.u[i]).max(g.abs());
            *p += step * st.m[i] / (st.u[i] + self.eps);
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters and advances `state`.
pub fn adamax_step(params: &PolicyParams, gradient: &[f64], state: &mut AdamaxState, learning_rate: f64) -> Result<PolicyParams> {
    let mut opt = Adamax {
        state: std::mem::replace(state, AdamaxState::new(0)),
        ..Adamax::new(0, learning_rate)
    };
    let mut out = params.clone();
    let res = opt.ascend(&mut out, gradient);
    *state = opt.state;
    res.map(|_| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::ParamKind;

    fn params(v: Vec<f64>) -> PolicyParams {
        PolicyParams {
            kind: ParamKind::Tabular,
            theta_hi: v,
            theta_lo: vec![],
            theta_b: vec![],
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = params(vec![0.3, -1.2]);
        let mut st = AdamaxState::new(2);
        let q = adamax_step(&p, &[0.0, 0.0], &mut st, 1e-2).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn constant_gradient_moves_by_lr_times_sign() {
        // m_t = g (1 - b1^t) and u_t = |g|, so each step is lr * g / (|g| + eps).
        let mut p = params(vec![0.0, 0.0]);
        let mut opt = Adamax::new(2, 1e-2);
        let g = [3.0, -0.5];
        for k in 1..=200 {
            let before = p.theta_hi.clone();
            opt.ascend(&mut p, &g).unwrap();
            for i in 0..2 {
                let delta = p.theta_hi[i] - before[i];
                let expected = 1e-2 * g[i] / (g[i].abs() + 1e-8);
                assert!((delta - expected).abs() < 1e-12, "step {k}: {delta} vs {expected}");
            }
        }
        assert!((p.theta_hi[0] - 2.0).abs() < 1e-7);
        assert!((p.theta_hi[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = params(vec![0.1, 0.2, 0.3]);
            let mut opt = Adamax::new(3, 1e-2);
            for k in 0..50 {
                let g: Vec<f64> = (0..3).map(|i| ((k * 7 + i) as f64).sin()).collect();
                opt.ascend(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_mismatched_gradient() {
        let mut p = params(vec![0.0]);
        let mut opt = Adamax::new(1, 1e-2);
        assert!(opt.ascend(&mut p, &[1.0, 2.0]).is_err());
        assert!(opt.ascend(&mut p, &[f64::NAN]).is_err());
    }
}
