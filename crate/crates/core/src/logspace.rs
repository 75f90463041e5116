//! Small log-space helpers shared by the likelihood code.

/// Log of zero. Kept as a named constant so the sentinel is greppable.
pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// `ln(x)` with `ln(0) = -inf`.
#[inline]
pub fn safe_ln(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        LOG_ZERO
    }
}

/// `w * ln(p)` under the convention `0 * ln 0 = 0`.
#[inline]
pub fn xlogy(w: f64, p: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * safe_ln(p)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return LOG_ZERO;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Numerically stable softmax into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_handles_all_neg_inf() {
        assert_eq!(logsumexp(&[LOG_ZERO, LOG_ZERO]), LOG_ZERO);
        assert_eq!(logsumexp(&[]), LOG_ZERO);
    }

    #[test]
    fn logsumexp_matches_naive() {
        let xs = [0.1, -2.0, 3.5];
        let naive: f64 = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&xs) - naive).abs() < 1e-14);
    }

    #[test]
    fn xlogy_zero_convention() {
        assert_eq!(xlogy(0.0, 0.0), 0.0);
        assert_eq!(xlogy(1.0, 0.0), LOG_ZERO);
    }

    #[test]
    fn softmax_of_large_logits_is_finite() {
        let p = softmax(&[1000.0, 0.0, -1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(p[0], 1.0);
    }
}
