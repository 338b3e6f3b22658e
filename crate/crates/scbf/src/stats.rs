//! Exact binomial confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Two-sided Clopper–Pearson interval for `hits` successes out of `n`
/// trials at the given confidence level (e.g. 0.95).
pub fn clopper_pearson(hits: usize, n: usize, confidence: f64) -> Interval {
    assert!(n > 0 && hits <= n, "need 0 <= hits <= n and n > 0");
    assert!(confidence > 0.0 && confidence < 1.0);
    let alpha = 1.0 - confidence;
    let (x, n) = (hits as f64, n as f64);
    let lo = if hits == 0 {
        0.0
    } else {
        Beta::new(x, n - x + 1.0).unwrap().inverse_cdf(alpha / 2.0)
    };
    let hi = if hits as f64 == n {
        1.0
    } else {
        Beta::new(x + 1.0, n - x).unwrap().inverse_cdf(1.0 - alpha / 2.0)
    };
    Interval { lo, hi }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `P(X ≤ k)` for `X ~ Bin(n, p)`, summed in log space.
    fn binom_cdf(k: usize, n: usize, p: f64) -> f64 {
        let mut total = 0.0;
        let mut log_c = 0.0_f64;
        for i in 0..=k {
            if i > 0 {
                log_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
            }
            total += (log_c + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp();
        }
        total
    }

    #[test]
    fn zero_hits_has_closed_form_upper_bound() {
        let ci = clopper_pearson(0, 1000, 0.95);
        assert_eq!(ci.lo, 0.0);
        let expected = 1.0 - 0.025_f64.powf(1.0 / 1000.0);
        assert!((ci.hi - expected).abs() < 1e-9, "{} vs {expected}", ci.hi);
        assert!(ci.hi < 0.01);
    }

    #[test]
    fn all_hits_has_closed_form_lower_bound() {
        let ci = clopper_pearson(50, 50, 0.95);
        assert_eq!(ci.hi, 1.0);
        assert!((ci.lo - 0.025_f64.powf(1.0 / 50.0)).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn endpoints_solve_the_binomial_tail_equations(n in 1usize..400, frac in 0.0f64..1.0) {
            let hits = ((n as f64) * frac) as usize;
            let ci = clopper_pearson(hits, n, 0.95);
            prop_assert!(ci.lo <= hits as f64 / n as f64 && hits as f64 / n as f64 <= ci.hi);
            if hits < n {
                // P(X ≤ hits | p = hi) = α/2
                prop_assert!((binom_cdf(hits, n, ci.hi) - 0.025).abs() < 1e-7);
            }
            if hits > 0 {
                // P(X ≥ hits | p = lo) = α/2
                prop_assert!((1.0 - binom_cdf(hits - 1, n, ci.lo) - 0.025).abs() < 1e-7);
            }
        }
    }
}
