//! Small statistics helpers used by the experiment harness and tests.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Chi-square goodness-of-fit outcome.
#[derive(Debug, Clone, Serialize)]
pub struct ChiSquareOutcome {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub cells: usize,
    pub samples: usize,
    /// Expected count pooled into the remainder cell.
    pub pooled_expected: f64,
}

/// Pearson chi-square of integer samples against expected cell weights
/// (absolute probabilities under the reference law; they need not sum to
/// one - the remainder becomes a pooled cell). Cells with expected count
/// below five are pooled into the remainder.
pub fn chi_square_gof(samples: &[i64], expected: &[(i64, f64)]) -> ChiSquareOutcome {
    let n = samples.len();
    let nf = n as f64;
    let mut counts: std::collections::HashMap<i64, usize> = std::collections::HashMap::new();
    for &s in samples {
        *counts.entry(s).or_insert(0) += 1;
    }
    let mut kept: Vec<(f64, f64)> = Vec::new(); // (observed, expected)
    let mut pooled_obs = nf;
    let mut pooled_exp = nf;
    for &(state, p) in expected {
        let e = nf * p;
        if e >= 5.0 {
            let obs = counts.get(&state).copied().unwrap_or(0) as f64;
            kept.push((obs, e));
            pooled_obs -= obs;
            pooled_exp -= e;
        }
    }
    let mut statistic = 0.0;
    for &(obs, e) in &kept {
        statistic += (obs - e).powi(2) / e;
    }
    let mut cells = kept.len();
    if pooled_exp > 1e-9 {
        statistic += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
        cells += 1;
    }
    let dof = cells.saturating_sub(1).max(1);
    let dist = ChiSquared::new(dof as f64).expect("positive dof");
    let p_value = 1.0 - dist.cdf(statistic);
    ChiSquareOutcome {
        statistic,
        dof,
        p_value,
        cells,
        samples: n,
        pooled_expected: pooled_exp.max(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeedSpec, TrialRng};

    #[test]
    fn uniform_counts_pass() {
        // draw from the reference law itself: p should be comfortably high
        let probs: Vec<(i64, f64)> = (0..4).map(|k| (k, 0.25)).collect();
        let mut rng = TrialRng::new(SeedSpec::new(5, 0));
        let samples: Vec<i64> = (0..4000)
            .map(|_| (rng.uniform() * 4.0) as i64)
            .collect();
        let out = chi_square_gof(&samples, &probs);
        assert!(out.p_value > 0.001, "{out:?}");
        assert_eq!(out.dof, 3);
    }

    #[test]
    fn shifted_counts_fail() {
        let probs: Vec<(i64, f64)> = (0..4).map(|k| (k, 0.25)).collect();
        let mut rng = TrialRng::new(SeedSpec::new(6, 0));
        // heavily biased toward 0
        let samples: Vec<i64> = (0..4000)
            .map(|_| if rng.uniform() < 0.5 { 0 } else { (rng.uniform() * 4.0) as i64 })
            .collect();
        let out = chi_square_gof(&samples, &probs);
        assert!(out.p_value < 1e-6, "{out:?}");
    }

    #[test]
    fn low_expectation_cells_are_pooled() {
        let probs: Vec<(i64, f64)> = vec![(0, 0.9), (1, 0.0001), (2, 0.0999)];
        let samples: Vec<i64> = std::iter::repeat_n(0, 90)
            .chain(std::iter::repeat_n(2, 10))
            .collect();
        let out = chi_square_gof(&samples, &probs);
        // 100 samples: cell 1 expects 0.01 and pools with the remainder
        assert_eq!(out.cells, 3);
        assert!(out.pooled_expected > 0.0);
    }
}
