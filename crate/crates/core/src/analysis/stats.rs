//! Seed-level summaries and paired permutation tests.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{keys, stream};

/// Seed counts up to this size use exact sign-flip enumeration.
pub const EXACT_MAX_SEEDS: usize = 20;
pub const RESAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub n: usize,
    pub mean: f64,
    /// Standard error of the mean (sample standard deviation / sqrt(n)).
    pub sem: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Mean and normal-approximation 95% interval `mean ± 1.96 sem`.
pub fn seed_stats(scores: &[f64]) -> Result<SeedStats> {
    let n = scores.len();
    if n < 2 {
        return Err(CoreError::Analysis(format!("seed statistics need at least 2 seeds, got {n}")));
    }
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sem = (var / n as f64).sqrt();
    Ok(SeedStats { n, mean, sem, ci_low: mean - 1.96 * sem, ci_high: mean + 1.96 * sem })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub n: usize,
    pub mean_diff: f64,
    /// One-sided p-value for `mean(a - b) > 0`.
    pub p_value: f64,
    pub exact: bool,
}

/// Paired one-sided sign-flip permutation test of `mean(a - b) > 0`.
///
/// With at most [`EXACT_MAX_SEEDS`] pairs every sign pattern is
/// enumerated and `p = #{flips with sum >= observed} / 2^n`; otherwise
/// [`RESAMPLES`] random patterns drawn from `seed` give
/// `p = (1 + #{>= observed}) / (1 + RESAMPLES)`.
pub fn paired_permutation(a: &[f64], b: &[f64], seed: u64) -> Result<Contrast> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(CoreError::Analysis(format!("paired test needs two equal samples of >= 2, got {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let observed: f64 = d.iter().sum();
    // Flipped sums are rebuilt in the same order as `observed`, so only the
    // rounding of sign changes can separate equal statistics.
    let tol = 1e-12 * d.iter().map(|x| x.abs()).sum::<f64>();
    let at_least = |s: f64| s >= observed - tol;
    let (p_value, exact) = if n <= EXACT_MAX_SEEDS {
        let mut count = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = d.iter().enumerate().map(|(i, x)| if mask >> i & 1 == 1 { -x } else { *x }).sum();
            count += at_least(s) as u64;
        }
        (count as f64 / (1u64 << n) as f64, true)
    } else {
        let mut rng = stream(seed, keys::PERMUTATION);
        let mut count = 0usize;
        for _ in 0..RESAMPLES {
            let s: f64 = d.iter().map(|x| if rng.random::<bool>() { -x } else { *x }).sum();
            count += at_least(s) as usize;
        }
        ((1 + count) as f64 / (1 + RESAMPLES) as f64, false)
    };
    Ok(Contrast { n, mean_diff: observed / n as f64, p_value, exact })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_examples() {
        let s = seed_stats(&[0.4, 0.6]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-15);
        let c = seed_stats(&[0.3; 5]).unwrap();
        assert_eq!(c.ci_high - c.ci_low, 0.0);
        assert!(seed_stats(&[1.0]).is_err());
    }

    #[test]
    fn all_positive_differences_give_minimum_p() {
        let a: Vec<f64> = (0..10).map(|i| 0.5 + 0.01 * i as f64).collect();
        let b = vec![0.4; 10];
        let c = paired_permutation(&a, &b, 0).unwrap();
        assert!(c.exact);
        assert_eq!(c.p_value, 2f64.powi(-10));
    }

    #[test]
    fn zero_differences_give_p_one() {
        let c = paired_permutation(&[0.2, 0.3, 0.4], &[0.2, 0.3, 0.4], 0).unwrap();
        assert_eq!(c.p_value, 1.0);
    }

    #[test]
    fn resampled_path_is_deterministic() {
        let a: Vec<f64> = (0..30).map(|i| (i % 7) as f64 * 0.1).collect();
        let b: Vec<f64> = (0..30).map(|i| (i % 5) as f64 * 0.1).collect();
        let x = paired_permutation(&a, &b, 3).unwrap();
        assert!(!x.exact);
        assert_eq!(x, paired_permutation(&a, &b, 3).unwrap());
        assert!(x.p_value > 0.0 && x.p_value <= 1.0);
    }
}
