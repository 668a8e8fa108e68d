//! Summary statistics for Monte Carlo output.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; NaN for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

fn leave_one_out_variances(xs: &[f64]) -> Vec<f64> {
    let shift = mean(xs);
    let s1: f64 = xs.iter().map(|x| x - shift).sum();
    let s2: f64 = xs.iter().map(|x| (x - shift).powi(2)).sum();
    let rm1 = (xs.len() - 1) as f64;
    xs.iter()
        .map(|x| {
            let d = x - shift;
            ((s2 - d * d) - (s1 - d).powi(2) / rm1) / (rm1 - 1.0)
        })
        .collect()
}

fn jackknife_se(loo: &[f64]) -> f64 {
    let r = loo.len() as f64;
    let m = mean(loo);
    ((r - 1.0) / r * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt()
}

/// Jackknife standard error of the sample variance.
///
/// Leave-one-out variances come from running sums, so this is O(R).
pub fn jackknife_se_variance(xs: &[f64]) -> f64 {
    if xs.len() < 3 {
        return f64::NAN;
    }
    jackknife_se(&leave_one_out_variances(xs))
}

/// Jackknife standard error of `var(a) / var(b)` for paired replications.
pub fn jackknife_se_variance_ratio(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.len() < 3 {
        return f64::NAN;
    }
    let ratios: Vec<f64> =
        leave_one_out_variances(a).iter().zip(leave_one_out_variances(b)).map(|(x, y)| x / y).collect();
    jackknife_se(&ratios)
}

/// Monte Carlo summary of a vector of replicated estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub replications: usize,
    pub mean: f64,
    pub se_mean: f64,
    pub variance: f64,
    pub se_variance: f64,
}

impl McSummary {
    pub fn of(xs: &[f64]) -> Self {
        let v = variance(xs);
        Self {
            replications: xs.len(),
            mean: mean(xs),
            se_mean: (v / xs.len() as f64).sqrt(),
            variance: v,
            se_variance: jackknife_se_variance(xs),
        }
    }
}

/// Average ranks (ties share the mean rank), 1-based.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Anderson-Darling normality test with estimated mean and variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AndersonDarling {
    /// Small-sample adjusted statistic A*^2.
    pub statistic: f64,
    /// Critical value at the 1% level.
    pub critical_1pct: f64,
    pub rejected_at_1pct: bool,
}

pub fn anderson_darling(xs: &[f64]) -> AndersonDarling {
    let n = xs.len() as f64;
    let m = mean(xs);
    let sd = variance(xs).sqrt();
    let mut z: Vec<f64> = xs.iter().map(|x| (x - m) / sd).collect();
    z.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    let len = z.len();
    let mut s = 0.0;
    for i in 0..len {
        let lo = normal.cdf(z[i]).clamp(1e-300, 1.0);
        let hi = normal.sf(z[len - 1 - i]).clamp(1e-300, 1.0);
        s += (2 * i + 1) as f64 * (lo.ln() + hi.ln());
    }
    let a2 = -n - s / n;
    let statistic = a2 * (1.0 + 0.75 / n + 2.25 / (n * n));
    let critical_1pct = 1.035;
    AndersonDarling { statistic, critical_1pct, rejected_at_1pct: statistic > critical_1pct }
}

/// One-sample t-test of `mean == mu0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

pub fn t_test(xs: &[f64], mu0: f64) -> TTest {
    let n = xs.len() as f64;
    let t = (mean(xs) - mu0) / (variance(xs) / n).sqrt();
    let df = n - 1.0;
    let p_value = match StudentsT::new(0.0, 1.0, df) {
        Ok(dist) => 2.0 * dist.sf(t.abs()),
        Err(_) => f64::NAN,
    };
    TTest { t, df, p_value }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, SeedTree, Stream};

    #[test]
    fn jackknife_matches_brute_force() {
        let xs = [1.0, 4.0, 2.5, 7.0, 3.0, 3.5];
        let r = xs.len();
        let loo: Vec<f64> = (0..r)
            .map(|i| {
                let rest: Vec<f64> = xs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| *x).collect();
                variance(&rest)
            })
            .collect();
        let m = mean(&loo);
        let brute = ((r - 1) as f64 / r as f64 * loo.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt();
        assert!((jackknife_se_variance(&xs) - brute).abs() < 1e-12);
        // identical series have a ratio of exactly one in every leave-one-out sample
        assert!(jackknife_se_variance_ratio(&xs, &xs).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_and_order() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn anderson_darling_accepts_normal_rejects_uniform() {
        let mut rng = SeedTree::new(1).stream(Stream::Population, 0);
        let normal: Vec<f64> = (0..2_000).map(|_| standard_normal(&mut rng)).collect();
        assert!(!anderson_darling(&normal).rejected_at_1pct);
        let uniform: Vec<f64> = (0..2_000).map(|i| i as f64).collect();
        assert!(anderson_darling(&uniform).rejected_at_1pct);
    }

    #[test]
    fn t_test_basic() {
        let t = t_test(&[1.0, 2.0, 3.0, 4.0], 2.5);
        assert_eq!(t.t, 0.0);
        assert!((t.p_value - 1.0).abs() < 1e-12);
        let shifted = t_test(&[10.0, 11.0, 10.5, 9.5, 10.2], 0.0);
        assert!(shifted.p_value < 1e-4);
    }
}
