//! Exact and bounded variances of the treatment-effect estimators.
//!
//! All formulas are design-based: the population is fixed and the
//! randomness comes from the assignment and the mechanism.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::ht_sensitivity;
use crate::model::{DesignCounts, Epsilon, Extended, MechanismParams, OutcomeSpace, PopulationDataset};

/// Unbiased sample variance `S^2(u) = sum (u - mean)^2 / (d - 1)`.
pub fn sample_variance(u: &[f64]) -> Result<f64> {
    if u.len() < 2 {
        return Err(Error::InvalidParams(format!("sample variance needs at least 2 values, got {}", u.len())));
    }
    let d = u.len() as f64;
    let mean = u.iter().sum::<f64>() / d;
    Ok(u.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d - 1.0))
}

fn check_counts(pop: &PopulationDataset, counts: &DesignCounts) -> Result<()> {
    let sizes = pop.cluster_sizes();
    if counts.num_clusters() != sizes.len() {
        return Err(Error::InvalidDesign(format!(
            "{} cluster counts for {} clusters",
            counts.num_clusters(),
            sizes.len()
        )));
    }
    for (c, &nc) in sizes.iter().enumerate() {
        if counts.treated[c] == 0 || counts.control[c] == 0 || counts.size(c) != nc {
            return Err(Error::InvalidDesign(format!(
                "cluster {c}: counts ({}, {}) invalid for size {nc}",
                counts.control[c], counts.treated[c]
            )));
        }
    }
    Ok(())
}

fn cluster_values(pop: &PopulationDataset, c: usize, arm: u8) -> Vec<f64> {
    pop.members(c).iter().map(|&i| pop.outcome_value(i, arm)).collect()
}

fn weight_sq(pop: &PopulationDataset, c: usize) -> f64 {
    let w = pop.members(c).len() as f64 / pop.len() as f64;
    w * w
}

/// Exact randomization variance of the stratified difference in means.
pub fn ht_variance(pop: &PopulationDataset, counts: &DesignCounts) -> Result<f64> {
    check_counts(pop, counts)?;
    let mut total = 0.0;
    for c in 0..pop.num_clusters() {
        let y1 = cluster_values(pop, c, 1);
        let y0 = cluster_values(pop, c, 0);
        let effect: Vec<f64> = y1.iter().zip(&y0).map(|(a, b)| a - b).collect();
        let nc = y1.len() as f64;
        total += weight_sq(pop, c)
            * (sample_variance(&y1)? / counts.treated[c] as f64 + sample_variance(&y0)? / counts.control[c] as f64
                - sample_variance(&effect)? / nc);
    }
    Ok(total)
}

/// Cluster homogeneity `phi_a = sum_c (n_c/n)^2 S^2(y_c(a)) / n_{a,c}`.
pub fn homogeneity(pop: &PopulationDataset, counts: &DesignCounts, arm: u8) -> Result<f64> {
    check_counts(pop, counts)?;
    let mut total = 0.0;
    for c in 0..pop.num_clusters() {
        total += weight_sq(pop, c) * sample_variance(&cluster_values(pop, c, arm))? / counts.arm(c, arm) as f64;
    }
    Ok(total)
}

/// Which grouping of the A(x) multiplier to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AVariant {
    /// `B^2 (3/(1-l)^2 + 2) + (l sqrt(K) + 1)^2 / (1-l)^2 |y|^2 (1 - l (K-1) gamma)`.
    #[default]
    Grouped,
    /// `2 B^2 + (3 B^2 + (l sqrt(K) + 1)^2 + |y|^2 (1 - l (K-1) gamma)) / (1-l)^2`.
    Expanded,
}

/// `gamma + (sigma/x)(e^{-gamma x/sigma} - e^{-x/sigma})`, with the sigma = 0 and sigma = inf limits.
pub fn noise_bracket(x: f64, gamma: f64, sigma: Extended) -> f64 {
    match sigma {
        Extended::Infinite => 1.0,
        Extended::Finite(s) if s == 0.0 => gamma,
        Extended::Finite(s) => {
            let r = s / x;
            // factored so large x / sigma cannot produce inf * 0
            gamma - r * (-gamma * x / s).exp() * (-(1.0 - gamma) * x / s).exp_m1()
        }
    }
}

/// Cluster-agnostic term A(x) of the variance-gap bound.
pub fn a_of_x(x: f64, space: &OutcomeSpace, params: &MechanismParams, variant: AVariant) -> Result<f64> {
    let lambda = params.lambda;
    if lambda >= 1.0 {
        return Err(Error::SingularMatrix);
    }
    if x < 1.0 {
        return Err(Error::InvalidParams(format!("A(x) needs x >= 1, got {x}")));
    }
    let k = space.len() as f64;
    let b2 = space.max_abs().powi(2);
    let y2 = space.l2_norm_sq();
    let inv = 1.0 / (1.0 - lambda).powi(2);
    let spread = (lambda * k.sqrt() + 1.0).powi(2);
    let clip = 1.0 - lambda * (k - 1.0) * params.gamma;
    let multiplier = match variant {
        AVariant::Grouped => b2 * (3.0 * inv + 2.0) + spread * inv * y2 * clip,
        AVariant::Expanded => 2.0 * b2 + (3.0 * b2 + spread + y2 * clip) * inv,
    };
    Ok(2.0 * k * noise_bracket(x, params.gamma, params.sigma) * multiplier)
}

/// Kind of variance figure held by a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VarianceValue {
    Exact { value: f64 },
    UpperBound { value: f64 },
    MonteCarlo { value: f64, std_error: f64 },
}

impl VarianceValue {
    pub fn value(&self) -> f64 {
        match *self {
            VarianceValue::Exact { value }
            | VarianceValue::UpperBound { value }
            | VarianceValue::MonteCarlo { value, .. } => value,
        }
    }
}

/// Variance figure with named components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub no_dp_variance: f64,
    pub total: VarianceValue,
    pub components: BTreeMap<String, f64>,
}

impl VarianceReport {
    pub fn component(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(f64::NAN)
    }
}

/// Upper bound on the variance of the debiased cluster-DP estimator.
///
/// Components: `phi0`, `phi1`, `homogeneity_term` (the lower reference
/// curve), `a_term`, and `gap_bound = homogeneity_term + a_term`.
pub fn cluster_dp_variance_bound(
    pop: &PopulationDataset,
    counts: &DesignCounts,
    params: &MechanismParams,
    variant: AVariant,
) -> Result<VarianceReport> {
    let no_dp = ht_variance(pop, counts)?;
    let phi0 = homogeneity(pop, counts, 0)?;
    let phi1 = homogeneity(pop, counts, 1)?;
    let lambda = params.lambda;
    if lambda >= 1.0 {
        return Err(Error::SingularMatrix);
    }
    let homogeneity_term = (1.0 / (1.0 - lambda).powi(2) - 1.0) * (phi0 + phi1);
    let mut a_term = 0.0;
    for c in 0..pop.num_clusters() {
        for arm in 0..2u8 {
            let x = counts.arm(c, arm) as f64;
            a_term += weight_sq(pop, c) * a_of_x(x, pop.space(), params, variant)? / x;
        }
    }
    let gap = homogeneity_term + a_term;
    let components = BTreeMap::from([
        ("phi0".to_string(), phi0),
        ("phi1".to_string(), phi1),
        ("homogeneity_term".to_string(), homogeneity_term),
        ("a_term".to_string(), a_term),
        ("gap_bound".to_string(), gap),
    ]);
    Ok(VarianceReport { no_dp_variance: no_dp, total: VarianceValue::UpperBound { value: no_dp + gap }, components })
}

/// Exact variance of the uniform-prior estimator, stratified or pooled.
///
/// The pooled form treats the whole population as one stratum, i.e. it
/// assumes complete randomization with `n1 = sum_c n1c` over all units.
pub fn uniform_prior_variance(
    pop: &PopulationDataset,
    counts: &DesignCounts,
    lambda: f64,
    stratified: bool,
) -> Result<VarianceReport> {
    if lambda >= 1.0 {
        return Err(Error::SingularMatrix);
    }
    if !stratified {
        check_counts(pop, counts)?;
        return uniform_prior_variance(&pop.pooled(), &counts.pooled(), lambda, true);
    }
    let no_dp = ht_variance(pop, counts)?;
    let space = pop.space();
    let ybar = space.mean();
    let y2bar = space.mean_sq();
    let scale = 1.0 - lambda;
    let mut resample_term = 0.0;
    let mut outcome_term = 0.0;
    for c in 0..pop.num_clusters() {
        let w2 = weight_sq(pop, c);
        let (n0, n1) = (counts.control[c] as f64, counts.treated[c] as f64);
        resample_term +=
            w2 * (1.0 / n0 + 1.0 / n1) * (lambda * y2bar - lambda * lambda * ybar * ybar) / (scale * scale);
        let nc = pop.members(c).len() as f64;
        let moment = |arm: u8, power: i32| cluster_values(pop, c, arm).iter().map(|y| y.powi(power)).sum::<f64>() / nc;
        outcome_term += w2
            * (lambda / scale * (moment(0, 2) / n0 + moment(1, 2) / n1)
                - 2.0 * lambda * ybar / scale * (moment(0, 1) / n0 + moment(1, 1) / n1));
    }
    let components = BTreeMap::from([
        ("resample_term".to_string(), resample_term),
        ("outcome_term".to_string(), outcome_term),
        ("gap".to_string(), resample_term + outcome_term),
    ]);
    Ok(VarianceReport {
        no_dp_variance: no_dp,
        total: VarianceValue::Exact { value: no_dp + resample_term + outcome_term },
        components,
    })
}

/// Closed-form binary-outcome pooled variance: `Var_NoDP + n/(n0 n1) (l/2)(1 - l/2)/(1-l)^2`.
pub fn uniform_prior_variance_binary(pop: &PopulationDataset, counts: &DesignCounts, lambda: f64) -> Result<f64> {
    if pop.space().values() != [0.0, 1.0] {
        return Err(Error::InvalidSpace("binary formula needs the space {0, 1}".into()));
    }
    if lambda >= 1.0 {
        return Err(Error::SingularMatrix);
    }
    check_counts(pop, counts)?;
    let pooled = counts.pooled();
    let no_dp = ht_variance(&pop.pooled(), &pooled)?;
    let (n0, n1) = (pooled.control[0] as f64, pooled.treated[0] as f64);
    let n = n0 + n1;
    Ok(no_dp + n / (n0 * n1) * (lambda / 2.0) * (1.0 - lambda / 2.0) / (1.0 - lambda).powi(2))
}

/// Added variance of the two aggregate baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineGaps {
    pub noisy_ht: f64,
    pub noisy_histogram: f64,
}

/// Exact variance gaps of noisy HT and noisy histogram at budget `epsilon`.
pub fn baseline_gaps(pop: &PopulationDataset, counts: &DesignCounts, epsilon: Epsilon) -> Result<BaselineGaps> {
    check_counts(pop, counts)?;
    let eps = match epsilon {
        Extended::Infinite => return Ok(BaselineGaps { noisy_ht: 0.0, noisy_histogram: 0.0 }),
        Extended::Finite(e) if e > 0.0 => e,
        Extended::Finite(e) => return Err(Error::InvalidParams(format!("epsilon must be > 0, got {e}"))),
    };
    let space = pop.space();
    let mut nht = 0.0;
    let mut nh = 0.0;
    for c in 0..pop.num_clusters() {
        let (n0, n1) = (counts.control[c], counts.treated[c]);
        let w = pop.members(c).len() as f64 / pop.len() as f64;
        nht += (w * ht_sensitivity(space, n0, n1) / eps).powi(2);
        nh += w * w * (1.0 / (n0 * n0) as f64 + 1.0 / (n1 * n1) as f64);
    }
    Ok(BaselineGaps { noisy_ht: 2.0 * nht, noisy_histogram: 2.0 / (eps * eps) * space.l2_norm_sq() * nh })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pop(space: OutcomeSpace, clusters: Vec<usize>, y0: Vec<usize>, y1: Vec<usize>) -> PopulationDataset {
        PopulationDataset::from_indices(space, clusters, y0, y1).unwrap()
    }

    fn binary() -> OutcomeSpace {
        OutcomeSpace::new(vec![0.0, 1.0]).unwrap()
    }

    #[test]
    fn sample_variance_examples() {
        assert_eq!(sample_variance(&[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(sample_variance(&[4.0; 5]).unwrap(), 0.0);
        assert!((sample_variance(&[0.0, 1.0, 2.0, 3.0]).unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert!(sample_variance(&[1.0]).is_err());
    }

    #[test]
    fn ht_variance_examples() {
        let p = pop(binary(), vec![0, 0], vec![0, 1], vec![0, 1]);
        let counts = DesignCounts::new(&[2], vec![1]).unwrap();
        assert!((ht_variance(&p, &counts).unwrap() - 1.0).abs() < 1e-15);

        let space = OutcomeSpace::integer_range(0, 3).unwrap();
        let p = pop(space, vec![0, 0, 1, 1], vec![0, 0, 2, 2], vec![1, 1, 3, 3]);
        let counts = DesignCounts::balanced(&p.cluster_sizes()).unwrap();
        assert_eq!(ht_variance(&p, &counts).unwrap(), 0.0);
    }

    #[test]
    fn homogeneity_examples() {
        let p = pop(binary(), vec![0; 4], vec![0, 0, 1, 1], vec![0; 4]);
        let counts = DesignCounts::new(&[4], vec![2]).unwrap();
        assert!((homogeneity(&p, &counts, 0).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        let flat = pop(binary(), vec![0, 0, 1, 1], vec![0, 0, 1, 1], vec![1, 1, 0, 0]);
        let counts = DesignCounts::balanced(&flat.cluster_sizes()).unwrap();
        assert_eq!(homogeneity(&flat, &counts, 0).unwrap(), 0.0);
        assert_eq!(homogeneity(&flat, &counts, 1).unwrap(), 0.0);
    }

    #[test]
    fn bracket_limits() {
        assert_eq!(noise_bracket(10.0, 0.0, Extended::Finite(0.0)), 0.0);
        assert_eq!(noise_bracket(10.0, 0.1, Extended::Finite(0.0)), 0.1);
        assert_eq!(noise_bracket(10.0, 0.1, Extended::Infinite), 1.0);
        // sigma large approaches the infinite limit
        assert!((noise_bracket(10.0, 0.1, Extended::Finite(1e9)) - 1.0).abs() < 1e-6);
        // tiny sigma approaches gamma without overflow
        assert!((noise_bracket(10.0, 0.1, Extended::Finite(1e-6)) - 0.1).abs() < 1e-9);
        let direct = 0.1 + 0.1 * ((-1.0f64).exp() - (-10.0f64).exp());
        assert!((noise_bracket(10.0, 0.1, Extended::Finite(1.0)) - direct).abs() < 1e-15);
    }

    #[test]
    fn a_of_x_golden() {
        let params = MechanismParams::cluster_dp(0.1, Extended::Finite(1.0), 0.0);
        let a = a_of_x(10.0, &binary(), &params, AVariant::Grouped).unwrap();
        assert!((a - 3.282_801_698_980_032).abs() < 1e-12, "{a}");
        let b = a_of_x(10.0, &binary(), &params, AVariant::Expanded).unwrap();
        assert!((b - 3.829_935_315_476_704).abs() < 1e-12, "{b}");
        let zero = MechanismParams::cluster_dp(0.0, Extended::Finite(0.0), 0.3);
        assert_eq!(a_of_x(5.0, &binary(), &zero, AVariant::Grouped).unwrap(), 0.0);
        let singular = MechanismParams::cluster_dp(0.1, Extended::Finite(1.0), 1.0);
        assert!(a_of_x(5.0, &binary(), &singular, AVariant::Grouped).is_err());
    }

    #[test]
    fn a_of_x_monotone_in_gamma() {
        let space = OutcomeSpace::integer_range(-5, 6).unwrap();
        let k = space.len() as f64;
        for &sigma in &[0.5, 10.0] {
            let mut last_a = f64::NEG_INFINITY;
            let mut last_bracket = f64::NEG_INFINITY;
            for step in 0..=200 {
                let gamma = step as f64 / 200.0 / k;
                let bracket = noise_bracket(50.0, gamma, Extended::Finite(sigma));
                assert!(bracket >= last_bracket - 1e-15);
                last_bracket = bracket;
                // with lambda > 0 the (1 - lambda (K-1) gamma) factor pulls the other way
                let p = MechanismParams::cluster_dp(gamma, Extended::Finite(sigma), 0.0);
                let a = a_of_x(50.0, &space, &p, AVariant::Grouped).unwrap();
                assert!(a >= last_a - 1e-12, "gamma {gamma}: {a} < {last_a}");
                last_a = a;
            }
        }
    }

    #[test]
    fn bound_vanishes_without_privacy() {
        let space = OutcomeSpace::integer_range(0, 3).unwrap();
        let p = pop(space, vec![0, 0, 0, 1, 1, 1], vec![0, 1, 2, 3, 2, 1], vec![1, 2, 3, 3, 3, 2]);
        let counts = DesignCounts::new(&p.cluster_sizes(), vec![1, 2]).unwrap();
        let params = MechanismParams::cluster_dp(0.0, Extended::Finite(0.0), 0.0);
        let r = cluster_dp_variance_bound(&p, &counts, &params, AVariant::Grouped).unwrap();
        assert_eq!(r.component("gap_bound"), 0.0);
        assert_eq!(r.total.value(), r.no_dp_variance);
    }

    #[test]
    fn uniform_lambda_zero_is_ht() {
        let space = OutcomeSpace::integer_range(0, 3).unwrap();
        let p = pop(space, vec![0, 0, 0, 1, 1, 1], vec![0, 1, 2, 3, 2, 1], vec![1, 2, 3, 3, 3, 2]);
        let counts = DesignCounts::new(&p.cluster_sizes(), vec![1, 2]).unwrap();
        let r = uniform_prior_variance(&p, &counts, 0.0, true).unwrap();
        assert_eq!(r.total.value(), ht_variance(&p, &counts).unwrap());
    }

    #[test]
    fn uniform_binary_reduction() {
        let p = pop(binary(), vec![0, 0, 0, 1, 1, 1, 1], vec![0, 1, 1, 0, 0, 1, 0], vec![1, 1, 0, 1, 0, 1, 1]);
        let counts = DesignCounts::new(&p.cluster_sizes(), vec![1, 2]).unwrap();
        for lambda in [0.1, 0.5, 0.9] {
            let general = uniform_prior_variance(&p, &counts, lambda, false).unwrap().total.value();
            let binary = uniform_prior_variance_binary(&p, &counts, lambda).unwrap();
            assert!((general - binary).abs() < 1e-12 * binary.abs().max(1.0));
        }
    }

    #[test]
    fn baseline_gap_examples() {
        let p = pop(binary(), vec![0; 4], vec![0, 1, 0, 1], vec![1, 1, 0, 0]);
        let counts = DesignCounts::new(&[4], vec![2]).unwrap();
        let g = baseline_gaps(&p, &counts, Extended::Finite(1.0)).unwrap();
        assert!((g.noisy_ht - 0.5).abs() < 1e-15);
        assert!((g.noisy_histogram - 1.0).abs() < 1e-15);
        let none = baseline_gaps(&p, &counts, Extended::Infinite).unwrap();
        assert_eq!(none.noisy_ht, 0.0);
        assert!(baseline_gaps(&p, &counts, Extended::Finite(0.0)).is_err());
    }
}
