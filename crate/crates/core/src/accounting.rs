//! Closed-form privacy accounting and its inverse.
//!
//! Cluster-DP composes two steps: a Laplace-noised prior estimate costing
//! `min(1/sigma, 2/gamma)`, and a resampling step costing `eps_tilde` with
//! failure probability `delta`. Infinite values are explicit tags.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Epsilon, Extended, MechanismKind, MechanismParams, NoiseScale};

/// (epsilon, delta) guarantee with its decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub epsilon: Epsilon,
    pub delta: f64,
    /// Budget spent on estimating the prior.
    pub prior_budget: Epsilon,
    /// Budget of the resampling step.
    pub eps_tilde: Epsilon,
}

fn add(a: Extended, b: Extended) -> Extended {
    match (a, b) {
        (Extended::Finite(x), Extended::Finite(y)) => Extended::Finite(x + y),
        _ => Extended::Infinite,
    }
}

/// Prior-estimation budget `min(1/sigma, 2/gamma)`; `sigma = inf` contributes 0.
pub fn prior_budget(gamma: f64, sigma: NoiseScale) -> Epsilon {
    let by_sigma = sigma.recip();
    if gamma == 0.0 {
        return by_sigma;
    }
    let by_gamma = 2.0 / gamma;
    match by_sigma {
        Extended::Infinite => Extended::Finite(by_gamma),
        Extended::Finite(s) => Extended::Finite(s.min(by_gamma)),
    }
}

fn warn_unnoised_histogram(gamma: f64, sigma: NoiseScale, k: Option<usize>) {
    if sigma.is_infinite() && gamma > 0.0 {
        let below_uniform = k.is_none_or(|k| gamma * (k as f64) < 1.0 - 1e-12);
        if below_uniform {
            log::warn!(
                "sigma = inf with gamma = {gamma} below 1/K: the clipped histogram is released without Laplace noise"
            );
        }
    }
}

/// `delta = max(0, 1 - lambda + lambda gamma (1 - e^eps_tilde))`.
pub fn cluster_dp_delta(gamma: f64, lambda: f64, eps_tilde: f64) -> f64 {
    (1.0 - lambda - lambda * gamma * eps_tilde.exp_m1()).max(0.0)
}

/// (epsilon, delta) for cluster-DP at a chosen resampling budget `eps_tilde`.
///
/// `gamma = 0` gives an infinite epsilon.
pub fn cluster_dp_eps_delta(gamma: f64, sigma: NoiseScale, lambda: f64, eps_tilde: f64) -> PrivacyReport {
    warn_unnoised_histogram(gamma, sigma, None);
    let prior = prior_budget(gamma, sigma);
    let epsilon = if gamma == 0.0 { Extended::Infinite } else { add(prior, Extended::Finite(eps_tilde)) };
    PrivacyReport {
        epsilon,
        delta: cluster_dp_delta(gamma, lambda, eps_tilde),
        prior_budget: prior,
        eps_tilde: Extended::Finite(eps_tilde),
    }
}

/// Resampling budget that makes delta vanish: `log(1 + (1 - lambda) / (lambda gamma))`.
pub fn pure_eps_tilde(gamma: f64, lambda: f64) -> Epsilon {
    if lambda == 0.0 || (gamma == 0.0 && lambda < 1.0) {
        return Extended::Infinite;
    }
    if lambda == 1.0 {
        return Extended::Finite(0.0);
    }
    Extended::Finite(((1.0 - lambda) / (lambda * gamma)).ln_1p())
}

/// Pure epsilon of cluster-DP.
pub fn cluster_dp_pure_eps(gamma: f64, sigma: NoiseScale, lambda: f64) -> Epsilon {
    warn_unnoised_histogram(gamma, sigma, None);
    if gamma == 0.0 {
        return Extended::Infinite;
    }
    add(prior_budget(gamma, sigma), pure_eps_tilde(gamma, lambda))
}

/// Pure-DP report for cluster-DP (delta = 0).
pub fn cluster_dp_pure_report(gamma: f64, sigma: NoiseScale, lambda: f64) -> PrivacyReport {
    PrivacyReport {
        epsilon: cluster_dp_pure_eps(gamma, sigma, lambda),
        delta: 0.0,
        prior_budget: prior_budget(gamma, sigma),
        eps_tilde: pure_eps_tilde(gamma, lambda),
    }
}

/// Pure epsilon of the uniform-prior mechanism: `log(1 + (1 - lambda) K / lambda)`.
pub fn uniform_prior_eps(k: usize, lambda: f64) -> Epsilon {
    if lambda == 0.0 {
        return Extended::Infinite;
    }
    Extended::Finite(((1.0 - lambda) * k as f64 / lambda).ln_1p())
}

/// (epsilon, delta) of the uniform-prior mechanism at resampling budget `eps_tilde`.
pub fn uniform_prior_eps_delta(k: usize, lambda: f64, eps_tilde: f64) -> PrivacyReport {
    PrivacyReport {
        epsilon: Extended::Finite(eps_tilde),
        delta: (1.0 - lambda - lambda / k as f64 * eps_tilde.exp_m1()).max(0.0),
        prior_budget: Extended::Finite(0.0),
        eps_tilde: Extended::Finite(eps_tilde),
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidParams(format!("target delta {delta} outside [0, 1)")));
    }
    Ok(())
}

/// Cluster-DP calibration result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub lambda: f64,
    pub eps_tilde: f64,
    pub prior_budget: f64,
}

/// Resampling probability that spends exactly `(target_eps, target_delta)`.
pub fn calibrate(target_eps: f64, target_delta: f64, gamma: f64, sigma: NoiseScale) -> Result<Calibration> {
    check_delta(target_delta)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParams(format!("gamma {gamma} outside [0, 1]")));
    }
    warn_unnoised_histogram(gamma, sigma, None);
    let prior = match prior_budget(gamma, sigma) {
        Extended::Finite(p) if gamma > 0.0 => p,
        _ => return Err(Error::BudgetExhausted { target: target_eps, prior: f64::INFINITY }),
    };
    if !(target_eps > prior) {
        return Err(Error::BudgetExhausted { target: target_eps, prior });
    }
    let eps_tilde = target_eps - prior;
    let lambda = (1.0 - target_delta) / (1.0 + gamma * eps_tilde.exp_m1());
    Ok(Calibration { lambda, eps_tilde, prior_budget: prior })
}

/// Shorthand for [`calibrate`] returning only lambda.
pub fn calibrate_lambda(target_eps: f64, target_delta: f64, gamma: f64, sigma: NoiseScale) -> Result<f64> {
    calibrate(target_eps, target_delta, gamma, sigma).map(|c| c.lambda)
}

/// Resampling probability of the uniform-prior mechanism for `(target_eps, target_delta)`.
pub fn calibrate_uniform_lambda(target_eps: f64, target_delta: f64, k: usize) -> Result<f64> {
    check_delta(target_delta)?;
    if !(target_eps >= 0.0) {
        return Err(Error::InvalidParams(format!("target epsilon {target_eps} must be >= 0")));
    }
    Ok((1.0 - target_delta) / (1.0 + target_eps.exp_m1() / k as f64))
}

/// Pure-DP guarantee of a parameter set, whatever the mechanism.
pub fn account(params: &MechanismParams, k: usize) -> PrivacyReport {
    match params.kind {
        MechanismKind::ClusterDp | MechanismKind::ClusterFreeDp => {
            warn_unnoised_histogram(params.gamma, params.sigma, Some(k));
            cluster_dp_pure_report(params.gamma, params.sigma, params.lambda)
        }
        MechanismKind::UniformPriorDp => {
            let eps = uniform_prior_eps(k, params.lambda);
            PrivacyReport { epsilon: eps, delta: 0.0, prior_budget: Extended::Finite(0.0), eps_tilde: eps }
        }
        MechanismKind::NoisyHt | MechanismKind::NoisyHistogram => {
            let eps = params.epsilon.unwrap_or(Extended::Infinite);
            PrivacyReport { epsilon: eps, delta: 0.0, prior_budget: Extended::Finite(0.0), eps_tilde: eps }
        }
    }
}

/// Checks `1 - lambda + lambda q(y) <= e^eps_tilde lambda q(y) + delta` for every entry of `q`.
pub fn resampling_ratio_holds(q: &[f64], lambda: f64, eps_tilde: f64, delta: f64) -> bool {
    let e = eps_tilde.exp();
    q.iter().all(|&p| {
        let lhs = 1.0 - lambda + lambda * p;
        let rhs = e * lambda * p + delta;
        lhs <= rhs + 1e-12 * rhs.abs().max(1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEN: Extended = Extended::Finite(10.0);

    fn eps(r: Extended) -> f64 {
        r.finite().expect("finite epsilon")
    }

    #[test]
    fn eps_delta_example() {
        let eps_tilde = 13.5f64.ln();
        let r = cluster_dp_eps_delta(0.02, TEN, 0.8, eps_tilde);
        assert!((eps(r.prior_budget) - 0.1).abs() < 1e-15);
        assert!((eps_tilde - 2.602_689_685_444_383_7).abs() < 1e-12);
        assert!((eps(r.epsilon) - 2.702_689_685_444_384).abs() < 1e-12);
        assert!(r.delta.abs() < 1e-15);
    }

    #[test]
    fn delta_limits() {
        let r = cluster_dp_eps_delta(0.05, Extended::Finite(1.0), 1.0, 1.0);
        assert_eq!(r.delta, 0.0);
        let r = cluster_dp_eps_delta(0.05, Extended::Finite(1.0), 1e-9, 0.01);
        assert!((r.delta - 1.0).abs() < 1e-8);
        assert!(cluster_dp_eps_delta(0.0, TEN, 0.5, 1.0).epsilon.is_infinite());
    }

    #[test]
    fn pure_eps_examples() {
        assert!((eps(cluster_dp_pure_eps(0.02, TEN, 0.8)) - 2.702_689_685_444_384).abs() < 1e-12);
        assert!((eps(cluster_dp_pure_eps(0.02, TEN, 1.0)) - 0.1).abs() < 1e-15);
        let u = eps(cluster_dp_pure_eps(1.0 / 12.0, Extended::Infinite, 0.8));
        assert!((u - 4f64.ln()).abs() < 1e-12);
        assert!(cluster_dp_pure_eps(0.02, TEN, 0.0).is_infinite());
    }

    #[test]
    fn uniform_examples() {
        assert!((eps(uniform_prior_eps(12, 0.8)) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(eps(uniform_prior_eps(7, 1.0)), 0.0);
        assert!((eps(uniform_prior_eps(2, 0.5)) - 3f64.ln()).abs() < 1e-12);
        assert!(uniform_prior_eps(2, 0.0).is_infinite());
    }

    #[test]
    fn calibration_example() {
        let c = calibrate(0.2, 1e-4, 0.02, TEN).unwrap();
        assert!((c.eps_tilde - 0.1).abs() < 1e-15);
        let expected = 0.9999 / (1.0 + 0.02 * 0.1f64.exp_m1());
        assert!((c.lambda - expected).abs() < 1e-15);
        assert_eq!((c.lambda * 1e4).round(), 9978.0);
        let back = cluster_dp_eps_delta(0.02, TEN, c.lambda, c.eps_tilde);
        assert!((eps(back.epsilon) - 0.2).abs() < 1e-12);
        assert!((back.delta - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn calibration_pure_round_trip() {
        let lambda = calibrate_lambda(3.0, 0.0, 0.05, Extended::Finite(2.0)).unwrap();
        assert!((eps(cluster_dp_pure_eps(0.05, Extended::Finite(2.0), lambda)) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_exhausted() {
        let err = calibrate_lambda(0.5, 0.0, 0.02, Extended::Finite(1.0)).unwrap_err();
        assert!(err.is_infeasible_calibration());
        assert!(err.to_string().contains("budget exhausted by prior estimation"));
        assert!(calibrate_lambda(1.0, 0.0, 0.0, Extended::Infinite).is_err());
        assert!(calibrate_lambda(1.0, 1.0, 0.02, TEN).is_err());
    }

    #[test]
    fn uniform_calibration() {
        let l = calibrate_uniform_lambda(4f64.ln(), 0.0, 12).unwrap();
        assert!((l - 0.8).abs() < 1e-15);
        let l = calibrate_uniform_lambda(1.3, 1e-3, 5).unwrap();
        let r = uniform_prior_eps_delta(5, l, 1.3);
        assert!((r.delta - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn ratio_audit_on_floor() {
        let (gamma, lambda, eps_tilde) = (0.05, 0.7, 1.2);
        let delta = cluster_dp_delta(gamma, lambda, eps_tilde);
        assert!(resampling_ratio_holds(&[0.05, 0.25, 0.7], lambda, eps_tilde, delta));
        // an entry below the floor breaks the inequality
        assert!(!resampling_ratio_holds(&[0.001, 0.999], lambda, eps_tilde, delta));
    }

    #[test]
    fn report_serializes_infinity_as_tag() {
        let r = cluster_dp_pure_report(0.02, TEN, 0.0);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"epsilon\":\"inf\""), "{s}");
    }
}
