//! Response randomization matrices and treatment-effect estimators.
//!
//! `Q[y', y] = (1 - lambda) 1{y' = y} + lambda q(y')` is the probability of
//! releasing `y'` when the truth is `y`. Its inverse is a rank-one update of
//! the identity, so debiasing a released value costs O(1) once
//! `<y, q>` is known.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Design, OutcomeSpace, PopulationDataset, PrivatizedRelease};

/// Column-stochastic K x K matrix of one (cluster, arm) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomizationMatrix {
    lambda: f64,
    prior: Vec<f64>,
}

/// Builds `Q` from a prior and resampling probability; `lambda = 1` is singular.
pub fn build_q(prior: &[f64], lambda: f64) -> Result<RandomizationMatrix> {
    if lambda >= 1.0 {
        return Err(Error::SingularMatrix);
    }
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::InvalidParams(format!("lambda {lambda} outside [0, 1)")));
    }
    Ok(RandomizationMatrix { lambda, prior: prior.to_vec() })
}

impl RandomizationMatrix {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn dim(&self) -> usize {
        self.prior.len()
    }

    /// Entry `Q[row, col]`.
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        let diag = if row == col { 1.0 - self.lambda } else { 0.0 };
        diag + self.lambda * self.prior[row]
    }

    /// Dense matrix, row-major.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        let k = self.dim();
        (0..k).map(|r| (0..k).map(|c| self.entry(r, c)).collect()).collect()
    }

    /// Entry of the closed-form inverse `(I - lambda q 1^T) / (1 - lambda)`.
    pub fn inverse_entry(&self, row: usize, col: usize) -> f64 {
        let diag = if row == col { 1.0 } else { 0.0 };
        (diag - self.lambda * self.prior[row]) / (1.0 - self.lambda)
    }
}

/// Dense closed-form inverse, row-major.
pub fn invert_q(m: &RandomizationMatrix) -> Vec<Vec<f64>> {
    let k = m.dim();
    (0..k).map(|r| (0..k).map(|c| m.inverse_entry(r, c)).collect()).collect()
}

/// `y^T Q^{-1}` in closed form: entry j is `(y_j - lambda <y, q>) / (1 - lambda)`.
pub fn debias_row(space: &OutcomeSpace, prior: &[f64], lambda: f64) -> Result<Vec<f64>> {
    build_q(prior, lambda)?;
    let shift = lambda * space.dot(prior);
    let scale = 1.0 - lambda;
    Ok(space.values().iter().map(|y| (y - shift) / scale).collect())
}

/// Debiased value of a single released outcome.
pub fn debias_value(space: &OutcomeSpace, prior: &[f64], lambda: f64, y_tilde: usize) -> Result<f64> {
    build_q(prior, lambda)?;
    Ok((space.value(y_tilde) - lambda * space.dot(prior)) / (1.0 - lambda))
}

/// An estimate with its per-cluster contributions (summed in cluster order).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub estimate: f64,
    pub per_cluster: Vec<f64>,
}

/// Weighted stratified difference `sum_c (n_c/n) (mean_treated - mean_control)` of `value(i)`.
fn stratified<F: Fn(usize) -> f64>(
    num_clusters: usize,
    clusters: &[usize],
    treated: &[bool],
    value: F,
) -> Result<Estimate> {
    let mut sums = vec![[0.0f64; 2]; num_clusters];
    let mut counts = vec![[0usize; 2]; num_clusters];
    for (i, (&c, &t)) in clusters.iter().zip(treated).enumerate() {
        sums[c][t as usize] += value(i);
        counts[c][t as usize] += 1;
    }
    let n = clusters.len() as f64;
    let mut per_cluster = Vec::with_capacity(num_clusters);
    for c in 0..num_clusters {
        for arm in 0..2u8 {
            if counts[c][arm as usize] == 0 {
                return Err(Error::EmptyArm { cluster: c, arm });
            }
        }
        let weight = (counts[c][0] + counts[c][1]) as f64 / n;
        let diff = sums[c][1] / counts[c][1] as f64 - sums[c][0] / counts[c][0] as f64;
        per_cluster.push(weight * diff);
    }
    let estimate = per_cluster.iter().sum();
    Ok(Estimate { estimate, per_cluster })
}

/// Debiased estimator from released parts only.
///
/// `debias[c][arm]` must be a row of length K for every cluster and arm.
pub fn tau_q_parts(
    space: &OutcomeSpace,
    clusters: &[usize],
    treated: &[bool],
    y_tilde: &[usize],
    debias: &[[Vec<f64>; 2]],
) -> Result<Estimate> {
    let k = space.len();
    for (c, cell) in debias.iter().enumerate() {
        for arm in 0..2u8 {
            if cell[arm as usize].len() != k {
                return Err(Error::MissingDebiasRow { cluster: c, arm });
            }
        }
    }
    if let Some(&c) = clusters.iter().find(|&&c| c >= debias.len()) {
        return Err(Error::MissingDebiasRow { cluster: c, arm: 0 });
    }
    stratified(debias.len(), clusters, treated, |i| debias[clusters[i]][treated[i] as usize][y_tilde[i]])
}

/// Debiased estimator computed from a release.
pub fn tau_q(release: &PrivatizedRelease) -> Result<Estimate> {
    if release.params.lambda >= 1.0 {
        return Err(Error::SingularMatrix);
    }
    let clusters: Vec<usize> = release.units.iter().map(|u| u.cluster).collect();
    let treated: Vec<bool> = release.units.iter().map(|u| u.treated).collect();
    let y_tilde: Vec<usize> = release.units.iter().map(|u| u.y_tilde).collect();
    let mut debias = release.debias.clone();
    debias.resize(release.cluster_labels.len(), Default::default());
    tau_q_parts(&release.space, &clusters, &treated, &y_tilde, &debias)
}

/// Stratified difference in means on the true observed outcomes.
pub fn tau_no_dp(pop: &PopulationDataset, design: &Design) -> Result<f64> {
    tau_no_dp_detail(pop, design).map(|e| e.estimate)
}

pub fn tau_no_dp_detail(pop: &PopulationDataset, design: &Design) -> Result<Estimate> {
    stratified(pop.num_clusters(), pop.clusters(), design.assignment(), |i| pop.outcome_value(i, design.arm_of(i)))
}

/// Pooled difference in means on the true observed outcomes, ignoring clusters.
pub fn tau_no_dp_unstratified(pop: &PopulationDataset, design: &Design) -> Result<f64> {
    let zeros = vec![0usize; pop.len()];
    stratified(1, &zeros, design.assignment(), |i| pop.outcome_value(i, design.arm_of(i))).map(|e| e.estimate)
}

/// Uniform-prior estimator: the (stratified or pooled) difference of released values over `1 - lambda`.
pub fn tau_uniform(release: &PrivatizedRelease, stratified_by_cluster: bool) -> Result<f64> {
    let lambda = release.params.lambda;
    if lambda >= 1.0 {
        return Err(Error::SingularMatrix);
    }
    let treated: Vec<bool> = release.units.iter().map(|u| u.treated).collect();
    let clusters: Vec<usize> = if stratified_by_cluster {
        release.units.iter().map(|u| u.cluster).collect()
    } else {
        vec![0; release.units.len()]
    };
    let c = if stratified_by_cluster { release.cluster_labels.len() } else { 1 };
    let space = &release.space;
    let diff = stratified(c, &clusters, &treated, |i| space.value(release.units[i].y_tilde))?;
    Ok(diff.estimate / (1.0 - lambda))
}

/// Uniform-prior estimator from parts, for Monte Carlo loops.
pub fn tau_uniform_parts(
    space: &OutcomeSpace,
    num_clusters: usize,
    clusters: &[usize],
    treated: &[bool],
    y_tilde: &[usize],
    lambda: f64,
) -> Result<f64> {
    if lambda >= 1.0 {
        return Err(Error::SingularMatrix);
    }
    let diff = stratified(num_clusters, clusters, treated, |i| space.value(y_tilde[i]))?;
    Ok(diff.estimate / (1.0 - lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Extended, MechanismParams};

    #[test]
    fn q_examples() {
        let id = build_q(&[0.3, 0.7], 0.0).unwrap();
        assert_eq!(id.dense(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(invert_q(&id), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let q = build_q(&[0.5, 0.5], 0.5).unwrap();
        assert_eq!(q.dense(), vec![vec![0.75, 0.25], vec![0.25, 0.75]]);
        assert_eq!(invert_q(&q), vec![vec![1.5, -0.5], vec![-0.5, 1.5]]);
        assert!(matches!(build_q(&[0.5, 0.5], 1.0), Err(Error::SingularMatrix)));
    }

    #[test]
    fn debias_examples() {
        let space = OutcomeSpace::new(vec![0.0, 1.0]).unwrap();
        let row = debias_row(&space, &[0.5, 0.5], 0.5).unwrap();
        assert_eq!(row, vec![-0.5, 1.5]);
        assert_eq!(debias_value(&space, &[0.5, 0.5], 0.5, 1).unwrap(), 1.5);
        assert_eq!(debias_value(&space, &[0.2, 0.8], 0.0, 1).unwrap(), 1.0);
        // expectation over the column of true y = 1
        let q = build_q(&[0.5, 0.5], 0.5).unwrap();
        let mean: f64 = (0..2).map(|r| q.entry(r, 1) * row[r]).sum();
        assert!((mean - 1.0).abs() < 1e-15);
    }

    #[test]
    fn debias_row_matches_explicit_product() {
        let space = OutcomeSpace::new(vec![-2.0, 0.5, 1.0, 4.0]).unwrap();
        let prior = [0.1, 0.2, 0.3, 0.4];
        let lambda = 0.65;
        let m = build_q(&prior, lambda).unwrap();
        let inv = invert_q(&m);
        let row = debias_row(&space, &prior, lambda).unwrap();
        for j in 0..4 {
            let explicit: f64 = (0..4).map(|i| space.value(i) * inv[i][j]).sum();
            assert!((explicit - row[j]).abs() < 1e-12);
            // row . Q column j recovers y_j
            let back: f64 = (0..4).map(|i| row[i] * m.entry(i, j)).sum();
            assert!((back - space.value(j)).abs() < 1e-10);
        }
    }

    fn one_cluster_pair(y0: Vec<usize>, y1: Vec<usize>) -> PopulationDataset {
        let space = OutcomeSpace::new(vec![0.0, 1.0]).unwrap();
        PopulationDataset::from_indices(space, vec![0; y0.len()], y0, y1).unwrap()
    }

    #[test]
    fn no_dp_constant_arms() {
        let pop = one_cluster_pair(vec![0, 0], vec![1, 1]);
        for z in [vec![true, false], vec![false, true]] {
            let d = Design::from_assignment(&pop, z).unwrap();
            assert_eq!(tau_no_dp(&pop, &d).unwrap(), 1.0);
        }
        let flat = one_cluster_pair(vec![1, 0], vec![1, 0]);
        let d = Design::from_assignment(&flat, vec![true, false]).unwrap();
        assert_eq!(tau_no_dp(&flat, &d).unwrap(), 1.0);
        let same = one_cluster_pair(vec![1, 1], vec![1, 1]);
        let d = Design::from_assignment(&same, vec![true, false]).unwrap();
        assert_eq!(tau_no_dp(&same, &d).unwrap(), 0.0);
    }

    #[test]
    fn lambda_zero_release_recovers_both_assignments() {
        // {y(0), y(1)} = {(0,1), (0,1)}: tau_hat is +1 or -1 depending on z
        let pop = one_cluster_pair(vec![0, 1], vec![0, 1]);
        let params = MechanismParams::cluster_dp(0.1, Extended::Finite(1.0), 0.0);
        let mut seen = Vec::new();
        for z in [vec![true, false], vec![false, true]] {
            let d = Design::from_assignment(&pop, z).unwrap();
            let mut r1 = crate::rng::SeedTree::new(1).stream(crate::rng::Stream::Laplace, 0);
            let mut r2 = crate::rng::SeedTree::new(1).stream(crate::rng::Stream::Resampling, 0);
            let (_, rel) = crate::mechanisms::cluster_dp(&pop, &d, &params, &mut r1, &mut r2).unwrap();
            let est = tau_q(&rel).unwrap().estimate;
            assert_eq!(est, tau_no_dp(&pop, &d).unwrap());
            seen.push(est);
        }
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, vec![-1.0, 1.0]);
    }

    #[test]
    fn tau_no_dp_unbiased_over_all_designs() {
        // additive effect 1 on four units in one cluster; average over all C(4,2) designs
        let space = OutcomeSpace::integer_range(0, 4).unwrap();
        let pop = PopulationDataset::from_indices(space, vec![0; 4], vec![0, 1, 3, 2], vec![1, 2, 4, 3]).unwrap();
        let mut total = 0.0;
        let mut designs = 0;
        for mask in 0u32..16 {
            if mask.count_ones() != 2 {
                continue;
            }
            let z = (0..4).map(|i| mask >> i & 1 == 1).collect();
            let d = Design::from_assignment(&pop, z).unwrap();
            total += tau_no_dp(&pop, &d).unwrap();
            designs += 1;
        }
        assert_eq!(designs, 6);
        assert!((total / 6.0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn missing_row_is_reported() {
        let space = OutcomeSpace::new(vec![0.0, 1.0]).unwrap();
        let debias = vec![[vec![0.0, 1.0], vec![]]];
        let err = tau_q_parts(&space, &[0, 0], &[true, false], &[0, 1], &debias).unwrap_err();
        assert!(matches!(err, Error::MissingDebiasRow { cluster: 0, arm: 1 }));
    }
}
