//! Privatization mechanisms.
//!
//! The user-level mechanisms (cluster-DP, its pooled variant and the
//! uniform-prior special case) release one privatized outcome per unit. The
//! two aggregate baselines (noisy Horvitz-Thompson and noisy histogram)
//! release a single noisy estimate.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::estimation::{debias_row, tau_no_dp};
use crate::model::{
    Design, Epsilon, Extended, MechanismKind, MechanismParams, NoiseScale, OutcomeSpace, PopulationDataset,
    PrivatizedRelease, ProjectedPrior, ReleasedUnit,
};
use crate::rng::{categorical, laplace, unit};

/// Outcome counts and empirical distribution of one (cluster, arm) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmHistogram {
    pub counts: Vec<usize>,
    pub probs: Vec<f64>,
}

impl ArmHistogram {
    /// Histogram of a list of outcome indices over a space of size `k`.
    pub fn from_outcomes(outcomes: impl IntoIterator<Item = usize>, k: usize) -> Self {
        let mut counts = vec![0usize; k];
        for y in outcomes {
            counts[y] += 1;
        }
        let n: usize = counts.iter().sum();
        let probs = if n == 0 { vec![0.0; k] } else { counts.iter().map(|&m| m as f64 / n as f64).collect() };
        Self { counts, probs }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Empirical distribution of observed outcomes `y_i(arm)` among units of `cluster` assigned to `arm`.
pub fn empirical_histogram(pop: &PopulationDataset, design: &Design, cluster: usize, arm: u8) -> Result<ArmHistogram> {
    let hist = ArmHistogram::from_outcomes(
        pop.members(cluster).iter().filter(|&&i| design.arm_of(i) == arm).map(|&i| pop.outcome(i, arm)),
        pop.space().len(),
    );
    if hist.total() == 0 {
        return Err(Error::EmptyArm { cluster, arm });
    }
    Ok(hist)
}

/// Independent Laplace(sigma / n) draws, one per outcome. `sigma = inf` skips the step (all zeros).
pub fn laplace_noise<R: RngCore + ?Sized>(k: usize, sigma: NoiseScale, n_ac: usize, rng: &mut R) -> Vec<f64> {
    match sigma {
        Extended::Infinite => vec![0.0; k],
        Extended::Finite(s) => {
            let scale = s / n_ac as f64;
            (0..k).map(|_| laplace(rng, scale)).collect()
        }
    }
}

/// Adds an already drawn noise vector and clips every entry to `[gamma, 1]`.
pub fn clip_with_noise(probs: &[f64], gamma: f64, noise: &[f64]) -> Vec<f64> {
    probs.iter().zip(noise).map(|(p, w)| (p + w).clamp(gamma, 1.0)).collect()
}

/// Laplace perturbation of scale `sigma / n_ac` followed by clipping to `[gamma, 1]`.
pub fn perturb_clip<R: RngCore + ?Sized>(
    probs: &[f64],
    gamma: f64,
    sigma: NoiseScale,
    n_ac: usize,
    rng: &mut R,
) -> Vec<f64> {
    let noise = laplace_noise(probs.len(), sigma, n_ac, rng);
    clip_with_noise(probs, gamma, &noise)
}

/// Projects a clipped vector back onto the simplex while keeping every entry `>= gamma`.
///
/// Mass is removed in proportion to the headroom above `gamma` when the vector
/// sums above one, and added in proportion to the room below one otherwise.
/// The divisor cannot vanish: with every `q = gamma` the sum is `K gamma <= 1`,
/// and with every `q = 1` the sum is `K >= 2`, neither of which takes the
/// branch that would use it.
pub fn renormalize(q: &[f64], gamma: f64) -> Vec<f64> {
    let total: f64 = q.iter().sum();
    if total == 1.0 {
        return q.to_vec();
    }
    if total > 1.0 {
        let room: f64 = q.iter().map(|v| v - gamma).sum();
        let keep = ((room - (total - 1.0)) / room).max(0.0);
        q.iter().map(|v| gamma + (v - gamma) * keep).collect()
    } else {
        let room: f64 = q.iter().map(|v| 1.0 - v).sum();
        let deficit = 1.0 - total;
        q.iter().map(|v| v + (1.0 - v) / room * deficit).collect()
    }
}

/// Prior for one cell from its histogram and a noise vector.
pub fn projected_prior(hist: &ArmHistogram, gamma: f64, noise: &[f64]) -> Vec<f64> {
    renormalize(&clip_with_noise(&hist.probs, gamma, noise), gamma)
}

/// Builds all (cluster, arm) priors for cluster-DP or its pooled variant.
pub fn estimate_priors<R: RngCore + ?Sized>(
    pop: &PopulationDataset,
    design: &Design,
    params: &MechanismParams,
    laplace_rng: &mut R,
) -> Result<ProjectedPrior> {
    let k = pop.space().len();
    let c_count = pop.num_clusters();
    let priors = match params.kind {
        MechanismKind::ClusterDp => {
            let mut priors = Vec::with_capacity(c_count);
            for c in 0..c_count {
                let mut cell: [Vec<f64>; 2] = Default::default();
                for arm in 0..2u8 {
                    let hist = empirical_histogram(pop, design, c, arm)?;
                    let noise = laplace_noise(k, params.sigma, hist.total(), laplace_rng);
                    cell[arm as usize] = projected_prior(&hist, params.gamma, &noise);
                }
                priors.push(cell);
            }
            priors
        }
        MechanismKind::ClusterFreeDp => {
            let mut pooled: [Vec<f64>; 2] = Default::default();
            for arm in 0..2u8 {
                let hist = ArmHistogram::from_outcomes(
                    (0..pop.len()).filter(|&i| design.arm_of(i) == arm).map(|i| pop.outcome(i, arm)),
                    k,
                );
                if hist.total() == 0 {
                    return Err(Error::EmptyArm { cluster: 0, arm });
                }
                let noise = laplace_noise(k, params.sigma, hist.total(), laplace_rng);
                pooled[arm as usize] = projected_prior(&hist, params.gamma, &noise);
            }
            vec![pooled; c_count]
        }
        MechanismKind::UniformPriorDp => {
            let uniform = vec![1.0 / k as f64; k];
            vec![[uniform.clone(), uniform]; c_count]
        }
        other => return Err(Error::InvalidParams(format!("{other} does not release unit-level outcomes"))),
    };
    Ok(ProjectedPrior { gamma: params.gamma, priors })
}

/// Resampling step: keeps each observed outcome with probability `1 - lambda`,
/// otherwise draws from the unit's (cluster, arm) prior. Returns outcome indices.
pub fn resample<R: RngCore + ?Sized>(
    pop: &PopulationDataset,
    design: &Design,
    prior: &ProjectedPrior,
    lambda: f64,
    rng: &mut R,
) -> Vec<usize> {
    (0..pop.len())
        .map(|i| {
            let arm = design.arm_of(i);
            let y = pop.outcome(i, arm);
            if unit(rng) < lambda {
                categorical(prior.get(pop.clusters()[i], arm), unit(rng))
            } else {
                y
            }
        })
        .collect()
}

/// Debias rows for every (cluster, arm); empty rows when `lambda = 1`.
pub fn debias_rows(space: &OutcomeSpace, prior: &ProjectedPrior, lambda: f64) -> Vec<[Vec<f64>; 2]> {
    prior
        .priors
        .iter()
        .map(|cell| {
            let row = |q: &[f64]| debias_row(space, q, lambda).unwrap_or_default();
            [row(&cell[0]), row(&cell[1])]
        })
        .collect()
}

/// Packages privatized outcome indices as a release.
pub fn assemble_release(
    pop: &PopulationDataset,
    design: &Design,
    prior: ProjectedPrior,
    params: MechanismParams,
    y_tilde: Vec<usize>,
) -> PrivatizedRelease {
    let units = y_tilde
        .into_iter()
        .enumerate()
        .map(|(i, y)| ReleasedUnit {
            unit_id: pop.unit_ids()[i].clone(),
            cluster: pop.clusters()[i],
            treated: design.assignment()[i],
            y_tilde: y,
        })
        .collect();
    PrivatizedRelease {
        space: pop.space().clone(),
        cluster_labels: pop.cluster_labels().to_vec(),
        units,
        debias: debias_rows(pop.space(), &prior, params.lambda),
        prior,
        params,
    }
}

/// Cluster-DP (or its pooled variant, by `params.kind`).
///
/// Laplace noise is drawn from `laplace_rng` one cell at a time in cluster,
/// arm, outcome order; resampling uses `resample_rng` in unit order.
pub fn cluster_dp<R: RngCore + ?Sized, S: RngCore + ?Sized>(
    pop: &PopulationDataset,
    design: &Design,
    params: &MechanismParams,
    laplace_rng: &mut R,
    resample_rng: &mut S,
) -> Result<(ProjectedPrior, PrivatizedRelease)> {
    if !matches!(params.kind, MechanismKind::ClusterDp | MechanismKind::ClusterFreeDp) {
        return Err(Error::InvalidParams(format!("cluster_dp called with {}", params.kind)));
    }
    params.validate(pop.space().len())?;
    let prior = estimate_priors(pop, design, params, laplace_rng)?;
    let y_tilde = resample(pop, design, &prior, params.lambda, resample_rng);
    let release = assemble_release(pop, design, prior.clone(), *params, y_tilde);
    Ok((prior, release))
}

/// Uniform-prior mechanism: resample from the uniform distribution over the space.
pub fn uniform_prior_dp<R: RngCore + ?Sized>(
    pop: &PopulationDataset,
    design: &Design,
    lambda: f64,
    rng: &mut R,
) -> Result<PrivatizedRelease> {
    let params = MechanismParams::uniform_prior(pop.space().len(), lambda);
    params.validate(pop.space().len())?;
    // the uniform prior consumes no randomness
    let prior = estimate_priors(pop, design, &params, rng)?;
    let y_tilde = resample(pop, design, &prior, lambda, rng);
    Ok(assemble_release(pop, design, prior, params, y_tilde))
}

/// Output of an aggregate baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyEstimate {
    pub estimate: f64,
    /// The non-private estimate the noise was added to.
    pub exact: f64,
    /// Laplace scale used per cluster (noisy HT) or per (cluster, arm) (noisy histogram).
    pub noise_scales: Vec<f64>,
}

fn check_epsilon(epsilon: Epsilon) -> Result<()> {
    match epsilon {
        Extended::Finite(e) if e <= 0.0 || e.is_nan() => {
            Err(Error::InvalidParams(format!("epsilon must be > 0, got {e}")))
        }
        _ => Ok(()),
    }
}

fn scale_over_eps(numerator: f64, epsilon: Epsilon) -> f64 {
    match epsilon {
        Extended::Infinite => 0.0,
        Extended::Finite(e) => numerator / e,
    }
}

/// Per-cluster sensitivity `max|y| / min(n0c, n1c)` of the noisy HT baseline.
pub fn ht_sensitivity(space: &OutcomeSpace, n0: usize, n1: usize) -> f64 {
    space.max_abs() / n0.min(n1) as f64
}

/// Stratified HT estimate plus one Laplace(Delta_c / eps) draw per cluster, weighted by n_c/n.
pub fn noisy_ht<R: RngCore + ?Sized>(
    pop: &PopulationDataset,
    design: &Design,
    epsilon: Epsilon,
    rng: &mut R,
) -> Result<NoisyEstimate> {
    check_epsilon(epsilon)?;
    let exact = tau_no_dp(pop, design)?;
    let counts = design.counts();
    let n = pop.len() as f64;
    let mut estimate = exact;
    let mut scales = Vec::with_capacity(counts.num_clusters());
    for c in 0..counts.num_clusters() {
        let eta = scale_over_eps(ht_sensitivity(pop.space(), counts.control[c], counts.treated[c]), epsilon);
        estimate += counts.size(c) as f64 / n * laplace(rng, eta);
        scales.push(eta);
    }
    Ok(NoisyEstimate { estimate, exact, noise_scales: scales })
}

/// Stratified estimate from histograms perturbed with Laplace(1 / (n_ac eps)) per (cluster, arm, outcome).
pub fn noisy_histogram<R: RngCore + ?Sized>(
    pop: &PopulationDataset,
    design: &Design,
    epsilon: Epsilon,
    rng: &mut R,
) -> Result<NoisyEstimate> {
    check_epsilon(epsilon)?;
    let space = pop.space();
    let n = pop.len() as f64;
    let mut exact = 0.0;
    let mut estimate = 0.0;
    let mut scales = Vec::new();
    for c in 0..pop.num_clusters() {
        let weight = pop.members(c).len() as f64 / n;
        for arm in [1u8, 0] {
            let sign = if arm == 1 { 1.0 } else { -1.0 };
            let hist = empirical_histogram(pop, design, c, arm)?;
            let eta = scale_over_eps(1.0 / hist.total() as f64, epsilon);
            scales.push(eta);
            let clean = space.dot(&hist.probs);
            let noisy: f64 = space.values().iter().zip(&hist.probs).map(|(y, p)| y * (p + laplace(rng, eta))).sum();
            exact += sign * weight * clean;
            estimate += sign * weight * noisy;
        }
    }
    Ok(NoisyEstimate { estimate, exact, noise_scales: scales })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{draw_design, DesignCounts};
    use crate::rng::{SeedTree, Stream};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn histogram_counts() {
        let h = ArmHistogram::from_outcomes([0, 0, 1], 2);
        assert!(close(&h.probs, &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
        let h = ArmHistogram::from_outcomes([0, 1, 1, 1], 2);
        assert_eq!(h.probs, vec![0.25, 0.75]);
        let h = ArmHistogram::from_outcomes([2, 2], 3);
        assert_eq!(h.probs, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn clip_with_injected_noise() {
        assert_eq!(clip_with_noise(&[0.9, 0.1], 0.2, &[0.3, -0.3]), vec![1.0, 0.2]);
        assert_eq!(clip_with_noise(&[0.5, 0.5], 0.5, &[-0.4, 0.6]), vec![0.5, 1.0]);
        let mut rng = SeedTree::new(1).stream(Stream::Laplace, 0);
        assert_eq!(perturb_clip(&[0.05, 0.95], 0.1, Extended::Finite(0.0), 4, &mut rng), vec![0.1, 0.95]);
    }

    #[test]
    fn renormalize_branches() {
        let hi = renormalize(&[0.5, 0.6], 0.1);
        assert!(close(&hi, &[0.455_555_555_555_555_6, 0.544_444_444_444_444_4], 1e-15));
        let lo = renormalize(&[0.2, 0.3], 0.1);
        assert!(close(&lo, &[0.466_666_666_666_666_7, 0.533_333_333_333_333_3], 1e-15));
        assert_eq!(renormalize(&[0.25, 0.75], 0.1), vec![0.25, 0.75]);
        // all entries at gamma = 1/K sums to exactly one
        assert_eq!(renormalize(&[0.5, 0.5], 0.5), vec![0.5, 0.5]);
    }

    fn small_pop() -> (PopulationDataset, Design) {
        let space = OutcomeSpace::integer_range(0, 3).unwrap();
        let clusters = vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let y0 = vec![0, 1, 1, 2, 3, 3, 2, 0, 1, 3];
        let y1 = vec![1, 2, 2, 3, 3, 3, 3, 1, 2, 3];
        let pop = PopulationDataset::from_indices(space, clusters, y0, y1).unwrap();
        let counts = DesignCounts::balanced(&pop.cluster_sizes()).unwrap();
        let design = draw_design(&pop, &counts, &mut SeedTree::new(5).stream(Stream::Assignment, 0)).unwrap();
        (pop, design)
    }

    #[test]
    fn lambda_zero_releases_truth() {
        let (pop, design) = small_pop();
        let params = MechanismParams::cluster_dp(0.05, Extended::Finite(1.0), 0.0);
        let tree = SeedTree::new(3);
        let (_, rel) = cluster_dp(
            &pop,
            &design,
            &params,
            &mut tree.stream(Stream::Laplace, 0),
            &mut tree.stream(Stream::Resampling, 0),
        )
        .unwrap();
        for (i, u) in rel.units.iter().enumerate() {
            assert_eq!(u.y_tilde, design.observed(&pop, i));
        }
    }

    #[test]
    fn gamma_one_over_k_gives_uniform_priors() {
        let (pop, design) = small_pop();
        let params = MechanismParams::cluster_dp(0.25, Extended::Finite(3.0), 0.5);
        let mut rng = SeedTree::new(8).stream(Stream::Laplace, 0);
        let prior = estimate_priors(&pop, &design, &params, &mut rng).unwrap();
        for cell in &prior.priors {
            for q in cell {
                assert!(close(q, &[0.25; 4], 1e-15), "{q:?}");
            }
        }
    }

    #[test]
    fn cluster_free_shares_prior_across_clusters() {
        let (pop, design) = small_pop();
        let params = MechanismParams::cluster_free_dp(0.05, Extended::Finite(1.0), 0.5);
        let mut rng = SeedTree::new(8).stream(Stream::Laplace, 0);
        let prior = estimate_priors(&pop, &design, &params, &mut rng).unwrap();
        assert_eq!(prior.priors[0], prior.priors[1]);
    }

    #[test]
    fn priors_are_projected() {
        let (pop, design) = small_pop();
        let tree = SeedTree::new(21);
        for r in 0..2_000 {
            let gamma = 0.25 * (r % 5) as f64 / 4.0;
            let params = MechanismParams::cluster_dp(gamma, Extended::Finite(0.5 + (r % 3) as f64), 0.5);
            let prior = estimate_priors(&pop, &design, &params, &mut tree.stream(Stream::Laplace, r)).unwrap();
            for cell in &prior.priors {
                for q in cell {
                    assert!(q.iter().all(|&v| v >= gamma));
                    assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn uniform_release_rates() {
        // K = 2, lambda = 0.5, true y = 1 => P(y_tilde = 1) = 0.75
        let space = OutcomeSpace::new(vec![0.0, 1.0]).unwrap();
        let n = 50_000;
        let pop = PopulationDataset::from_indices(space, vec![0; n], vec![1; n], vec![1; n]).unwrap();
        let counts = DesignCounts::balanced(&pop.cluster_sizes()).unwrap();
        let tree = SeedTree::new(4);
        let design = draw_design(&pop, &counts, &mut tree.stream(Stream::Assignment, 0)).unwrap();
        let rel = uniform_prior_dp(&pop, &design, 0.5, &mut tree.stream(Stream::Resampling, 0)).unwrap();
        let ones = rel.units.iter().filter(|u| u.y_tilde == 1).count() as f64 / n as f64;
        let sd = (0.75 * 0.25 / n as f64).sqrt();
        assert!((ones - 0.75).abs() < 3.0 * sd, "{ones}");
    }

    #[test]
    fn ht_sensitivity_example() {
        let space = OutcomeSpace::integer_range(-3, 6).unwrap();
        assert!((ht_sensitivity(&space, 5, 7) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn baselines_without_noise_are_exact() {
        let (pop, design) = small_pop();
        let mut rng = SeedTree::new(2).stream(Stream::Laplace, 0);
        let exact = tau_no_dp(&pop, &design).unwrap();
        let a = noisy_ht(&pop, &design, Extended::Infinite, &mut rng).unwrap();
        let b = noisy_histogram(&pop, &design, Extended::Infinite, &mut rng).unwrap();
        assert_eq!(a.estimate, exact);
        assert!((b.estimate - exact).abs() < 1e-12);
        assert!(noisy_ht(&pop, &design, Extended::Finite(0.0), &mut rng).is_err());
        assert!(noisy_histogram(&pop, &design, Extended::Finite(-1.0), &mut rng).is_err());
    }
}
