//! Conditional bias of cluster-DP against the aggregate baselines with the
//! mechanism noise held fixed while sub-populations and assignments vary.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_replications, Provenance, ResultRow};
use crate::accounting::{calibrate, cluster_dp_eps_delta, cluster_dp_pure_report, PrivacyReport};
use crate::error::{Error, Result};
use crate::estimation::{tau_no_dp, tau_q_parts};
use crate::mechanisms::{debias_rows, empirical_histogram, ht_sensitivity, projected_prior, resample};
use crate::model::{
    draw_design, Design, DesignCounts, Epsilon, Extended, MechanismParams, NoiseScale, PopulationDataset,
    ProjectedPrior,
};
use crate::rng::{laplace, SeedTree, Stream};
use crate::simdata::{gen_gmm, subsample, GmmConfig};
use crate::stats::McSummary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub superpopulation: GmmConfig,
    /// Units drawn from each cluster per sub-population.
    pub subsample_sizes: Vec<usize>,
    pub epsilons: Vec<Epsilon>,
    /// Failure probability used to calibrate cluster-DP.
    pub delta: f64,
    pub gamma: f64,
    pub sigma: NoiseScale,
    pub subpopulations: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            superpopulation: GmmConfig { cluster_sizes: vec![500, 1000, 2000], ..GmmConfig::default() },
            subsample_sizes: vec![125, 250, 500],
            epsilons: vec![
                Extended::Finite(0.5),
                Extended::Finite(1.0),
                Extended::Finite(2.0),
                Extended::Finite(4.0),
                Extended::Finite(8.0),
                Extended::Infinite,
            ],
            delta: 1e-4,
            gamma: 0.02,
            sigma: Extended::Finite(10.0),
            subpopulations: 500,
            seed: super::DEFAULT_SEED,
        }
    }
}

/// Unit-scale Laplace draws fixed once for the whole run.
struct FixedNoise {
    /// Per cluster, for the noisy HT offset.
    ht: Vec<f64>,
    /// Per (cluster, arm, outcome), for the noisy histogram.
    histogram: Vec<[Vec<f64>; 2]>,
    /// Per (cluster, arm, outcome), for the cluster-DP prior.
    prior: Vec<[Vec<f64>; 2]>,
}

impl FixedNoise {
    fn draw(tree: &SeedTree, clusters: usize, k: usize) -> Self {
        let mut rng = tree.stream(Stream::Laplace, 0);
        let ht = (0..clusters).map(|_| laplace(&mut rng, 1.0)).collect();
        let mut cells = || -> Vec<[Vec<f64>; 2]> {
            (0..clusters).map(|_| [(); 2].map(|_| (0..k).map(|_| laplace(&mut rng, 1.0)).collect())).collect()
        };
        let histogram = cells();
        let prior = cells();
        Self { ht, histogram, prior }
    }
}

struct Draw {
    pop: PopulationDataset,
    design: Design,
}

fn noisy_ht_fixed(d: &Draw, eps: f64, noise: &FixedNoise) -> Result<f64> {
    let counts = d.design.counts();
    let n = d.pop.len() as f64;
    let mut est = tau_no_dp(&d.pop, &d.design)?;
    for c in 0..counts.num_clusters() {
        let scale = ht_sensitivity(d.pop.space(), counts.control[c], counts.treated[c]) / eps;
        est += counts.size(c) as f64 / n * scale * noise.ht[c];
    }
    Ok(est)
}

fn noisy_histogram_fixed(d: &Draw, eps: f64, noise: &FixedNoise) -> Result<f64> {
    let space = d.pop.space();
    let n = d.pop.len() as f64;
    let mut est = 0.0;
    for c in 0..d.pop.num_clusters() {
        let weight = d.pop.members(c).len() as f64 / n;
        for arm in [1u8, 0] {
            let sign = if arm == 1 { 1.0 } else { -1.0 };
            let hist = empirical_histogram(&d.pop, &d.design, c, arm)?;
            let scale = 1.0 / (hist.total() as f64 * eps);
            let noisy: f64 = space
                .values()
                .iter()
                .zip(&hist.probs)
                .zip(&noise.histogram[c][arm as usize])
                .map(|((y, p), l)| y * (p + scale * l))
                .sum();
            est += sign * weight * noisy;
        }
    }
    Ok(est)
}

fn cluster_dp_fixed(
    d: &Draw,
    params: &MechanismParams,
    noise: &FixedNoise,
    rng_tree: &SeedTree,
    r: u64,
) -> Result<f64> {
    let space = d.pop.space();
    let mut priors = Vec::with_capacity(d.pop.num_clusters());
    for c in 0..d.pop.num_clusters() {
        let mut cell: [Vec<f64>; 2] = Default::default();
        for arm in 0..2u8 {
            let hist = empirical_histogram(&d.pop, &d.design, c, arm)?;
            let scaled: Vec<f64> = match params.sigma {
                Extended::Infinite => vec![0.0; space.len()],
                Extended::Finite(s) => {
                    let scale = s / hist.total() as f64;
                    noise.prior[c][arm as usize].iter().map(|l| scale * l).collect()
                }
            };
            cell[arm as usize] = projected_prior(&hist, params.gamma, &scaled);
        }
        priors.push(cell);
    }
    let prior = ProjectedPrior { gamma: params.gamma, priors };
    let y = resample(&d.pop, &d.design, &prior, params.lambda, &mut rng_tree.stream(Stream::Resampling, r));
    let debias = debias_rows(space, &prior, params.lambda);
    tau_q_parts(space, d.pop.clusters(), d.design.assignment(), &y, &debias).map(|e| e.estimate)
}

fn calibrated(config: &BaselineConfig, eps: Epsilon) -> Result<(MechanismParams, PrivacyReport)> {
    match eps {
        Extended::Infinite => {
            let params = MechanismParams::cluster_dp(config.gamma, config.sigma, 0.0);
            Ok((params, cluster_dp_pure_report(config.gamma, config.sigma, 0.0)))
        }
        Extended::Finite(e) => {
            let cal = calibrate(e, config.delta, config.gamma, config.sigma)?;
            let params = MechanismParams::cluster_dp(config.gamma, config.sigma, cal.lambda);
            Ok((params, cluster_dp_eps_delta(config.gamma, config.sigma, cal.lambda, cal.eps_tilde)))
        }
    }
}

/// Rows per epsilon for `cluster-dp`, `noisy-ht` and `noisy-histogram`.
/// `mc_bias` is the mean of `tau_hat - tau` over the sub-population redraws,
/// with `tau` the redrawn sub-population's effect.
pub fn run_baseline_bias(config: &BaselineConfig, prov: &Provenance) -> Result<Vec<ResultRow>> {
    check_replications("subpopulations", config.subpopulations)?;
    const NAME: &str = "baseline-bias";
    let tree = prov.tree();
    let superpop = gen_gmm(&config.superpopulation, &mut tree.stream(Stream::Population, 0))?;
    let k = superpop.space().len();
    let n: usize = config.subsample_sizes.iter().sum();
    let floor = 10 * k.max(superpop.num_clusters());
    if n < floor {
        log::warn!("sub-population of {n} units is below 10 max(K, C) = {floor}; bias comparison may not hold");
    }
    let counts = DesignCounts::balanced(&config.subsample_sizes)?;
    let draws: Vec<Draw> = (0..config.subpopulations as u64)
        .into_par_iter()
        .map(|r| -> Result<Draw> {
            let pop = subsample(&superpop, &config.subsample_sizes, &mut tree.stream(Stream::Subsample, r))?;
            let design = draw_design(&pop, &counts, &mut tree.stream(Stream::Assignment, r))?;
            Ok(Draw { pop, design })
        })
        .collect::<Result<_>>()?;
    let noise = FixedNoise::draw(&tree, superpop.num_clusters(), k);

    let mut rows = Vec::new();
    for &eps in &config.epsilons {
        if matches!(eps, Extended::Finite(e) if !(e > 0.0)) {
            return Err(Error::InvalidParams(format!("epsilon must be > 0, got {eps}")));
        }
        let mut row = ResultRow::new(NAME, "cluster-dp", prov);
        row.target_epsilon = Some(eps);
        match calibrated(config, eps) {
            Ok((params, report)) => {
                params.validate(k)?;
                let dev = deviations(&draws, |d, r| cluster_dp_fixed(d, &params, &noise, &tree, r))?;
                row = row.with_params(&params).with_mc(&dev, 0.0);
                row.epsilon = Some(report.epsilon);
                row.delta = Some(report.delta);
            }
            Err(e) => {
                row.gamma = Some(config.gamma);
                row.sigma = Some(config.sigma);
                row = row.flagged(&e);
            }
        }
        rows.push(row);

        let e = eps.finite().unwrap_or(f64::INFINITY);
        for (label, f) in [
            ("noisy-ht", noisy_ht_fixed as fn(&Draw, f64, &FixedNoise) -> Result<f64>),
            ("noisy-histogram", noisy_histogram_fixed),
        ] {
            let dev = deviations(&draws, |d, _| f(d, e, &noise))?;
            let mut row = ResultRow::new(NAME, label, prov).with_mc(&dev, 0.0);
            row.target_epsilon = Some(eps);
            row.epsilon = Some(eps);
            row.delta = Some(0.0);
            rows.push(row);
        }
    }
    Ok(rows)
}

fn deviations<F>(draws: &[Draw], estimate: F) -> Result<Vec<f64>>
where
    F: Fn(&Draw, u64) -> Result<f64> + Sync,
{
    draws.par_iter().enumerate().map(|(r, d)| estimate(d, r as u64).map(|x| x - d.pop.ate())).collect()
}

/// Summary of the conditional bias per mechanism at one epsilon, for callers
/// that only want the numbers.
pub fn bias_summary(rows: &[ResultRow], mechanism: &str, eps: Epsilon) -> Option<McSummary> {
    rows.iter().find(|r| r.mechanism == mechanism && r.target_epsilon == Some(eps) && r.status == "ok").map(|r| {
        McSummary {
            replications: r.replications.unwrap_or(0),
            mean: r.mc_bias.unwrap_or(f64::NAN),
            se_mean: r.mc_bias_se.unwrap_or(f64::NAN),
            variance: r.mc_variance.unwrap_or(f64::NAN),
            se_variance: r.mc_variance_se.unwrap_or(f64::NAN),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BaselineConfig {
        BaselineConfig {
            superpopulation: GmmConfig { cluster_sizes: vec![80, 120], ..GmmConfig::default() },
            subsample_sizes: vec![40, 60],
            epsilons: vec![Extended::Finite(1.0), Extended::Infinite],
            subpopulations: 200,
            ..BaselineConfig::default()
        }
    }

    #[test]
    fn infinite_epsilon_has_no_bias() {
        let cfg = small();
        let prov = Provenance::new(&cfg, 5).unwrap();
        let rows = run_baseline_bias(&cfg, &prov).unwrap();
        assert_eq!(rows.len(), 6);
        for row in rows.iter().filter(|r| r.target_epsilon == Some(Extended::Infinite)) {
            assert_eq!(row.status, "ok");
            assert!(row.mc_bias.unwrap().abs() < 4.0 * row.mc_bias_se.unwrap() + 1e-12, "{row:?}");
        }
    }

    #[test]
    fn fixed_noise_shifts_noisy_ht_by_a_constant() {
        let cfg = small();
        let prov = Provenance::new(&cfg, 6).unwrap();
        let rows = run_baseline_bias(&cfg, &prov).unwrap();
        let at_one = |m: &str| bias_summary(&rows, m, Extended::Finite(1.0)).unwrap();
        let at_inf = |m: &str| bias_summary(&rows, m, Extended::Infinite).unwrap();
        // the noise offset is constant across redraws, so the variance is unchanged
        assert!((at_one("noisy-ht").variance - at_inf("noisy-ht").variance).abs() < 1e-9);
        assert!(at_one("cluster-dp").mean.abs() < 4.0 * at_one("cluster-dp").se_mean);
    }
}
