//! Variance ratio of cluster-DP to its pooled-prior variant as clusters get more homogeneous.

use serde::{Deserialize, Serialize};

use super::{check_replications, replicate, Estimator, Provenance, ResultRow};
use crate::accounting::account;
use crate::error::Result;
use crate::model::{DesignCounts, Extended, MechanismParams, NoiseScale};
use crate::rng::Stream;
use crate::simdata::{gen_gmm, GmmConfig};
use crate::stats::{jackknife_se_variance_ratio, spearman, variance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomogeneityConfig {
    /// Base population; `beta` is replaced by each grid value.
    pub gmm: GmmConfig,
    pub betas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub gamma: f64,
    pub sigma: NoiseScale,
    pub replications: usize,
    pub seed: u64,
}

impl Default for HomogeneityConfig {
    fn default() -> Self {
        Self {
            gmm: GmmConfig::default(),
            betas: vec![0.0, 1.0, 2.0, 3.0, 4.0, 4.5],
            lambdas: vec![0.5, 0.8],
            gamma: 0.02,
            sigma: Extended::Finite(10.0),
            replications: 1000,
            seed: super::DEFAULT_SEED,
        }
    }
}

/// Per (lambda, beta): both mechanisms' Monte Carlo rows and a `ratio` row.
/// Per lambda: a `spearman` row correlating beta with the ratio.
///
/// Every beta reuses the same underlying normals and replication streams,
/// so the ratios differ only through beta.
pub fn run_homogeneity_sweep(config: &HomogeneityConfig, prov: &Provenance) -> Result<Vec<ResultRow>> {
    check_replications("replications", config.replications)?;
    const NAME: &str = "homogeneity";
    let tree = prov.tree();
    let mut pops = Vec::with_capacity(config.betas.len());
    for &beta in &config.betas {
        let cfg = GmmConfig { beta, ..config.gmm.clone() };
        pops.push(gen_gmm(&cfg, &mut tree.stream(Stream::Population, 0))?);
    }
    let mut rows = Vec::new();
    for &lambda in &config.lambdas {
        let mut ratios = Vec::with_capacity(config.betas.len());
        for (&beta, pop) in config.betas.iter().zip(&pops) {
            let k = pop.space().len();
            let counts = DesignCounts::balanced(&pop.cluster_sizes())?;
            let mut samples = Vec::with_capacity(2);
            for params in [
                MechanismParams::cluster_dp(config.gamma, config.sigma, lambda),
                MechanismParams::cluster_free_dp(config.gamma, config.sigma, lambda),
            ] {
                params.validate(k)?;
                let xs = replicate(pop, &counts, &Estimator::Debiased(params), &tree, config.replications)?;
                let report = account(&params, k);
                let mut row =
                    ResultRow::new(NAME, params.kind.name(), prov).with_params(&params).with_mc(&xs, pop.ate());
                row.beta = Some(beta);
                row.epsilon = Some(report.epsilon);
                row.delta = Some(report.delta);
                rows.push(row);
                samples.push(xs);
            }
            let ratio = variance(&samples[0]) / variance(&samples[1]);
            let mut row = ResultRow::new(NAME, "ratio", prov);
            row.beta = Some(beta);
            row.gamma = Some(config.gamma);
            row.sigma = Some(config.sigma);
            row.lambda = Some(lambda);
            row.replications = Some(config.replications);
            row.ratio = Some(ratio);
            row.ratio_se = Some(jackknife_se_variance_ratio(&samples[0], &samples[1]));
            rows.push(row);
            ratios.push(ratio);
        }
        let mut row = ResultRow::new(NAME, "spearman", prov);
        row.gamma = Some(config.gamma);
        row.sigma = Some(config.sigma);
        row.lambda = Some(lambda);
        row.statistic = Some(spearman(&config.betas, &ratios));
        rows.push(row);
    }
    Ok(rows)
}
