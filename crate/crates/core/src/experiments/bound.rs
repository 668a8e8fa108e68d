//! Monte Carlo variance gap of the debiased estimator against the analytic bound.

use serde::{Deserialize, Serialize};

use super::{check_replications, replicate, Estimator, Provenance, ResultRow};
use crate::accounting::account;
use crate::error::Result;
use crate::model::{DesignCounts, Extended, MechanismParams, NoiseScale};
use crate::rng::Stream;
use crate::simdata::{gen_gmm, GmmConfig};
use crate::variance::{cluster_dp_variance_bound, AVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub gmm: GmmConfig,
    pub betas: Vec<f64>,
    pub lambda: f64,
    pub gamma: f64,
    pub sigma: NoiseScale,
    pub variant: AVariant,
    pub replications: usize,
    /// Containment allows the gap to sit this many standard errors below zero.
    pub tolerance_se: f64,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            gmm: GmmConfig { cluster_sizes: vec![125, 250, 500], ..GmmConfig::default() },
            betas: vec![0.0, 2.0, 4.0, 4.5],
            lambda: 0.8,
            gamma: 0.02,
            sigma: Extended::Finite(10.0),
            variant: AVariant::Grouped,
            replications: 500,
            tolerance_se: 2.0,
            seed: super::DEFAULT_SEED,
        }
    }
}

/// One row per beta with the Monte Carlo gap over the exact non-private
/// variance, the homogeneity-only term (`lower`), the full gap bound
/// (`theory`), and `contained = -tol*se <= gap <= bound`.
pub fn run_bound_validation(config: &BoundConfig, prov: &Provenance) -> Result<Vec<ResultRow>> {
    check_replications("replications", config.replications)?;
    let tree = prov.tree();
    let params = MechanismParams::cluster_dp(config.gamma, config.sigma, config.lambda);
    let mut rows = Vec::with_capacity(config.betas.len());
    for &beta in &config.betas {
        let pop = gen_gmm(&GmmConfig { beta, ..config.gmm.clone() }, &mut tree.stream(Stream::Population, 0))?;
        let k = pop.space().len();
        params.validate(k)?;
        let counts = DesignCounts::balanced(&pop.cluster_sizes())?;
        let xs = replicate(&pop, &counts, &Estimator::Debiased(params), &tree, config.replications)?;
        let bound = cluster_dp_variance_bound(&pop, &counts, &params, config.variant)?;
        let report = account(&params, k);
        let mut row = ResultRow::new("bound", params.kind.name(), prov).with_params(&params).with_mc(&xs, pop.ate());
        let gap = row.mc_variance.unwrap_or(f64::NAN) - bound.no_dp_variance;
        let se = row.mc_variance_se.unwrap_or(f64::NAN);
        let upper = bound.component("gap_bound");
        row.beta = Some(beta);
        row.epsilon = Some(report.epsilon);
        row.delta = Some(report.delta);
        row.gap = Some(gap);
        row.gap_se = Some(se);
        row.theory = Some(upper);
        row.theory_kind = Some("gap-upper-bound".into());
        row.lower = Some(bound.component("homogeneity_term"));
        row.phi0 = Some(bound.component("phi0"));
        row.phi1 = Some(bound.component("phi1"));
        row.contained = Some(gap >= -config.tolerance_se * se && gap <= upper);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lambda_has_zero_gap() {
        let cfg = BoundConfig {
            gmm: GmmConfig { cluster_sizes: vec![30, 50], ..GmmConfig::default() },
            betas: vec![2.0],
            lambda: 0.0,
            replications: 300,
            ..BoundConfig::default()
        };
        let prov = Provenance::new(&cfg, 8).unwrap();
        let row = &run_bound_validation(&cfg, &prov).unwrap()[0];
        assert_eq!(row.lower, Some(0.0));
        // lambda = 0 releases the true outcomes, so only assignment noise remains
        assert!(row.gap.unwrap().abs() < 4.0 * row.gap_se.unwrap());
        assert_eq!(row.contained, Some(true));
    }
}
