//! Sampling distribution of the debiased estimator around the true effect.

use serde::{Deserialize, Serialize};

use super::{check_replications, replicate, Estimator, PopulationSource, Provenance, ResultRow};
use crate::accounting::account;
use crate::error::Result;
use crate::model::{DesignCounts, Extended, MechanismParams, NoiseScale};
use crate::stats::{anderson_darling, t_test};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistributionConfig {
    pub population: PopulationSource,
    pub gamma: f64,
    pub sigma: NoiseScale,
    pub lambda: f64,
    pub replications: usize,
    pub seed: u64,
}

impl Default for DistributionConfig {
    fn default() -> Self {
        Self {
            population: PopulationSource::gmm_sizes(&[125, 250, 500]),
            gamma: 0.02,
            sigma: Extended::Finite(10.0),
            lambda: 0.8,
            replications: 500,
            seed: super::DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionOutput {
    /// Estimator row, then `anderson-darling` and `t-test` rows.
    pub rows: Vec<ResultRow>,
    /// `tau_hat - tau` per replication, in replication order.
    pub deviations: Vec<f64>,
}

pub fn run_distribution_check(config: &DistributionConfig, prov: &Provenance) -> Result<DistributionOutput> {
    check_replications("replications", config.replications)?;
    const NAME: &str = "distribution";
    let tree = prov.tree();
    let pop = config.population.load(&tree)?;
    let k = pop.space().len();
    let params = MechanismParams::cluster_dp(config.gamma, config.sigma, config.lambda);
    params.validate(k)?;
    let counts = DesignCounts::balanced(&pop.cluster_sizes())?;
    let tau = pop.ate();
    let xs = replicate(&pop, &counts, &Estimator::Debiased(params), &tree, config.replications)?;
    let deviations: Vec<f64> = xs.iter().map(|x| x - tau).collect();

    let report = account(&params, k);
    let mut main = ResultRow::new(NAME, params.kind.name(), prov).with_params(&params).with_mc(&xs, tau);
    main.epsilon = Some(report.epsilon);
    main.delta = Some(report.delta);

    let ad = anderson_darling(&deviations);
    let mut ad_row = ResultRow::new(NAME, "anderson-darling", prov).with_params(&params);
    ad_row.replications = Some(xs.len());
    ad_row.statistic = Some(ad.statistic);
    ad_row.theory = Some(ad.critical_1pct);
    ad_row.theory_kind = Some("critical-1pct".into());
    ad_row.status = if ad.rejected_at_1pct { "rejected".into() } else { "ok".into() };

    let t = t_test(&deviations, 0.0);
    let mut t_row = ResultRow::new(NAME, "t-test", prov).with_params(&params);
    t_row.replications = Some(xs.len());
    t_row.statistic = Some(t.t);
    t_row.p_value = Some(t.p_value);

    Ok(DistributionOutput { rows: vec![main, ad_row, t_row], deviations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deviations_center_on_zero() {
        let cfg = DistributionConfig {
            population: PopulationSource::gmm_sizes(&[40, 60]),
            replications: 400,
            ..DistributionConfig::default()
        };
        let prov = Provenance::new(&cfg, 11).unwrap();
        let out = run_distribution_check(&cfg, &prov).unwrap();
        assert_eq!(out.deviations.len(), 400);
        let main = &out.rows[0];
        assert!(main.mc_bias.unwrap().abs() < 4.0 * main.mc_bias_se.unwrap());
        assert_eq!(out.rows[1].mechanism, "anderson-darling");
    }
}
