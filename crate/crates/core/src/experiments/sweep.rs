//! Privacy/variance sweeps over (epsilon or lambda) x sigma x gamma.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{check_replications, finite_eps, replicate, Estimator, PopulationSource, Provenance, ResultRow};
use crate::accounting::{
    account, calibrate, calibrate_uniform_lambda, cluster_dp_eps_delta, uniform_prior_eps_delta, PrivacyReport,
};
use crate::error::Result;
use crate::model::{DesignCounts, Epsilon, Extended, MechanismParams, NoiseScale, PopulationDataset};
use crate::simdata::GraphPopConfig;
use crate::variance::{cluster_dp_variance_bound, ht_variance, uniform_prior_variance, AVariant};

/// How the resampling probability is chosen at each grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Privacy {
    /// Calibrate lambda per mechanism to spend exactly `(epsilon, delta)`.
    Calibrated { epsilons: Vec<Epsilon>, delta: f64 },
    /// Use the given lambdas and report the pure-DP loss.
    Fixed { lambdas: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMechanism {
    NoDp,
    ClusterDp,
    ClusterFreeDp,
    UniformStratified,
    UniformPooled,
}

impl SweepMechanism {
    fn label(self) -> &'static str {
        match self {
            SweepMechanism::NoDp => "no-dp",
            SweepMechanism::ClusterDp => "cluster-dp",
            SweepMechanism::ClusterFreeDp => "cluster-free-dp",
            SweepMechanism::UniformStratified => "uniform-prior-dp-stratified",
            SweepMechanism::UniformPooled => "uniform-prior-dp-pooled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub population: PopulationSource,
    pub privacy: Privacy,
    pub sigmas: Vec<NoiseScale>,
    /// Truncation thresholds as multiples of 1/K.
    pub gamma_multipliers: Vec<f64>,
    pub mechanisms: Vec<SweepMechanism>,
    pub replications: usize,
    /// Mark the lowest-variance (sigma, gamma) per privacy level and mechanism.
    pub select_best: bool,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            population: PopulationSource::gmm_sizes(&[125, 250, 500]),
            privacy: Privacy::Calibrated { epsilons: vec![Extended::Finite(0.2)], delta: 1e-4 },
            sigmas: vec![Extended::Finite(10.0)],
            gamma_multipliers: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            mechanisms: vec![
                SweepMechanism::NoDp,
                SweepMechanism::ClusterDp,
                SweepMechanism::ClusterFreeDp,
                SweepMechanism::UniformStratified,
                SweepMechanism::UniformPooled,
            ],
            replications: 500,
            select_best: false,
            seed: super::DEFAULT_SEED,
        }
    }
}

impl SweepConfig {
    /// Trade-off curve: epsilon grid, optimizing sigma and gamma per point.
    pub fn tradeoff() -> Self {
        Self {
            privacy: Privacy::Calibrated {
                epsilons: [0.5, 1.0, 2.0, 4.0, 8.0].map(Extended::Finite).to_vec(),
                delta: 1e-4,
            },
            sigmas: vec![Extended::Finite(10.0), Extended::Finite(20.0), Extended::Infinite],
            gamma_multipliers: vec![0.01, 0.1, 1.0],
            select_best: true,
            ..Self::default()
        }
    }

    /// Trade-off on the community-graph population.
    pub fn graph_tradeoff() -> Self {
        Self {
            population: PopulationSource::Graph(GraphPopConfig::default()),
            privacy: Privacy::Calibrated {
                epsilons: [0.5, 1.0, 2.0, 4.0, 8.0].map(Extended::Finite).to_vec(),
                delta: 1e-4,
            },
            sigmas: vec![Extended::Finite(5.0)],
            gamma_multipliers: vec![0.1],
            mechanisms: vec![SweepMechanism::NoDp, SweepMechanism::ClusterDp, SweepMechanism::ClusterFreeDp],
            ..Self::default()
        }
    }
}

/// A privacy level of the grid: calibrated target or fixed lambda.
#[derive(Clone, Copy)]
enum Level {
    Target { epsilon: Epsilon, delta: f64 },
    Lambda(f64),
}

fn cluster_params(
    mechanism: SweepMechanism,
    level: Level,
    gamma: f64,
    sigma: NoiseScale,
    k: usize,
) -> Result<(MechanismParams, PrivacyReport)> {
    let build = |lambda| match mechanism {
        SweepMechanism::ClusterFreeDp => MechanismParams::cluster_free_dp(gamma, sigma, lambda),
        _ => MechanismParams::cluster_dp(gamma, sigma, lambda),
    };
    match level {
        Level::Target { epsilon, delta } => {
            let cal = calibrate(finite_eps(epsilon), delta, gamma, sigma)?;
            let params = build(cal.lambda);
            params.validate(k)?;
            Ok((params, cluster_dp_eps_delta(gamma, sigma, cal.lambda, cal.eps_tilde)))
        }
        Level::Lambda(lambda) => {
            let params = build(lambda);
            params.validate(k)?;
            Ok((params, account(&params, k)))
        }
    }
}

fn uniform_params(level: Level, k: usize) -> Result<(MechanismParams, PrivacyReport)> {
    match level {
        Level::Target { epsilon, delta } => {
            let eps = finite_eps(epsilon);
            let lambda = calibrate_uniform_lambda(eps, delta, k)?;
            Ok((MechanismParams::uniform_prior(k, lambda), uniform_prior_eps_delta(k, lambda, eps)))
        }
        Level::Lambda(lambda) => {
            let params = MechanismParams::uniform_prior(k, lambda);
            params.validate(k)?;
            Ok((params, account(&params, k)))
        }
    }
}

struct Ctx<'a> {
    name: &'a str,
    pop: &'a PopulationDataset,
    counts: &'a DesignCounts,
    prov: &'a Provenance,
    replications: usize,
    beta: Option<f64>,
}

impl Ctx<'_> {
    fn row(&self, mechanism: SweepMechanism) -> ResultRow {
        let mut row = ResultRow::new(self.name, mechanism.label(), self.prov);
        row.beta = self.beta;
        row
    }

    fn run(&self, estimator: &Estimator) -> Result<Vec<f64>> {
        replicate(self.pop, self.counts, estimator, &self.prov.tree(), self.replications)
    }
}

fn privatized_row(
    ctx: &Ctx<'_>,
    mechanism: SweepMechanism,
    level: Level,
    gamma: f64,
    sigma: NoiseScale,
) -> Result<ResultRow> {
    let k = ctx.pop.space().len();
    let mut row = ctx.row(mechanism);
    if let Level::Target { epsilon, delta: _ } = level {
        row.target_epsilon = Some(epsilon);
    }
    let uniform = matches!(mechanism, SweepMechanism::UniformStratified | SweepMechanism::UniformPooled);
    let resolved = if uniform { uniform_params(level, k) } else { cluster_params(mechanism, level, gamma, sigma, k) };
    let (params, report) = match resolved {
        Ok(v) => v,
        Err(e) => {
            row.gamma = Some(gamma);
            row.sigma = Some(sigma);
            return Ok(row.flagged(&e));
        }
    };
    row = row.with_params(&params);
    row.epsilon = Some(report.epsilon);
    row.delta = Some(report.delta);
    let estimator = match mechanism {
        SweepMechanism::UniformStratified => Estimator::Uniform { lambda: params.lambda, stratified: true },
        SweepMechanism::UniformPooled => Estimator::Uniform { lambda: params.lambda, stratified: false },
        _ => Estimator::Debiased(params),
    };
    row = row.with_mc(&ctx.run(&estimator)?, ctx.pop.ate());
    match mechanism {
        SweepMechanism::ClusterDp => {
            let bound = cluster_dp_variance_bound(ctx.pop, ctx.counts, &params, AVariant::default())?;
            row.theory = Some(bound.total.value());
            row.theory_kind = Some("upper-bound".into());
            row.phi0 = Some(bound.component("phi0"));
            row.phi1 = Some(bound.component("phi1"));
        }
        SweepMechanism::UniformStratified => {
            row.theory = Some(uniform_prior_variance(ctx.pop, ctx.counts, params.lambda, true)?.total.value());
            row.theory_kind = Some("exact".into());
        }
        _ => {}
    }
    Ok(row)
}

/// Runs a sweep and returns one row per (privacy level, mechanism, sigma, gamma),
/// after a single non-private reference row. `name` labels the rows.
pub fn run_variance_sweep(config: &SweepConfig, prov: &Provenance, name: &str) -> Result<Vec<ResultRow>> {
    check_replications("replications", config.replications)?;
    let pop = config.population.load(&prov.tree())?;
    let counts = DesignCounts::balanced(&pop.cluster_sizes())?;
    let beta = match &config.population {
        PopulationSource::Gmm(g) => Some(g.beta),
        _ => None,
    };
    let ctx = Ctx { name, pop: &pop, counts: &counts, prov, replications: config.replications, beta };
    let k = pop.space().len() as f64;

    let mut rows = Vec::new();
    if config.mechanisms.contains(&SweepMechanism::NoDp) {
        let mut row = ctx.row(SweepMechanism::NoDp).with_mc(&ctx.run(&Estimator::NoDp)?, pop.ate());
        row.lambda = Some(0.0);
        row.theory = Some(ht_variance(&pop, &counts)?);
        row.theory_kind = Some("exact".into());
        rows.push(row);
    }
    let levels: Vec<Level> = match &config.privacy {
        Privacy::Calibrated { epsilons, delta } => {
            epsilons.iter().map(|&epsilon| Level::Target { epsilon, delta: *delta }).collect()
        }
        Privacy::Fixed { lambdas } => lambdas.iter().map(|&l| Level::Lambda(l)).collect(),
    };
    for (level_index, &level) in levels.iter().enumerate() {
        let first = rows.len();
        for &mechanism in &config.mechanisms {
            match mechanism {
                SweepMechanism::NoDp => {}
                SweepMechanism::UniformStratified | SweepMechanism::UniformPooled => {
                    rows.push(privatized_row(&ctx, mechanism, level, 1.0 / k, Extended::Infinite)?);
                }
                SweepMechanism::ClusterDp | SweepMechanism::ClusterFreeDp => {
                    for &sigma in &config.sigmas {
                        for &m in &config.gamma_multipliers {
                            rows.push(privatized_row(&ctx, mechanism, level, m / k, sigma)?);
                        }
                    }
                }
            }
        }
        if config.select_best {
            mark_best(&mut rows[first..]);
        }
        log::debug!("{name}: finished privacy level {}", level_index + 1);
    }
    Ok(rows)
}

fn mark_best(rows: &mut [ResultRow]) {
    let mut best: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        if let (true, Some(v)) = (row.status == "ok", row.mc_variance) {
            let entry = best.entry(row.mechanism.clone()).or_insert((i, v));
            if v < entry.1 {
                *entry = (i, v);
            }
        }
    }
    for (i, row) in rows.iter_mut().enumerate() {
        row.selected = Some(best.get(&row.mechanism).is_some_and(|&(b, _)| b == i));
    }
}
