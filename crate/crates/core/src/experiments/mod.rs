//! Monte Carlo harness.
//!
//! Each experiment takes a serde config, runs seeded replications on the
//! current rayon pool, and returns tidy [`ResultRow`]s. Replication `r` of a
//! grid point draws its assignment, Laplace noise and resampling from the
//! streams `(Assignment, r)`, `(Laplace, r)` and `(Resampling, r)`, so every
//! mechanism and every grid point sees common random numbers.

mod baseline;
mod bound;
mod distribution;
mod homogeneity;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimation::{tau_no_dp, tau_q_parts, tau_uniform_parts};
use crate::mechanisms::{debias_rows, estimate_priors, resample};
use crate::model::{draw_design, DesignCounts, Epsilon, MechanismParams, NoiseScale, OutcomeSpace, PopulationDataset};
use crate::rng::{SeedTree, Stream};
use crate::simdata::{gen_gmm, gen_graph_population, GmmConfig, GraphPopConfig};
use crate::stats::McSummary;

pub use baseline::{bias_summary, run_baseline_bias, BaselineConfig};
pub use bound::{run_bound_validation, BoundConfig};
pub use distribution::{run_distribution_check, DistributionConfig, DistributionOutput};
pub use homogeneity::{run_homogeneity_sweep, HomogeneityConfig};
pub use sweep::{run_variance_sweep, Privacy, SweepConfig, SweepMechanism};

/// Default seed when a config does not set one.
pub const DEFAULT_SEED: u64 = 20_240_601;

/// Where an experiment's population comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopulationSource {
    Gmm(GmmConfig),
    Graph(GraphPopConfig),
    Csv { path: PathBuf, space: OutcomeSpace },
}

impl PopulationSource {
    /// GMM with the given cluster sizes and otherwise default parameters.
    pub fn gmm_sizes(sizes: &[usize]) -> Self {
        PopulationSource::Gmm(GmmConfig { cluster_sizes: sizes.to_vec(), ..GmmConfig::default() })
    }

    pub fn load(&self, tree: &SeedTree) -> Result<PopulationDataset> {
        match self {
            PopulationSource::Gmm(cfg) => gen_gmm(cfg, &mut tree.stream(Stream::Population, 0)),
            PopulationSource::Graph(cfg) => {
                gen_graph_population(cfg, &mut tree.stream(Stream::Graph, 0)).map(|g| g.population)
            }
            PopulationSource::Csv { path, space } => crate::io::read_population_csv(fs::File::open(path)?, space),
        }
    }
}

/// What a replication computes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    /// Stratified difference in means on the true outcomes.
    NoDp,
    /// Debiased estimator after cluster-DP or its pooled-prior variant.
    Debiased(MechanismParams),
    /// Uniform-prior release, optionally ignoring clusters in the estimate.
    Uniform { lambda: f64, stratified: bool },
}

fn one_replication(
    pop: &PopulationDataset,
    counts: &DesignCounts,
    estimator: &Estimator,
    tree: &SeedTree,
    r: u64,
) -> Result<f64> {
    let design = draw_design(pop, counts, &mut tree.stream(Stream::Assignment, r))?;
    let space = pop.space();
    match *estimator {
        Estimator::NoDp => tau_no_dp(pop, &design),
        Estimator::Debiased(params) => {
            let prior = estimate_priors(pop, &design, &params, &mut tree.stream(Stream::Laplace, r))?;
            let y = resample(pop, &design, &prior, params.lambda, &mut tree.stream(Stream::Resampling, r));
            let debias = debias_rows(space, &prior, params.lambda);
            tau_q_parts(space, pop.clusters(), design.assignment(), &y, &debias).map(|e| e.estimate)
        }
        Estimator::Uniform { lambda, stratified } => {
            let params = MechanismParams::uniform_prior(space.len(), lambda);
            let mut rng = tree.stream(Stream::Resampling, r);
            let prior = estimate_priors(pop, &design, &params, &mut rng)?;
            let y = resample(pop, &design, &prior, lambda, &mut rng);
            if stratified {
                tau_uniform_parts(space, pop.num_clusters(), pop.clusters(), design.assignment(), &y, lambda)
            } else {
                let zeros = vec![0; pop.len()];
                tau_uniform_parts(space, 1, &zeros, design.assignment(), &y, lambda)
            }
        }
    }
}

/// Runs `replications` independent (assignment, mechanism, estimator) draws.
/// Output order is the replication index, whatever the pool size.
pub fn replicate(
    pop: &PopulationDataset,
    counts: &DesignCounts,
    estimator: &Estimator,
    tree: &SeedTree,
    replications: usize,
) -> Result<Vec<f64>> {
    (0..replications as u64).into_par_iter().map(|r| one_replication(pop, counts, estimator, tree, r)).collect()
}

/// One line of an experiment's result table.
///
/// Columns that do not apply to an experiment are left empty.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub mechanism: String,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub sigma: Option<NoiseScale>,
    pub lambda: Option<f64>,
    pub target_epsilon: Option<Epsilon>,
    pub epsilon: Option<Epsilon>,
    pub delta: Option<f64>,
    pub replications: Option<usize>,
    pub mc_mean: Option<f64>,
    pub mc_bias: Option<f64>,
    pub mc_bias_se: Option<f64>,
    pub mc_variance: Option<f64>,
    pub mc_variance_se: Option<f64>,
    /// Exact variance, or an upper bound, depending on `theory_kind`.
    pub theory: Option<f64>,
    pub theory_kind: Option<String>,
    /// Homogeneity-only part of the bound (bound validation).
    pub lower: Option<f64>,
    pub gap: Option<f64>,
    pub gap_se: Option<f64>,
    pub contained: Option<bool>,
    pub ratio: Option<f64>,
    pub ratio_se: Option<f64>,
    /// Test statistic of a summary row (Spearman rho, Anderson-Darling, t).
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub selected: Option<bool>,
    pub phi0: Option<f64>,
    pub phi1: Option<f64>,
    pub status: String,
    pub seed: u64,
    pub config_hash: String,
}

impl ResultRow {
    pub(crate) fn new(experiment: &str, mechanism: &str, ctx: &Provenance) -> Self {
        Self {
            experiment: experiment.to_string(),
            mechanism: mechanism.to_string(),
            status: "ok".to_string(),
            seed: ctx.seed,
            config_hash: ctx.config_hash.clone(),
            ..Self::default()
        }
    }

    /// Fills the Monte Carlo columns from replicated estimates around `truth`.
    pub(crate) fn with_mc(mut self, estimates: &[f64], truth: f64) -> Self {
        let s = McSummary::of(estimates);
        self.replications = Some(s.replications);
        self.mc_mean = Some(s.mean);
        self.mc_bias = Some(s.mean - truth);
        self.mc_bias_se = Some(s.se_mean);
        self.mc_variance = Some(s.variance);
        self.mc_variance_se = Some(s.se_variance);
        self
    }

    pub(crate) fn with_params(mut self, params: &MechanismParams) -> Self {
        self.gamma = Some(params.gamma);
        self.sigma = Some(params.sigma);
        self.lambda = Some(params.lambda);
        self
    }

    pub(crate) fn flagged(mut self, err: &Error) -> Self {
        self.status = if err.is_infeasible_calibration() { "infeasible".to_string() } else { format!("error: {err}") };
        self
    }
}

/// Seed and config hash stamped on every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn new<C: Serialize>(config: &C, seed: u64) -> Result<Self> {
        Ok(Self { seed, config_hash: config_hash(config)? })
    }

    pub fn tree(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }
}

/// Hex SHA-256 of the config's compact JSON.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub(crate) fn check_replications(name: &str, r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::InvalidParams(format!("{name} must be >= 1")));
    }
    Ok(())
}

pub(crate) fn finite_eps(eps: Epsilon) -> f64 {
    eps.finite().unwrap_or(f64::INFINITY)
}

/// Known experiment names, in the order the CLI lists them.
pub const EXPERIMENTS: [&str; 7] =
    ["variance-sweep", "tradeoff", "graph-tradeoff", "homogeneity", "bound", "distribution", "baseline-bias"];

/// Run metadata written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub threads: usize,
    pub runtime_ms: u128,
    pub outputs: Vec<String>,
    pub config: serde_json::Value,
}

/// Options for [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Overrides the config's seed.
    pub seed: Option<u64>,
    /// Worker threads; 0 uses rayon's default.
    pub threads: usize,
    pub out_dir: PathBuf,
}

trait Seeded: Serialize + DeserializeOwned + Default {
    fn seed_mut(&mut self) -> &mut u64;
}

macro_rules! seeded {
    ($($t:ty),*) => {$(
        impl Seeded for $t {
            fn seed_mut(&mut self) -> &mut u64 {
                &mut self.seed
            }
        }
    )*};
}
seeded!(SweepConfig, HomogeneityConfig, BoundConfig, DistributionConfig, BaselineConfig);

fn resolve<C: Seeded>(config: Option<&str>, seed: Option<u64>) -> Result<C> {
    let mut cfg: C = match config {
        Some(text) => serde_json::from_str(text)?,
        None => C::default(),
    };
    if let Some(s) = seed {
        *cfg.seed_mut() = s;
    }
    Ok(cfg)
}

/// Default config of a named experiment as pretty JSON.
pub fn default_config(name: &str) -> Result<String> {
    let value = match name {
        "variance-sweep" => serde_json::to_value(SweepConfig::default())?,
        "tradeoff" => serde_json::to_value(SweepConfig::tradeoff())?,
        "graph-tradeoff" => serde_json::to_value(SweepConfig::graph_tradeoff())?,
        "homogeneity" => serde_json::to_value(HomogeneityConfig::default())?,
        "bound" => serde_json::to_value(BoundConfig::default())?,
        "distribution" => serde_json::to_value(DistributionConfig::default())?,
        "baseline-bias" => serde_json::to_value(BaselineConfig::default())?,
        other => return Err(unknown(other)),
    };
    Ok(serde_json::to_string_pretty(&value)?)
}

fn unknown(name: &str) -> Error {
    Error::InvalidParams(format!("unknown experiment {name:?}; expected one of {}", EXPERIMENTS.join(", ")))
}

fn sweep_config(name: &str, config: Option<&str>, seed: Option<u64>) -> Result<SweepConfig> {
    let mut cfg = match (name, config) {
        (_, Some(text)) => serde_json::from_str(text)?,
        ("tradeoff", None) => SweepConfig::tradeoff(),
        ("graph-tradeoff", None) => SweepConfig::graph_tradeoff(),
        _ => SweepConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Runs a named experiment and writes `<name>.csv`, any extra tables, and
/// `manifest.json` into `options.out_dir`. Returns the manifest.
///
/// `config` is the JSON text of the experiment's config; `None` uses the
/// defaults. The CSV depends only on the config and seed.
pub fn run_experiment(name: &str, config: Option<&str>, options: &RunOptions) -> Result<Manifest> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.threads)
        .build()
        .map_err(|e| Error::InvalidParams(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let (rows, extras, provenance, config_value) = pool.install(|| -> Result<_> {
        let mut extras: Vec<(String, Vec<u8>)> = Vec::new();
        let (rows, prov, value) = match name {
            "variance-sweep" | "tradeoff" | "graph-tradeoff" => {
                let cfg = sweep_config(name, config, options.seed)?;
                let prov = Provenance::new(&cfg, cfg.seed)?;
                (run_variance_sweep(&cfg, &prov, name)?, prov, serde_json::to_value(&cfg)?)
            }
            "homogeneity" => {
                let cfg: HomogeneityConfig = resolve(config, options.seed)?;
                let prov = Provenance::new(&cfg, cfg.seed)?;
                (run_homogeneity_sweep(&cfg, &prov)?, prov, serde_json::to_value(&cfg)?)
            }
            "bound" => {
                let cfg: BoundConfig = resolve(config, options.seed)?;
                let prov = Provenance::new(&cfg, cfg.seed)?;
                (run_bound_validation(&cfg, &prov)?, prov, serde_json::to_value(&cfg)?)
            }
            "distribution" => {
                let cfg: DistributionConfig = resolve(config, options.seed)?;
                let prov = Provenance::new(&cfg, cfg.seed)?;
                let out = run_distribution_check(&cfg, &prov)?;
                extras.push((format!("{name}_samples.csv"), samples_csv(&out.deviations)?));
                (out.rows, prov, serde_json::to_value(&cfg)?)
            }
            "baseline-bias" => {
                let cfg: BaselineConfig = resolve(config, options.seed)?;
                let prov = Provenance::new(&cfg, cfg.seed)?;
                (run_baseline_bias(&cfg, &prov)?, prov, serde_json::to_value(&cfg)?)
            }
            other => return Err(unknown(other)),
        };
        Ok((rows, extras, prov, value))
    })?;
    let runtime_ms = start.elapsed().as_millis();

    fs::create_dir_all(&options.out_dir)?;
    let main = format!("{name}.csv");
    write_rows(&rows, &options.out_dir.join(&main))?;
    let mut outputs = vec![main];
    for (file, bytes) in extras {
        fs::write(options.out_dir.join(&file), bytes)?;
        outputs.push(file);
    }
    let manifest = Manifest {
        experiment: name.to_string(),
        seed: provenance.seed,
        config_hash: provenance.config_hash,
        version: env!("CARGO_PKG_VERSION").to_string(),
        threads: pool.current_num_threads(),
        runtime_ms,
        outputs,
        config: config_value,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(options.out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

/// Writes rows as CSV with a header.
pub fn write_rows(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn samples_csv(deviations: &[f64]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["replication", "deviation"])?;
    for (r, d) in deviations.iter().enumerate() {
        w.write_record([r.to_string(), d.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}
