use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use clusterdp::accounting::{
    account, calibrate, calibrate_uniform_lambda, cluster_dp_eps_delta, uniform_prior_eps_delta, PrivacyReport,
};
use clusterdp::estimation::{tau_q, tau_uniform};
use clusterdp::experiments::{default_config, run_experiment, RunOptions, EXPERIMENTS};
use clusterdp::io::{read_observed_csv, read_population_csv, read_release, write_population_csv, write_release};
use clusterdp::mechanisms::{cluster_dp, noisy_histogram, noisy_ht, uniform_prior_dp};
use clusterdp::simdata::{gen_gmm, gen_graph_population, GmmConfig, GraphPopConfig};
use clusterdp::variance::{baseline_gaps, cluster_dp_variance_bound, uniform_prior_variance, AVariant};
use clusterdp::{
    model::draw_design, Design, DesignCounts, Epsilon, Error, MechanismKind, MechanismParams, NoiseScale, OutcomeSpace,
    PopulationDataset, SeedTree, Stream,
};

const EXIT_VALIDATION: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(name = "clusterdp", version, about = "Label-private treatment-effect estimation with cluster-aware priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population CSV.
    Generate {
        #[command(subcommand)]
        model: GenerateModel,
    },
    /// Run a mechanism on a population and write the release.
    Privatize(PrivatizeArgs),
    /// Estimate the treatment effect from a release.
    Estimate(EstimateArgs),
    /// Privacy loss of a parameter set.
    Account(AccountArgs),
    /// Resampling probability for a privacy target.
    Calibrate(CalibrateArgs),
    /// Analytic variance of a mechanism on a population.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo experiment.
    Experiment(ExperimentArgs),
}

#[derive(Subcommand)]
enum GenerateModel {
    /// Gaussian mixture over clusters, quantized to integers.
    Gmm {
        /// JSON config; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Community graph whose cluster features drive the outcomes.
    Graph {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PopulationInput {
    /// Population CSV (`unit_id,cluster,y0,y1`); an assignment is drawn.
    #[arg(long, conflicts_with = "observed", required_unless_present = "observed")]
    population: Option<PathBuf>,
    /// Observed-data CSV (`unit_id,cluster,z,y`) carrying its own assignment.
    #[arg(long)]
    observed: Option<PathBuf>,
    /// Outcome values, `a,b,c` or `lo..=hi`.
    #[arg(long, allow_hyphen_values = true)]
    space: OutcomeSpace,
}

#[derive(Args)]
struct ParamArgs {
    #[arg(long, default_value = "cluster-dp")]
    mechanism: MechanismKind,
    #[arg(long)]
    gamma: Option<f64>,
    /// Laplace scale; `inf` skips the noise.
    #[arg(long, default_value = "10")]
    sigma: NoiseScale,
    #[arg(long)]
    lambda: Option<f64>,
    /// Privacy target; with `--delta`, calibrates lambda.
    #[arg(long)]
    epsilon: Option<Epsilon>,
    #[arg(long, default_value_t = 1e-4)]
    delta: f64,
}

#[derive(Args)]
struct PrivatizeArgs {
    #[command(flatten)]
    input: PopulationInput,
    #[command(flatten)]
    params: ParamArgs,
    /// Treated share per cluster when drawing an assignment.
    #[arg(long, default_value_t = 0.5)]
    treated_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Release CSV (unit-level mechanisms) or JSON (aggregate baselines).
    #[arg(long)]
    out: PathBuf,
    /// JSON sidecar; defaults to `<out>.json`.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorKind {
    /// Debiased estimator (uses the sidecar's debias rows).
    Debiased,
    UniformStratified,
    UniformPooled,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    release: PathBuf,
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "debiased")]
    estimator: EstimatorKind,
}

#[derive(Args)]
struct AccountArgs {
    #[command(flatten)]
    params: ParamArgs,
    /// Outcome-space size.
    #[arg(long)]
    k: usize,
    /// Resampling budget for an (epsilon, delta) report instead of pure DP.
    #[arg(long)]
    eps_tilde: Option<f64>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, default_value = "cluster-dp")]
    mechanism: MechanismKind,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    delta: f64,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value = "10")]
    sigma: NoiseScale,
    /// Outcome-space size (uniform prior).
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: PopulationInput,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long, default_value_t = 0.5)]
    treated_fraction: f64,
    #[arg(long, value_enum, default_value = "grouped")]
    variant: VariantArg,
    /// Uniform prior: estimate ignoring clusters.
    #[arg(long)]
    pooled: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Grouped,
    Expanded,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment name, or `list`.
    name: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Print the default config and exit.
    #[arg(long)]
    print_config: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_infeasible_calibration() => EXIT_INFEASIBLE,
        Some(Error::Io(_)) => 1,
        Some(_) => EXIT_VALIDATION,
        None => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate { model } => generate(model),
        Command::Privatize(args) => privatize(args),
        Command::Estimate(args) => estimate(args),
        Command::Account(args) => account_cmd(args),
        Command::Calibrate(args) => calibrate_cmd(args),
        Command::Analyze(args) => analyze(args),
        Command::Experiment(args) => experiment(args),
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn missing(flag: &str) -> Error {
    Error::InvalidParams(format!("{flag} is required"))
}

fn print_text(text: &str) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{text}")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn write_population(pop: &PopulationDataset, out: &Path) -> anyhow::Result<()> {
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_population_csv(pop, BufWriter::new(file))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        units: usize,
        clusters: usize,
        space: &'a OutcomeSpace,
        ate: f64,
    }
    print_json(&Summary { units: pop.len(), clusters: pop.num_clusters(), space: pop.space(), ate: pop.ate() })
}

fn generate(model: GenerateModel) -> anyhow::Result<()> {
    match model {
        GenerateModel::Gmm { config, beta, sizes, seed, out } => {
            let mut cfg: GmmConfig = match config {
                Some(path) => read_json(&path)?,
                None => GmmConfig::default(),
            };
            if let Some(b) = beta {
                cfg.beta = b;
            }
            if let Some(s) = sizes {
                cfg.cluster_sizes = s;
            }
            let pop = gen_gmm(&cfg, &mut SeedTree::new(seed).stream(Stream::Population, 0))?;
            write_population(&pop, &out)
        }
        GenerateModel::Graph { config, seed, out } => {
            let cfg: GraphPopConfig = match config {
                Some(path) => read_json(&path)?,
                None => GraphPopConfig::default(),
            };
            let graph = gen_graph_population(&cfg, &mut SeedTree::new(seed).stream(Stream::Graph, 0))?;
            write_population(&graph.population, &out)
        }
    }
}

/// Loads the population and its design (drawn, or read from observed data).
fn load_input(input: &PopulationInput, fraction: f64, tree: &SeedTree) -> anyhow::Result<(PopulationDataset, Design)> {
    if let Some(path) = &input.observed {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        return Ok(read_observed_csv(BufReader::new(file), &input.space)?);
    }
    let path = input.population.as_ref().expect("clap requires one input");
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let pop = read_population_csv(BufReader::new(file), &input.space)?;
    let counts = DesignCounts::from_fraction(&pop.cluster_sizes(), fraction)?;
    let design = draw_design(&pop, &counts, &mut tree.stream(Stream::Assignment, 0))?;
    Ok((pop, design))
}

/// Builds mechanism parameters, calibrating lambda when an epsilon target is
/// given. The report is the calibrated (epsilon, delta), or pure DP otherwise.
fn resolve_params(args: &ParamArgs, k: usize) -> anyhow::Result<(MechanismParams, PrivacyReport)> {
    let mut calibrated = None;
    let params = match args.mechanism {
        MechanismKind::ClusterDp | MechanismKind::ClusterFreeDp => {
            let gamma = args.gamma.ok_or_else(|| missing("--gamma"))?;
            let lambda = match (args.lambda, args.epsilon) {
                (Some(l), None) => l,
                (None, Some(eps)) => {
                    let cal = calibrate(eps.to_f64_lossy(), args.delta, gamma, args.sigma)?;
                    calibrated = Some(cluster_dp_eps_delta(gamma, args.sigma, cal.lambda, cal.eps_tilde));
                    cal.lambda
                }
                _ => return Err(Error::InvalidParams("give exactly one of --lambda or --epsilon".into()).into()),
            };
            if args.mechanism == MechanismKind::ClusterDp {
                MechanismParams::cluster_dp(gamma, args.sigma, lambda)
            } else {
                MechanismParams::cluster_free_dp(gamma, args.sigma, lambda)
            }
        }
        MechanismKind::UniformPriorDp => {
            let lambda = match (args.lambda, args.epsilon) {
                (Some(l), None) => l,
                (None, Some(eps)) => {
                    let lambda = calibrate_uniform_lambda(eps.to_f64_lossy(), args.delta, k)?;
                    calibrated = Some(uniform_prior_eps_delta(k, lambda, eps.to_f64_lossy()));
                    lambda
                }
                _ => return Err(Error::InvalidParams("give exactly one of --lambda or --epsilon".into()).into()),
            };
            MechanismParams::uniform_prior(k, lambda)
        }
        MechanismKind::NoisyHt | MechanismKind::NoisyHistogram => {
            let eps = args.epsilon.ok_or_else(|| missing("--epsilon"))?;
            if args.mechanism == MechanismKind::NoisyHt {
                MechanismParams::noisy_ht(eps)
            } else {
                MechanismParams::noisy_histogram(eps)
            }
        }
    };
    params.validate(k)?;
    let report = calibrated.unwrap_or_else(|| account(&params, k));
    Ok((params, report))
}

fn privatize(args: PrivatizeArgs) -> anyhow::Result<()> {
    let tree = SeedTree::new(args.seed);
    let (pop, design) = load_input(&args.input, args.treated_fraction, &tree)?;
    let (params, report) = resolve_params(&args.params, pop.space().len())?;
    let release = match params.kind {
        MechanismKind::ClusterDp | MechanismKind::ClusterFreeDp => {
            let mut lap = tree.stream(Stream::Laplace, 0);
            let mut res = tree.stream(Stream::Resampling, 0);
            cluster_dp(&pop, &design, &params, &mut lap, &mut res)?.1
        }
        MechanismKind::UniformPriorDp => {
            uniform_prior_dp(&pop, &design, params.lambda, &mut tree.stream(Stream::Resampling, 0))?
        }
        MechanismKind::NoisyHt | MechanismKind::NoisyHistogram => {
            let eps = params.epsilon.unwrap_or(Epsilon::Infinite);
            let mut rng = tree.stream(Stream::Laplace, 0);
            let noisy = if params.kind == MechanismKind::NoisyHt {
                noisy_ht(&pop, &design, eps, &mut rng)?
            } else {
                noisy_histogram(&pop, &design, eps, &mut rng)?
            };
            #[derive(Serialize)]
            struct Aggregate {
                params: MechanismParams,
                estimate: f64,
                noise_scales: Vec<f64>,
            }
            let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
            let mut w = BufWriter::new(file);
            serde_json::to_writer_pretty(
                &mut w,
                &Aggregate { params, estimate: noisy.estimate, noise_scales: noisy.noise_scales },
            )?;
            writeln!(w)?;
            return Ok(());
        }
    };
    let sidecar = args.sidecar.unwrap_or_else(|| sidecar_path(&args.out));
    let csv = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let json = File::create(&sidecar).with_context(|| format!("creating {}", sidecar.display()))?;
    write_release(&release, BufWriter::new(csv), BufWriter::new(json))?;
    print_json(&report)
}

fn sidecar_path(release: &Path) -> PathBuf {
    let mut name = release.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn estimate(args: EstimateArgs) -> anyhow::Result<()> {
    let sidecar = args.sidecar.unwrap_or_else(|| sidecar_path(&args.release));
    let csv = File::open(&args.release).with_context(|| format!("opening {}", args.release.display()))?;
    let json = File::open(&sidecar).with_context(|| format!("opening {}", sidecar.display()))?;
    let release = read_release(BufReader::new(csv), BufReader::new(json))?;
    #[derive(Serialize)]
    struct Output {
        estimate: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        per_cluster: Option<Vec<f64>>,
    }
    let out = match args.estimator {
        EstimatorKind::Debiased => {
            let e = tau_q(&release)?;
            Output { estimate: e.estimate, per_cluster: Some(e.per_cluster) }
        }
        EstimatorKind::UniformStratified => Output { estimate: tau_uniform(&release, true)?, per_cluster: None },
        EstimatorKind::UniformPooled => Output { estimate: tau_uniform(&release, false)?, per_cluster: None },
    };
    print_json(&out)
}

fn account_cmd(args: AccountArgs) -> anyhow::Result<()> {
    let (params, calibrated) = resolve_params(&args.params, args.k)?;
    let report = match (args.eps_tilde, params.kind) {
        (Some(et), MechanismKind::ClusterDp | MechanismKind::ClusterFreeDp) => {
            cluster_dp_eps_delta(params.gamma, params.sigma, params.lambda, et)
        }
        (Some(et), MechanismKind::UniformPriorDp) => uniform_prior_eps_delta(args.k, params.lambda, et),
        _ => calibrated,
    };
    print_json(&report)
}

fn calibrate_cmd(args: CalibrateArgs) -> anyhow::Result<()> {
    match args.mechanism {
        MechanismKind::ClusterDp | MechanismKind::ClusterFreeDp => {
            let gamma = args.gamma.ok_or_else(|| missing("--gamma"))?;
            print_json(&calibrate(args.epsilon, args.delta, gamma, args.sigma)?)
        }
        MechanismKind::UniformPriorDp => {
            let k = args.k.ok_or_else(|| missing("--k"))?;
            let lambda = calibrate_uniform_lambda(args.epsilon, args.delta, k)?;
            print_json(&serde_json::json!({ "lambda": lambda }))
        }
        other => bail!(Error::InvalidParams(format!("{other} has no resampling probability to calibrate"))),
    }
}

fn analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let (pop, design) = load_input(&args.input, args.treated_fraction, &SeedTree::new(0))?;
    let counts = design.counts();
    let (params, _) = resolve_params(&args.params, pop.space().len())?;
    let variant = match args.variant {
        VariantArg::Grouped => AVariant::Grouped,
        VariantArg::Expanded => AVariant::Expanded,
    };
    match params.kind {
        MechanismKind::ClusterDp => print_json(&cluster_dp_variance_bound(&pop, counts, &params, variant)?),
        MechanismKind::UniformPriorDp => {
            print_json(&uniform_prior_variance(&pop, counts, params.lambda, !args.pooled)?)
        }
        MechanismKind::NoisyHt | MechanismKind::NoisyHistogram => {
            print_json(&baseline_gaps(&pop, counts, params.epsilon.unwrap_or(Epsilon::Infinite))?)
        }
        MechanismKind::ClusterFreeDp => {
            bail!(Error::InvalidParams("no closed-form variance for cluster-free-dp".into()))
        }
    }
}

fn experiment(args: ExperimentArgs) -> anyhow::Result<()> {
    if args.name == "list" {
        return print_text(&EXPERIMENTS.join("\n"));
    }
    if args.print_config {
        return print_text(&default_config(&args.name)?);
    }
    let config = match &args.config {
        Some(path) => Some(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?),
        None => None,
    };
    let out_dir = args.out.ok_or_else(|| missing("--out"))?;
    let options = RunOptions { seed: args.seed, threads: args.threads, out_dir };
    let manifest = run_experiment(&args.name, config.as_deref(), &options)?;
    log::info!("{} finished in {} ms", manifest.experiment, manifest.runtime_ms);
    print_json(&manifest)
}
