//! `lt` — command-line harness for the latent-transport library.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric
//! failure (divergence, instability, non-PSD inputs).

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use latent_transport::benchsuite::{
    ablation_suite, generate_scenario, run_suite, suite_hash, write_report, Method, Severity,
};
use latent_transport::diffusion::{
    euler_maruyama, euler_maruyama_trajectory, fokker_planck_1d, histogram_tv_distance,
    ou_stationary_variance, DensityGrid, SdeSpec,
};
use latent_transport::error::Error;
use latent_transport::evalx;
use latent_transport::measures::{
    gaussian_fit_auto, sample_gaussian, DomainTag, GaussianMeasure, ParticleCloud,
};
use latent_transport::numkit::{Matrix, RngStream};
use latent_transport::pacbayes::{transfer_bound, transfer_bound_tight};
use latent_transport::sinkhorn::{cost_matrix, sinkhorn_plan, transport_cost};
use latent_transport::trainer::{train, TrainConfig, TrainOptions, TrainedModel};
use latent_transport::transport::TransportParams;

use config::FileConfig;

#[derive(Parser)]
#[command(
    name = "lt",
    about = "Stochastic latent transport for domain adaptation: training, benchmarks, entropic OT, PAC-Bayes bounds, and SDE simulation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the transport operator on a generated shift scenario
    Train(TrainArgs),
    /// Run the benchmark or ablation suite and write a report directory
    Bench(BenchArgs),
    /// Entropic transport cost between two particle-cloud CSV files
    Sinkhorn(SinkhornArgs),
    /// Evaluate both PAC-Bayesian transfer bounds (standard and tight)
    Bound(BoundArgs),
    /// Euler-Maruyama simulation with optional Fokker-Planck cross-check
    Simulate(SimulateArgs),
    /// Evaluation metrics on saved clouds and models
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct CommonConfig {
    /// Flat key = value config file; flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default ./lt-out, or $LT_OUTPUT_DIR when set)
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl CommonConfig {
    fn load(&self) -> Result<FileConfig, Error> {
        match &self.config {
            Some(path) => FileConfig::load(path),
            None => Ok(FileConfig::default()),
        }
    }

    fn resolve_out_dir(&self, file: &FileConfig) -> PathBuf {
        if let Some(dir) = &self.out_dir {
            return dir.clone();
        }
        if let Ok(env_dir) = std::env::var("LT_OUTPUT_DIR") {
            if !env_dir.is_empty() {
                return PathBuf::from(env_dir);
            }
        }
        file.out_dir
            .as_ref()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("lt-out"))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonConfig,
    /// Shift severity: synthetic, moderate or severe
    #[arg(long, default_value = "moderate")]
    severity: String,
    /// Latent dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Source training samples
    #[arg(long)]
    n_s: Option<usize>,
    /// Target training samples
    #[arg(long)]
    n_t: Option<usize>,
    /// Scenario and training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Transport weight α
    #[arg(long)]
    alpha: Option<f64>,
    /// PAC weight β
    #[arg(long)]
    beta: Option<f64>,
    /// Alignment weight λ inside the transport functional
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonConfig,
    /// Suite to run: default (severities × methods) or ablation
    #[arg(long, default_value = "default")]
    suite: String,
    /// Comma-separated run seeds
    #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Severities for the default suite
    #[arg(long, value_delimiter = ',')]
    severities: Option<Vec<String>>,
    /// Methods for the default suite
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Scenario severity for the ablation suite
    #[arg(long, default_value = "moderate")]
    ablation_severity: String,
    /// Scenario seed for the ablation suite
    #[arg(long, default_value_t = 1)]
    ablation_scenario_seed: u64,
    /// Latent dimension
    #[arg(long)]
    dim: Option<usize>,
    /// Source training samples
    #[arg(long)]
    n_s: Option<usize>,
    /// Target training samples
    #[arg(long)]
    n_t: Option<usize>,
    /// Concurrent suite cells
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct SinkhornArgs {
    /// Source cloud CSV
    #[arg(long)]
    x: PathBuf,
    /// Target cloud CSV
    #[arg(long)]
    y: PathBuf,
    /// Entropic regularization strength
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    /// Fixed iteration count
    #[arg(long, default_value_t = 20)]
    k: usize,
}

#[derive(Args)]
struct BoundArgs {
    /// Empirical source risk
    #[arg(long, default_value_t = 0.0)]
    risk: f64,
    /// Latent 2-Wasserstein distance
    #[arg(long, default_value_t = 0.0)]
    w2: f64,
    /// Posterior/prior KL divergence
    #[arg(long, default_value_t = 0.0)]
    kl: f64,
    /// Source sample count
    #[arg(long, default_value_t = 100)]
    ns: usize,
    /// Confidence parameter in (0, 1)
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonConfig,
    /// State dimension
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Mean-reversion rate (drift = -theta (z - attractor))
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    /// Diffusion scale per coordinate
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Time step
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    /// Number of steps
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Particle count
    #[arg(long, default_value_t = 10000)]
    particles: usize,
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write per-snapshot trajectory CSV (large output)
    #[arg(long)]
    export_trajectories: bool,
    /// Snapshot cadence for the trajectory export, in steps
    #[arg(long, default_value_t = 10)]
    snapshot_every: usize,
    /// Cross-check the terminal histogram against the 1-D Fokker-Planck
    /// solution (dim must be 1)
    #[arg(long)]
    fp_compare: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// Transported cloud CSV
    #[arg(long)]
    transported: PathBuf,
    /// Target cloud CSV
    #[arg(long)]
    target: PathBuf,
    /// Optional transport model JSON (adds variance and calibration)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Entropic regularization for the energy metric
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    /// Sinkhorn iterations for the energy metric
    #[arg(long, default_value_t = 20)]
    k: usize,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Parse { .. }
        | Error::InvalidArgument(_)
        | Error::BadDelta(_)
        | Error::BadEpsilon(_)
        | Error::UnknownMethod(_)
        | Error::DimMismatch { .. }
        | Error::ZeroVariance(_)
        | Error::EmptyTrace
        | Error::Io(_)
        | Error::Json(_) => 2,
        Error::NotPsd { .. }
        | Error::Asymmetric { .. }
        | Error::NumericOverflow(_)
        | Error::Divergence(_)
        | Error::UnstableStep { .. }
        | Error::NonpositiveTheta(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Sinkhorn(args) => cmd_sinkhorn(args),
        Command::Bound(args) => cmd_bound(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Metrics(args) => cmd_metrics(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    scenario: &'a str,
    severity: String,
    dim: usize,
    n_s: usize,
    n_t: usize,
    seed: u64,
    config: &'a TrainConfig,
    version: &'a str,
    epochs_run: usize,
    stopped_early: bool,
    initial_w2_energy: f64,
    final_w2_energy: f64,
    final_geometry: f64,
    final_variance_trace: f64,
    smoothness_probe: f64,
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let file = args.common.load()?;
    let severity: Severity = args.severity.parse()?;
    let dim = args.dim.unwrap_or(file.dim);
    let n_s = args.n_s.unwrap_or(file.n_s);
    let n_t = args.n_t.unwrap_or(file.n_t);
    let mut config = file.train.clone();
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(alpha) = args.alpha {
        config.alpha = alpha;
    }
    if let Some(beta) = args.beta {
        config.beta = beta;
    }
    if let Some(lambda) = args.lambda {
        config.lambda = lambda;
    }
    config.validate()?;

    let scenario = generate_scenario(severity, dim, n_s, n_t, config.seed)?;
    let (source, target) = scenario.train_data(config.seed);
    let eval = scenario.eval_context();
    let options = TrainOptions::proposed(dim);
    let (model, trace) = train(
        &source.cloud,
        &source.labels,
        &target.cloud,
        &config,
        &options,
        &eval,
    )?;

    let out_root = args.common.resolve_out_dir(&file);
    let hash = suite_hash(&[
        "train".into(),
        scenario.name.clone(),
        format!("{config:?}"),
    ]);
    let run_dir = out_root.join(format!("train_{hash}"));
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(
        run_dir.join("model.json"),
        serde_json::to_string_pretty(&model)?,
    )?;
    std::fs::write(run_dir.join("trace.csv"), trace.steps_csv())?;
    std::fs::write(run_dir.join("trace_epoch.csv"), trace.epochs_csv())?;
    let manifest = TrainManifest {
        scenario: &scenario.name,
        severity: severity.to_string(),
        dim,
        n_s,
        n_t,
        seed: config.seed,
        config: &config,
        version: env!("CARGO_PKG_VERSION"),
        epochs_run: model.summary.epochs_run,
        stopped_early: model.summary.stopped_early,
        initial_w2_energy: model.summary.initial_w2_energy,
        final_w2_energy: model.summary.final_w2_energy,
        final_geometry: model.summary.final_geometry,
        final_variance_trace: model.summary.final_variance_trace,
        smoothness_probe: model.summary.smoothness_probe,
    };
    std::fs::write(
        run_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!("{}", run_dir.display());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Error> {
    let file = args.common.load()?;
    let dim = args.dim.unwrap_or(file.dim);
    let n_s = args.n_s.unwrap_or(file.n_s);
    let n_t = args.n_t.unwrap_or(file.n_t);
    let jobs = args.jobs.or(file.jobs).unwrap_or(1).max(1);
    let config = file.train.clone();
    config.validate()?;
    if args.seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed required".into()));
    }

    let report = match args.suite.as_str() {
        "default" => {
            let severities: Vec<Severity> = match &args.severities {
                Some(list) => list
                    .iter()
                    .map(|s| s.parse())
                    .collect::<Result<Vec<_>, _>>()?,
                None => Severity::ALL.to_vec(),
            };
            let methods: Vec<Method> = match &args.methods {
                Some(list) => list
                    .iter()
                    .map(|s| s.parse())
                    .collect::<Result<Vec<_>, _>>()?,
                None => Method::ALL.to_vec(),
            };
            run_suite(
                &severities,
                &methods,
                &args.seeds,
                dim,
                n_s,
                n_t,
                &config,
                jobs,
            )?
        }
        "ablation" => {
            let severity: Severity = args.ablation_severity.parse()?;
            let scenario =
                generate_scenario(severity, dim, n_s, n_t, args.ablation_scenario_seed)?;
            ablation_suite(&scenario, &config, &args.seeds, jobs)?
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown suite `{other}` (valid suites: default, ablation)"
            )))
        }
    };

    let out_root = args.common.resolve_out_dir(&file);
    let hash = suite_hash(&[
        format!("suite={}", args.suite),
        format!("severities={:?}", args.severities),
        format!("methods={:?}", args.methods),
        format!("seeds={:?}", args.seeds),
        format!("ablation={}/{}", args.ablation_severity, args.ablation_scenario_seed),
        format!("dim={dim} n_s={n_s} n_t={n_t}"),
        format!("{config:?}"),
    ]);
    let run_dir = write_report(&report, &out_root, &hash)?;
    println!("{}", run_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct SinkhornOutput {
    cost: f64,
    marginal_error: f64,
    iterations_run: usize,
}

fn cmd_sinkhorn(args: SinkhornArgs) -> Result<(), Error> {
    let x = ParticleCloud::load_csv(&args.x)?;
    let y = ParticleCloud::load_csv(&args.y)?;
    if x.dim() != y.dim() {
        return Err(Error::DimMismatch {
            context: "cloud files",
            left: x.dim(),
            right: y.dim(),
        });
    }
    let c = cost_matrix(&x, &y)?;
    let plan = sinkhorn_plan(&c, args.eps, args.k)?;
    let out = SinkhornOutput {
        cost: transport_cost(&plan, &c)?,
        marginal_error: plan.marginal_error(),
        iterations_run: plan.iterations_run(),
    };
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn cmd_bound(args: BoundArgs) -> Result<(), Error> {
    let standard = transfer_bound(args.risk, args.w2, args.kl, args.ns, args.delta)?;
    let tight = transfer_bound_tight(args.risk, args.w2, args.kl, args.ns, args.delta)?;
    let out = serde_json::json!({
        "standard": standard,
        "tight": tight,
    });
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

#[derive(Serialize)]
struct SimulateOutput {
    dim: usize,
    particles: usize,
    horizon: f64,
    terminal_mean: Vec<f64>,
    terminal_variance: Vec<f64>,
    stationary_variance: Option<f64>,
    fp_total_variation: Option<f64>,
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let file = args.common.load()?;
    if args.fp_compare && args.dim != 1 {
        return Err(Error::InvalidArgument(
            "--fp-compare requires --dim 1".into(),
        ));
    }
    let spec = SdeSpec::new(
        Matrix::identity(args.dim).scale(args.theta),
        vec![0.0; args.dim],
        vec![args.sigma; args.dim],
        args.step,
        args.steps,
    )?;
    let mut init_rng = RngStream::new(args.seed, 0x51);
    let z0 = sample_gaussian(
        &GaussianMeasure::standard(args.dim),
        args.particles,
        &mut init_rng,
        DomainTag::Source,
    )?;
    let noise = RngStream::new(args.seed, 0x52);
    let terminal = euler_maruyama(&spec, &z0, &noise)?;

    let mean = terminal.sample_mean();
    let mut variance = vec![0.0; args.dim];
    for p in terminal.iter_points() {
        for k in 0..args.dim {
            let d = p[k] - mean[k];
            variance[k] += d * d;
        }
    }
    variance
        .iter_mut()
        .for_each(|v| *v /= terminal.len() as f64);

    let fp_total_variation = if args.fp_compare {
        let span = 8.0f64.max(mean[0].abs() + 6.0);
        let grid = DensityGrid::from_fn(-span, span, 400, |z| (-0.5 * z * z).exp())?;
        let dz = grid.cell_width();
        let horizon = spec.horizon();
        let fp_step_bound = if args.sigma > 0.0 {
            0.4 * dz * dz / (args.sigma * args.sigma)
        } else {
            args.step
        };
        let fp_steps = (horizon / fp_step_bound).ceil().max(1.0) as usize;
        let fp = fokker_planck_1d(
            args.theta,
            0.0,
            args.sigma,
            &grid,
            horizon / fp_steps as f64,
            fp_steps,
        )?;
        Some(histogram_tv_distance(&terminal, &fp, 50))
    } else {
        None
    };

    let out = SimulateOutput {
        dim: args.dim,
        particles: args.particles,
        horizon: spec.horizon(),
        terminal_mean: mean,
        terminal_variance: variance,
        stationary_variance: if args.theta > 0.0 {
            Some(ou_stationary_variance(args.theta, args.sigma)?)
        } else {
            None
        },
        fp_total_variation,
    };

    if args.export_trajectories {
        let out_root = args.common.resolve_out_dir(&file);
        std::fs::create_dir_all(&out_root)?;
        let snapshots =
            euler_maruyama_trajectory(&spec, &z0, &RngStream::new(args.seed, 0x52), args.snapshot_every)?;
        let mut csv = String::from("time,particle_id");
        for k in 0..args.dim {
            csv.push_str(&format!(",z{k}"));
        }
        csv.push('\n');
        for (time, cloud) in &snapshots {
            for (pid, p) in cloud.iter_points().enumerate() {
                csv.push_str(&format!("{time},{pid}"));
                for v in p {
                    csv.push_str(&format!(",{v}"));
                }
                csv.push('\n');
            }
        }
        let hash = suite_hash(&["simulate".into(), format!("{args_desc:?}", args_desc = (
            args.dim, args.theta.to_bits(), args.sigma.to_bits(), args.step.to_bits(),
            args.steps, args.particles, args.seed, args.snapshot_every,
        ))]);
        let path = out_root.join(format!("trajectory_{hash}.csv"));
        std::fs::write(&path, csv)?;
        eprintln!("trajectories: {}", path.display());
    }

    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> Result<(), Error> {
    let transported = ParticleCloud::load_csv(&args.transported)?;
    let target = ParticleCloud::load_csv(&args.target)?;
    if transported.dim() != target.dim() {
        return Err(Error::DimMismatch {
            context: "cloud files",
            left: transported.dim(),
            right: target.dim(),
        });
    }
    let target_model = gaussian_fit_auto(&target);
    let transported_model = gaussian_fit_auto(&transported);
    let geometry = evalx::geometry_discrepancy(&transported, &target_model, &transported_model)?;
    let energy = latent_transport::sinkhorn::entropic_cost(&transported, &target, args.eps, args.k)?;

    let mut out = serde_json::json!({
        "geometry": geometry,
        "energy": energy,
    });
    if let Some(model_path) = &args.model {
        let model = load_model(model_path)?;
        out["variance_trace"] = evalx::variance_trace(&model.params).into();
        out["covariance_calibration"] =
            evalx::covariance_calibration(&model.params, &target_model)?.into();
    }
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn load_model(path: &Path) -> Result<TrainedModel, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::InvalidArgument(format!("cannot read model file {}: {e}", path.display()))
    })?;
    // Accept either a full TrainedModel or bare TransportParams.
    match serde_json::from_str::<TrainedModel>(&text) {
        Ok(model) => Ok(model),
        Err(_) => {
            let params: TransportParams = serde_json::from_str(&text)?;
            Ok(TrainedModel {
                params,
                head: Vec::new(),
                config: TrainConfig::default(),
                summary: latent_transport::trainer::TraceSummary {
                    epochs_run: 0,
                    stopped_early: false,
                    final_total_loss: 0.0,
                    initial_w2_energy: 0.0,
                    final_w2_energy: 0.0,
                    final_geometry: 0.0,
                    final_variance_trace: 0.0,
                    smoothness_probe: 0.0,
                },
            })
        }
    }
}
