//! Synthetic shift scenarios, baseline methods, and the experiment
//! runner.
//!
//! A scenario draws both domains from one latent factor space: a source
//! observation is the factor itself, a target observation is the factor
//! pushed through the scenario's shift map (mean offset plus a symmetric
//! covariance warp), and labels are a fixed linear function of the factor
//! in both domains. Adaptation quality then shows up directly in target
//! risk: a method that recovers the shift map predicts target labels
//! well, and one that ignores it does not. The target training pool is
//! deliberately small relative to the source pool; that is the low-data
//! regime the probabilistic method is built for.
//!
//! Baselines: `finetune_det` trains the head on raw source features with
//! the transport frozen at identity; `mmd_align` and `det_ot` freeze the
//! transport at the closed-form affine moment-matching map between the
//! fitted Gaussians (for Gaussian fits the two coincide; they stay
//! separate rows because mixture inputs would map per component);
//! `proposed` trains the full stochastic operator.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalx::{self, MetricRecord};
use crate::measures::{gaussian_fit_auto, DomainTag, GaussianMeasure, ParticleCloud};
use crate::numkit::{self, Matrix, RngStream};
use crate::trainer::{
    train, EvalContext, TraceLog, TraceSummary, TrainConfig, TrainOptions, TrainedModel,
};
use crate::transport::{TransportParams, MIN_NOISE_VAR};

/// Held-out pool size used by every metric evaluation.
pub const EVAL_SAMPLES: usize = 1000;

/// Subsample used for the per-epoch energy trace (full Sinkhorn on the
/// whole eval pool every epoch would dominate the run budget).
pub const ENERGY_TRACE_SUBSAMPLE: usize = 192;

/// Default suite shape: latent dimension and per-domain training pools.
/// The target pool is deliberately an order of magnitude smaller than
/// the source pool; scarce target data is the regime the probabilistic
/// method is built for.
pub const DEFAULT_DIM: usize = 16;
pub const DEFAULT_N_SOURCE: usize = 2000;
pub const DEFAULT_N_TARGET: usize = 64;

const STREAM_SCENARIO: u64 = 0x5ce0;
const STREAM_TRAIN_SOURCE: u64 = 0x7a10;
const STREAM_TRAIN_TARGET: u64 = 0x7a20;
const STREAM_TRAIN_LABEL: u64 = 0x7a30;
const STREAM_EVAL_SOURCE: u64 = 0xe001;
const STREAM_EVAL_LABEL: u64 = 0xe003;
const STREAM_EVAL_NOISE: u64 = 0xe004;

/// Shift severity; fixes the mean offset magnitude and the eigenvalue
/// spread of the covariance warp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Synthetic,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Synthetic, Severity::Moderate, Severity::Severe];

    /// `(mean shift magnitude, eigenvalue spread κ)`.
    pub fn shift_parameters(self) -> (f64, f64) {
        match self {
            Severity::Synthetic => (0.5, 1.5),
            Severity::Moderate => (1.5, 2.5),
            Severity::Severe => (3.0, 4.0),
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Severity::Synthetic => "synthetic",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Severity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Severity::Synthetic),
            "moderate" => Ok(Severity::Moderate),
            "severe" => Ok(Severity::Severe),
            other => Err(Error::InvalidArgument(format!(
                "unknown severity `{other}` (expected synthetic, moderate or severe)"
            ))),
        }
    }
}

/// A fully specified shifted-domain problem. Everything is a pure
/// function of `(severity, dim, n_s, n_t, seed)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub dim: usize,
    pub source: GaussianMeasure,
    pub target: GaussianMeasure,
    /// Symmetric PSD factor-to-target map; `target = N(mean, S S)`.
    pub shift_map: Matrix,
    /// Label function over factors: weights (d) then intercept.
    pub label_weights: Vec<f64>,
    pub noise_std: f64,
    pub n_s: usize,
    pub n_t: usize,
    pub seed: u64,
}

/// One domain's training or evaluation pool.
#[derive(Debug, Clone)]
pub struct DomainSample {
    pub cloud: ParticleCloud,
    pub labels: Vec<f64>,
}

impl Scenario {
    fn label_of(&self, factor: &[f64], noise: f64) -> f64 {
        let d = self.dim;
        let w = &self.label_weights[..d];
        let w0 = self.label_weights[d];
        w.iter().zip(factor).map(|(a, b)| a * b).sum::<f64>() + w0 + self.noise_std * noise
    }

    fn sample_source(&self, n: usize, rng: &mut RngStream, label_rng: &mut RngStream) -> DomainSample {
        let d = self.dim;
        let mut points = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let factor = rng.normal_vec(d);
            labels.push(self.label_of(&factor, label_rng.normal()));
            points.extend_from_slice(&factor);
        }
        DomainSample {
            cloud: ParticleCloud::new(d, DomainTag::Source, points),
            labels,
        }
    }

    fn sample_target(&self, n: usize, rng: &mut RngStream, label_rng: &mut RngStream) -> DomainSample {
        let d = self.dim;
        let mut points = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let factor = rng.normal_vec(d);
            labels.push(self.label_of(&factor, label_rng.normal()));
            let obs = self.shift_map.matvec(&factor);
            for k in 0..d {
                points.push(self.target.mean()[k] + obs[k]);
            }
        }
        DomainSample {
            cloud: ParticleCloud::new(d, DomainTag::Target, points),
            labels,
        }
    }

    /// Training pools for one run seed. Target labels exist but are never
    /// shown to a method; they are part of the generating process only.
    pub fn train_data(&self, sample_seed: u64) -> (DomainSample, DomainSample) {
        let mut src = RngStream::new(sample_seed, STREAM_TRAIN_SOURCE ^ self.seed);
        let mut tgt = RngStream::new(sample_seed, STREAM_TRAIN_TARGET ^ self.seed);
        let mut lab = RngStream::new(sample_seed, STREAM_TRAIN_LABEL ^ self.seed);
        (
            self.sample_source(self.n_s, &mut src, &mut lab),
            self.sample_target(self.n_t, &mut tgt, &mut lab),
        )
    }

    /// Frozen held-out pools, shared by every method on this scenario.
    ///
    /// The two pools are coupled through one factor draw (a paired
    /// design): the target observation of pair `i` is the shift map
    /// applied to the source observation's factor. Pairing removes the
    /// independent-sampling floor from the transport-energy metric and
    /// the common fit noise from method comparisons; each pool's
    /// marginal distribution is unchanged.
    pub fn eval_data(&self) -> (DomainSample, DomainSample) {
        let mut factors = RngStream::new(self.seed, STREAM_EVAL_SOURCE);
        let mut lab = RngStream::new(self.seed, STREAM_EVAL_LABEL);
        let d = self.dim;
        let mut src_points = Vec::with_capacity(EVAL_SAMPLES * d);
        let mut tgt_points = Vec::with_capacity(EVAL_SAMPLES * d);
        let mut labels = Vec::with_capacity(EVAL_SAMPLES);
        for _ in 0..EVAL_SAMPLES {
            let factor = factors.normal_vec(d);
            labels.push(self.label_of(&factor, lab.normal()));
            let shifted = self.shift_map.matvec(&factor);
            for k in 0..d {
                src_points.push(factor[k]);
                tgt_points.push(self.target.mean()[k] + shifted[k]);
            }
        }
        (
            DomainSample {
                cloud: ParticleCloud::new(d, DomainTag::Source, src_points),
                labels: labels.clone(),
            },
            DomainSample {
                cloud: ParticleCloud::new(d, DomainTag::Target, tgt_points),
                labels,
            },
        )
    }

    pub fn eval_context(&self) -> EvalContext {
        let (eval_source, eval_target) = self.eval_data();
        EvalContext {
            eval_source: eval_source.cloud,
            eval_target: eval_target.cloud,
            noise_seed: self.seed ^ STREAM_EVAL_NOISE,
            energy_subsample: ENERGY_TRACE_SUBSAMPLE,
        }
    }
}

/// Builds the scenario for a severity level. The rotation, shift
/// direction and label weights depend only on the seed, so severities at
/// equal seeds differ only through their `(s, κ)` scaling and their
/// Bures distances are strictly ordered.
pub fn generate_scenario(
    severity: Severity,
    dim: usize,
    n_s: usize,
    n_t: usize,
    seed: u64,
) -> Result<Scenario> {
    if dim == 0 || n_s == 0 || n_t == 0 {
        return Err(Error::InvalidArgument(
            "scenario needs dim >= 1 and nonempty pools".into(),
        ));
    }
    let mut rng = RngStream::new(seed, STREAM_SCENARIO);

    // Severity-independent draws, in a fixed order.
    let direction = {
        let g = rng.normal_vec(dim);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        g.into_iter().map(|v| v / norm).collect::<Vec<f64>>()
    };
    let rotation = random_rotation(dim, &mut rng);
    let mut label_weights = {
        let g = rng.normal_vec(dim);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        g.into_iter().map(|v| v / norm).collect::<Vec<f64>>()
    };
    label_weights.push(0.3 * rng.normal());

    let (shift, kappa) = severity.shift_parameters();
    let mean: Vec<f64> = direction.iter().map(|u| shift * u).collect();
    let eigenvalues: Vec<f64> = (0..dim)
        .map(|i| {
            if dim == 1 {
                kappa
            } else {
                // Log-spaced in [1/κ, κ].
                kappa.powf(2.0 * i as f64 / (dim as f64 - 1.0) - 1.0)
            }
        })
        .collect();
    let sqrt_eigs: Vec<f64> = eigenvalues.iter().map(|v| v.sqrt()).collect();
    let shift_map = rotation
        .matmul(&Matrix::diag(&sqrt_eigs))
        .matmul(&rotation.transpose())
        .symmetrize();
    let covariance = shift_map.matmul(&shift_map).symmetrize();

    Ok(Scenario {
        name: format!("{severity}-d{dim}-seed{seed}"),
        dim,
        source: GaussianMeasure::standard(dim),
        target: GaussianMeasure::new(mean, covariance)?,
        shift_map,
        label_weights,
        noise_std: 0.1,
        n_s,
        n_t,
        seed,
    })
}

/// Matched-domain scenario (target equals source); used by the identity
/// checks and the PAC-ablation variance probe.
pub fn matched_scenario(dim: usize, n_s: usize, n_t: usize, seed: u64) -> Result<Scenario> {
    let mut base = generate_scenario(Severity::Synthetic, dim, n_s, n_t, seed)?;
    base.name = format!("matched-d{dim}-seed{seed}");
    base.source = GaussianMeasure::standard(dim);
    base.target = GaussianMeasure::standard(dim);
    base.shift_map = Matrix::identity(dim);
    Ok(base)
}

/// Haar-ish random rotation: QR of a Gaussian matrix with the diagonal
/// sign fixed for determinism.
fn random_rotation(dim: usize, rng: &mut RngStream) -> Matrix {
    let g = nalgebra::DMatrix::from_fn(dim, dim, |_, _| rng.normal());
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    Matrix::from_fn(dim, dim, |i, j| {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * sign
    })
}

/// Baseline identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FinetuneDet,
    MmdAlign,
    DetOt,
    Proposed,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::FinetuneDet,
        Method::MmdAlign,
        Method::DetOt,
        Method::Proposed,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::FinetuneDet => "finetune_det",
            Method::MmdAlign => "mmd_align",
            Method::DetOt => "det_ot",
            Method::Proposed => "proposed",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune_det" => Ok(Method::FinetuneDet),
            "mmd_align" => Ok(Method::MmdAlign),
            "det_ot" => Ok(Method::DetOt),
            "proposed" => Ok(Method::Proposed),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

/// Closed-form affine map matching first and second moments of two
/// Gaussians: `A = Σt^{1/2} (Σt^{1/2} Σs Σt^{1/2})^{-1/2} Σt^{1/2}`,
/// `b = μt - A μs`. For Gaussians this is also the optimal (Monge)
/// transport map.
pub fn gaussian_moment_map(
    source: &GaussianMeasure,
    target: &GaussianMeasure,
) -> Result<TransportParams> {
    let sqrt_t = numkit::psd_sqrt(target.covariance())?;
    let inner = sqrt_t
        .matmul(source.covariance())
        .matmul(&sqrt_t)
        .symmetrize();
    let inner_inv_sqrt = numkit::psd_inv_sqrt(&inner, 1e-10)?;
    let a = sqrt_t.matmul(&inner_inv_sqrt).matmul(&sqrt_t);
    let mut b = a.matvec(source.mean());
    for (bi, (t, _)) in b.iter_mut().zip(target.mean().iter().zip(source.mean())) {
        *bi = t - *bi;
    }
    Ok(TransportParams::new(
        a,
        b,
        vec![MIN_NOISE_VAR.ln(); source.dim()],
    ))
}

/// Everything produced by one (method, seed) cell.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: MetricRecord,
    pub model: TrainedModel,
    pub trace: TraceLog,
}

/// Runs one baseline on a scenario: train (head only for the frozen
/// baselines, everything for `proposed`), then evaluate all four metrics
/// on the held-out pools.
pub fn run_baseline(
    method: Method,
    scenario: &Scenario,
    config: &TrainConfig,
    sample_seed: u64,
) -> Result<RunOutput> {
    let (source, target) = scenario.train_data(sample_seed);
    let options = match method {
        Method::FinetuneDet => {
            TrainOptions::frozen(TransportParams::identity(scenario.dim, MIN_NOISE_VAR))
        }
        Method::MmdAlign | Method::DetOt => {
            let g_s = gaussian_fit_auto(&source.cloud);
            let g_t = gaussian_fit_auto(&target.cloud);
            TrainOptions::frozen(gaussian_moment_map(&g_s, &g_t)?)
        }
        Method::Proposed => TrainOptions::proposed(scenario.dim),
    };
    run_with_options(method.to_string(), scenario, config, sample_seed, &options)
}

fn run_with_options(
    method_name: String,
    scenario: &Scenario,
    config: &TrainConfig,
    sample_seed: u64,
    options: &TrainOptions,
) -> Result<RunOutput> {
    let (source, target) = scenario.train_data(sample_seed);
    let eval = scenario.eval_context();
    let run_config = TrainConfig {
        seed: sample_seed,
        ..config.clone()
    };
    let (model, trace) = train(
        &source.cloud,
        &source.labels,
        &target.cloud,
        &run_config,
        options,
        &eval,
    )?;

    let (eval_source, eval_target) = scenario.eval_data();

    // Geometry on a fresh transported eval cloud with frozen noise.
    let mut noise_rng = RngStream::new(eval.noise_seed, 0xf0);
    let transported =
        crate::transport::transport_cloud(&model.params, &eval_source.cloud, &mut noise_rng)?;
    let target_model = gaussian_fit_auto(&eval_target.cloud);
    let transported_model = gaussian_fit_auto(&transported);
    let geometry = evalx::geometry_discrepancy(&transported, &target_model, &transported_model)?;

    // Risk: head applied to raw held-out target observations.
    let (w, b) = model.head.split_at(scenario.dim);
    let mut risk = 0.0;
    for (i, z) in eval_target.cloud.iter_points().enumerate() {
        let pred: f64 = w.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + b[0];
        let r = pred - eval_target.labels[i];
        risk += r * r;
    }
    risk /= eval_target.cloud.len() as f64;

    let mut energy_rng = RngStream::new(eval.noise_seed, 0xf1);
    let energy = evalx::transport_energy(
        &eval_source.cloud,
        &model.params,
        &eval_target.cloud,
        run_config.sinkhorn_eps,
        run_config.sinkhorn_k,
        &mut energy_rng,
    )?;

    let record = MetricRecord {
        method: method_name,
        seed: sample_seed,
        geometry,
        risk,
        variance: evalx::variance_trace(&model.params),
        energy,
    };
    Ok(RunOutput {
        record,
        model,
        trace,
    })
}

/// One pairwise significance test entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZTest {
    pub severity: Option<Severity>,
    pub baseline: String,
    pub metric: String,
    /// `None` when the per-seed deltas have zero variance.
    pub z: Option<f64>,
    pub p: Option<f64>,
}

/// Aggregated experiment artifact: metric records, per-run summaries,
/// the config snapshot, and the pairwise significance tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub suite: String,
    pub version: String,
    pub dim: usize,
    pub n_s: usize,
    pub n_t: usize,
    pub seeds: Vec<u64>,
    pub config: TrainConfig,
    pub records: Vec<MetricRecord>,
    pub summaries: BTreeMap<String, TraceSummary>,
    pub z_tests: Vec<ZTest>,
    #[serde(skip)]
    pub traces: Vec<(String, TraceLog)>,
}

impl ExperimentReport {
    pub fn records_csv(&self) -> String {
        let mut out = String::from(MetricRecord::csv_header());
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        out
    }

    /// Mean of a metric over the seeds of one (severity-qualified) method
    /// row group.
    pub fn mean_metric(&self, method_key: &str, metric: &str) -> Option<f64> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.method == method_key)
            .map(|r| match metric {
                "geometry" => r.geometry,
                "risk" => r.risk,
                "variance" => r.variance,
                "energy" => r.energy,
                _ => f64::NAN,
            })
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

fn severity_method_key(severity: Severity, method: impl fmt::Display) -> String {
    format!("{severity}/{method}")
}

fn install_pool<T: Send>(jobs: usize, work: impl FnOnce() -> T + Send) -> T {
    if jobs <= 1 {
        work()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(work)
    }
}

/// Full cross product `(severity × method × seed)`, each cell via
/// [`run_baseline`], plus proposed-vs-baseline significance tests per
/// severity. Cells run in parallel across `jobs` workers; every cell is
/// a pure function of its arguments, so the report is byte-identical for
/// any worker count.
#[allow(clippy::too_many_arguments)]
pub fn run_suite(
    severities: &[Severity],
    methods: &[Method],
    seeds: &[u64],
    dim: usize,
    n_s: usize,
    n_t: usize,
    config: &TrainConfig,
    jobs: usize,
) -> Result<ExperimentReport> {
    if severities.is_empty() || methods.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "suite needs severities, methods and seeds".into(),
        ));
    }
    let mut cells = Vec::new();
    for &sev in severities {
        for &method in methods {
            for &seed in seeds {
                cells.push((sev, method, seed));
            }
        }
    }

    let outputs: Vec<Result<(Severity, Method, RunOutput)>> = install_pool(jobs, || {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(sev, method, seed)| {
                let scenario = generate_scenario(sev, dim, n_s, n_t, seed)?;
                let out = run_baseline(method, &scenario, config, seed)?;
                Ok((sev, method, out))
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut summaries = BTreeMap::new();
    let mut traces = Vec::new();
    let mut by_cell: BTreeMap<(Severity, Method, u64), MetricRecord> = BTreeMap::new();
    for item in outputs {
        let (sev, method, out) = item?;
        let key = severity_method_key(sev, method);
        let mut record = out.record;
        by_cell.insert((sev, method, record.seed), record.clone());
        record.method = key.clone();
        summaries.insert(format!("{key}/{}", record.seed), out.model.summary.clone());
        traces.push((format!("{key}/{}", record.seed), out.trace));
        records.push(record);
    }
    records.sort_by(|a, b| (&a.method, a.seed).cmp(&(&b.method, b.seed)));
    traces.sort_by(|a, b| a.0.cmp(&b.0));

    // Proposed vs each baseline, per severity, on risk and geometry.
    let mut z_tests = Vec::new();
    if methods.contains(&Method::Proposed) {
        for &sev in severities {
            for &baseline in methods.iter().filter(|&&m| m != Method::Proposed) {
                for metric in ["risk", "geometry"] {
                    let mut deltas = Vec::new();
                    for &seed in seeds {
                        let base = by_cell.get(&(sev, baseline, seed));
                        let prop = by_cell.get(&(sev, Method::Proposed, seed));
                        if let (Some(b), Some(p)) = (base, prop) {
                            let (bv, pv) = match metric {
                                "risk" => (b.risk, p.risk),
                                _ => (b.geometry, p.geometry),
                            };
                            deltas.push(bv - pv);
                        }
                    }
                    let (z, p) = match evalx::z_statistic(&deltas) {
                        Ok((z, p)) => (Some(z), Some(p)),
                        Err(_) => (None, None),
                    };
                    z_tests.push(ZTest {
                        severity: Some(sev),
                        baseline: baseline.to_string(),
                        metric: metric.to_string(),
                        z,
                        p,
                    });
                }
            }
        }
    }

    Ok(ExperimentReport {
        suite: "default".into(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        dim,
        n_s,
        n_t,
        seeds: seeds.to_vec(),
        config: config.clone(),
        records,
        summaries,
        z_tests,
        traces,
    })
}

/// Ablation configurations of the proposed method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AblationVariant {
    Full,
    NoTransport,
    NoPac,
    NoNoise,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoTransport,
        AblationVariant::NoPac,
        AblationVariant::NoNoise,
    ];
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AblationVariant::Full => "full",
            AblationVariant::NoTransport => "no_transport",
            AblationVariant::NoPac => "no_pac",
            AblationVariant::NoNoise => "no_noise",
        };
        f.write_str(s)
    }
}

/// Trains the four ablation configurations per seed on one scenario:
/// full, α=0 (no transport regularizer), β=0 (no PAC control), and
/// noise clamped (no uncertainty modeling).
pub fn ablation_suite(
    scenario: &Scenario,
    config: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs seeds".into()));
    }
    let mut cells = Vec::new();
    for &variant in &AblationVariant::ALL {
        for &seed in seeds {
            cells.push((variant, seed));
        }
    }
    let outputs: Vec<Result<(AblationVariant, RunOutput)>> = install_pool(jobs, || {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(variant, seed)| {
                let (cfg, options) = match variant {
                    AblationVariant::Full => {
                        (config.clone(), TrainOptions::proposed(scenario.dim))
                    }
                    AblationVariant::NoTransport => (
                        TrainConfig {
                            alpha: 0.0,
                            ..config.clone()
                        },
                        TrainOptions::proposed(scenario.dim),
                    ),
                    AblationVariant::NoPac => (
                        TrainConfig {
                            beta: 0.0,
                            ..config.clone()
                        },
                        TrainOptions::proposed(scenario.dim),
                    ),
                    AblationVariant::NoNoise => {
                        (config.clone(), TrainOptions::no_noise(scenario.dim))
                    }
                };
                let out =
                    run_with_options(variant.to_string(), scenario, &cfg, seed, &options)?;
                Ok((variant, out))
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut summaries = BTreeMap::new();
    let mut traces = Vec::new();
    for item in outputs {
        let (variant, out) = item?;
        summaries.insert(
            format!("{variant}/{}", out.record.seed),
            out.model.summary.clone(),
        );
        traces.push((format!("{variant}/{}", out.record.seed), out.trace));
        records.push(out.record);
    }
    records.sort_by(|a, b| (&a.method, a.seed).cmp(&(&b.method, b.seed)));
    traces.sort_by(|a, b| a.0.cmp(&b.0));

    Ok(ExperimentReport {
        suite: "ablation".into(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        dim: scenario.dim,
        n_s: scenario.n_s,
        n_t: scenario.n_t,
        seeds: seeds.to_vec(),
        config: config.clone(),
        records,
        summaries,
        z_tests: Vec::new(),
        traces,
    })
}

/// Content hash of the suite arguments; names the run directory so that
/// identical arguments always land in the same place with identical
/// bytes.
pub fn suite_hash(parts: &[String]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `report.json`, `records.csv`, and per-run step and epoch trace
/// CSVs into `<out_dir>/run_<hash>/`. Returns the run directory.
pub fn write_report(report: &ExperimentReport, out_dir: &Path, hash: &str) -> Result<PathBuf> {
    let run_dir = out_dir.join(format!("run_{hash}"));
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(
        run_dir.join("report.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    std::fs::write(run_dir.join("records.csv"), report.records_csv())?;
    for (key, trace) in &report.traces {
        let slug = key.replace('/', "-");
        std::fs::write(run_dir.join(format!("trace_{slug}.csv")), trace.steps_csv())?;
        std::fs::write(
            run_dir.join(format!("trace_epoch_{slug}.csv")),
            trace.epochs_csv(),
        )?;
    }
    Ok(run_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::bures_w2;
    use crate::transport::pushforward_gaussian;

    #[test]
    fn synthetic_scenario_bures_in_band() {
        let s = generate_scenario(Severity::Synthetic, 2, 100, 50, 7).unwrap();
        let w2 = bures_w2(&s.source, &s.target).unwrap();
        assert!((0.5..=1.5).contains(&w2), "bures {w2}");
    }

    #[test]
    fn scenario_is_deterministic() {
        let a = generate_scenario(Severity::Moderate, 4, 200, 60, 3).unwrap();
        let b = generate_scenario(Severity::Moderate, 4, 200, 60, 3).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn severity_strictly_increases_bures() {
        for seed in [1u64, 2, 9] {
            let syn = generate_scenario(Severity::Synthetic, 6, 100, 50, seed).unwrap();
            let moderate = generate_scenario(Severity::Moderate, 6, 100, 50, seed).unwrap();
            let severe = generate_scenario(Severity::Severe, 6, 100, 50, seed).unwrap();
            let w_syn = bures_w2(&syn.source, &syn.target).unwrap();
            let w_mod = bures_w2(&moderate.source, &moderate.target).unwrap();
            let w_sev = bures_w2(&severe.source, &severe.target).unwrap();
            assert!(w_syn < w_mod && w_mod < w_sev, "{w_syn} {w_mod} {w_sev}");
        }
    }

    #[test]
    fn target_samples_match_declared_measure() {
        let s = generate_scenario(Severity::Severe, 3, 2000, 2000, 11).unwrap();
        let (_, target) = s.train_data(11);
        let fit = gaussian_fit_auto(&target.cloud);
        for i in 0..3 {
            assert!(
                (fit.mean()[i] - s.target.mean()[i]).abs() < 0.2,
                "mean coord {i}"
            );
            for j in 0..3 {
                let got = fit.covariance().get(i, j);
                let want = s.target.covariance().get(i, j);
                assert!((got - want).abs() < 0.35, "cov[{i}][{j}]: {got} vs {want}");
            }
        }
    }

    #[test]
    fn labels_are_factor_coupled() {
        // With zero label noise the target label is exactly the label of
        // the factor, i.e. of the inverse-shifted observation.
        let mut s = generate_scenario(Severity::Moderate, 2, 10, 10, 5).unwrap();
        s.noise_std = 0.0;
        let (_, target) = s.train_data(5);
        let inv = numkit::psd_inv_sqrt(&s.target.covariance().clone(), 1e-12).unwrap();
        for (i, z) in target.cloud.iter_points().enumerate() {
            let centered: Vec<f64> = z
                .iter()
                .zip(s.target.mean())
                .map(|(a, b)| a - b)
                .collect();
            let factor = inv.matvec(&centered);
            let w = &s.label_weights[..2];
            let expected: f64 =
                w.iter().zip(&factor).map(|(a, b)| a * b).sum::<f64>() + s.label_weights[2];
            assert!(
                (target.labels[i] - expected).abs() < 1e-8,
                "label {i}: {} vs {expected}",
                target.labels[i]
            );
        }
    }

    #[test]
    fn moment_map_pushes_source_fit_onto_target_fit() {
        let s = generate_scenario(Severity::Severe, 4, 4000, 4000, 2).unwrap();
        let (source, target) = s.train_data(2);
        let g_s = gaussian_fit_auto(&source.cloud);
        let g_t = gaussian_fit_auto(&target.cloud);
        let map = gaussian_moment_map(&g_s, &g_t).unwrap();
        let pushed = pushforward_gaussian(&map, &g_s).unwrap();
        for i in 0..4 {
            assert!((pushed.mean()[i] - g_t.mean()[i]).abs() < 1e-6);
            for j in 0..4 {
                assert!(
                    (pushed.covariance().get(i, j) - g_t.covariance().get(i, j)).abs() < 1e-6,
                    "cov[{i}][{j}]"
                );
            }
        }
    }

    #[test]
    fn unknown_method_is_an_error() {
        assert!(matches!(
            "dann".parse::<Method>(),
            Err(Error::UnknownMethod(_))
        ));
    }

    #[test]
    fn matched_scenario_finetune_has_tiny_geometry() {
        let s = matched_scenario(2, 2000, 2000, 4).unwrap();
        let config = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        let out = run_baseline(Method::FinetuneDet, &s, &config, 4).unwrap();
        assert!(
            out.record.geometry <= 1e-3,
            "geometry {} on matched domains",
            out.record.geometry
        );
    }

    #[test]
    fn suite_shape_and_reproducibility() {
        let config = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let seeds = [1u64, 2];
        let report = run_suite(
            &[Severity::Synthetic],
            &[Method::FinetuneDet, Method::DetOt],
            &seeds,
            3,
            200,
            80,
            &config,
            1,
        )
        .unwrap();
        assert_eq!(report.records.len(), 4);

        // Order-independence of the seed list.
        let permuted = run_suite(
            &[Severity::Synthetic],
            &[Method::FinetuneDet, Method::DetOt],
            &[2, 1],
            3,
            200,
            80,
            &config,
            1,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&report.records).unwrap(),
            serde_json::to_string(&permuted.records).unwrap()
        );

        // Parallel execution must not change a byte.
        let parallel = run_suite(
            &[Severity::Synthetic],
            &[Method::FinetuneDet, Method::DetOt],
            &seeds,
            3,
            200,
            80,
            &config,
            4,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&parallel).unwrap()
        );
    }

    #[test]
    fn ablation_suite_shape() {
        let scenario = generate_scenario(Severity::Synthetic, 2, 300, 100, 1).unwrap();
        let config = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let report = ablation_suite(&scenario, &config, &[1], 1).unwrap();
        assert_eq!(report.records.len(), 4);
        let names: Vec<&str> = report.records.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, ["full", "no_noise", "no_pac", "no_transport"]);
    }

    #[test]
    fn report_written_deterministically() {
        let config = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let report = run_suite(
            &[Severity::Synthetic],
            &[Method::FinetuneDet],
            &[1],
            2,
            100,
            50,
            &config,
            1,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let hash = suite_hash(&["shape-test".into()]);
        let run1 = write_report(&report, dir.path(), &hash).unwrap();
        let bytes1 = std::fs::read(run1.join("report.json")).unwrap();
        let run2 = write_report(&report, dir.path(), &hash).unwrap();
        let bytes2 = std::fs::read(run2.join("report.json")).unwrap();
        assert_eq!(run1, run2);
        assert_eq!(bytes1, bytes2);
        assert!(run1.join("records.csv").exists());
        assert!(run1
            .join("trace_synthetic-finetune_det-1.csv")
            .exists());
    }
}
