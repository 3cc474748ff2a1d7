//! Probability measures on latent space.
//!
//! Gaussians carry the closed-form machinery (densities, scores, KL, the
//! Bures-Wasserstein distance used as the Sinkhorn oracle); mixtures exist
//! only as scenario generators; particle clouds are the empirical side of
//! everything and round-trip through a small CSV format.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, Matrix, RngStream};

/// Which domain a cloud belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
    Transported,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
            DomainTag::Transported => "transported",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(DomainTag::Source),
            "target" => Ok(DomainTag::Target),
            "transported" => Ok(DomainTag::Transported),
            other => Err(Error::InvalidArgument(format!(
                "unknown domain tag `{other}`"
            ))),
        }
    }
}

/// An `n x d` collection of latent sample vectors with a domain tag.
/// Points are stored row-major in a flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleCloud {
    dim: usize,
    tag: DomainTag,
    points: Vec<f64>,
}

impl ParticleCloud {
    pub fn new(dim: usize, tag: DomainTag, points: Vec<f64>) -> Self {
        assert!(dim >= 1, "dimension must be at least 1");
        assert!(
            !points.is_empty() && points.len() % dim == 0,
            "point buffer length {} is not a positive multiple of dim {}",
            points.len(),
            dim
        );
        assert!(
            points.iter().all(|v| v.is_finite()),
            "cloud coordinates must be finite"
        );
        Self { dim, tag, points }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn tag(&self) -> DomainTag {
        self.tag
    }

    pub fn with_tag(mut self, tag: DomainTag) -> Self {
        self.tag = tag;
        self
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    /// First `n` points as a new cloud.
    pub fn head(&self, n: usize) -> ParticleCloud {
        let n = n.min(self.len());
        ParticleCloud::new(self.dim, self.tag, self.points[..n * self.dim].to_vec())
    }

    pub fn sample_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for p in self.iter_points() {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x;
            }
        }
        let n = self.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Writes the cloud CSV: a `dim=<d>,tag=<tag>` header, then one row
    /// per point with 17 significant digits (round-trip exact for f64).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "dim={},tag={}", self.dim, self.tag)?;
        for p in self.iter_points() {
            let row: Vec<String> = p.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty cloud file".into(),
        })?;
        let header = header?;
        let (dim, tag) = parse_cloud_header(&header).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("expected `dim=<d>,tag=<tag>` header, got `{header}`"),
        })?;
        let mut points = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected {dim} fields, found {}", fields.len()),
                });
            }
            for f in fields {
                let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                    line: idx + 1,
                    message: format!("invalid number `{f}`"),
                })?;
                points.push(v);
            }
        }
        if points.is_empty() {
            return Err(Error::Parse {
                line: 2,
                message: "cloud has no points".into(),
            });
        }
        Ok(ParticleCloud::new(dim, tag, points))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

fn parse_cloud_header(header: &str) -> Option<(usize, DomainTag)> {
    let mut dim = None;
    let mut tag = None;
    for part in header.split(',') {
        let (key, value) = part.split_once('=')?;
        match key.trim() {
            "dim" => dim = value.trim().parse::<usize>().ok(),
            "tag" => tag = value.trim().parse::<DomainTag>().ok(),
            _ => return None,
        }
    }
    match (dim, tag) {
        (Some(d), Some(t)) if d >= 1 => Some((d, t)),
        _ => None,
    }
}

/// Multivariate Gaussian with symmetric PSD covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMeasure {
    mean: Vec<f64>,
    covariance: Matrix,
}

impl GaussianMeasure {
    pub fn new(mean: Vec<f64>, covariance: Matrix) -> Result<Self> {
        if covariance.rows() != mean.len() || !covariance.is_square() {
            return Err(Error::DimMismatch {
                context: "gaussian mean vs covariance",
                left: mean.len(),
                right: covariance.rows(),
            });
        }
        // Symmetry is validated eagerly; positive semi-definiteness is
        // caught by the factorizations at the point of use.
        let cov = covariance.symmetrize();
        let tol = numkit::SYM_TOL * covariance.max_abs().max(1.0);
        let worst = covariance.sub(&cov).max_abs();
        if worst > tol {
            return Err(Error::Asymmetric {
                max_abs_diff: worst,
            });
        }
        Ok(Self {
            mean,
            covariance: cov,
        })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            covariance: Matrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }
}

/// Finite mixture of Gaussians; a scenario generator, not a model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureMeasure {
    components: Vec<(f64, GaussianMeasure)>,
}

impl MixtureMeasure {
    pub fn new(components: Vec<(f64, GaussianMeasure)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("mixture needs components".into()));
        }
        let dim = components[0].1.dim();
        if components.iter().any(|(_, g)| g.dim() != dim) {
            return Err(Error::DimMismatch {
                context: "mixture component dims",
                left: dim,
                right: 0,
            });
        }
        let sum: f64 = components.iter().map(|(w, _)| w).sum();
        if components.iter().any(|(w, _)| *w <= 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights must be positive and sum to 1 (sum = {sum})"
            )));
        }
        Ok(Self { components })
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    pub fn components(&self) -> &[(f64, GaussianMeasure)] {
        &self.components
    }
}

/// Either kind of latent measure a scenario can use.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMeasure {
    Gaussian(GaussianMeasure),
    Mixture(MixtureMeasure),
}

impl LatentMeasure {
    pub fn dim(&self) -> usize {
        match self {
            LatentMeasure::Gaussian(g) => g.dim(),
            LatentMeasure::Mixture(m) => m.dim(),
        }
    }
}

/// Draws `n` samples. Gaussian sampling is the affine transform of
/// standard normals through the covariance's Cholesky factor.
pub fn sample(measure: &LatentMeasure, n: usize, rng: &mut RngStream) -> Result<ParticleCloud> {
    assert!(n >= 1, "sample count must be at least 1");
    match measure {
        LatentMeasure::Gaussian(g) => sample_gaussian(g, n, rng, DomainTag::Source),
        LatentMeasure::Mixture(m) => {
            let dim = m.dim();
            let mut cholesky_factors = Vec::with_capacity(m.components.len());
            for (_, g) in &m.components {
                cholesky_factors.push(numkit::cholesky(g.covariance())?);
            }
            let mut points = Vec::with_capacity(n * dim);
            for _ in 0..n {
                let u = rng.uniform();
                let mut acc = 0.0;
                let mut idx = m.components.len() - 1;
                for (k, (w, _)) in m.components.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        idx = k;
                        break;
                    }
                }
                let g = &m.components[idx].1;
                let eps = rng.normal_vec(dim);
                let l_eps = cholesky_factors[idx].matvec(&eps);
                for i in 0..dim {
                    points.push(g.mean()[i] + l_eps[i]);
                }
            }
            Ok(ParticleCloud::new(dim, DomainTag::Source, points))
        }
    }
}

/// Gaussian sampling with an explicit tag.
pub fn sample_gaussian(
    g: &GaussianMeasure,
    n: usize,
    rng: &mut RngStream,
    tag: DomainTag,
) -> Result<ParticleCloud> {
    assert!(n >= 1, "sample count must be at least 1");
    let dim = g.dim();
    let l = numkit::cholesky(g.covariance())?;
    let mut points = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let eps = rng.normal_vec(dim);
        let l_eps = l.matvec(&eps);
        for i in 0..dim {
            points.push(g.mean()[i] + l_eps[i]);
        }
    }
    Ok(ParticleCloud::new(dim, tag, points))
}

/// Population-covariance Gaussian fit (divide by n, not n-1) plus
/// `ridge * I`. Moment comparisons favor the consistent estimator over
/// the unbiased one at these sample sizes.
pub fn gaussian_fit(cloud: &ParticleCloud, ridge: f64) -> GaussianMeasure {
    assert!(ridge >= 0.0, "ridge must be nonnegative");
    let dim = cloud.dim();
    let n = cloud.len() as f64;
    let mean = cloud.sample_mean();
    let mut cov = Matrix::zeros(dim, dim);
    for p in cloud.iter_points() {
        for i in 0..dim {
            let di = p[i] - mean[i];
            for j in i..dim {
                let v = cov.get(i, j) + di * (p[j] - mean[j]);
                cov.set(i, j, v);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov.get(i, j) / n;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    let cov = cov.add_ridge(ridge);
    GaussianMeasure::new(mean, cov).expect("fit covariance is symmetric by construction")
}

/// Default ridge for estimated covariances: `1e-6 * mean(diag)`.
pub fn default_ridge(cloud: &ParticleCloud) -> f64 {
    let dim = cloud.dim();
    let mean = cloud.sample_mean();
    let n = cloud.len() as f64;
    let mut diag_sum = 0.0;
    for p in cloud.iter_points() {
        for i in 0..dim {
            let d = p[i] - mean[i];
            diag_sum += d * d;
        }
    }
    1e-6 * (diag_sum / (n * dim as f64))
}

/// Gaussian fit with the default ridge.
pub fn gaussian_fit_auto(cloud: &ParticleCloud) -> GaussianMeasure {
    gaussian_fit(cloud, default_ridge(cloud))
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Exact multivariate normal log density.
pub fn gaussian_logpdf(g: &GaussianMeasure, z: &[f64]) -> Result<f64> {
    check_dim("logpdf point", g.dim(), z.len())?;
    let l = numkit::cholesky(g.covariance())?;
    let mut log_det = 0.0;
    for i in 0..g.dim() {
        let d = l.get(i, i);
        if d <= 0.0 {
            return Err(Error::NotPsd {
                context: "singular covariance in logpdf",
                value: d,
            });
        }
        log_det += d.ln();
    }
    let diff: Vec<f64> = z.iter().zip(g.mean()).map(|(a, b)| a - b).collect();
    let y = numkit::solve_lower(&l, &diff)?;
    let quad: f64 = y.iter().map(|v| v * v).sum();
    Ok(-(g.dim() as f64) * HALF_LN_2PI - log_det - 0.5 * quad)
}

/// Score field of a Gaussian: `∇ log p(z) = -Σ^{-1}(z - μ)`.
pub fn gaussian_score(g: &GaussianMeasure, z: &[f64]) -> Result<Vec<f64>> {
    check_dim("score point", g.dim(), z.len())?;
    let l = numkit::cholesky(g.covariance())?;
    let diff: Vec<f64> = z.iter().zip(g.mean()).map(|(a, b)| a - b).collect();
    let x = numkit::cholesky_solve(&l, &diff)?;
    Ok(x.into_iter().map(|v| -v).collect())
}

/// Closed-form KL divergence between Gaussians,
/// `KL(g0 || g1) = 1/2 (tr(Σ1^{-1}Σ0) + Δμ^T Σ1^{-1} Δμ - d + ln det Σ1 - ln det Σ0)`.
pub fn gaussian_kl(g0: &GaussianMeasure, g1: &GaussianMeasure) -> Result<f64> {
    check_dim("kl operands", g0.dim(), g1.dim())?;
    let d = g0.dim();
    let l0 = numkit::cholesky(g0.covariance())?;
    let l1 = numkit::cholesky(g1.covariance())?;
    let mut log_det0 = 0.0;
    let mut log_det1 = 0.0;
    for i in 0..d {
        let p0 = l0.get(i, i);
        let p1 = l1.get(i, i);
        if p0 <= 0.0 || p1 <= 0.0 {
            return Err(Error::NotPsd {
                context: "singular covariance in kl",
                value: p0.min(p1),
            });
        }
        log_det0 += p0.ln();
        log_det1 += p1.ln();
    }
    // tr(Σ1^{-1} Σ0) = ||L1^{-1} L0||_F^2
    let mut trace_term = 0.0;
    for j in 0..d {
        let col: Vec<f64> = (0..d).map(|i| l0.get(i, j)).collect();
        let y = numkit::solve_lower(&l1, &col)?;
        trace_term += y.iter().map(|v| v * v).sum::<f64>();
    }
    let diff: Vec<f64> = g1
        .mean()
        .iter()
        .zip(g0.mean())
        .map(|(a, b)| a - b)
        .collect();
    let y = numkit::solve_lower(&l1, &diff)?;
    let quad: f64 = y.iter().map(|v| v * v).sum();
    Ok(0.5 * (trace_term + quad - d as f64) + (log_det1 - log_det0))
}

/// Bures-Wasserstein distance between Gaussians:
/// `W2^2 = ||μ0 - μ1||^2 + tr(Σ0 + Σ1 - 2 (Σ1^{1/2} Σ0 Σ1^{1/2})^{1/2})`.
///
/// This is the closed-form 2-Wasserstein distance and the oracle against
/// which the entropic Sinkhorn cost is validated.
pub fn bures_w2(g0: &GaussianMeasure, g1: &GaussianMeasure) -> Result<f64> {
    check_dim("bures operands", g0.dim(), g1.dim())?;
    let sqrt1 = numkit::psd_sqrt(g1.covariance())?;
    let inner = sqrt1.matmul(g0.covariance()).matmul(&sqrt1);
    let cross = numkit::psd_sqrt(&inner.symmetrize())?;
    let trace_term = g0.covariance().trace() + g1.covariance().trace() - 2.0 * cross.trace();
    let mean_term: f64 = g0
        .mean()
        .iter()
        .zip(g1.mean())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    // Rounding can push the trace term a hair negative when the measures
    // coincide.
    Ok((mean_term + trace_term).max(0.0).sqrt())
}

fn check_dim(context: &'static str, left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::DimMismatch {
            context,
            left,
            right,
        });
    }
    Ok(())
}
