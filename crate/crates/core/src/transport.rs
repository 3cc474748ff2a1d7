//! The stochastic affine-Gaussian latent transport operator.
//!
//! A transported point is `T(z) = A z + b + D^{1/2} ε` with diagonal noise
//! `D = diag(exp(log_d))`. This family keeps every quantity of interest in
//! closed form: the pushforward of a Gaussian source is Gaussian, the
//! expected squared displacement and the KL alignment term have exact
//! expressions, and the loss gradient is analytic in every parameter.
//! Noise variances live in log space so positivity never needs a
//! constraint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{gaussian_kl, DomainTag, GaussianMeasure, ParticleCloud};
use crate::numkit::{self, Matrix, RngStream};

/// Noise variances are clamped to `[MIN_NOISE_VAR, MAX_NOISE_VAR]`.
pub const MIN_NOISE_VAR: f64 = 1e-12;
pub const MAX_NOISE_VAR: f64 = 1e6;

/// Parameters of the transport operator: linear map `A`, offset `b`, and
/// per-coordinate log noise variances `log_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportParams {
    a: Matrix,
    b: Vec<f64>,
    log_d: Vec<f64>,
}

/// JSON wire form; `A` is row-major.
#[derive(Serialize, Deserialize)]
struct TransportParamsWire {
    #[serde(rename = "A")]
    a: Vec<f64>,
    b: Vec<f64>,
    log_d: Vec<f64>,
    dim: usize,
}

impl Serialize for TransportParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TransportParamsWire {
            a: self.a.entries().to_vec(),
            b: self.b.clone(),
            log_d: self.log_d.clone(),
            dim: self.dim(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TransportParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = TransportParamsWire::deserialize(d)?;
        if wire.a.len() != wire.dim * wire.dim
            || wire.b.len() != wire.dim
            || wire.log_d.len() != wire.dim
        {
            return Err(serde::de::Error::custom("inconsistent transport dims"));
        }
        Ok(TransportParams::new(
            Matrix::from_rows(wire.dim, wire.dim, wire.a),
            wire.b,
            wire.log_d,
        ))
    }
}

impl TransportParams {
    /// Builds parameters, clamping noise variances into the valid range.
    pub fn new(a: Matrix, b: Vec<f64>, log_d: Vec<f64>) -> Self {
        assert!(a.is_square(), "A must be square");
        assert_eq!(a.rows(), b.len(), "A and b dims differ");
        assert_eq!(b.len(), log_d.len(), "b and log_d dims differ");
        let log_d = log_d
            .into_iter()
            .map(|v| v.clamp(MIN_NOISE_VAR.ln(), MAX_NOISE_VAR.ln()))
            .collect();
        Self { a, b, log_d }
    }

    /// Identity map with the given initial noise variance.
    pub fn identity(dim: usize, noise_var: f64) -> Self {
        Self::new(
            Matrix::identity(dim),
            vec![0.0; dim],
            vec![noise_var.ln(); dim],
        )
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn log_d(&self) -> &[f64] {
        &self.log_d
    }

    pub fn noise_variances(&self) -> Vec<f64> {
        self.log_d.iter().map(|v| v.exp()).collect()
    }

    /// Flattens to `[A row-major, b, log_d]`, length `d^2 + 2d`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.a.entries());
        out.extend_from_slice(&self.b);
        out.extend_from_slice(&self.log_d);
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn from_flat(dim: usize, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), dim * dim + 2 * dim, "flat parameter length");
        Self::new(
            Matrix::from_rows(dim, dim, flat[..dim * dim].to_vec()),
            flat[dim * dim..dim * dim + dim].to_vec(),
            flat[dim * dim + dim..].to_vec(),
        )
    }

    pub fn param_count(&self) -> usize {
        let d = self.dim();
        d * d + 2 * d
    }
}

/// Deterministic component `A z + b`.
pub fn transport_mean(params: &TransportParams, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != params.dim() {
        return Err(Error::DimMismatch {
            context: "transport input",
            left: z.len(),
            right: params.dim(),
        });
    }
    let mut out = params.a.matvec(z);
    for (o, b) in out.iter_mut().zip(&params.b) {
        *o += b;
    }
    Ok(out)
}

/// One reparameterized draw: `A z + b + D^{1/2} ε` with ε standard normal
/// drawn independently of the parameters.
pub fn transport_sample(
    params: &TransportParams,
    z: &[f64],
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut out = transport_mean(params, z)?;
    for (o, ld) in out.iter_mut().zip(&params.log_d) {
        *o += (0.5 * ld).exp() * rng.normal();
    }
    Ok(out)
}

/// Pushes a whole cloud through the operator, sampling fresh noise per
/// point.
pub fn transport_cloud(
    params: &TransportParams,
    cloud: &ParticleCloud,
    rng: &mut RngStream,
) -> Result<ParticleCloud> {
    let mut points = Vec::with_capacity(cloud.len() * cloud.dim());
    for p in cloud.iter_points() {
        points.extend(transport_sample(params, p, rng)?);
    }
    Ok(ParticleCloud::new(
        cloud.dim(),
        DomainTag::Transported,
        points,
    ))
}

/// Pushforward of a Gaussian source:
/// `N(A μ + b, A Σ A^T + diag(exp(log_d)))`.
pub fn pushforward_gaussian(
    params: &TransportParams,
    source: &GaussianMeasure,
) -> Result<GaussianMeasure> {
    if source.dim() != params.dim() {
        return Err(Error::DimMismatch {
            context: "pushforward source",
            left: source.dim(),
            right: params.dim(),
        });
    }
    let mean = transport_mean(params, source.mean())?;
    let asat = params
        .a
        .matmul(source.covariance())
        .matmul(&params.a.transpose())
        .symmetrize();
    let mut cov = asat;
    for (i, ld) in params.log_d.iter().enumerate() {
        cov.set(i, i, cov.get(i, i) + ld.exp());
    }
    GaussianMeasure::new(mean, cov)
}

/// Value of the transport functional split into its two terms:
/// `total = cost + lambda * kl`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TransportLossValue {
    pub total: f64,
    pub cost_term: f64,
    pub kl_term: f64,
    pub lambda: f64,
}

/// Closed-form transport functional for a Gaussian source and target.
///
/// The cost term is the expected squared displacement
/// `E ||T(z) - z||^2 = ||(A-I)μ + b||^2 + tr((A-I)Σ(A-I)^T) + Σ_i exp(log_d_i)`
/// and the KL term compares the pushforward marginal with the target.
pub fn transport_loss(
    params: &TransportParams,
    source: &GaussianMeasure,
    target: &GaussianMeasure,
    lambda: f64,
) -> Result<TransportLossValue> {
    assert!(lambda >= 0.0, "lambda must be nonnegative");
    let cost_term = displacement_cost(params, source)?;
    let pushforward = pushforward_gaussian(params, source)?;
    let kl_term = gaussian_kl(&pushforward, target)?;
    Ok(TransportLossValue {
        total: cost_term + lambda * kl_term,
        cost_term,
        kl_term,
        lambda,
    })
}

fn displacement_cost(params: &TransportParams, source: &GaussianMeasure) -> Result<f64> {
    if source.dim() != params.dim() {
        return Err(Error::DimMismatch {
            context: "transport loss source",
            left: source.dim(),
            right: params.dim(),
        });
    }
    let d = params.dim();
    let m = params.a.sub(&Matrix::identity(d));
    let mut shift = m.matvec(source.mean());
    for (s, b) in shift.iter_mut().zip(&params.b) {
        *s += b;
    }
    let mean_part: f64 = shift.iter().map(|v| v * v).sum();
    let trace_part = m
        .matmul(source.covariance())
        .matmul(&m.transpose())
        .trace();
    let noise_part: f64 = params.log_d.iter().map(|v| v.exp()).sum();
    Ok(mean_part + trace_part + noise_part)
}

/// Gradient of [`transport_loss`] over the flattened parameters
/// `[A row-major, b, log_d]`.
pub fn transport_loss_grad(
    params: &TransportParams,
    source: &GaussianMeasure,
    target: &GaussianMeasure,
    lambda: f64,
) -> Result<Vec<f64>> {
    assert!(lambda >= 0.0, "lambda must be nonnegative");
    let d = params.dim();
    if source.dim() != d || target.dim() != d {
        return Err(Error::DimMismatch {
            context: "transport grad measures",
            left: source.dim(),
            right: target.dim(),
        });
    }

    let mu_s = source.mean();
    let sigma_s = source.covariance();
    let m = params.a.sub(&Matrix::identity(d));

    // Cost term pieces.
    let mut shift = m.matvec(mu_s);
    for (s, b) in shift.iter_mut().zip(&params.b) {
        *s += b;
    }
    // dC/dA = 2 (Mμ + b) μ^T + 2 M Σ
    let mut grad_a = Matrix::from_fn(d, d, |i, j| 2.0 * shift[i] * mu_s[j]);
    grad_a = grad_a.add(&m.matmul(sigma_s).scale(2.0));
    // dC/db = 2 (Mμ + b)
    let mut grad_b: Vec<f64> = shift.iter().map(|v| 2.0 * v).collect();
    // dC/d log_d_i = exp(log_d_i)
    let mut grad_ld: Vec<f64> = params.log_d.iter().map(|v| v.exp()).collect();

    if lambda > 0.0 {
        let pushforward = pushforward_gaussian(params, source)?;
        let l_t = numkit::cholesky(target.covariance())?;
        let precision_t = numkit::cholesky_inverse(&l_t)?;
        let l_q = numkit::cholesky(pushforward.covariance())?;
        let precision_q = numkit::cholesky_inverse(&l_q)?;

        // dKL/dμ_q = Σ_t^{-1} (μ_q - μ_t)
        let mean_diff: Vec<f64> = pushforward
            .mean()
            .iter()
            .zip(target.mean())
            .map(|(a, b)| a - b)
            .collect();
        let dmu = precision_t.matvec(&mean_diff);

        // dKL/dΣ_q = (Σ_t^{-1} - Σ_q^{-1}) / 2
        let dsigma = precision_t.sub(&precision_q).scale(0.5);

        // Chain rule: μ_q = A μ_s + b, Σ_q = A Σ_s A^T + D.
        let mean_outer = Matrix::from_fn(d, d, |i, j| dmu[i] * mu_s[j]);
        let cov_chain = dsigma.matmul(&params.a).matmul(sigma_s).scale(2.0);
        grad_a = grad_a.add(&mean_outer.add(&cov_chain).scale(lambda));
        for i in 0..d {
            grad_b[i] += lambda * dmu[i];
            grad_ld[i] += lambda * dsigma.get(i, i) * params.log_d[i].exp();
        }
    }

    let mut out = Vec::with_capacity(params.param_count());
    out.extend_from_slice(grad_a.entries());
    out.extend_from_slice(&grad_b);
    out.extend_from_slice(&grad_ld);
    Ok(out)
}

/// Monte Carlo estimate of the expected squared displacement over an
/// empirical source cloud, with reparameterized noise. Returns the mean
/// and its standard error. This is the estimator used when the source is
/// not Gaussian; on Gaussian inputs it must agree with the closed form
/// within sampling error.
pub fn displacement_cost_monte_carlo(
    params: &TransportParams,
    source: &ParticleCloud,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    let n = source.len();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for p in source.iter_points() {
        let t = transport_sample(params, p, rng)?;
        let sq: f64 = t.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        sum += sq;
        sum_sq += sq * sq;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    Ok((mean, (var / n as f64).sqrt()))
}
