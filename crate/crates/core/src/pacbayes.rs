//! PAC-Bayesian machinery: the posterior/prior KL penalty, two transfer
//! bounds, and the sample-complexity calculator.
//!
//! The posterior is a diagonal Gaussian over the flattened transport
//! parameters; the prior is isotropic around the initialization. Both
//! bounds are computed, not proved: the first combines source risk, the
//! latent 2-Wasserstein distance, and `sqrt((KL + ln(2 sqrt(n)/δ)) / 2n)`;
//! the variant replaces the log term with `ln(1/δ)`. Constants inside the
//! sample-complexity order bound are fixed to 1, so its output is in
//! illustrative units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::TransportParams;

/// Diagonal Gaussian posterior over flattened transport parameters with
/// an isotropic Gaussian prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSpec {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub prior_mean: Vec<f64>,
    pub prior_var: f64,
}

impl PosteriorSpec {
    pub fn new(
        mean: Vec<f64>,
        log_var: Vec<f64>,
        prior_mean: Vec<f64>,
        prior_var: f64,
    ) -> Result<Self> {
        if mean.len() != log_var.len() || mean.len() != prior_mean.len() {
            return Err(Error::DimMismatch {
                context: "posterior spec lengths",
                left: mean.len(),
                right: log_var.len().max(prior_mean.len()),
            });
        }
        if prior_var <= 0.0 || !prior_var.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "prior variance must be positive and finite, got {prior_var}"
            )));
        }
        if log_var.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "posterior log variances must be finite".into(),
            ));
        }
        Ok(Self {
            mean,
            log_var,
            prior_mean,
            prior_var,
        })
    }

    /// Posterior centered at `params` with constant variance, prior
    /// centered at the initialization point. This is the shape used
    /// during training: the posterior mean tracks the current parameters
    /// while the variances stay fixed.
    pub fn at_params(
        params: &TransportParams,
        posterior_var: f64,
        prior: &TransportParams,
        prior_var: f64,
    ) -> Result<Self> {
        let mean = params.flatten();
        let n = mean.len();
        Self::new(
            mean,
            vec![posterior_var.ln(); n],
            prior.flatten(),
            prior_var,
        )
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Closed-form KL between the diagonal Gaussian posterior and the
/// isotropic prior:
/// `1/2 Σ_i [ v_i/v_π + (μ_i - μ_π,i)²/v_π - 1 - ln(v_i/v_π) ]`.
pub fn posterior_kl(rho: &PosteriorSpec) -> f64 {
    let vp = rho.prior_var;
    let mut total = 0.0;
    for i in 0..rho.len() {
        let v = rho.log_var[i].exp();
        let dm = rho.mean[i] - rho.prior_mean[i];
        total += v / vp + dm * dm / vp - 1.0 - (v / vp).ln();
    }
    0.5 * total
}

/// One evaluated transfer bound with its components. The decomposition
/// `bound = source_risk + w2_term + confidence_term` holds exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub source_risk: f64,
    pub w2_term: f64,
    pub kl_term: f64,
    pub confidence_term: f64,
    pub bound: f64,
    pub n_s: usize,
    pub delta: f64,
}

fn check_bound_inputs(source_risk: f64, w2: f64, kl: f64, n_s: usize, delta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&delta) || delta == 0.0 {
        return Err(Error::BadDelta(delta));
    }
    if n_s == 0 {
        return Err(Error::InvalidArgument("n_s must be at least 1".into()));
    }
    if kl < 0.0 || w2 < 0.0 || source_risk < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "bound inputs must be nonnegative (risk {source_risk}, w2 {w2}, kl {kl})"
        )));
    }
    Ok(())
}

/// Uncertainty-aware transfer bound:
/// `R_t <= R_s + W2 + sqrt((KL + ln(2 sqrt(n_s)/δ)) / (2 n_s))`.
pub fn transfer_bound(
    source_risk: f64,
    w2: f64,
    kl: f64,
    n_s: usize,
    delta: f64,
) -> Result<BoundReport> {
    check_bound_inputs(source_risk, w2, kl, n_s, delta)?;
    let n = n_s as f64;
    let confidence_term = ((kl + (2.0 * n.sqrt() / delta).ln()) / (2.0 * n)).sqrt();
    Ok(BoundReport {
        source_risk,
        w2_term: w2,
        kl_term: kl,
        confidence_term,
        bound: source_risk + w2 + confidence_term,
        n_s,
        delta,
    })
}

/// Tighter variant with the smaller confidence term
/// `sqrt((KL + ln(1/δ)) / (2 n_s))`; never looser than
/// [`transfer_bound`] for the same inputs.
pub fn transfer_bound_tight(
    source_risk: f64,
    w2: f64,
    kl: f64,
    n_s: usize,
    delta: f64,
) -> Result<BoundReport> {
    check_bound_inputs(source_risk, w2, kl, n_s, delta)?;
    let n = n_s as f64;
    let confidence_term = ((kl + (1.0 / delta).ln()) / (2.0 * n)).sqrt();
    Ok(BoundReport {
        source_risk,
        w2_term: w2,
        kl_term: kl,
        confidence_term,
        bound: source_risk + w2 + confidence_term,
        n_s,
        delta,
    })
}

/// Source samples needed for ε-accurate transfer,
/// `ceil((d ln(1/ε) + KL) / ε²)` with the order constant fixed to 1
/// (illustrative units), floored at 1.
pub fn sample_complexity(d: usize, epsilon: f64, kl: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&epsilon) || epsilon == 0.0 {
        return Err(Error::BadEpsilon(epsilon));
    }
    if kl < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "kl must be nonnegative, got {kl}"
        )));
    }
    let raw = (d as f64 * (1.0 / epsilon).ln() + kl) / (epsilon * epsilon);
    Ok((raw.ceil() as usize).max(1))
}
