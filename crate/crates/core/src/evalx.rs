//! Evaluation protocol: geometry discrepancy, covariance calibration,
//! transport energy, posterior-variance trace, and the significance
//! statistic.
//!
//! Both score fields in the geometry metric are Gaussian fits, which
//! makes the metric a deterministic function of the clouds. Energy is the
//! raw entropic transport cost with the same eps/K across methods, no
//! debiasing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{gaussian_score, GaussianMeasure, ParticleCloud};
use crate::numkit::{Matrix, RngStream};
use crate::sinkhorn;
use crate::transport::{transport_cloud, TransportParams};

/// One row of the experiment tables: all four metrics for one
/// (method, seed) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub seed: u64,
    pub geometry: f64,
    pub risk: f64,
    pub variance: f64,
    pub energy: f64,
}

impl MetricRecord {
    pub fn csv_header() -> &'static str {
        "method,seed,geometry,risk,variance,energy"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method, self.seed, self.geometry, self.risk, self.variance, self.energy
        )
    }
}

/// Mean squared score-field mismatch over the transported cloud:
/// `mean_z ||∇log p_target(z) - ∇log p_transported(z)||²`.
///
/// `transported_model` is the Gaussian fit of the transported cloud
/// itself; the cloud supplies the averaging measure.
pub fn geometry_discrepancy(
    transported: &ParticleCloud,
    target_model: &GaussianMeasure,
    transported_model: &GaussianMeasure,
) -> Result<f64> {
    if transported.dim() != target_model.dim() || transported.dim() != transported_model.dim() {
        return Err(Error::DimMismatch {
            context: "geometry discrepancy dims",
            left: transported.dim(),
            right: target_model.dim(),
        });
    }
    if transported.len() < 2 {
        return Err(Error::InvalidArgument(
            "geometry discrepancy needs at least 2 points".into(),
        ));
    }
    let mut total = 0.0;
    for z in transported.iter_points() {
        let st = gaussian_score(target_model, z)?;
        let sq = gaussian_score(transported_model, z)?;
        total += st
            .iter()
            .zip(&sq)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / transported.len() as f64)
}

/// Covariance calibration against a full matrix of transported noise:
/// `||Σ_target - Σ_noise||_F²`.
pub fn covariance_calibration_full(target_cov: &Matrix, noise_cov: &Matrix) -> Result<f64> {
    if target_cov.rows() != noise_cov.rows() || target_cov.cols() != noise_cov.cols() {
        return Err(Error::DimMismatch {
            context: "calibration covariances",
            left: target_cov.rows(),
            right: noise_cov.rows(),
        });
    }
    let d = target_cov.sub(noise_cov).frobenius_norm();
    Ok(d * d)
}

/// Production path: the operator's noise is diagonal, so the calibration
/// reduces to `||Σ_target - diag(exp(log_d))||_F²`.
pub fn covariance_calibration(
    params: &TransportParams,
    target: &GaussianMeasure,
) -> Result<f64> {
    covariance_calibration_full(
        target.covariance(),
        &Matrix::diag(&params.noise_variances()),
    )
}

/// Pushes the source cloud through the stochastic operator and reports
/// the raw entropic transport cost against the target cloud.
pub fn transport_energy(
    source: &ParticleCloud,
    params: &TransportParams,
    target: &ParticleCloud,
    eps: f64,
    k: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let transported = transport_cloud(params, source, rng)?;
    sinkhorn::entropic_cost(&transported, target, eps, k)
}

/// Mean transported noise variance, the uncertainty summary tracked
/// during training.
pub fn variance_trace(params: &TransportParams) -> f64 {
    let vars = params.noise_variances();
    vars.iter().sum::<f64>() / vars.len() as f64
}

/// Per-seed improvement Z statistic and its two-sided normal p-value:
/// `Z = mean(Δ) / (σ̂ / √n)` with the unbiased sample standard deviation.
pub fn z_statistic(deltas: &[f64]) -> Result<(f64, f64)> {
    if deltas.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "z statistic needs at least 2 values, got {}",
            deltas.len()
        )));
    }
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let ss: f64 = deltas.iter().map(|d| (d - mean) * (d - mean)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return Err(Error::ZeroVariance(deltas.len()));
    }
    let z = mean / (sd / n.sqrt());
    let p = statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2);
    Ok((z, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{sample_gaussian, DomainTag};
    use crate::numkit::RngStream;
    use approx::assert_relative_eq;

    #[test]
    fn geometry_zero_for_identical_models() {
        let model = GaussianMeasure::new(
            vec![0.5, -0.5],
            Matrix::from_rows(2, 2, vec![2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let cloud = ParticleCloud::new(2, DomainTag::Transported, vec![0.0, 0.0, 1.0, 2.0]);
        let g = geometry_discrepancy(&cloud, &model, &model).unwrap();
        assert_relative_eq!(g, 0.0, epsilon = 1e-20);
    }

    #[test]
    fn geometry_mean_gap_with_unit_covariances() {
        // Equal identity covariances make the score difference the
        // constant mean gap, so the metric is its squared norm exactly.
        let t = GaussianMeasure::new(vec![0.3, 0.4], Matrix::identity(2)).unwrap();
        let q = GaussianMeasure::standard(2);
        let cloud = ParticleCloud::new(
            2,
            DomainTag::Transported,
            vec![0.1, 0.2, -1.0, 0.5, 3.0, -2.0],
        );
        let g = geometry_discrepancy(&cloud, &t, &q).unwrap();
        assert_relative_eq!(g, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn geometry_1d_variance_mismatch_moment() {
        // Target N(0,1), transported N(0,2), cloud from N(0,2):
        // E(-z + z/2)^2 = E z^2 / 4 = 0.5.
        let t = GaussianMeasure::new(vec![0.0], Matrix::from_rows(1, 1, vec![1.0])).unwrap();
        let q = GaussianMeasure::new(vec![0.0], Matrix::from_rows(1, 1, vec![2.0])).unwrap();
        let mut rng = RngStream::new(12, 0);
        let cloud = sample_gaussian(&q, 100_000, &mut rng, DomainTag::Transported).unwrap();
        let g = geometry_discrepancy(&cloud, &t, &q).unwrap();
        assert!((g - 0.5).abs() / 0.5 < 0.02, "metric {g}");
    }

    #[test]
    fn calibration_cases() {
        let params = TransportParams::new(
            Matrix::identity(2),
            vec![0.0, 0.0],
            vec![0.0f64, 0.0],
        );
        let matched =
            GaussianMeasure::new(vec![0.0, 0.0], Matrix::diag(&[1.0, 1.0])).unwrap();
        assert_relative_eq!(
            covariance_calibration(&params, &matched).unwrap(),
            0.0,
            epsilon = 1e-20
        );

        // 1-D: target var 2, noise var 1 -> (2-1)^2 = 1.
        let p1 = TransportParams::new(Matrix::identity(1), vec![0.0], vec![0.0]);
        let t1 = GaussianMeasure::new(vec![0.0], Matrix::from_rows(1, 1, vec![2.0])).unwrap();
        assert_relative_eq!(covariance_calibration(&p1, &t1).unwrap(), 1.0);

        // Frobenius homogeneity: scaling the mismatch by c scales the
        // metric by c^2 (checked at c = 3).
        let a = Matrix::from_rows(2, 2, vec![1.0, 0.2, 0.2, 2.0]);
        let b = Matrix::from_rows(2, 2, vec![0.5, 0.0, 0.0, 1.0]);
        let base = covariance_calibration_full(&a, &b).unwrap();
        let diff = a.sub(&b);
        let scaled = covariance_calibration_full(&b.add(&diff.scale(3.0)), &b).unwrap();
        assert_relative_eq!(scaled, 9.0 * base, epsilon = 1e-10);
    }

    #[test]
    fn calibration_rotation_invariance() {
        // Rotating both covariances by the same orthogonal matrix leaves
        // the Frobenius metric unchanged (full-matrix variant).
        let mut rng = RngStream::new(8, 8);
        let g = Matrix::from_fn(3, 3, |_, _| rng.normal());
        let (_, q) = crate::numkit::sym_eigen(&g.transpose().matmul(&g).add_ridge(0.1)).unwrap();
        let a = Matrix::from_rows(3, 3, vec![
            2.0, 0.1, 0.0, 0.1, 1.0, 0.2, 0.0, 0.2, 0.5,
        ]);
        let b = Matrix::diag(&[1.0, 1.0, 1.0]);
        let base = covariance_calibration_full(&a, &b).unwrap();
        let ra = q.transpose().matmul(&a).matmul(&q);
        let rb = q.transpose().matmul(&b).matmul(&q);
        let rotated = covariance_calibration_full(&ra, &rb).unwrap();
        assert_relative_eq!(base, rotated, epsilon = 1e-9);
    }

    #[test]
    fn variance_trace_values() {
        let p = TransportParams::new(
            Matrix::identity(3),
            vec![0.0; 3],
            vec![0.0, 2.0f64.ln(), 3.0f64.ln()],
        );
        assert_relative_eq!(variance_trace(&p), 2.0, epsilon = 1e-12);
        let ones = TransportParams::identity(4, 1.0);
        assert_relative_eq!(variance_trace(&ones), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn energy_identity_matches_plain_cost_and_oracle() {
        let src = GaussianMeasure::standard(2);
        let tgt = GaussianMeasure::new(vec![2.0, 0.0], Matrix::identity(2)).unwrap();
        let mut rx = RngStream::new(1, 0);
        let mut ry = RngStream::new(1, 1);
        let x = sample_gaussian(&src, 500, &mut rx, DomainTag::Source).unwrap();
        let y = sample_gaussian(&tgt, 500, &mut ry, DomainTag::Target).unwrap();

        // Identity params with clamped noise: energy equals the plain
        // source-target cost up to the 1e-12 noise floor.
        let id = TransportParams::identity(2, 1e-12);
        let mut noise_rng = RngStream::new(1, 2);
        let energy = transport_energy(&x, &id, &y, 0.05, 200, &mut noise_rng).unwrap();
        let plain = sinkhorn::entropic_cost(&x, &y, 0.05, 200).unwrap();
        assert!((energy - plain).abs() < 1e-4, "energy {energy} vs {plain}");
        assert!((energy - 4.0).abs() / 4.0 <= 0.05, "oracle check {energy}");

        // Offsetting by the mean gap strictly lowers the energy.
        let aligned = TransportParams::new(
            Matrix::identity(2),
            vec![2.0, 0.0],
            vec![(1e-12f64).ln(); 2],
        );
        let mut noise_rng = RngStream::new(1, 3);
        let aligned_energy =
            transport_energy(&x, &aligned, &y, 0.05, 200, &mut noise_rng).unwrap();
        assert!(
            aligned_energy < energy,
            "aligned {aligned_energy} vs identity {energy}"
        );
    }

    #[test]
    fn geometry_zero_iff_models_match() {
        let mut rng = RngStream::new(30, 0);
        for trial in 0..10 {
            let d = 2;
            let g = Matrix::from_fn(d, d, |_, _| rng.normal());
            let cov = g.transpose().matmul(&g).add_ridge(0.2);
            let m1 = GaussianMeasure::new(rng.normal_vec(d), cov.clone()).unwrap();
            let m2 = GaussianMeasure::new(rng.normal_vec(d), cov).unwrap();
            let cloud = sample_gaussian(&m1, 200, &mut rng, DomainTag::Transported).unwrap();
            let self_metric = geometry_discrepancy(&cloud, &m1, &m1).unwrap();
            assert!(self_metric.abs() < 1e-18);
            let cross = geometry_discrepancy(&cloud, &m2, &m1).unwrap();
            let mean_gap: f64 = m1
                .mean()
                .iter()
                .zip(m2.mean())
                .map(|(a, b)| (a - b).abs())
                .sum();
            if mean_gap > 1e-6 {
                assert!(cross > 0.0, "trial {trial}: metric zero despite gap");
            }
        }
    }

    #[test]
    fn z_statistic_cases() {
        assert!(matches!(
            z_statistic(&[0.0, 0.0, 0.0]),
            Err(Error::ZeroVariance(3))
        ));

        let (z, p) = z_statistic(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_relative_eq!(z, 0.0, epsilon = 1e-15);
        assert_relative_eq!(p, 1.0, epsilon = 1e-12);

        let (z, p) = z_statistic(&[2.0, 0.0, 2.0, 0.0]).unwrap();
        assert_relative_eq!(z, 3.0f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(z, 1.7321, epsilon = 1e-4);
        assert_relative_eq!(p, 0.0833, epsilon = 2e-4);

        // Sign of Z equals the sign of the mean improvement.
        let (z_neg, _) = z_statistic(&[-2.0, 0.0, -2.0, 0.0]).unwrap();
        assert_relative_eq!(z_neg, -z, epsilon = 1e-12);
    }

    #[test]
    fn metric_record_csv_shape() {
        let rec = MetricRecord {
            method: "proposed".into(),
            seed: 3,
            geometry: 0.25,
            risk: 0.5,
            variance: 1.0,
            energy: 2.0,
        };
        assert_eq!(MetricRecord::csv_header().split(',').count(), 6);
        assert_eq!(rec.to_csv_row(), "proposed,3,0.25,0.5,1,2");
    }
}
