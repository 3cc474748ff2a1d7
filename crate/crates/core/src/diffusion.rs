//! Uncertainty-propagation dynamics.
//!
//! The transported latents evolve under an autonomous SDE with affine
//! (Ornstein-Uhlenbeck form) drift `μ(z) = -Θ(z - m)` and constant
//! diagonal diffusion. Euler-Maruyama advances particle clouds; a 1-D
//! explicit Fokker-Planck grid solver provides an independent oracle for
//! the simulator's discretization, and the OU stationary variance
//! `σ²/(2θ)` closes the loop analytically.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::ParticleCloud;
use crate::numkit::{Matrix, RngStream};

/// Coordinates beyond this magnitude abort the simulation: the step size
/// is too large for the drift.
const DIVERGENCE_LIMIT: f64 = 1e9;

/// An affine-drift SDE discretization:
/// `dz = -Θ(z - m) dt + diag(σ) dW`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdeSpec {
    pub theta: Matrix,
    pub attractor: Vec<f64>,
    pub diffusion_scale: Vec<f64>,
    pub step: f64,
    pub steps: usize,
}

impl SdeSpec {
    pub fn new(
        theta: Matrix,
        attractor: Vec<f64>,
        diffusion_scale: Vec<f64>,
        step: f64,
        steps: usize,
    ) -> Result<Self> {
        if !theta.is_square() || theta.rows() != attractor.len() {
            return Err(Error::DimMismatch {
                context: "sde drift",
                left: theta.rows(),
                right: attractor.len(),
            });
        }
        if diffusion_scale.len() != attractor.len() {
            return Err(Error::DimMismatch {
                context: "sde diffusion",
                left: diffusion_scale.len(),
                right: attractor.len(),
            });
        }
        if step <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "sde step must be positive, got {step}"
            )));
        }
        if diffusion_scale.iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidArgument(
                "diffusion scales must be nonnegative".into(),
            ));
        }
        Ok(Self {
            theta,
            attractor,
            diffusion_scale,
            step,
            steps,
        })
    }

    /// Scalar OU convenience constructor.
    pub fn ou_1d(theta: f64, sigma: f64, step: f64, steps: usize) -> Result<Self> {
        Self::new(
            Matrix::from_rows(1, 1, vec![theta]),
            vec![0.0],
            vec![sigma],
            step,
            steps,
        )
    }

    pub fn dim(&self) -> usize {
        self.attractor.len()
    }

    pub fn horizon(&self) -> f64 {
        self.step * self.steps as f64
    }
}

/// Advances every particle through `spec.steps` Euler-Maruyama updates:
/// `z <- z + μ(z) h + σ ⊙ √h ε`.
///
/// Each particle draws its noise from its own substream (`stream id =
/// particle index`), so results do not depend on scheduling or particle
/// count.
pub fn euler_maruyama(
    spec: &SdeSpec,
    z0: &ParticleCloud,
    rng: &RngStream,
) -> Result<ParticleCloud> {
    if z0.dim() != spec.dim() {
        return Err(Error::DimMismatch {
            context: "sde initial cloud",
            left: z0.dim(),
            right: spec.dim(),
        });
    }
    let dim = spec.dim();
    let sqrt_h = spec.step.sqrt();
    let mut points = Vec::with_capacity(z0.len() * dim);
    let mut z = vec![0.0; dim];
    for (idx, p) in z0.iter_points().enumerate() {
        let mut particle_rng = rng.substream(idx as u64);
        z.copy_from_slice(p);
        for _ in 0..spec.steps {
            // drift: -Θ(z - m)
            let mut displaced = vec![0.0; dim];
            for k in 0..dim {
                displaced[k] = z[k] - spec.attractor[k];
            }
            let drift = spec.theta.matvec(&displaced);
            for k in 0..dim {
                z[k] += -drift[k] * spec.step
                    + spec.diffusion_scale[k] * sqrt_h * particle_rng.normal();
                if z[k].abs() > DIVERGENCE_LIMIT {
                    return Err(Error::Divergence(format!(
                        "particle {idx} coordinate {k} reached {:.3e}; reduce the step",
                        z[k]
                    )));
                }
            }
        }
        points.extend_from_slice(&z);
    }
    Ok(ParticleCloud::new(dim, z0.tag(), points))
}

/// Records intermediate states every `every` steps; used by the CLI's
/// trajectory export. Returns `(time, cloud)` snapshots including the
/// initial state. Per-particle streams persist across snapshots, so the
/// final snapshot is bit-identical to a straight [`euler_maruyama`] run
/// with the same `rng`.
pub fn euler_maruyama_trajectory(
    spec: &SdeSpec,
    z0: &ParticleCloud,
    rng: &RngStream,
    every: usize,
) -> Result<Vec<(f64, ParticleCloud)>> {
    if z0.dim() != spec.dim() {
        return Err(Error::DimMismatch {
            context: "sde initial cloud",
            left: z0.dim(),
            right: spec.dim(),
        });
    }
    let every = every.max(1);
    let dim = spec.dim();
    let sqrt_h = spec.step.sqrt();
    let mut snapshots = vec![(0.0, z0.clone())];
    let mut state: Vec<f64> = z0.iter_points().flatten().copied().collect();
    let mut streams: Vec<RngStream> = (0..z0.len()).map(|i| rng.substream(i as u64)).collect();

    for step_idx in 1..=spec.steps {
        for (p, particle_rng) in streams.iter_mut().enumerate() {
            let z = &mut state[p * dim..(p + 1) * dim];
            let mut displaced = vec![0.0; dim];
            for k in 0..dim {
                displaced[k] = z[k] - spec.attractor[k];
            }
            let drift = spec.theta.matvec(&displaced);
            for k in 0..dim {
                z[k] += -drift[k] * spec.step
                    + spec.diffusion_scale[k] * sqrt_h * particle_rng.normal();
                if z[k].abs() > DIVERGENCE_LIMIT {
                    return Err(Error::Divergence(format!(
                        "particle {p} coordinate {k} reached {:.3e}; reduce the step",
                        z[k]
                    )));
                }
            }
        }
        if step_idx % every == 0 || step_idx == spec.steps {
            snapshots.push((
                step_idx as f64 * spec.step,
                ParticleCloud::new(dim, z0.tag(), state.clone()),
            ));
        }
    }
    Ok(snapshots)
}

/// A 1-D density on a uniform cell-centered grid over `[lo, hi]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityGrid {
    lo: f64,
    hi: f64,
    values: Vec<f64>,
}

impl DensityGrid {
    /// Builds a grid by evaluating `f` at cell centers and normalizing to
    /// unit mass.
    pub fn from_fn(lo: f64, hi: f64, cells: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if cells == 0 || hi <= lo {
            return Err(Error::InvalidArgument(format!(
                "invalid grid [{lo}, {hi}] with {cells} cells"
            )));
        }
        let dz = (hi - lo) / cells as f64;
        let mut values: Vec<f64> = (0..cells)
            .map(|i| f(lo + (i as f64 + 0.5) * dz).max(0.0))
            .collect();
        let mass: f64 = values.iter().sum::<f64>() * dz;
        if mass <= 0.0 {
            return Err(Error::InvalidArgument(
                "density must have positive mass".into(),
            ));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Ok(Self { lo, hi, values })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    pub fn cell_width(&self) -> f64 {
        (self.hi - self.lo) / self.values.len() as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.cell_width()
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_width()
    }

    /// Mean of the grid density.
    pub fn mean(&self) -> f64 {
        let dz = self.cell_width();
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| self.center(i) * v * dz)
            .sum()
    }

    /// Variance of the grid density.
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let dz = self.cell_width();
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let d = self.center(i) - mean;
                d * d * v * dz
            })
            .sum()
    }
}

/// Explicit finite-volume update for the 1-D Fokker-Planck equation
/// `∂p/∂t = -∂(μ p)/∂z + (σ²/2) ∂²p/∂z²` with drift `μ(z) = -θ(z - m)`
/// and zero-flux boundaries. Fluxes are differenced conservatively, so
/// total mass is preserved to rounding.
pub fn fokker_planck_1d(
    theta: f64,
    attractor: f64,
    sigma: f64,
    grid: &DensityGrid,
    step: f64,
    steps: usize,
) -> Result<DensityGrid> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let dz = grid.cell_width();
    if sigma > 0.0 {
        let bound = 0.4 * dz * dz / (sigma * sigma);
        if step > bound {
            return Err(Error::UnstableStep { step, bound });
        }
    }
    let n = grid.cells();
    let half_sigma_sq = 0.5 * sigma * sigma;
    let mut p = grid.values().to_vec();
    let mut next = vec![0.0; n];
    // Drift at the n-1 interior faces.
    let face_drift: Vec<f64> = (1..n)
        .map(|i| {
            let face = grid.lo + i as f64 * dz;
            -theta * (face - attractor)
        })
        .collect();

    for _ in 0..steps {
        for (i, slot) in next.iter_mut().enumerate() {
            // Flux at the left/right faces of cell i; boundary faces carry
            // zero flux.
            let left = if i == 0 {
                0.0
            } else {
                let adv = face_drift[i - 1] * 0.5 * (p[i - 1] + p[i]);
                let diff = half_sigma_sq * (p[i] - p[i - 1]) / dz;
                adv - diff
            };
            let right = if i == n - 1 {
                0.0
            } else {
                let adv = face_drift[i] * 0.5 * (p[i] + p[i + 1]);
                let diff = half_sigma_sq * (p[i + 1] - p[i]) / dz;
                adv - diff
            };
            *slot = p[i] - step / dz * (right - left);
        }
        std::mem::swap(&mut p, &mut next);
    }
    Ok(DensityGrid {
        lo: grid.lo,
        hi: grid.hi,
        values: p,
    })
}

/// Stationary variance `σ²/(2θ)` of the scalar OU process.
pub fn ou_stationary_variance(theta: f64, sigma: f64) -> Result<f64> {
    if theta <= 0.0 {
        return Err(Error::NonpositiveTheta(theta));
    }
    Ok(sigma * sigma / (2.0 * theta))
}

/// Total-variation distance between a particle histogram and a grid
/// density, both binned onto `bins` equal cells over the grid's support.
/// Particles outside the support are clipped into the edge bins.
pub fn histogram_tv_distance(cloud: &ParticleCloud, grid: &DensityGrid, bins: usize) -> f64 {
    assert_eq!(cloud.dim(), 1, "tv distance is for 1-D clouds");
    assert!(bins >= 1);
    let lo = grid.lo();
    let hi = grid.hi();
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0.0f64; bins];
    for p in cloud.iter_points() {
        let idx = (((p[0] - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        hist[idx] += 1.0;
    }
    let n = cloud.len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);

    let mut grid_mass = vec![0.0f64; bins];
    let dz = grid.cell_width();
    for (i, v) in grid.values().iter().enumerate() {
        let idx = (((grid.center(i) - lo) / width).floor() as isize)
            .clamp(0, bins as isize - 1) as usize;
        grid_mass[idx] += v * dz;
    }
    let total: f64 = grid_mass.iter().sum();
    if total > 0.0 {
        grid_mass.iter_mut().for_each(|g| *g /= total);
    }

    0.5 * hist
        .iter()
        .zip(&grid_mass)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::DomainTag;
    use approx::assert_relative_eq;

    fn cloud_1d(points: Vec<f64>) -> ParticleCloud {
        ParticleCloud::new(1, DomainTag::Source, points)
    }

    #[test]
    fn no_dynamics_is_identity() {
        let spec = SdeSpec::ou_1d(0.0, 0.0, 0.1, 50).unwrap();
        let z0 = cloud_1d(vec![1.0, -2.0, 0.5]);
        let out = euler_maruyama(&spec, &z0, &RngStream::new(0, 0)).unwrap();
        assert_eq!(out, z0);
    }

    #[test]
    fn single_explicit_euler_step() {
        let spec = SdeSpec::ou_1d(1.0, 0.0, 0.1, 1).unwrap();
        let out = euler_maruyama(&spec, &cloud_1d(vec![1.0]), &RngStream::new(0, 0)).unwrap();
        assert_relative_eq!(out.point(0)[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn ou_terminal_variance_matches_stationary() {
        let sigma = 2.0f64.sqrt();
        let spec = SdeSpec::ou_1d(1.0, sigma, 0.01, 10_000).unwrap();
        let z0 = cloud_1d(vec![0.0; 10_000]);
        let out = euler_maruyama(&spec, &z0, &RngStream::new(7, 0)).unwrap();
        let mean = out.sample_mean()[0];
        let var: f64 = out
            .iter_points()
            .map(|p| (p[0] - mean) * (p[0] - mean))
            .sum::<f64>()
            / out.len() as f64;
        let target = ou_stationary_variance(1.0, sigma).unwrap();
        assert_relative_eq!(target, 1.0);
        assert!(
            (var - target).abs() / target < 0.05,
            "terminal variance {var}"
        );
    }

    #[test]
    fn particle_streams_make_results_order_free() {
        let spec = SdeSpec::ou_1d(1.0, 1.0, 0.05, 20).unwrap();
        let z0 = cloud_1d(vec![0.0, 1.0, 2.0]);
        let rng = RngStream::new(3, 0);
        let full = euler_maruyama(&spec, &z0, &rng).unwrap();
        let again = euler_maruyama(&spec, &z0, &rng).unwrap();
        assert_eq!(full, again);
    }

    #[test]
    fn trajectory_endpoint_matches_straight_run() {
        let spec = SdeSpec::ou_1d(0.8, 1.2, 0.02, 37).unwrap();
        let z0 = cloud_1d(vec![0.5, -1.0, 2.0, 0.0]);
        let rng = RngStream::new(21, 4);
        let straight = euler_maruyama(&spec, &z0, &rng).unwrap();
        let snapshots = euler_maruyama_trajectory(&spec, &z0, &rng, 10).unwrap();
        let (t, last) = snapshots.last().unwrap();
        assert!((t - spec.horizon()).abs() < 1e-12);
        assert_eq!(last, &straight);
        // Snapshots at t=0, 10h, 20h, 30h, 37h.
        assert_eq!(snapshots.len(), 5);
    }

    #[test]
    fn divergence_detected() {
        // theta < 0 makes the drift repulsive: exponential blow-up.
        let spec = SdeSpec::ou_1d(-80.0, 0.0, 1.0, 400).unwrap();
        let err = euler_maruyama(&spec, &cloud_1d(vec![1.0]), &RngStream::new(0, 0));
        assert!(matches!(err, Err(Error::Divergence(_))));
    }

    #[test]
    fn grid_mass_is_normalized() {
        let grid = DensityGrid::from_fn(-8.0, 8.0, 321, |z| (-z * z / 0.5).exp()).unwrap();
        assert!((grid.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fp_no_dynamics_is_identity() {
        let grid = DensityGrid::from_fn(-4.0, 4.0, 100, |z| (-z * z).exp()).unwrap();
        let out = fokker_planck_1d(0.0, 0.0, 0.0, &grid, 0.01, 100).unwrap();
        for (a, b) in grid.values().iter().zip(out.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn fp_rejects_unstable_step() {
        let grid = DensityGrid::from_fn(-4.0, 4.0, 100, |z| (-z * z).exp()).unwrap();
        let dz = grid.cell_width();
        let bad_step = 0.5 * dz * dz;
        assert!(matches!(
            fokker_planck_1d(0.0, 0.0, 1.0, &grid, bad_step, 10),
            Err(Error::UnstableStep { .. })
        ));
    }

    #[test]
    fn fp_heat_kernel_variance_growth() {
        // Pure diffusion from N(0, 0.25) over T=1 must give N(0, 1.25).
        let cells = 320;
        let grid = DensityGrid::from_fn(-8.0, 8.0, cells, |z| {
            (-z * z / (2.0 * 0.25)).exp()
        })
        .unwrap();
        let dz = grid.cell_width();
        let step = 0.4 * dz * dz * 0.9;
        let steps = (1.0 / step).ceil() as usize;
        let step = 1.0 / steps as f64;
        let out = fokker_planck_1d(0.0, 0.0, 1.0, &grid, step, steps).unwrap();
        assert!((out.total_mass() - 1.0).abs() <= 1e-6, "mass conserved");

        let target_var = 1.25f64;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * target_var).sqrt();
        let mut worst = 0.0f64;
        for (i, v) in out.values().iter().enumerate() {
            let z = out.center(i);
            let exact = norm * (-z * z / (2.0 * target_var)).exp();
            worst = worst.max((v - exact).abs());
        }
        assert!(worst <= 0.01, "max-norm error {worst}");
        assert!((out.variance() - target_var).abs() / target_var < 0.01);
    }

    #[test]
    fn fp_mass_conserved_with_drift() {
        let grid = DensityGrid::from_fn(-8.0, 8.0, 200, |z| (-(z - 1.0).powi(2)).exp()).unwrap();
        let dz = grid.cell_width();
        let step = (0.4 * dz * dz).min(0.5 * dz / 8.0);
        let out = fokker_planck_1d(1.0, 0.0, 1.0, &grid, step, 500).unwrap();
        assert!((out.total_mass() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn sde_fp_cross_validation_ou() {
        // OU(θ=1, σ=1) from N(2, 0.25), compared at T=1.
        let theta = 1.0;
        let sigma = 1.0;
        let horizon = 1.0;

        let cells = 400;
        let grid = DensityGrid::from_fn(-8.0, 8.0, cells, |z| {
            (-(z - 2.0) * (z - 2.0) / (2.0 * 0.25)).exp()
        })
        .unwrap();
        let dz = grid.cell_width();
        let fp_step = 0.4 * dz * dz * 0.9;
        let fp_steps = (horizon / fp_step).ceil() as usize;
        let fp = fokker_planck_1d(theta, 0.0, sigma, &grid, horizon / fp_steps as f64, fp_steps)
            .unwrap();

        let n = 100_000;
        let mut init_rng = RngStream::new(11, 0);
        let z0 = cloud_1d((0..n).map(|_| 2.0 + 0.5 * init_rng.normal()).collect());
        let em_steps = 200;
        let spec = SdeSpec::ou_1d(theta, sigma, horizon / em_steps as f64, em_steps).unwrap();
        let out = euler_maruyama(&spec, &z0, &RngStream::new(11, 1)).unwrap();

        let tv = histogram_tv_distance(&out, &fp, 50);
        assert!(tv <= 0.05, "total variation {tv}");
    }

    #[test]
    fn ou_variance_trace_monotone_from_both_sides() {
        // Windowed variance along the run approaches σ²/(2θ) monotonically
        // from below (cold start) and from above (hot start).
        let sigma = 1.0;
        let theta = 1.0;
        let stationary = ou_stationary_variance(theta, sigma).unwrap();
        for (start_var, from_below) in [(0.01, true), (2.5, false)] {
            let n = 4000;
            let mut init = RngStream::new(5, 9);
            let z0 = cloud_1d(
                (0..n)
                    .map(|_| f64::sqrt(start_var) * init.normal())
                    .collect(),
            );
            let mut current = z0;
            let mut averages = Vec::new();
            let window = 100;
            let chunks = 8;
            for c in 0..chunks {
                let spec = SdeSpec::ou_1d(theta, sigma, 0.005, window).unwrap();
                current =
                    euler_maruyama(&spec, &current, &RngStream::new(5, 100 + c as u64)).unwrap();
                let mean = current.sample_mean()[0];
                let var = current
                    .iter_points()
                    .map(|p| (p[0] - mean) * (p[0] - mean))
                    .sum::<f64>()
                    / current.len() as f64;
                averages.push(var);
            }
            for w in averages.windows(2) {
                let toward = (w[1] - stationary).abs();
                let before = (w[0] - stationary).abs();
                assert!(
                    toward <= before * 1.15 + 0.02,
                    "variance trace not converging ({from_below}): {averages:?}"
                );
            }
        }
    }

    #[test]
    fn stationary_variance_values() {
        assert_relative_eq!(
            ou_stationary_variance(1.0, 2.0f64.sqrt()).unwrap(),
            1.0
        );
        assert_relative_eq!(ou_stationary_variance(2.0, 1.0).unwrap(), 0.25);
        assert_relative_eq!(ou_stationary_variance(3.0, 0.0).unwrap(), 0.0);
        assert!(matches!(
            ou_stationary_variance(0.0, 1.0),
            Err(Error::NonpositiveTheta(_))
        ));
    }
}
