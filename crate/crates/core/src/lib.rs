//! Uncertainty-aware probabilistic latent transport for domain adaptation.
//!
//! The crate trains a stochastic affine-Gaussian transport operator that
//! carries samples of a source latent distribution toward a target latent
//! distribution, under a composite objective combining a task loss, an
//! entropic-transport-flavored alignment term, and a PAC-Bayesian
//! complexity penalty. Around that core live the tools needed to evaluate
//! it end to end on synthetic shifted domains:
//!
//! - [`numkit`]: dense matrix primitives and counter-based seeded RNG
//! - [`measures`]: Gaussians, mixtures, particle clouds, divergences and
//!   the closed-form Bures-Wasserstein oracle
//! - [`sinkhorn`]: log-domain entropic optimal transport
//! - [`transport`]: the affine-Gaussian transport operator, its loss and
//!   analytic gradients
//! - [`diffusion`]: Euler-Maruyama simulation and a 1-D Fokker-Planck
//!   solver used to cross-validate uncertainty propagation
//! - [`pacbayes`]: posterior/prior KL, transfer bounds, sample-complexity
//!   calculator
//! - [`trainer`]: the minibatch Adam training loop with Lyapunov-energy
//!   monitoring
//! - [`evalx`]: geometry discrepancy, covariance calibration, transport
//!   energy, variance trace, and the significance statistic
//! - [`benchsuite`]: shift scenarios, baselines and the experiment runner

#![allow(clippy::needless_range_loop)]

pub mod benchsuite;
pub mod diffusion;
pub mod error;
pub mod evalx;
pub mod measures;
pub mod numkit;
pub mod pacbayes;
pub mod sinkhorn;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
