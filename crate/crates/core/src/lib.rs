//! Spatiotemporal Besov process (STBP) priors for Bayesian inverse problems.
//!
//! A space–time field `U` (pixels × time steps) is represented by a truncated
//! series `U = Φ · diag(γ) · Ξᵀ`, where `Φ` holds spatial basis functions, `γ`
//! are decaying weights, and each column of `Ξ` is a multivariate
//! q-exponential vector over the time grid with a Matérn temporal covariance.
//! The white-noise map `Λ` turns standard-normal coordinates `Ζ` into `Ξ`, which
//! makes both MAP estimation and dimension-independent MCMC work in a space
//! where the prior is Gaussian.
//!
//! Modules, bottom-up:
//!
//! * [`basis`]: spatial grid and truncated basis matrix.
//! * [`qed`]: q-exponential density, sampler and whitening maps.
//! * [`tkernel`]: Matérn temporal kernels and their Cholesky factors.
//! * [`prior`]: the assembled prior, field transport and `κ` updates.
//! * [`forward`]: observation operators (selection, Radon), noise, posterior.
//! * [`infer`]: L-BFGS MAP estimation and white-noise MCMC.
//! * [`metrics`]: RLE, PSNR and SSIM.
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases at the crate root fix the scalar to `f64`.

// `!(x > 0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod basis;
pub mod error;
pub mod forward;
pub mod infer;
pub mod metrics;
pub mod prior;
pub mod qed;
pub mod scalar;
pub mod tkernel;

pub use error::{Error, Result};
pub use scalar::Real;

pub type SpatialGrid64 = basis::SpatialGrid<f64>;
pub type BasisMatrix64 = basis::BasisMatrix<f64>;
pub type QedParams64 = qed::QedParams<f64>;
pub type TemporalKernel64 = tkernel::TemporalKernel<f64>;
pub type KernelFactor64 = tkernel::KernelFactor<f64>;
pub type PriorSpec64 = prior::PriorSpec<f64>;
pub type CoefficientMatrix64 = prior::CoefficientMatrix<f64>;
pub type WhitenedMatrix64 = prior::WhitenedMatrix<f64>;
pub type SpaceTimeField64 = prior::SpaceTimeField<f64>;
pub type ForwardOp64 = forward::ForwardOp<f64>;
pub type NoiseModel64 = forward::NoiseModel<f64>;
pub type Observations64 = forward::Observations<f64>;
pub type Posterior64<'a> = forward::Posterior<'a, f64>;
pub type MapOptions64 = infer::MapOptions<f64>;
pub type McmcOptions64 = infer::McmcOptions<f64>;
pub type Chain64 = infer::Chain<f64>;
