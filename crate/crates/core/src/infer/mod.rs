//! MAP estimation and posterior sampling in white-noise coordinates.

mod lbfgs;
mod mcmc;

use nalgebra::DMatrix;

use crate::error::Result;
use crate::forward::Posterior;
use crate::prior::WhitenedMatrix;
use crate::Real;

pub use lbfgs::{map_optimize, map_optimize_with, MapOptions, MapProgress, MapResult, StopReason};
pub use mcmc::{leapfrog_step, wn_mcmc_run, wn_mcmc_run_with, Chain, LowRankMetric, McmcOptions, McmcProgress, McmcVariant};

/// Smooth objective over `J × L` matrices.
///
/// Implementations must be callable concurrently.
pub trait Objective<T: Real>: Sync {
    fn value(&self, x: &DMatrix<T>) -> Result<T> {
        Ok(self.value_grad(x)?.0)
    }

    fn value_grad(&self, x: &DMatrix<T>) -> Result<(T, DMatrix<T>)>;
}

/// Potential `Φ(ζ)` relative to the standard normal reference measure.
pub trait Potential<T: Real>: Sync {
    fn potential(&self, x: &DMatrix<T>) -> Result<(T, DMatrix<T>)>;

    /// Gauss–Newton Hessian applied to a direction; only needed when `β > 0`.
    fn gauss_newton(&self, _x: &DMatrix<T>, _v: &DMatrix<T>) -> Result<DMatrix<T>> {
        Err(crate::Error::InvalidArgument("potential has no Gauss-Newton operator".into()))
    }
}

/// Wraps a closure returning `(value, gradient)`.
pub struct FnObjective<F>(pub F);

impl<T: Real, F> Objective<T> for FnObjective<F>
where
    F: Fn(&DMatrix<T>) -> Result<(T, DMatrix<T>)> + Sync,
{
    fn value_grad(&self, x: &DMatrix<T>) -> Result<(T, DMatrix<T>)> {
        (self.0)(x)
    }
}

impl<T: Real, F> Potential<T> for FnObjective<F>
where
    F: Fn(&DMatrix<T>) -> Result<(T, DMatrix<T>)> + Sync,
{
    fn potential(&self, x: &DMatrix<T>) -> Result<(T, DMatrix<T>)> {
        (self.0)(x)
    }
}

impl<T: Real> Objective<T> for Posterior<'_, T> {
    fn value(&self, x: &DMatrix<T>) -> Result<T> {
        Ok(self.neg_log_post(&WhitenedMatrix(x.clone()))?.total)
    }

    fn value_grad(&self, x: &DMatrix<T>) -> Result<(T, DMatrix<T>)> {
        self.value_and_grad(&WhitenedMatrix(x.clone()))
    }
}

impl<T: Real> Potential<T> for Posterior<'_, T> {
    fn potential(&self, x: &DMatrix<T>) -> Result<(T, DMatrix<T>)> {
        Posterior::potential(self, &WhitenedMatrix(x.clone()))
    }

    fn gauss_newton(&self, x: &DMatrix<T>, v: &DMatrix<T>) -> Result<DMatrix<T>> {
        self.gauss_newton_apply(&WhitenedMatrix(x.clone()), v)
    }
}
