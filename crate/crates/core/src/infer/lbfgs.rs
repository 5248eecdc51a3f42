//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use super::Objective;
use crate::error::{Error, Result};
use crate::prior::WhitenedMatrix;
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct MapOptions<T> {
    pub max_iter: usize,
    /// Stop once `‖∇f‖_∞ < grad_tol`.
    pub grad_tol: T,
    /// Stop once `‖Δx‖_∞ < step_tol · (1 + ‖x‖_∞)`.
    pub step_tol: T,
    /// Number of stored curvature pairs.
    pub memory: usize,
    /// Stop once the supplied error measure falls below this value.
    pub error_threshold: Option<T>,
    pub armijo: T,
    pub backtrack: T,
    pub max_backtracks: usize,
}

impl<T: Real> Default for MapOptions<T> {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            grad_tol: T::of(1e-6),
            step_tol: T::of(1e-12),
            memory: 10,
            error_threshold: None,
            armijo: T::of(1e-4),
            backtrack: T::of(0.5),
            max_backtracks: 50,
        }
    }
}

impl<T: Real> MapOptions<T> {
    fn validate(&self) -> Result<()> {
        let pos = |v: T| v > T::zero();
        if self.max_iter == 0 || self.memory == 0 || !pos(self.grad_tol) || !pos(self.step_tol) {
            return Err(Error::InvalidArgument("optimizer tolerances and limits must be positive".into()));
        }
        if !(pos(self.armijo) && self.armijo < T::one() && pos(self.backtrack) && self.backtrack < T::one()) {
            return Err(Error::InvalidArgument("line search constants must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradTol,
    StepTol,
    MaxIter,
    ErrorThreshold,
    LineSearchFailed,
}

/// Snapshot passed to the progress callback after every iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapProgress<T> {
    pub iter: usize,
    pub objective: T,
    pub grad_norm: T,
    pub error: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult<T: Real> {
    pub zeta: WhitenedMatrix<T>,
    pub objective: T,
    /// Objective at the start and after every accepted step.
    pub objective_trace: Vec<T>,
    /// Error at the same points, when an error measure was supplied.
    pub error_trace: Vec<T>,
    pub grad_norm: T,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub stop: StopReason,
}

pub fn map_optimize<T: Real, O: Objective<T> + ?Sized>(
    obj: &O,
    init: WhitenedMatrix<T>,
    opts: &MapOptions<T>,
) -> Result<MapResult<T>> {
    map_optimize_with(obj, init, opts, None, None)
}

/// L-BFGS from `init`, with an optional error measure (for traces and early
/// stopping) and a progress callback.
pub fn map_optimize_with<T: Real, O: Objective<T> + ?Sized>(
    obj: &O,
    init: WhitenedMatrix<T>,
    opts: &MapOptions<T>,
    error: Option<&dyn Fn(&DMatrix<T>) -> T>,
    mut progress: Option<&mut dyn FnMut(&MapProgress<T>)>,
) -> Result<MapResult<T>> {
    opts.validate()?;
    let mut x = init.0;
    let (mut f, mut g) = obj.value_grad(&x)?;
    let mut evaluations = 1;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective or gradient at the initial point".into()));
    }
    let mut objective_trace = vec![f];
    let mut error_trace = Vec::new();
    let mut err_now = error.map(|e| e(&x));
    error_trace.extend(err_now);

    let mut history: VecDeque<(DMatrix<T>, DMatrix<T>, T)> = VecDeque::with_capacity(opts.memory);
    let mut iter = 0;
    let stop = loop {
        let gnorm = g.amax();
        if let Some(cb) = progress.as_deref_mut() {
            cb(&MapProgress { iter, objective: f, grad_norm: gnorm, error: err_now });
        }
        if gnorm < opts.grad_tol {
            break StopReason::GradTol;
        }
        if let (Some(t), Some(e)) = (opts.error_threshold, err_now) {
            if e < t {
                break StopReason::ErrorThreshold;
            }
        }
        if iter >= opts.max_iter {
            break StopReason::MaxIter;
        }

        let mut d = two_loop(&g, &history);
        let mut slope = g.dot(&d);
        if !(slope < T::zero()) || !slope.is_finite() {
            history.clear();
            d = -&g;
            slope = -g.norm_squared();
        }
        let mut step = if history.is_empty() {
            (T::one() / d.norm()).min(T::one())
        } else {
            T::one()
        };

        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial = &x + &d * step;
            evaluations += 1;
            if let Ok((ft, gt)) = obj.value_grad(&trial) {
                if ft.is_finite() && ft <= f + opts.armijo * step * slope && gt.iter().all(|v| v.is_finite()) {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= opts.backtrack;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break StopReason::LineSearchFailed;
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > T::of(1e-12) * s.norm() * y.norm() {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s.clone(), y, T::one() / sy));
        }
        let step_small = s.amax() < opts.step_tol * (T::one() + x_new.amax());
        x = x_new;
        f = f_new;
        g = g_new;
        iter += 1;
        objective_trace.push(f);
        err_now = error.map(|e| e(&x));
        error_trace.extend(err_now);
        if step_small {
            if let Some(cb) = progress.as_deref_mut() {
                cb(&MapProgress { iter, objective: f, grad_norm: g.amax(), error: err_now });
            }
            break StopReason::StepTol;
        }
    };

    let converged = matches!(stop, StopReason::GradTol | StopReason::StepTol | StopReason::ErrorThreshold);
    Ok(MapResult {
        grad_norm: g.amax(),
        zeta: WhitenedMatrix(x),
        objective: f,
        objective_trace,
        error_trace,
        iterations: iter,
        evaluations,
        converged,
        stop,
    })
}

/// Two-loop recursion: `-H_k g` with initial scaling `sᵀy / yᵀy`.
fn two_loop<T: Real>(g: &DMatrix<T>, history: &VecDeque<(DMatrix<T>, DMatrix<T>, T)>) -> DMatrix<T> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = *rho * s.dot(&q);
        q -= y * a;
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * y.dot(&q);
        q += s * (a - b);
    }
    -q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::FnObjective;

    fn rosenbrock(x: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let (a, b) = (x[(0, 0)], x[(1, 0)]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = DMatrix::from_column_slice(2, 1, &[-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]);
        Ok((f, g))
    }

    #[test]
    fn solves_rosenbrock() {
        let init = WhitenedMatrix(DMatrix::from_column_slice(2, 1, &[-1.2, 1.0]));
        let r = map_optimize(&FnObjective(rosenbrock), init, &MapOptions { grad_tol: 1e-8, ..Default::default() }).unwrap();
        assert!(r.converged, "{:?}", r.stop);
        assert!((r.zeta.0[(0, 0)] - 1.0).abs() < 1e-6);
        assert!(r.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_exact() {
        // f = ½ xᵀ A x - bᵀ x
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let b = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let obj = FnObjective(|x: &DMatrix<f64>| Ok(((x.transpose() * &a * x)[(0, 0)] * 0.5 - b.dot(x), &a * x - &b)));
        let r = map_optimize(&obj, WhitenedMatrix(DMatrix::zeros(3, 1)), &MapOptions { grad_tol: 1e-12, ..Default::default() }).unwrap();
        let exact = a.clone().lu().solve(&b).unwrap();
        assert!((r.zeta.0 - exact).amax() < 1e-10);
        assert!(r.grad_norm < 1e-12);
    }

    #[test]
    fn max_iter_and_early_stop() {
        let init = WhitenedMatrix(DMatrix::from_column_slice(2, 1, &[-1.2, 1.0]));
        let r = map_optimize(&FnObjective(rosenbrock), init.clone(), &MapOptions { max_iter: 3, ..Default::default() }).unwrap();
        assert_eq!(r.iterations, 3);
        assert_eq!(r.stop, StopReason::MaxIter);
        assert!(!r.converged);
        assert_eq!(r.objective_trace.len(), 4);

        let err = |x: &DMatrix<f64>| ((x[(0, 0)] - 1.0).powi(2) + (x[(1, 0)] - 1.0).powi(2)).sqrt();
        let opts = MapOptions { error_threshold: Some(0.5), ..Default::default() };
        let mut seen = 0;
        let mut cb = |_: &MapProgress<f64>| seen += 1;
        let r = map_optimize_with(&FnObjective(rosenbrock), init, &opts, Some(&err), Some(&mut cb)).unwrap();
        assert_eq!(r.stop, StopReason::ErrorThreshold);
        assert!(*r.error_trace.last().unwrap() < 0.5);
        assert_eq!(r.error_trace.len(), r.objective_trace.len());
        assert_eq!(seen, r.iterations + 1);
    }

    #[test]
    fn rejects_non_finite_start() {
        let obj = FnObjective(|x: &DMatrix<f64>| Ok((f64::NAN, x.clone())));
        assert!(map_optimize(&obj, WhitenedMatrix(DMatrix::zeros(1, 1)), &MapOptions::default()).is_err());
    }

    #[test]
    fn line_search_failure_keeps_best() {
        // gradient points the wrong way, so no step decreases f
        let obj = FnObjective(|x: &DMatrix<f64>| Ok((x[(0, 0)], DMatrix::from_element(1, 1, -1.0))));
        let r = map_optimize(&obj, WhitenedMatrix(DMatrix::from_element(1, 1, 2.0)), &MapOptions::default()).unwrap();
        assert_eq!(r.stop, StopReason::LineSearchFailed);
        assert!(!r.converged);
        assert_eq!(r.zeta.0[(0, 0)], 2.0);
    }
}
