//! Matérn temporal covariance on a time grid, with Cholesky factorization.
//!
//! `C(t, t') = κ · 2^{1-ν}/Γ(ν) · w^ν K_ν(w)`, `w = √(2ν) (|t - t'| / ρ)^s`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::Real;

/// Relative diagonal nugget tried first, then doubled up to [`MAX_NUGGET`].
pub const INITIAL_NUGGET: f64 = 1e-10;
pub const MAX_NUGGET: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Matern,
    /// Time-uncorrelated baseline, `C = κ I`.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalKernel<T> {
    pub kind: KernelKind,
    pub kappa: T,
    pub rho: T,
    pub nu: T,
    pub s_exp: T,
    pub t_grid: Vec<T>,
}

impl<T: Real> TemporalKernel<T> {
    pub fn matern(kappa: T, rho: T, nu: T, s_exp: T, t_grid: Vec<T>) -> Result<Self> {
        let k = Self { kind: KernelKind::Matern, kappa, rho, nu, s_exp, t_grid };
        k.validate()?;
        Ok(k)
    }

    pub fn identity(kappa: T, t_grid: Vec<T>) -> Result<Self> {
        let k = Self {
            kind: KernelKind::Identity,
            kappa,
            rho: T::one(),
            nu: T::of(0.5),
            s_exp: T::one(),
            t_grid,
        };
        k.validate()?;
        Ok(k)
    }

    fn validate(&self) -> Result<()> {
        let pos = |v: T| v > T::zero() && v.is_finite();
        if !(pos(self.kappa) && pos(self.rho) && pos(self.nu) && pos(self.s_exp)) {
            return Err(Error::InvalidArgument(
                "kernel parameters kappa, rho, nu, s must be positive".into(),
            ));
        }
        if self.t_grid.is_empty() {
            return Err(Error::InvalidArgument("time grid is empty".into()));
        }
        if self.t_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("time grid must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_grid.is_empty()
    }

    /// Covariance at time lag `dt`.
    pub fn eval(&self, dt: T) -> T {
        match self.kind {
            KernelKind::Identity => {
                if dt == T::zero() {
                    self.kappa
                } else {
                    T::zero()
                }
            }
            KernelKind::Matern => self.kappa * matern_correlation(self.nu, self.rho, self.s_exp, dt),
        }
    }

    /// Dense `J × J` covariance, without nugget.
    pub fn cov_matrix(&self) -> DMatrix<T> {
        let j = self.len();
        let mut c = DMatrix::zeros(j, j);
        for a in 0..j {
            for b in 0..=a {
                let v = self.eval(self.t_grid[a] - self.t_grid[b]);
                c[(a, b)] = v;
                c[(b, a)] = v;
            }
        }
        c
    }
}

/// Matérn correlation (value 1 at lag 0).
pub fn matern_correlation<T: Real>(nu: T, rho: T, s_exp: T, dt: T) -> T {
    let dist = dt.abs() / rho;
    if dist == T::zero() {
        return T::one();
    }
    let w = (T::of(2.0) * nu).sqrt() * dist.powf(s_exp);
    let nu64 = nu.as_f64();
    let e = (-w).exp();
    if nu64 == 0.5 {
        e
    } else if nu64 == 1.5 {
        (T::one() + w) * e
    } else if nu64 == 2.5 {
        (T::one() + w + w * w / T::of(3.0)) * e
    } else {
        let w64 = w.as_f64();
        let log_val = (1.0 - nu64) * std::f64::consts::LN_2 - statrs::function::gamma::ln_gamma(nu64)
            + nu64 * w64.ln();
        T::of(log_val.exp() * bessel_k(nu64, w64))
    }
}

/// Modified Bessel function of the second kind `K_ν(x)` for `x > 0`,
/// from `∫₀^∞ exp(-x cosh t) cosh(νt) dt` by the trapezoidal rule.
///
/// The integrand is analytic in a strip around the real axis, so the rule
/// converges geometrically in the step size.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k requires x > 0");
    let h = 0.02;
    let f = |t: f64| (-x * t.cosh() + nu.abs() * t).exp() * 0.5 * (1.0 + (-2.0 * nu.abs() * t).exp());
    let mut sum = 0.5 * f(0.0);
    let mut k = 1;
    loop {
        let t = k as f64 * h;
        let v = f(t);
        sum += v;
        // past the peak of the integrand and negligible
        if x * t.sinh() > nu.abs() && v < 1e-18 * sum {
            break;
        }
        if v == 0.0 && k > 10 {
            break;
        }
        k += 1;
    }
    sum * h
}

/// Cholesky factorization of a temporal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFactor<T: Real> {
    pub cov: DMatrix<T>,
    /// Lower triangular, `chol · cholᵀ = cov`.
    pub chol: DMatrix<T>,
    pub logdet: T,
    /// Variance magnitude carried by `cov`.
    pub kappa: T,
    /// Absolute nugget added to the diagonal.
    pub nugget: T,
}

/// Builds and factors the kernel's covariance matrix.
///
/// A nugget of `1e-10·κ` is added to the diagonal and doubled (up to
/// `1e-6·κ`) until the Cholesky factorization succeeds. The identity kernel
/// is factored exactly.
pub fn matern_cov<T: Real>(k: &TemporalKernel<T>) -> Result<KernelFactor<T>> {
    let cov = k.cov_matrix();
    if k.kind == KernelKind::Identity {
        let j = k.len();
        let sd = k.kappa.sqrt();
        return Ok(KernelFactor {
            chol: DMatrix::from_diagonal_element(j, j, sd),
            logdet: T::of_usize(j) * k.kappa.ln(),
            cov,
            kappa: k.kappa,
            nugget: T::zero(),
        });
    }
    KernelFactor::with_nugget(cov, k.kappa)
}

impl<T: Real> KernelFactor<T> {
    /// Factors an arbitrary SPD matrix using the nugget schedule relative to
    /// `scale`.
    pub fn with_nugget(cov: DMatrix<T>, scale: T) -> Result<Self> {
        check_dim("covariance cols", cov.nrows(), cov.ncols())?;
        let mut rel = INITIAL_NUGGET;
        while rel <= MAX_NUGGET * (1.0 + 1e-9) {
            let nugget = scale * T::of(rel);
            let mut m = cov.clone();
            for d in 0..m.nrows() {
                m[(d, d)] += nugget;
            }
            if let Some(ch) = m.clone().cholesky() {
                let chol = ch.l();
                let logdet = log_det_from_factor(&chol);
                return Ok(Self { cov: m, chol, logdet, kappa: scale, nugget });
            }
            rel *= 2.0;
        }
        Err(Error::NumericalRank { max_nugget: MAX_NUGGET })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    /// `C⁻¹ B` by two triangular solves.
    pub fn factor_solve(&self, b: &DMatrix<T>) -> Result<DMatrix<T>> {
        check_dim("right-hand side rows", self.dim(), b.nrows())?;
        let y = self
            .chol
            .solve_lower_triangular(b)
            .ok_or_else(|| Error::NonFinite("singular factor".into()))?;
        self.chol
            .tr_solve_lower_triangular(&y)
            .ok_or_else(|| Error::NonFinite("singular factor".into()))
    }

    pub fn solve_vec(&self, b: &DVector<T>) -> Result<DVector<T>> {
        check_dim("right-hand side", self.dim(), b.len())?;
        let y = self.chol.solve_lower_triangular(b).expect("positive diagonal");
        Ok(self.chol.tr_solve_lower_triangular(&y).expect("positive diagonal"))
    }

    /// Returns a factor whose covariance is rescaled to magnitude `kappa`.
    pub fn rescaled(&self, kappa: T) -> Self {
        let ratio = kappa / self.kappa;
        Self {
            cov: &self.cov * ratio,
            chol: &self.chol * ratio.sqrt(),
            logdet: self.logdet + T::of_usize(self.dim()) * ratio.ln(),
            kappa,
            nugget: self.nugget * ratio,
        }
    }

    /// Eigenvalues of the covariance in decreasing order (diagnostics only).
    pub fn spectrum(&self) -> Vec<T> {
        let eig = SymmetricEigen::new(self.cov.clone());
        let mut ev: Vec<T> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        ev
    }
}

fn log_det_from_factor<T: Real>(chol: &DMatrix<T>) -> T {
    T::of(2.0) * chol.diagonal().iter().fold(T::zero(), |acc, &d| acc + d.ln())
}

/// `J` equally spaced points on `(t0, t1]`: `t_j = t0 + j (t1 - t0) / J`.
pub fn uniform_time_grid<T: Real>(j: usize, t0: T, t1: T) -> Vec<T> {
    let step = (t1 - t0) / T::of_usize(j);
    (1..=j).map(|k| t0 + step * T::of_usize(k)).collect()
}
