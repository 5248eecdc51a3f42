//! Multivariate q-exponential distribution `q-ED_J(μ, C)`.
//!
//! Density
//!
//! ```text
//! p(ξ) = (q/2) (2π)^{-J/2} |C|^{-1/2} r^{(q/2-1) J/2} exp(-r^{q/2} / 2),
//! r = (ξ-μ)ᵀ C⁻¹ (ξ-μ),
//! ```
//!
//! which is the Gaussian `N(μ, C)` at `q = 2`. A draw is `ξ = μ + R·L·S` with
//! `C = L Lᵀ`, `S` uniform on the sphere and `R^q ~ χ²(J)`.
//!
//! The white-noise map `Λ(ζ) = μ + L ζ ‖ζ‖^{2/q-1}` pushes a standard normal
//! `ζ` onto `q-ED_J(μ, C)`; its inverse is `Λ⁻¹(ξ) = z ‖z‖^{q/2-1}` with
//! `z = L⁻¹(ξ-μ)`. At `ζ = 0` the map is extended by continuity (`Λ(0) = μ`)
//! but its Jacobian is undefined for `q < 2`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::scalar::NORM_FLOOR;
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct QedParams<T: Real> {
    q: T,
    mean: DVector<T>,
    /// Lower-triangular `L` with `C = L Lᵀ`.
    cov_factor: DMatrix<T>,
}

impl<T: Real> QedParams<T> {
    pub fn new(q: T, mean: DVector<T>, cov_factor: DMatrix<T>) -> Result<Self> {
        validate_q(q)?;
        let j = mean.len();
        if j == 0 {
            return Err(Error::InvalidArgument("dimension J must be positive".into()));
        }
        check_dim("covariance factor rows", j, cov_factor.nrows())?;
        check_dim("covariance factor cols", j, cov_factor.ncols())?;
        for c in 0..j {
            if !(cov_factor[(c, c)] > T::zero()) {
                return Err(Error::InvalidArgument(
                    "covariance factor diagonal must be strictly positive".into(),
                ));
            }
            for r in 0..c {
                if cov_factor[(r, c)] != T::zero() {
                    return Err(Error::InvalidArgument("covariance factor must be lower-triangular".into()));
                }
            }
        }
        Ok(Self { q, mean, cov_factor })
    }

    /// Zero mean, identity covariance.
    pub fn standard(q: T, j: usize) -> Result<Self> {
        Self::new(q, DVector::zeros(j), DMatrix::identity(j, j))
    }

    /// Factors an SPD covariance with a plain Cholesky decomposition.
    pub fn from_cov(q: T, mean: DVector<T>, cov: DMatrix<T>) -> Result<Self> {
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("covariance is not positive definite".into()))?;
        Self::new(q, mean, chol.l())
    }

    pub fn q(&self) -> T {
        self.q
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn cov_factor(&self) -> &DMatrix<T> {
        &self.cov_factor
    }

    /// `log |C| = 2 Σ log L_ii`.
    pub fn log_det_cov(&self) -> T {
        T::of(2.0) * self.log_det_factor()
    }

    pub(crate) fn log_det_factor(&self) -> T {
        self.cov_factor.diagonal().iter().fold(T::zero(), |acc, &d| acc + d.ln())
    }

    /// `L⁻¹ v`.
    pub fn factor_solve(&self, v: &DVector<T>) -> DVector<T> {
        self.cov_factor
            .solve_lower_triangular(v)
            .expect("factor has a positive diagonal")
    }

    /// `L⁻ᵀ v`.
    pub fn factor_solve_transpose(&self, v: &DVector<T>) -> DVector<T> {
        self.cov_factor
            .tr_solve_lower_triangular(v)
            .expect("factor has a positive diagonal")
    }

    /// Squared Mahalanobis radius `r(ξ)`.
    pub fn mahalanobis(&self, xi: &DVector<T>) -> T {
        self.factor_solve(&(xi - &self.mean)).norm_squared()
    }

    fn check_len(&self, what: &'static str, v: &DVector<T>) -> Result<()> {
        check_dim(what, self.dim(), v.len())
    }
}

pub(crate) fn validate_q<T: Real>(q: T) -> Result<()> {
    if q >= T::one() && q <= T::of(2.0) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("q must lie in [1, 2], got {q}")))
    }
}

/// Log-normalizing constant `log(q/2) - (J/2) log 2π` shared by every column.
pub fn log_normalizer<T: Real>(q: T, j: usize) -> T {
    (q / T::of(2.0)).ln() - T::of_usize(j) / T::of(2.0) * T::two_pi().ln()
}

/// `log p(ξ | μ, C, q)`.
///
/// Fails with [`Error::DegeneratePoint`] at `ξ = μ` when `q < 2`, where the
/// density has an integrable singularity.
pub fn qed_log_density<T: Real>(xi: &DVector<T>, p: &QedParams<T>) -> Result<T> {
    p.check_len("xi", xi)?;
    let q = p.q;
    let half = T::of(0.5);
    let r = p.mahalanobis(xi);
    let j = T::of_usize(p.dim());
    let radial = if q == T::of(2.0) {
        T::zero()
    } else {
        if !(r > T::zero()) {
            return Err(Error::DegeneratePoint("r = 0 with q < 2".into()));
        }
        (q * half - T::one()) * j * half * r.ln()
    };
    Ok(log_normalizer(q, p.dim()) - p.log_det_factor() + radial - half * r.powf(q * half))
}

/// Draws `ξ = μ + R·L·S` with `R = (χ²(J))^{1/q}`.
pub fn qed_sample<T: Real, R: Rng + ?Sized>(rng: &mut R, p: &QedParams<T>) -> DVector<T> {
    let j = p.dim();
    let dir = loop {
        let z: DVector<f64> = DVector::from_fn(j, |_, _| StandardNormal.sample(rng));
        let n = z.norm();
        if n > NORM_FLOOR {
            break z / n;
        }
    };
    let chi2 = ChiSquared::new(j as f64).expect("positive degrees of freedom");
    let w: f64 = chi2.sample(rng);
    let radius = w.powf(1.0 / p.q.as_f64());
    let s = dir.map(|v| T::of(v * radius));
    &p.mean + &p.cov_factor * s
}

/// `‖ζ‖` or `None` below the numerical floor.
fn nonzero_norm<T: Real>(v: &DVector<T>) -> Option<T> {
    let n = v.norm();
    (n.as_f64() > NORM_FLOOR).then_some(n)
}

/// `Λ(ζ) = μ + L ζ ‖ζ‖^{2/q-1}`; `Λ(0) = μ`.
pub fn whiten_forward<T: Real>(zeta: &DVector<T>, p: &QedParams<T>) -> Result<DVector<T>> {
    p.check_len("zeta", zeta)?;
    let Some(n) = nonzero_norm(zeta) else {
        return Ok(p.mean.clone());
    };
    let scale = n.powf(T::of(2.0) / p.q - T::one());
    Ok(&p.mean + &p.cov_factor * zeta * scale)
}

/// `Λ⁻¹(ξ) = z ‖z‖^{q/2-1}` with `z = L⁻¹(ξ-μ)`; `Λ⁻¹(μ) = 0`.
pub fn whiten_inverse<T: Real>(xi: &DVector<T>, p: &QedParams<T>) -> Result<DVector<T>> {
    p.check_len("xi", xi)?;
    let z = p.factor_solve(&(xi - &p.mean));
    let Some(n) = nonzero_norm(&z) else {
        return Ok(DVector::zeros(p.dim()));
    };
    Ok(&z * n.powf(p.q / T::of(2.0) - T::one()))
}

/// `log |det dΛ(ζ)| = log(2/q) + (2/q - 1) J log‖ζ‖ + log det L`.
///
/// `dΛ = ‖ζ‖^{2/q-1} L (I + (2/q-1) ζζᵀ/‖ζ‖²)`, and the bracket is a rank-one
/// update with determinant `2/q`.
pub fn whiten_logdet_jacobian<T: Real>(zeta: &DVector<T>, p: &QedParams<T>) -> Result<T> {
    p.check_len("zeta", zeta)?;
    let n = nonzero_norm(zeta).ok_or(Error::Singularity)?;
    let two_over_q = T::of(2.0) / p.q;
    Ok(two_over_q.ln() + (two_over_q - T::one()) * T::of_usize(p.dim()) * n.ln() + p.log_det_factor())
}

/// `dΛ(ζ)·v`, or `dΛ(ζ)ᵀ·v` when `transpose` is set.
pub fn whiten_jacobian_apply<T: Real>(
    zeta: &DVector<T>,
    v: &DVector<T>,
    p: &QedParams<T>,
    transpose: bool,
) -> Result<DVector<T>> {
    p.check_len("zeta", zeta)?;
    p.check_len("v", v)?;
    let n = nonzero_norm(zeta).ok_or(Error::Singularity)?;
    let two_over_q = T::of(2.0) / p.q;
    let scale = n.powf(two_over_q - T::one());
    let rank_one = (two_over_q - T::one()) / (n * n);
    if transpose {
        let w = p.cov_factor.tr_mul(v);
        let dot = zeta.dot(&w);
        Ok((w + zeta * (rank_one * dot)) * scale)
    } else {
        let dot = zeta.dot(v);
        Ok(&p.cov_factor * (v + zeta * (rank_one * dot)) * scale)
    }
}
