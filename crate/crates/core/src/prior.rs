//! The truncated spatiotemporal prior `U = Φ · diag(γ) · Ξᵀ`.
//!
//! Columns `ξ_ℓ` of `Ξ` (length `J`) are i.i.d. `q-ED_J(0, C)` where `C` is
//! the temporal covariance; the magnitude `κ` lives on `C`, not on `γ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::basis::{BasisMatrix, SpatialGrid};
use crate::error::{check_dim, Error, Result};
use crate::qed::{qed_sample, validate_q, QedParams};
use crate::scalar::NORM_FLOOR;
use crate::tkernel::KernelFactor;
use crate::Real;

/// Scale of the random starting point used by the optimizers.
pub const INIT_SCALE: f64 = 0.1;

/// `J × L` coefficient matrix, column `ℓ` is `ξ_ℓ(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix<T: Real>(pub DMatrix<T>);

/// `J × L` white-noise coordinates, column `ℓ` is `ζ_ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedMatrix<T: Real>(pub DMatrix<T>);

/// Field values on the grid, `I × J` (one column per time step).
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField<T: Real> {
    pub values: DMatrix<T>,
    pub grid: SpatialGrid<T>,
    pub t_grid: Vec<T>,
}

impl<T: Real> SpaceTimeField<T> {
    pub fn new(values: DMatrix<T>, grid: SpatialGrid<T>, t_grid: Vec<T>) -> Result<Self> {
        check_dim("field rows", grid.len(), values.nrows())?;
        check_dim("field cols", t_grid.len(), values.ncols())?;
        Ok(Self { values, grid, t_grid })
    }

    pub fn zeros(grid: SpatialGrid<T>, t_grid: Vec<T>) -> Self {
        let values = DMatrix::zeros(grid.len(), t_grid.len());
        Self { values, grid, t_grid }
    }

    pub fn n_times(&self) -> usize {
        self.t_grid.len()
    }

    /// Frame `j` as an `nx × ny` image.
    pub fn frame(&self, j: usize) -> DMatrix<T> {
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        DMatrix::from_fn(nx, ny, |ix, iy| self.values[(self.grid.index(ix, iy), j)])
    }
}

/// `γ_ℓ = ℓ^{-τ}` with `τ = s/d + 1/2 - 1/q`, `ℓ = 1..=L`.
pub fn gamma_weights<T: Real>(q: T, s: T, d: usize, l: usize) -> Result<DVector<T>> {
    validate_q(q)?;
    if !(s > T::zero()) || d == 0 {
        return Err(Error::InvalidArgument("smoothness s and dimension d must be positive".into()));
    }
    let tau = s / T::of_usize(d) + T::of(0.5) - T::one() / q;
    Ok(DVector::from_fn(l, |i, _| T::of_usize(i + 1).powf(-tau)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec<T: Real> {
    pub q: T,
    pub s: T,
    pub d: usize,
    pub grid: SpatialGrid<T>,
    pub t_grid: Vec<T>,
    pub basis: BasisMatrix<T>,
    pub kernel: KernelFactor<T>,
    pub gamma: DVector<T>,
    qed: QedParams<T>,
}

impl<T: Real> PriorSpec<T> {
    pub fn new(
        q: T,
        s: T,
        grid: SpatialGrid<T>,
        t_grid: Vec<T>,
        basis: BasisMatrix<T>,
        kernel: KernelFactor<T>,
    ) -> Result<Self> {
        let d = 2;
        check_dim("basis rows", grid.len(), basis.n_sites())?;
        check_dim("kernel size", t_grid.len(), kernel.dim())?;
        let gamma = gamma_weights(q, s, d, basis.n_terms())?;
        let qed = QedParams::new(q, DVector::zeros(t_grid.len()), kernel.chol.clone())?;
        Ok(Self { q, s, d, grid, t_grid, basis, kernel, gamma, qed })
    }

    /// Number of basis terms `L`.
    pub fn n_terms(&self) -> usize {
        self.basis.n_terms()
    }

    /// Number of time steps `J`.
    pub fn n_times(&self) -> usize {
        self.t_grid.len()
    }

    pub fn n_sites(&self) -> usize {
        self.grid.len()
    }

    pub fn kappa(&self) -> T {
        self.kernel.kappa
    }

    /// Per-column `q-ED_J(0, C)` parameters.
    pub fn column_law(&self) -> &QedParams<T> {
        &self.qed
    }

    /// Same prior with the temporal covariance rescaled to magnitude `kappa`.
    pub fn with_kappa(&self, kappa: T) -> Result<Self> {
        if !(kappa > T::zero()) || !kappa.is_finite() {
            return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
        }
        let kernel = self.kernel.rescaled(kappa);
        let qed = QedParams::new(self.q, DVector::zeros(self.n_times()), kernel.chol.clone())?;
        Ok(Self { kernel, qed, ..self.clone() })
    }

    pub(crate) fn check_coeffs(&self, m: &DMatrix<T>) -> Result<()> {
        check_dim("coefficient rows (J)", self.n_times(), m.nrows())?;
        check_dim("coefficient cols (L)", self.n_terms(), m.ncols())
    }

    /// Squared radii `r_ℓ = ξ_ℓᵀ C⁻¹ ξ_ℓ` for all columns.
    pub fn radii(&self, xi: &CoefficientMatrix<T>) -> Result<DVector<T>> {
        self.check_coeffs(&xi.0)?;
        let z = self
            .kernel
            .chol
            .solve_lower_triangular(&xi.0)
            .ok_or_else(|| Error::NonFinite("singular temporal factor".into()))?;
        Ok(DVector::from_iterator(z.ncols(), z.column_iter().map(|c| c.norm_squared())))
    }

    /// `Φ · diag(γ) · Ξᵀ` as an `I × J` matrix.
    pub fn field_values(&self, xi: &CoefficientMatrix<T>) -> Result<DMatrix<T>> {
        self.check_coeffs(&xi.0)?;
        let mut weighted = xi.0.transpose();
        for (mut row, &g) in weighted.row_iter_mut().zip(self.gamma.iter()) {
            row *= g;
        }
        Ok(self.basis.synthesize(&weighted))
    }

    /// Adjoint of [`PriorSpec::field_values`]: `G ↦ Gᵀ Φ diag(γ)`.
    pub fn field_adjoint(&self, g: &DMatrix<T>) -> Result<DMatrix<T>> {
        check_dim("field rows", self.n_sites(), g.nrows())?;
        check_dim("field cols", self.n_times(), g.ncols())?;
        let mut out = self.basis.analyze(g).transpose();
        for (mut col, &w) in out.column_iter_mut().zip(self.gamma.iter()) {
            col *= w;
        }
        Ok(out)
    }
}

pub fn field_from_coefficients<T: Real>(xi: &CoefficientMatrix<T>, spec: &PriorSpec<T>) -> Result<SpaceTimeField<T>> {
    let values = spec.field_values(xi)?;
    Ok(SpaceTimeField { values, grid: spec.grid.clone(), t_grid: spec.t_grid.clone() })
}

/// Draws `Ξ` column by column and assembles the field.
pub fn prior_sample<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    spec: &PriorSpec<T>,
) -> (CoefficientMatrix<T>, SpaceTimeField<T>) {
    let (j, l) = (spec.n_times(), spec.n_terms());
    let mut xi = DMatrix::zeros(j, l);
    for mut col in xi.column_iter_mut() {
        col.copy_from(&qed_sample(rng, &spec.qed));
    }
    let xi = CoefficientMatrix(xi);
    let field = field_from_coefficients(&xi, spec).expect("shapes come from the spec");
    (xi, field)
}

/// `(L/2) log|C| - (J/2)(q/2 - 1) Σ log r_ℓ + ½ Σ r_ℓ^{q/2}`.
///
/// Equals `-Σ_ℓ log p(ξ_ℓ)` minus `L · [log(q/2) - (J/2) log 2π]`.
pub fn prior_neg_log<T: Real>(xi: &CoefficientMatrix<T>, spec: &PriorSpec<T>) -> Result<T> {
    let r = spec.radii(xi)?;
    prior_neg_log_from_radii(&r, spec)
}

pub(crate) fn prior_neg_log_from_radii<T: Real>(r: &DVector<T>, spec: &PriorSpec<T>) -> Result<T> {
    let half = T::of(0.5);
    let q = spec.q;
    let (j, l) = (T::of_usize(spec.n_times()), T::of_usize(spec.n_terms()));
    let gaussian = q == T::of(2.0);
    let mut log_sum = T::zero();
    let mut pow_sum = T::zero();
    for &rl in r.iter() {
        if !gaussian {
            if !(rl > T::zero()) {
                return Err(Error::DegeneratePoint("zero coefficient column with q < 2".into()));
            }
            log_sum += rl.ln();
        }
        pow_sum += rl.powf(q * half);
    }
    Ok(l * half * spec.kernel.logdet - j * half * (q * half - T::one()) * log_sum + half * pow_sum)
}

/// Column-wise `Λ`: `ξ_ℓ = L_C ζ_ℓ ‖ζ_ℓ‖^{2/q-1}`; zero columns map to zero.
pub fn coefficients_from_whitened<T: Real>(zeta: &WhitenedMatrix<T>, spec: &PriorSpec<T>) -> Result<CoefficientMatrix<T>> {
    spec.check_coeffs(&zeta.0)?;
    let scales = column_scales(&zeta.0, T::of(2.0) / spec.q - T::one());
    let mut scaled = zeta.0.clone();
    for (mut col, &c) in scaled.column_iter_mut().zip(scales.iter()) {
        col *= c;
    }
    Ok(CoefficientMatrix(&spec.kernel.chol * scaled))
}

/// Column-wise `Λ⁻¹`.
pub fn whitened_from_coefficients<T: Real>(xi: &CoefficientMatrix<T>, spec: &PriorSpec<T>) -> Result<WhitenedMatrix<T>> {
    spec.check_coeffs(&xi.0)?;
    let mut z = spec
        .kernel
        .chol
        .solve_lower_triangular(&xi.0)
        .ok_or_else(|| Error::NonFinite("singular temporal factor".into()))?;
    let scales = column_scales(&z, spec.q / T::of(2.0) - T::one());
    for (mut col, &c) in z.column_iter_mut().zip(scales.iter()) {
        col *= c;
    }
    Ok(WhitenedMatrix(z))
}

/// `‖col‖^p` per column, `0` for (numerically) zero columns.
fn column_scales<T: Real>(m: &DMatrix<T>, p: T) -> Vec<T> {
    m.column_iter()
        .map(|c| {
            let n = c.norm();
            if n.as_f64() > NORM_FLOOR {
                n.powf(p)
            } else {
                T::zero()
            }
        })
        .collect()
}

/// The transport `T(Ζ) = Φ · diag(γ) · Λ(Ζ)ᵀ`.
pub fn transform_t<T: Real>(zeta: &WhitenedMatrix<T>, spec: &PriorSpec<T>) -> Result<SpaceTimeField<T>> {
    field_from_coefficients(&coefficients_from_whitened(zeta, spec)?, spec)
}

/// Starting point `0.1 · N(0, I)` of shape `J × L`.
pub fn init_whitened<T: Real, R: Rng + ?Sized>(rng: &mut R, spec: &PriorSpec<T>) -> WhitenedMatrix<T> {
    let m = DMatrix::from_fn(spec.n_times(), spec.n_terms(), |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(INIT_SCALE * z)
    });
    WhitenedMatrix(m)
}

/// Inverse-gamma parameters `(α', β')` of `κ^{q/2} | Ξ`.
///
/// `α' = α + JL/2`, `β' = β + ½ Σ r_{0,ℓ}^{q/2}` with `r_{0,ℓ} = κ r_ℓ`, the
/// radius under the unit-magnitude covariance `C₀ = C/κ`.
pub fn kappa_posterior_params<T: Real>(
    xi: &CoefficientMatrix<T>,
    alpha: T,
    beta: T,
    spec: &PriorSpec<T>,
) -> Result<(T, T)> {
    if !(alpha > T::zero() && beta > T::zero()) {
        return Err(Error::InvalidArgument("alpha and beta must be positive".into()));
    }
    let half = T::of(0.5);
    let r = spec.radii(xi)?;
    let kappa = spec.kappa();
    let pow_sum = r.iter().fold(T::zero(), |acc, &rl| acc + (kappa * rl).powf(spec.q * half));
    let a = alpha + half * T::of_usize(spec.n_times() * spec.n_terms());
    Ok((a, beta + half * pow_sum))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KappaUpdate {
    /// Draw from the conditional posterior.
    Sample,
    /// Take `(β'/(α'+1))^{2/q}`, the mode of the inverse gamma mapped back.
    Mode,
}

/// New `κ` given the coefficients; `κ^{q/2} | Ξ ~ Γ⁻¹(α', β')`.
pub fn kappa_gibbs_update<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    xi: &CoefficientMatrix<T>,
    alpha: T,
    beta: T,
    spec: &PriorSpec<T>,
    how: KappaUpdate,
) -> Result<T> {
    let (a, b) = kappa_posterior_params(xi, alpha, beta, spec)?;
    let exponent = 2.0 / spec.q.as_f64();
    let theta = match how {
        KappaUpdate::Mode => b.as_f64() / (a.as_f64() + 1.0),
        KappaUpdate::Sample => {
            let g = Gamma::new(a.as_f64(), 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            b.as_f64() / g.sample(rng)
        }
    };
    Ok(T::of(theta.powf(exponent)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_grid, eval_basis, BasisKind, Domain};
    use crate::qed::{log_normalizer, qed_log_density};
    use crate::tkernel::{matern_cov, uniform_time_grid, TemporalKernel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(q: f64, nx: usize, j: usize, l: usize, identity: bool) -> PriorSpec<f64> {
        let grid = build_grid(nx, nx, Domain::symmetric_unit()).unwrap();
        let basis = eval_basis(&grid, l, BasisKind::FourierCosine).unwrap();
        let t = uniform_time_grid(j, 0.0, 1.0);
        let k = if identity {
            TemporalKernel::identity(1.0, t.clone()).unwrap()
        } else {
            TemporalKernel::matern(1.0, 0.3, 0.5, 1.0, t.clone()).unwrap()
        };
        PriorSpec::new(q, 1.0, grid, t, basis, matern_cov(&k).unwrap()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn gamma_examples() {
        let g = gamma_weights(1.0_f64, 1.0, 2, 5).unwrap();
        assert!(g.iter().all(|&v| v == 1.0));
        let g = gamma_weights(2.0_f64, 1.0, 2, 4).unwrap();
        assert!((g[3] - 0.5).abs() < 1e-15);
        assert!(gamma_weights(0.5_f64, 1.0, 2, 4).is_err());
    }

    #[test]
    fn gamma_square_sum_converges() {
        // τ = 1, so γ_ℓ² = ℓ^{-2}; the partial sum misses ζ(2) by 1/N - 1/(2N²) + O(N⁻³)
        let n = 100_000;
        let g = gamma_weights(2.0_f64, 2.0, 2, n).unwrap();
        assert!((g[9] - 0.1).abs() < 1e-15);
        let s: f64 = g.iter().rev().map(|v| v * v).sum();
        let nf = n as f64;
        let zeta2 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((zeta2 - s - (1.0 / nf - 0.5 / (nf * nf))).abs() < 1e-13);
    }

    #[test]
    fn gamma_prefix() {
        let a = gamma_weights(1.3, 0.7, 2, 10).unwrap();
        let b = gamma_weights(1.3, 0.7, 2, 11).unwrap();
        assert_eq!(a.as_slice(), &b.as_slice()[..10]);
    }

    #[test]
    fn hand_value_q1() {
        let grid = build_grid(1, 1, Domain::symmetric_unit()).unwrap();
        let basis = eval_basis(&grid, 1, BasisKind::FourierCosine).unwrap();
        let k = matern_cov(&TemporalKernel::identity(1.0, vec![1.0]).unwrap()).unwrap();
        let sp = PriorSpec::new(1.0, 1.0, grid, vec![1.0], basis, k).unwrap();
        let v = prior_neg_log(&CoefficientMatrix(DMatrix::from_element(1, 1, 4.0)), &sp).unwrap();
        assert!((v - (2.0 + 0.25 * 16f64.ln())).abs() < 1e-12);
        assert!((v - 2.6931).abs() < 1e-4);
    }

    #[test]
    fn gaussian_identity_reduction() {
        let sp = spec(2.0, 4, 6, 9, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 6, 9);
        let v = prior_neg_log(&CoefficientMatrix(x.clone()), &sp).unwrap();
        assert!((v - 0.5 * x.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn matches_column_densities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &q in &[1.0, 1.5, 2.0] {
            let sp = spec(q, 4, 5, 7, false);
            let offset = -7.0 * log_normalizer(q, 5);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for _ in 0..100 {
                let x = random(&mut rng, 5, 7);
                let a = prior_neg_log(&CoefficientMatrix(x.clone()), &sp).unwrap();
                let b: f64 = x
                    .column_iter()
                    .map(|c| -qed_log_density(&c.into_owned(), sp.column_law()).unwrap())
                    .sum();
                let d = b - a;
                assert!((d - offset).abs() < 1e-10);
                lo = lo.min(d);
                hi = hi.max(d);
            }
            assert!(hi - lo < 1e-8);
        }
    }

    #[test]
    fn degenerate_column() {
        let sp = spec(1.5, 3, 4, 5, false);
        assert!(matches!(
            prior_neg_log(&CoefficientMatrix(DMatrix::zeros(4, 5)), &sp),
            Err(Error::DegeneratePoint(_))
        ));
        let sp2 = spec(2.0, 3, 4, 5, false);
        assert!(prior_neg_log(&CoefficientMatrix(DMatrix::zeros(4, 5)), &sp2).is_ok());
    }

    #[test]
    fn transform_zero_and_round_trip() {
        let sp = spec(2.0, 4, 3, 10, false);
        let u = transform_t(&WhitenedMatrix(DMatrix::zeros(3, 10)), &sp).unwrap();
        assert!(u.values.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &q in &[1.0, 1.4, 2.0] {
            let sp = spec(q, 4, 3, 10, false);
            let xi = CoefficientMatrix(random(&mut rng, 3, 10));
            let z = whitened_from_coefficients(&xi, &sp).unwrap();
            let a = transform_t(&z, &sp).unwrap();
            let b = field_from_coefficients(&xi, &sp).unwrap();
            assert!((a.values - b.values).amax() < 1e-10);
        }
    }

    #[test]
    fn column_rescale_law() {
        let sp = spec(1.25, 3, 4, 6, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random(&mut rng, 4, 6);
        let base = coefficients_from_whitened(&WhitenedMatrix(z.clone()), &sp).unwrap();
        let c = 2.0;
        let mut z2 = z.clone();
        z2.column_mut(2).scale_mut(c);
        let scaled = coefficients_from_whitened(&WhitenedMatrix(z2), &sp).unwrap();
        let factor = c.powf(2.0 / 1.25);
        for r in 0..4 {
            assert!((scaled.0[(r, 2)] - factor * base.0[(r, 2)]).abs() <= 1e-12 * base.0[(r, 2)].abs().max(1.0));
            assert_eq!(scaled.0[(r, 1)], base.0[(r, 1)]);
        }
    }

    #[test]
    fn gaussian_transform_is_linear() {
        let sp = spec(2.0, 4, 3, 8, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(&mut rng, 3, 8);
        let b = random(&mut rng, 3, 8);
        let ta = transform_t(&WhitenedMatrix(a.clone()), &sp).unwrap().values;
        let tb = transform_t(&WhitenedMatrix(b.clone()), &sp).unwrap().values;
        let tab = transform_t(&WhitenedMatrix(&a * 2.0 - &b), &sp).unwrap().values;
        assert!((tab - (ta * 2.0 - tb)).amax() < 1e-10);
    }

    #[test]
    fn field_adjoint_identity() {
        let sp = spec(1.5, 5, 4, 12, false);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 4, 12);
        let g = random(&mut rng, 25, 4);
        let lhs = sp.field_values(&CoefficientMatrix(x.clone())).unwrap().dot(&g);
        let rhs = sp.field_adjoint(&g).unwrap().dot(&x);
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn kappa_params() {
        let sp = spec(1.0, 5, 10, 20, false);
        let zero = CoefficientMatrix(DMatrix::zeros(10, 20));
        let (a, b) = kappa_posterior_params(&zero, 1.0, 0.5, &sp).unwrap();
        assert_eq!(a, 101.0);
        assert_eq!(b, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m: f64 = kappa_gibbs_update(&mut rng, &zero, 1.0, 0.5, &sp, KappaUpdate::Mode).unwrap();
        assert!((m - (0.5f64 / 102.0).powf(2.0)).abs() < 1e-15);
    }

    #[test]
    fn kappa_independent_of_stored_magnitude() {
        // β' depends on r₀ = ξᵀ C₀⁻¹ ξ only
        let sp = spec(1.5, 3, 4, 5, false);
        let sp3 = sp.with_kappa(3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xi = CoefficientMatrix(random(&mut rng, 4, 5));
        let (_, b1) = kappa_posterior_params(&xi, 2.0, 1.0, &sp).unwrap();
        let (_, b3) = kappa_posterior_params(&xi, 2.0, 1.0, &sp3).unwrap();
        assert!((b1 - b3).abs() < 1e-9 * b1);
    }

    #[test]
    fn init_scale() {
        let sp = spec(1.0, 8, 10, 64, false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = init_whitened(&mut rng, &sp);
        let var = z.0.norm_squared() / 640.0;
        assert!((var - 0.01).abs() < 0.002);
    }

    #[test]
    fn frame_layout() {
        let sp = spec(2.0, 3, 2, 4, true);
        let mut v = DMatrix::zeros(9, 2);
        v[(sp.grid.index(2, 1), 1)] = 5.0;
        let f = SpaceTimeField::new(v, sp.grid.clone(), sp.t_grid.clone()).unwrap();
        assert_eq!(f.frame(1)[(2, 1)], 5.0);
        assert!(SpaceTimeField::new(DMatrix::<f64>::zeros(8, 2), sp.grid.clone(), sp.t_grid.clone()).is_err());
    }
}
