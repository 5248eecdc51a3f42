//! Per-time-step observation operators, Gaussian noise and the posterior.
//!
//! The parallel-beam projector uses Joseph's method: each ray is sampled
//! once per pixel row (or column) along its driving axis and linearly
//! interpolated between the two nearest pixel centres. The weights are stored
//! in a sparse row matrix, so back-projection is its exact transpose.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::SpatialGrid;
use crate::error::{check_dim, Error, Result};
use crate::prior::{coefficients_from_whitened, prior_neg_log, prior_neg_log_from_radii, CoefficientMatrix, PriorSpec, WhitenedMatrix};
use crate::scalar::NORM_FLOOR;
use crate::Real;

/// Sparse parallel-beam projection matrix for one set of angles.
///
/// Rows are indexed `k · n_det + m` (angle `k`, detector `m`), which is the
/// column-major flattening of an `n_det × n_angles` sinogram. Columns are
/// grid sites.
#[derive(Debug, Clone, PartialEq)]
pub struct RadonOperator<T> {
    n_sites: usize,
    n_det: usize,
    angles: Vec<T>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<T>,
}

impl<T: Real> RadonOperator<T> {
    /// Builds the projector. Detectors are centred on the domain centre with
    /// spacing `det_spacing` (default: the pixel width).
    pub fn new(grid: &SpatialGrid<T>, angles: &[T], n_det: usize, det_spacing: Option<T>) -> Result<Self> {
        if n_det == 0 || angles.is_empty() {
            return Err(Error::InvalidArgument("need at least one detector and one angle".into()));
        }
        let spacing = det_spacing.unwrap_or_else(|| grid.dx());
        if !(spacing > T::zero()) {
            return Err(Error::InvalidArgument("detector spacing must be positive".into()));
        }
        let d = grid.domain();
        let cx = (d.x0 + d.x1).as_f64() * 0.5;
        let cy = (d.y0 + d.y1).as_f64() * 0.5;
        let (nx, ny) = (grid.nx(), grid.ny());
        let (x0, y0) = (d.x0.as_f64(), d.y0.as_f64());
        let (dx, dy) = (grid.dx().as_f64(), grid.dy().as_f64());
        let h = spacing.as_f64();

        let mut row_ptr = Vec::with_capacity(angles.len() * n_det + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for &theta in angles {
            let (sin, cos) = theta.as_f64().sin_cos();
            for m in 0..n_det {
                let s = (m as f64 - (n_det as f64 - 1.0) / 2.0) * h;
                // ray p(t) = c + s (cos, sin) + t (-sin, cos)
                let (px, py) = (cx + s * cos, cy + s * sin);
                let mut push = |ix: usize, iy: usize, w: f64| {
                    if w != 0.0 {
                        cols.push((ix * ny + iy) as u32);
                        weights.push(T::of(w));
                    }
                };
                if cos.abs() >= sin.abs() {
                    let seg = dy / cos.abs();
                    for iy in 0..ny {
                        let y = y0 + (iy as f64 + 0.5) * dy;
                        let t = (y - py) / cos;
                        let x = px - t * sin;
                        interpolate((x - x0) / dx - 0.5, nx, |ix, w| push(ix, iy, w * seg));
                    }
                } else {
                    let seg = dx / sin.abs();
                    for ix in 0..nx {
                        let x = x0 + (ix as f64 + 0.5) * dx;
                        let t = (px - x) / sin;
                        let y = py + t * cos;
                        interpolate((y - y0) / dy - 0.5, ny, |iy, w| push(ix, iy, w * seg));
                    }
                }
                row_ptr.push(cols.len());
            }
        }
        Ok(Self { n_sites: grid.len(), n_det, angles: angles.to_vec(), row_ptr, cols, weights })
    }

    pub fn n_det(&self) -> usize {
        self.n_det
    }

    pub fn angles(&self) -> &[T] {
        &self.angles
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// Sites and weights touched by ray `row`.
    pub fn ray(&self, row: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[row]..self.row_ptr[row + 1];
        self.cols[span.clone()].iter().map(|&c| c as usize).zip(self.weights[span].iter().copied())
    }

    pub fn apply(&self, x: &DVector<T>) -> Result<DVector<T>> {
        check_dim("projection input", self.n_sites, x.len())?;
        Ok(DVector::from_fn(self.n_rows(), |r, _| {
            self.ray(r).fold(T::zero(), |acc, (c, w)| acc + w * x[c])
        }))
    }

    pub fn apply_adjoint(&self, y: &DVector<T>) -> Result<DVector<T>> {
        check_dim("back-projection input", self.n_rows(), y.len())?;
        let mut x = DVector::zeros(self.n_sites);
        for r in 0..self.n_rows() {
            let yr = y[r];
            if yr != T::zero() {
                for (c, w) in self.ray(r) {
                    x[c] += w * yr;
                }
            }
        }
        Ok(x)
    }
}

/// Linear interpolation weights at fractional index `f` on `0..n`.
fn interpolate(f: f64, n: usize, mut emit: impl FnMut(usize, f64)) {
    let i0 = f.floor();
    let w1 = f - i0;
    let i0 = i0 as i64;
    if i0 >= 0 && (i0 as usize) < n {
        emit(i0 as usize, 1.0 - w1);
    }
    if i0 + 1 >= 0 && ((i0 + 1) as usize) < n {
        emit((i0 + 1) as usize, w1);
    }
}

/// Sinogram (`n_det × n_angles`) of an `nx × ny` image.
pub fn radon_project<T: Real>(image: &DMatrix<T>, grid: &SpatialGrid<T>, angles: &[T], n_det: usize) -> Result<DMatrix<T>> {
    check_dim("image rows", grid.nx(), image.nrows())?;
    check_dim("image cols", grid.ny(), image.ncols())?;
    let op = RadonOperator::new(grid, angles, n_det, None)?;
    let x = DVector::from_fn(grid.len(), |i, _| image[(i / grid.ny(), i % grid.ny())]);
    let y = op.apply(&x)?;
    Ok(DMatrix::from_column_slice(n_det, angles.len(), y.as_slice()))
}

/// Exact adjoint of [`radon_project`], returned as an `nx × ny` image.
pub fn radon_backproject<T: Real>(sino: &DMatrix<T>, angles: &[T], grid: &SpatialGrid<T>) -> Result<DMatrix<T>> {
    check_dim("sinogram cols", angles.len(), sino.ncols())?;
    let op = RadonOperator::new(grid, angles, sino.nrows(), None)?;
    let x = op.apply_adjoint(&DVector::from_column_slice(sino.as_slice()))?;
    Ok(DMatrix::from_fn(grid.nx(), grid.ny(), |ix, iy| x[grid.index(ix, iy)]))
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOp<T> {
    /// Observe every site.
    Identity,
    /// Observe the listed sites.
    Select(Vec<usize>),
    Radon(Arc<RadonOperator<T>>),
}

/// One linear map `A_j` per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOp<T> {
    n_sites: usize,
    steps: Vec<StepOp<T>>,
}

impl<T: Real> ForwardOp<T> {
    pub fn new(n_sites: usize, steps: Vec<StepOp<T>>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidArgument("forward operator needs at least one step".into()));
        }
        for s in &steps {
            match s {
                StepOp::Select(idx) if idx.iter().any(|&i| i >= n_sites) => {
                    return Err(Error::InvalidArgument("selection index out of range".into()));
                }
                StepOp::Radon(r) => check_dim("projector sites", n_sites, r.n_sites())?,
                _ => {}
            }
        }
        Ok(Self { n_sites, steps })
    }

    pub fn identity(n_sites: usize, j: usize) -> Self {
        Self { n_sites, steps: vec![StepOp::Identity; j] }
    }

    /// Parallel-beam CT with its own angle set per time step.
    pub fn radon(grid: &SpatialGrid<T>, angles: &[Vec<T>], n_det: usize) -> Result<Self> {
        let steps = angles
            .iter()
            .map(|a| Ok(StepOp::Radon(Arc::new(RadonOperator::new(grid, a, n_det, None)?))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid.len(), steps)
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn step(&self, j: usize) -> &StepOp<T> {
        &self.steps[j]
    }

    /// Output length `m_j`.
    pub fn out_dim(&self, j: usize) -> usize {
        match &self.steps[j] {
            StepOp::Identity => self.n_sites,
            StepOp::Select(idx) => idx.len(),
            StepOp::Radon(r) => r.n_rows(),
        }
    }

    pub fn apply(&self, j: usize, x: &DVector<T>) -> Result<DVector<T>> {
        check_dim("forward input", self.n_sites, x.len())?;
        match &self.steps[j] {
            StepOp::Identity => Ok(x.clone()),
            StepOp::Select(idx) => Ok(DVector::from_iterator(idx.len(), idx.iter().map(|&i| x[i]))),
            StepOp::Radon(r) => r.apply(x),
        }
    }

    pub fn adjoint(&self, j: usize, y: &DVector<T>) -> Result<DVector<T>> {
        check_dim("adjoint input", self.out_dim(j), y.len())?;
        match &self.steps[j] {
            StepOp::Identity => Ok(y.clone()),
            StepOp::Select(idx) => {
                let mut x = DVector::zeros(self.n_sites);
                for (&i, &v) in idx.iter().zip(y.iter()) {
                    x[i] += v;
                }
                Ok(x)
            }
            StepOp::Radon(r) => r.apply_adjoint(y),
        }
    }

    /// Noiseless data `A_j u_j` for every column of `u` (`I × J`).
    pub fn observe(&self, u: &DMatrix<T>) -> Result<Vec<DVector<T>>> {
        check_dim("field time steps", self.n_steps(), u.ncols())?;
        (0..self.n_steps()).map(|j| self.apply(j, &u.column(j).into_owned())).collect()
    }
}

/// Gaussian observation noise, shared or per time step.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel<T: Real> {
    /// `Γ = σ² I` at every step.
    Isotropic(T),
    /// `Γ_j = σ_j² I`.
    PerStep(Vec<T>),
    /// The same dense SPD `Γ` at every step.
    Full { cov: DMatrix<T>, chol: DMatrix<T>, logdet: T },
}

impl<T: Real> NoiseModel<T> {
    pub fn isotropic(sigma: T) -> Result<Self> {
        if !(sigma > T::zero()) {
            return Err(Error::InvalidArgument("noise level must be positive".into()));
        }
        Ok(Self::Isotropic(sigma * sigma))
    }

    pub fn per_step(sigmas: &[T]) -> Result<Self> {
        if sigmas.iter().any(|&s| !(s > T::zero())) {
            return Err(Error::InvalidArgument("noise levels must be positive".into()));
        }
        Ok(Self::PerStep(sigmas.iter().map(|&s| s * s).collect()))
    }

    pub fn full(cov: DMatrix<T>) -> Result<Self> {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("noise covariance is not positive definite".into()))?
            .l();
        let logdet = T::of(2.0) * chol.diagonal().iter().fold(T::zero(), |a, &d| a + d.ln());
        Ok(Self::Full { cov, chol, logdet })
    }

    /// Per-step levels `σ_j = level · ‖A_j u_j‖ / √m_j`.
    pub fn relative(op: &ForwardOp<T>, truth: &DMatrix<T>, level: T) -> Result<Self> {
        let clean = op.observe(truth)?;
        let sig: Vec<T> = clean
            .iter()
            .map(|y| {
                let s = level * y.norm() / T::of_usize(y.len()).sqrt();
                if s > T::zero() {
                    s
                } else {
                    level
                }
            })
            .collect();
        Self::per_step(&sig)
    }

    /// `L_j⁻¹ r`, so that `‖r‖²_Γ = ‖L_j⁻¹ r‖²`.
    pub fn whiten(&self, j: usize, r: &DVector<T>) -> Result<DVector<T>> {
        match self {
            Self::Isotropic(v) => Ok(r / v.sqrt()),
            Self::PerStep(v) => Ok(r / v[j].sqrt()),
            Self::Full { chol, .. } => {
                check_dim("residual", chol.nrows(), r.len())?;
                Ok(chol.solve_lower_triangular(r).expect("positive diagonal"))
            }
        }
    }

    /// `Γ_j⁻¹ r`.
    pub fn inv_apply(&self, j: usize, r: &DVector<T>) -> Result<DVector<T>> {
        match self {
            Self::Isotropic(v) => Ok(r / *v),
            Self::PerStep(v) => Ok(r / v[j]),
            Self::Full { chol, .. } => {
                let w = self.whiten(j, r)?;
                Ok(chol.tr_solve_lower_triangular(&w).expect("positive diagonal"))
            }
        }
    }

    /// `log |Γ_j|` for an `m`-dimensional observation.
    pub fn logdet(&self, j: usize, m: usize) -> T {
        match self {
            Self::Isotropic(v) => T::of_usize(m) * v.ln(),
            Self::PerStep(v) => T::of_usize(m) * v[j].ln(),
            Self::Full { logdet, .. } => *logdet,
        }
    }

    /// Returns `r + L_j ε` with `ε ~ N(0, I)`.
    pub fn perturb<R: Rng + ?Sized>(&self, rng: &mut R, j: usize, y: &DVector<T>) -> DVector<T> {
        let eps = DVector::from_fn(y.len(), |_, _| T::of(StandardNormal.sample(rng)));
        match self {
            Self::Isotropic(v) => y + eps * v.sqrt(),
            Self::PerStep(v) => y + eps * v[j].sqrt(),
            Self::Full { chol, .. } => y + chol * eps,
        }
    }

    pub fn check(&self, op: &ForwardOp<T>) -> Result<()> {
        match self {
            Self::Isotropic(_) => Ok(()),
            Self::PerStep(v) => check_dim("noise levels", op.n_steps(), v.len()),
            Self::Full { cov, .. } => (0..op.n_steps()).try_for_each(|j| check_dim("noise covariance", cov.nrows(), op.out_dim(j))),
        }
    }
}

/// Data `y_j` per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations<T> {
    pub data: Vec<DVector<T>>,
    pub t_grid: Vec<T>,
}

impl<T: Real> Observations<T> {
    pub fn new(data: Vec<DVector<T>>, t_grid: Vec<T>) -> Result<Self> {
        check_dim("observation count", t_grid.len(), data.len())?;
        Ok(Self { data, t_grid })
    }

    /// Noisy observations of the field `u` (`I × J`).
    pub fn simulate<R: Rng + ?Sized>(
        rng: &mut R,
        op: &ForwardOp<T>,
        noise: &NoiseModel<T>,
        u: &DMatrix<T>,
        t_grid: Vec<T>,
    ) -> Result<Self> {
        noise.check(op)?;
        let clean = op.observe(u)?;
        let data = clean.iter().enumerate().map(|(j, y)| noise.perturb(rng, j, y)).collect();
        Self::new(data, t_grid)
    }

    pub fn total_len(&self) -> usize {
        self.data.iter().map(|y| y.len()).sum()
    }
}

/// `½ Σ_j ‖y_j - A_j u_j‖²_Γ` and `½ Σ_j log|Γ_j|`.
pub fn data_misfit<T: Real>(
    u: &DMatrix<T>,
    op: &ForwardOp<T>,
    noise: &NoiseModel<T>,
    obs: &Observations<T>,
) -> Result<(T, T)> {
    check_dim("observation steps", op.n_steps(), obs.data.len())?;
    let half = T::of(0.5);
    let mut misfit = T::zero();
    let mut logdet = T::zero();
    for (j, y) in obs.data.iter().enumerate() {
        check_dim("observation length", op.out_dim(j), y.len())?;
        let r = op.apply(j, &u.column(j).into_owned())? - y;
        misfit += half * noise.whiten(j, &r)?.norm_squared();
        logdet += half * noise.logdet(j, y.len());
    }
    Ok((misfit, logdet))
}

/// Gaussian log-likelihood `log p(Y | u)`, including `2π` and `log|Γ|` terms.
pub fn log_likelihood<T: Real>(
    u: &DMatrix<T>,
    op: &ForwardOp<T>,
    noise: &NoiseModel<T>,
    obs: &Observations<T>,
) -> Result<T> {
    let (misfit, logdet) = data_misfit(u, op, noise, obs)?;
    let n = T::of_usize(obs.total_len());
    Ok(-(misfit + logdet + n * T::of(0.5) * T::two_pi().ln()))
}

/// Terms of the whitened negative log-posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegLogPost<T> {
    /// `½ Σ_j ‖y_j - A_j u_j‖²_Γ`.
    pub misfit: T,
    /// `½ Σ_j log|Γ_j|`.
    pub noise_logdet: T,
    /// Prior part evaluated at `Ξ = Λ(Ζ)`.
    pub prior: T,
    /// `-Σ_ℓ log|det dΛ(ζ_ℓ)|` when enabled, else zero.
    pub jacobian: T,
    pub total: T,
}

/// Everything needed to evaluate the posterior in white-noise coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Posterior<'a, T: Real> {
    pub spec: &'a PriorSpec<T>,
    pub op: &'a ForwardOp<T>,
    pub noise: &'a NoiseModel<T>,
    pub obs: &'a Observations<T>,
    /// Include `-log|dT|` so the density is the one of `Ζ`.
    pub include_jacobian: bool,
}

impl<'a, T: Real> Posterior<'a, T> {
    pub fn new(
        spec: &'a PriorSpec<T>,
        op: &'a ForwardOp<T>,
        noise: &'a NoiseModel<T>,
        obs: &'a Observations<T>,
    ) -> Result<Self> {
        check_dim("operator steps", spec.n_times(), op.n_steps())?;
        check_dim("operator sites", spec.n_sites(), op.n_sites())?;
        check_dim("observation steps", spec.n_times(), obs.data.len())?;
        for (j, y) in obs.data.iter().enumerate() {
            check_dim("observation length", op.out_dim(j), y.len())?;
        }
        noise.check(op)?;
        Ok(Self { spec, op, noise, obs, include_jacobian: false })
    }

    pub fn with_jacobian(self, on: bool) -> Self {
        Self { include_jacobian: on, ..self }
    }

    /// Residual gradient `G_U = [A_jᵀ Γ_j⁻¹ (A_j u_j - y_j)]_j` and misfit.
    fn field_gradient(&self, u: &DMatrix<T>) -> Result<(T, DMatrix<T>)> {
        let half = T::of(0.5);
        let mut misfit = T::zero();
        let mut g = DMatrix::zeros(u.nrows(), u.ncols());
        for (j, y) in self.obs.data.iter().enumerate() {
            let r = self.op.apply(j, &u.column(j).into_owned())? - y;
            let w = self.noise.whiten(j, &r)?;
            misfit += half * w.norm_squared();
            g.set_column(j, &self.op.adjoint(j, &self.noise.inv_apply(j, &r)?)?);
        }
        Ok((misfit, g))
    }

    fn noise_logdet(&self) -> T {
        let half = T::of(0.5);
        self.obs
            .data
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (j, y)| acc + half * self.noise.logdet(j, y.len()))
    }

    fn jacobian_term(&self, zeta: &DMatrix<T>) -> Result<T> {
        let p = T::of(2.0) / self.spec.q - T::one();
        if !self.include_jacobian {
            return Ok(T::zero());
        }
        let (j, l) = (T::of_usize(zeta.nrows()), T::of_usize(zeta.ncols()));
        let mut log_norms = T::zero();
        for c in zeta.column_iter().filter(|_| p != T::zero()) {
            let n = c.norm();
            if n.as_f64() <= NORM_FLOOR {
                return Err(Error::Singularity);
            }
            log_norms += n.ln();
        }
        let constant = l * ((T::of(2.0) / self.spec.q).ln() + T::of(0.5) * self.spec.kernel.logdet);
        Ok(-(p * j * log_norms + constant))
    }

    pub fn neg_log_post(&self, zeta: &WhitenedMatrix<T>) -> Result<NegLogPost<T>> {
        let xi = coefficients_from_whitened(zeta, self.spec)?;
        let u = self.spec.field_values(&xi)?;
        let (misfit, noise_logdet) = data_misfit(&u, self.op, self.noise, self.obs)?;
        let prior = prior_neg_log(&xi, self.spec)?;
        let jacobian = self.jacobian_term(&zeta.0)?;
        let total = misfit + noise_logdet + prior + jacobian;
        Ok(NegLogPost { misfit, noise_logdet, prior, jacobian, total })
    }

    /// The same objective written in `Ξ` coordinates (no Jacobian term).
    pub fn neg_log_post_xi(&self, xi: &CoefficientMatrix<T>) -> Result<T> {
        let u = self.spec.field_values(xi)?;
        let (misfit, noise_logdet) = data_misfit(&u, self.op, self.noise, self.obs)?;
        Ok(misfit + noise_logdet + prior_neg_log(xi, self.spec)?)
    }

    /// Total objective and its gradient with respect to `Ζ`.
    pub fn value_and_grad(&self, zeta: &WhitenedMatrix<T>) -> Result<(T, DMatrix<T>)> {
        let spec = self.spec;
        let q = spec.q;
        let half = T::of(0.5);
        let xi = coefficients_from_whitened(zeta, spec)?;
        let u = spec.field_values(&xi)?;
        let (misfit, g_u) = self.field_gradient(&u)?;
        let mut g_xi = spec.field_adjoint(&g_u)?;

        let r = spec.radii(&xi)?;
        let prior = prior_neg_log_from_radii(&r, spec)?;
        let jacobian = self.jacobian_term(&zeta.0)?;
        let grad = if self.include_jacobian {
            // prior and Jacobian together are ½‖Ζ‖² + const
            self.whiten_adjoint(&zeta.0, &g_xi)? + &zeta.0
        } else {
            // ∂/∂ξ_ℓ = [-(J/2)(q/2-1)/r_ℓ + (q/4) r_ℓ^{q/2-1}] · 2 C⁻¹ ξ_ℓ
            let cinv_xi = spec.kernel.factor_solve(&xi.0)?;
            let jn = T::of_usize(spec.n_times());
            for (l, &rl) in r.iter().enumerate() {
                let mut c = q / T::of(4.0) * rl.powf(q * half - T::one());
                if q != T::of(2.0) {
                    c -= jn * half * (q * half - T::one()) / rl;
                }
                let col = cinv_xi.column(l) * (T::of(2.0) * c);
                let mut target = g_xi.column_mut(l);
                target += col;
            }
            self.whiten_adjoint(&zeta.0, &g_xi)?
        };
        let total = misfit + self.noise_logdet() + prior + jacobian;
        Ok((total, grad))
    }

    pub fn grad_neg_log_post(&self, zeta: &WhitenedMatrix<T>) -> Result<DMatrix<T>> {
        Ok(self.value_and_grad(zeta)?.1)
    }

    /// Column-wise `dΛ(ζ_ℓ)ᵀ g_ℓ`.
    fn whiten_adjoint(&self, zeta: &DMatrix<T>, g: &DMatrix<T>) -> Result<DMatrix<T>> {
        let p = T::of(2.0) / self.spec.q - T::one();
        let mut w = self.spec.kernel.chol.tr_mul(g);
        if p == T::zero() {
            return Ok(w);
        }
        for (mut wc, z) in w.column_iter_mut().zip(zeta.column_iter()) {
            let n = z.norm();
            if n.as_f64() <= NORM_FLOOR {
                return Err(Error::Singularity);
            }
            let dot = z.dot(&wc);
            wc += z * (p * dot / (n * n));
            wc *= n.powf(p);
        }
        Ok(w)
    }

    /// Column-wise `dΛ(ζ_ℓ) v_ℓ`.
    fn whiten_tangent(&self, zeta: &DMatrix<T>, v: &DMatrix<T>) -> Result<DMatrix<T>> {
        let p = T::of(2.0) / self.spec.q - T::one();
        let mut out = v.clone();
        if p != T::zero() {
            for (mut oc, z) in out.column_iter_mut().zip(zeta.column_iter()) {
                let n = z.norm();
                if n.as_f64() <= NORM_FLOOR {
                    return Err(Error::Singularity);
                }
                let dot = z.dot(&oc);
                oc += z * (p * dot / (n * n));
                oc *= n.powf(p);
            }
        }
        Ok(&self.spec.kernel.chol * out)
    }

    /// Data misfit `Φ(Ζ) = ½ Σ_j ‖y_j - A_j T(Ζ)_j‖²_Γ` and its gradient.
    ///
    /// With the Jacobian included, `neg_log_post(Ζ) = Φ(Ζ) + ½‖Ζ‖² + const`,
    /// so the bare misfit is the potential relative to the `N(0, I)` reference
    /// measure that the white-noise samplers use. When `include_jacobian` is
    /// set, `-log|dΛ(Ζ)|` is added here as well.
    pub fn potential(&self, zeta: &WhitenedMatrix<T>) -> Result<(T, DMatrix<T>)> {
        let xi = coefficients_from_whitened(zeta, self.spec)?;
        let u = self.spec.field_values(&xi)?;
        let (misfit, g_u) = self.field_gradient(&u)?;
        let g_xi = self.spec.field_adjoint(&g_u)?;
        let mut grad = self.whiten_adjoint(&zeta.0, &g_xi)?;
        if !self.include_jacobian {
            return Ok((misfit, grad));
        }
        let p = T::of(2.0) / self.spec.q - T::one();
        let pj = p * T::of_usize(zeta.0.nrows());
        if p != T::zero() {
            for (mut gc, z) in grad.column_iter_mut().zip(zeta.0.column_iter()) {
                gc -= z * (pj / z.norm_squared());
            }
        }
        Ok((misfit + self.jacobian_term(&zeta.0)?, grad))
    }

    /// Gauss–Newton Hessian of the misfit applied to a direction:
    /// `dTᵀ [A_jᵀ Γ_j⁻¹ A_j]_j dT · V`.
    pub fn gauss_newton_apply(&self, zeta: &WhitenedMatrix<T>, v: &DMatrix<T>) -> Result<DMatrix<T>> {
        self.spec.check_coeffs(v)?;
        let dxi = self.whiten_tangent(&zeta.0, v)?;
        let du = self.spec.field_values(&CoefficientMatrix(dxi))?;
        let mut hu = DMatrix::zeros(du.nrows(), du.ncols());
        for j in 0..du.ncols() {
            let a = self.op.apply(j, &du.column(j).into_owned())?;
            hu.set_column(j, &self.op.adjoint(j, &self.noise.inv_apply(j, &a)?)?);
        }
        let g_xi = self.spec.field_adjoint(&hu)?;
        self.whiten_adjoint(&zeta.0, &g_xi)
    }

    /// Gaussian log-likelihood of the field `T(Ζ)`.
    pub fn log_likelihood(&self, zeta: &WhitenedMatrix<T>) -> Result<T> {
        let u = self.spec.field_values(&coefficients_from_whitened(zeta, self.spec)?)?;
        log_likelihood(&u, self.op, self.noise, self.obs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_grid, eval_basis, BasisKind, Domain};
    use crate::prior::whitened_from_coefficients;
    use crate::tkernel::{matern_cov, uniform_time_grid, TemporalKernel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(n: usize) -> SpatialGrid<f64> {
        build_grid(n, n, Domain::symmetric_unit()).unwrap()
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
    }

    fn angles(n: usize) -> Vec<f64> {
        (0..n).map(|k| std::f64::consts::PI * k as f64 / n as f64).collect()
    }

    #[test]
    fn disk_chord_through_centre() {
        let g = unit_grid(256);
        let r = 0.5;
        let img = DMatrix::from_fn(256, 256, |ix, iy| {
            let (x, y) = (g.x_center(ix), g.y_center(iy));
            if x * x + y * y <= r * r {
                1.0
            } else {
                0.0
            }
        });
        for &theta in &[0.0, 0.3, std::f64::consts::FRAC_PI_4, 1.2] {
            let s = radon_project(&img, &g, &[theta], 363).unwrap();
            let mid = s[(181, 0)];
            assert!((mid - 2.0 * r).abs() / (2.0 * r) < 0.01, "theta={theta} got {mid}");
        }
    }

    #[test]
    fn zero_image() {
        let g = unit_grid(16);
        let s = radon_project(&DMatrix::zeros(16, 16), &g, &angles(5), 23).unwrap();
        assert_eq!(s.shape(), (23, 5));
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotation_consistency() {
        let g = unit_grid(128);
        let bump = |x: f64, y: f64| (-((x - 0.3).powi(2) + (y + 0.1).powi(2)) / 0.02).exp() + 0.5 * (-((x + 0.2).powi(2) + (y - 0.25).powi(2)) / 0.05).exp();
        let theta: f64 = 0.7;
        let (sn, cs) = theta.sin_cos();
        let img = DMatrix::from_fn(128, 128, |ix, iy| bump(g.x_center(ix), g.y_center(iy)));
        // rotated(p) = f(R_θ p), so its angle-0 projection is f's angle-θ projection
        let rot = DMatrix::from_fn(128, 128, |ix, iy| {
            let (x, y) = (g.x_center(ix), g.y_center(iy));
            bump(cs * x - sn * y, sn * x + cs * y)
        });
        let a = radon_project(&img, &g, &[theta], 181).unwrap();
        let b = radon_project(&rot, &g, &[0.0], 181).unwrap();
        let rel = (&a - &b).norm() / a.norm();
        assert!(rel < 0.02, "{rel}");
    }

    #[test]
    fn adjoint_identity() {
        let g = unit_grid(32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let op = RadonOperator::new(&g, &angles(7), 47, None).unwrap();
        let x = randn(&mut rng, g.len());
        let y = randn(&mut rng, op.n_rows());
        let lhs = op.apply(&x).unwrap().dot(&y);
        let rhs = x.dot(&op.apply_adjoint(&y).unwrap());
        assert!((lhs - rhs).abs() / lhs.abs() < 1e-8);

        let z = randn(&mut rng, g.len());
        let ata = |v: &DVector<f64>| op.apply_adjoint(&op.apply(v).unwrap()).unwrap();
        let a = ata(&x).dot(&z);
        let b = x.dot(&ata(&z));
        assert!((a - b).abs() / a.abs() < 1e-8);
    }

    #[test]
    fn single_ray_support() {
        let g = unit_grid(16);
        let mut sino = DMatrix::zeros(23, 1);
        sino[(11, 0)] = 1.0;
        let bp = radon_backproject(&sino, &[0.0], &g).unwrap();
        // a vertical ray through x = 0 touches only the two central columns
        for ix in 0..16 {
            for iy in 0..16 {
                let touched = ix == 7 || ix == 8;
                assert_eq!(bp[(ix, iy)] != 0.0, touched, "({ix},{iy})");
            }
        }
    }

    #[test]
    fn matrix_wrappers_agree() {
        let g = unit_grid(12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = DMatrix::from_fn(12, 12, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sino = radon_project(&img, &g, &angles(4), 17).unwrap();
        let y = DMatrix::from_fn(17, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let bp = radon_backproject(&y, &angles(4), &g).unwrap();
        assert!((sino.dot(&y) - img.dot(&bp)).abs() < 1e-9);
    }

    #[test]
    fn selection_adjoint() {
        let op = ForwardOp::<f64>::new(6, vec![StepOp::Select(vec![0, 3, 3, 5])]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 6);
        let y = randn(&mut rng, 4);
        let lhs = op.apply(0, &x).unwrap().dot(&y);
        let rhs = x.dot(&op.adjoint(0, &y).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(ForwardOp::<f64>::new(3, vec![StepOp::Select(vec![3])]).is_err());
    }

    fn setup(q: f64, nx: usize, j: usize, l: usize) -> (PriorSpec<f64>, ForwardOp<f64>) {
        let g = unit_grid(nx);
        let basis = eval_basis(&g, l, BasisKind::FourierCosine).unwrap();
        let t = uniform_time_grid(j, 0.0, 1.0);
        let k = matern_cov(&TemporalKernel::matern(1.0, 0.3, 0.5, 1.0, t.clone()).unwrap()).unwrap();
        let spec = PriorSpec::new(q, 1.0, g.clone(), t, basis, k).unwrap();
        let steps = (0..j).map(|s| StepOp::Select((0..g.len()).filter(|i| (i + s) % 3 != 0).collect())).collect();
        (spec, ForwardOp::new(g.len(), steps).unwrap())
    }

    fn random_obs(rng: &mut ChaCha8Rng, op: &ForwardOp<f64>, t: &[f64]) -> Observations<f64> {
        let data = (0..op.n_steps()).map(|j| randn(rng, op.out_dim(j))).collect();
        Observations::new(data, t.to_vec()).unwrap()
    }

    fn finite_difference_check(post: &Posterior<f64>, zeta: &DMatrix<f64>, rng: &mut ChaCha8Rng) {
        let grad = post.grad_neg_log_post(&WhitenedMatrix(zeta.clone())).unwrap();
        let f = |z: &DMatrix<f64>| post.neg_log_post(&WhitenedMatrix(z.clone())).unwrap().total;
        // directional check along random directions plus a few coordinates
        for _ in 0..4 {
            let v = DMatrix::from_fn(zeta.nrows(), zeta.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let h = 1e-5;
            let fd = (f(&(zeta + &v * h)) - f(&(zeta - &v * h))) / (2.0 * h);
            let an = grad.dot(&v);
            assert!((fd - an).abs() / an.abs().max(1e-8) < 1e-5, "fd {fd} an {an}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &q in &[1.0, 1.5, 2.0] {
            let (spec, op) = setup(q, 6, 4, 10);
            let obs = random_obs(&mut rng, &op, &spec.t_grid);
            let noise = NoiseModel::isotropic(0.5).unwrap();
            for jac in [false, true] {
                let post = Posterior::new(&spec, &op, &noise, &obs).unwrap().with_jacobian(jac);
                let z = DMatrix::from_fn(4, 10, |_, _| rng.sample::<f64, _>(StandardNormal));
                finite_difference_check(&post, &z, &mut rng);
            }
        }
    }

    #[test]
    fn xi_form_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (spec, op) = setup(1.2, 5, 3, 8);
        let obs = random_obs(&mut rng, &op, &spec.t_grid);
        let noise = NoiseModel::isotropic(0.3).unwrap();
        let post = Posterior::new(&spec, &op, &noise, &obs).unwrap();
        for _ in 0..10 {
            let z = WhitenedMatrix(DMatrix::from_fn(3, 8, |_, _| rng.sample::<f64, _>(StandardNormal)));
            let xi = coefficients_from_whitened(&z, &spec).unwrap();
            let a = post.neg_log_post(&z).unwrap().total;
            let b = post.neg_log_post_xi(&xi).unwrap();
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }
    }

    #[test]
    fn jacobian_makes_prior_standard_normal() {
        // prior(Λζ) - log|dΛ| = ½‖ζ‖² + log(q/2) per column
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for &q in &[1.0, 1.6, 2.0] {
            let (spec, op) = setup(q, 4, 5, 6);
            let obs = random_obs(&mut rng, &op, &spec.t_grid);
            let noise = NoiseModel::isotropic(1.0).unwrap();
            let post = Posterior::new(&spec, &op, &noise, &obs).unwrap().with_jacobian(true);
            let mut offsets = vec![];
            for _ in 0..20 {
                let z = DMatrix::from_fn(5, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
                let t = post.neg_log_post(&WhitenedMatrix(z.clone())).unwrap();
                offsets.push(t.prior + t.jacobian - 0.5 * z.norm_squared());
                let (pot, _) = post.with_jacobian(false).potential(&WhitenedMatrix(z.clone())).unwrap();
                assert!((pot - t.misfit).abs() < 1e-12 * pot.max(1.0));
            }
            let lo = offsets.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = offsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(hi - lo < 1e-9, "q={q} spread {}", hi - lo);
            let expected = 6.0 * (q / 2.0).ln();
            assert!((lo - expected).abs() < 1e-9, "{lo} vs {expected}");
        }
    }

    #[test]
    fn potential_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (spec, op) = setup(1.3, 5, 3, 7);
        let obs = random_obs(&mut rng, &op, &spec.t_grid);
        let noise = NoiseModel::isotropic(0.4).unwrap();
        let post = Posterior::new(&spec, &op, &noise, &obs).unwrap();
        let z = DMatrix::from_fn(3, 7, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (_, g) = post.potential(&WhitenedMatrix(z.clone())).unwrap();
        let v = DMatrix::from_fn(3, 7, |_, _| rng.sample::<f64, _>(StandardNormal));
        let h = 1e-5;
        let f = |m: DMatrix<f64>| post.potential(&WhitenedMatrix(m)).unwrap().0;
        let fd = (f(&z + &v * h) - f(&z - &v * h)) / (2.0 * h);
        assert!((fd - g.dot(&v)).abs() < 1e-6 * fd.abs().max(1.0));

        let with = post.with_jacobian(true);
        let (p1, g1) = with.potential(&WhitenedMatrix(z.clone())).unwrap();
        let (p0, _) = post.potential(&WhitenedMatrix(z.clone())).unwrap();
        assert!((p1 - p0 - with.neg_log_post(&WhitenedMatrix(z.clone())).unwrap().jacobian).abs() < 1e-12);
        let f = |m: DMatrix<f64>| with.potential(&WhitenedMatrix(m)).unwrap().0;
        let fd = (f(&z + &v * h) - f(&z - &v * h)) / (2.0 * h);
        assert!((fd - g1.dot(&v)).abs() < 1e-6 * fd.abs().max(1.0));
    }

    #[test]
    fn gauss_newton_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (spec, op) = setup(1.5, 5, 3, 7);
        let obs = random_obs(&mut rng, &op, &spec.t_grid);
        let noise = NoiseModel::isotropic(0.4).unwrap();
        let post = Posterior::new(&spec, &op, &noise, &obs).unwrap();
        let z = WhitenedMatrix(DMatrix::from_fn(3, 7, |_, _| rng.sample::<f64, _>(StandardNormal)));
        let a = DMatrix::from_fn(3, 7, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::from_fn(3, 7, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ha = post.gauss_newton_apply(&z, &a).unwrap();
        let hb = post.gauss_newton_apply(&z, &b).unwrap();
        assert!((ha.dot(&b) - a.dot(&hb)).abs() < 1e-9 * ha.dot(&b).abs().max(1.0));
        assert!(ha.dot(&a) >= 0.0);
    }

    #[test]
    fn quadratic_closed_form() {
        // I = J = L = 1, identity op, Γ = σ²: misfit ½(y - φγξ)²/σ²
        let g = build_grid(1, 1, Domain::symmetric_unit()).unwrap();
        let basis = eval_basis(&g, 1, BasisKind::FourierCosine).unwrap();
        let k = matern_cov(&TemporalKernel::identity(1.0, vec![1.0]).unwrap()).unwrap();
        let spec = PriorSpec::new(2.0_f64, 1.0, g, vec![1.0], basis, k).unwrap();
        let op = ForwardOp::identity(1, 1);
        let noise = NoiseModel::isotropic(0.5).unwrap();
        let obs = Observations::new(vec![DVector::from_element(1, 2.0)], vec![1.0]).unwrap();
        let post = Posterior::new(&spec, &op, &noise, &obs).unwrap();
        let t = post.neg_log_post(&WhitenedMatrix(DMatrix::from_element(1, 1, 0.5))).unwrap();
        assert!((t.misfit - 0.5 * 1.5 * 1.5 / 0.25).abs() < 1e-14);
        assert!((t.noise_logdet - 0.5 * 0.25f64.ln()).abs() < 1e-14);
        assert!((t.prior - 0.125).abs() < 1e-14);
    }

    #[test]
    fn zero_data_gaussian_constants() {
        let (spec, op) = setup(2.0, 4, 3, 5);
        let obs = Observations::new((0..3).map(|j| DVector::zeros(op.out_dim(j))).collect(), spec.t_grid.clone()).unwrap();
        let noise = NoiseModel::isotropic(1.0).unwrap();
        let post = Posterior::new(&spec, &op, &noise, &obs).unwrap();
        let t = post.neg_log_post(&WhitenedMatrix(DMatrix::zeros(3, 5))).unwrap();
        assert_eq!(t.misfit, 0.0);
        assert!((t.total - 2.5 * spec.kernel.logdet).abs() < 1e-12);
    }

    #[test]
    fn doubling_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (spec, _) = setup(1.5, 4, 3, 5);
        let op = ForwardOp::identity(16, 3);
        let obs = random_obs(&mut rng, &op, &spec.t_grid);
        let z = WhitenedMatrix(DMatrix::from_fn(3, 5, |_, _| rng.sample::<f64, _>(StandardNormal)));
        let n1 = NoiseModel::isotropic(0.7).unwrap();
        let n2 = NoiseModel::full(DMatrix::from_diagonal_element(op.out_dim(0), op.out_dim(0), 2.0 * 0.49)).unwrap();
        let a = Posterior::new(&spec, &op, &n1, &obs).unwrap().neg_log_post(&z).unwrap();
        let b = Posterior::new(&spec, &op, &n2, &obs).unwrap().neg_log_post(&z).unwrap();
        assert!((b.misfit - 0.5 * a.misfit).abs() < 1e-10 * a.misfit);
        let m = op.out_dim(0) as f64;
        assert!((b.noise_logdet - a.noise_logdet - 3.0 * m / 2.0 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn round_trip_whitening_in_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (spec, op) = setup(1.1, 4, 3, 5);
        let obs = random_obs(&mut rng, &op, &spec.t_grid);
        let noise = NoiseModel::isotropic(1.0).unwrap();
        let post = Posterior::new(&spec, &op, &noise, &obs).unwrap();
        let xi = CoefficientMatrix(DMatrix::from_fn(3, 5, |_, _| rng.sample::<f64, _>(StandardNormal)));
        let z = whitened_from_coefficients(&xi, &spec).unwrap();
        assert!((post.neg_log_post(&z).unwrap().total - post.neg_log_post_xi(&xi).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn relative_noise_levels() {
        let (spec, op) = setup(2.0, 4, 2, 3);
        let u = DMatrix::from_element(16, 2, 1.0);
        let n = NoiseModel::relative(&op, &u, 0.01).unwrap();
        let NoiseModel::PerStep(v) = &n else { panic!() };
        assert!((v[0].sqrt() - 0.01).abs() < 1e-15);
        let obs = Observations::simulate(&mut ChaCha8Rng::seed_from_u64(0), &op, &n, &u, spec.t_grid.clone()).unwrap();
        assert_eq!(obs.data.len(), 2);
        let ll = log_likelihood(&u, &op, &n, &obs).unwrap();
        assert!(ll.is_finite());
    }
}
