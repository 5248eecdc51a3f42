//! White-noise dimension-independent HMC / manifold MALA.
//!
//! The chain targets `π(ζ) ∝ exp(-Φ(ζ)) N(ζ; 0, I)`. Each proposal draws a
//! velocity `η ~ N(0, K(ζ))`, with `K(ζ)⁻¹ = I + β H̃(ζ)`, and runs `I` steps
//! of a leapfrog scheme whose free flow is the exact rotation of the
//! Gaussian reference dynamics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Potential;
use crate::error::{Error, Result};
use crate::prior::{transform_t, PriorSpec, SpaceTimeField, WhitenedMatrix};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McmcVariant {
    /// `β = 0`.
    Hmc,
    /// `β > 0`, one leapfrog step.
    Mmala,
    /// `β > 0`, several leapfrog steps.
    Mhmc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcOptions<T> {
    pub step_size: T,
    pub leapfrog_steps: usize,
    /// Weight of the Gauss–Newton metric; `0` gives plain HMC.
    pub beta: T,
    /// Weight of the potential gradient in the kick.
    pub alpha: T,
    pub n_samples: usize,
    pub n_burnin: usize,
    /// Keep every `thin`-th post burn-in state.
    pub thin: usize,
    /// Dual-averaging step size adaptation during burn-in.
    pub adapt: bool,
    pub target_accept: T,
    /// Rank of the randomized Gauss–Newton approximation.
    pub metric_rank: usize,
    pub metric_oversample: usize,
}

impl<T: Real> McmcOptions<T> {
    pub fn hmc(step_size: T, leapfrog_steps: usize) -> Self {
        Self {
            step_size,
            leapfrog_steps,
            beta: T::zero(),
            alpha: T::one(),
            n_samples: 1000,
            n_burnin: 500,
            thin: 1,
            adapt: false,
            target_accept: T::of(0.65),
            metric_rank: 20,
            metric_oversample: 10,
        }
    }

    pub fn mmala(step_size: T, beta: T) -> Self {
        Self { beta, ..Self::hmc(step_size, 1) }
    }

    pub fn variant(&self) -> McmcVariant {
        if self.beta == T::zero() {
            McmcVariant::Hmc
        } else if self.leapfrog_steps == 1 {
            McmcVariant::Mmala
        } else {
            McmcVariant::Mhmc
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.step_size > T::zero()) || !self.step_size.is_finite() {
            return Err(Error::InvalidArgument("step size must be positive".into()));
        }
        if self.leapfrog_steps == 0 || self.thin == 0 || self.n_samples == 0 {
            return Err(Error::InvalidArgument("leapfrog steps, thinning and sample count must be positive".into()));
        }
        if self.beta < T::zero() {
            return Err(Error::InvalidArgument("beta must be nonnegative".into()));
        }
        if self.beta > T::zero() && self.metric_rank == 0 {
            return Err(Error::InvalidArgument("metric rank must be positive when beta > 0".into()));
        }
        if !(self.target_accept > T::zero() && self.target_accept < T::one()) {
            return Err(Error::InvalidArgument("target acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// `H̃ = V diag(d) Vᵀ` with orthonormal `V`, acting on flattened matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankMetric<T: Real> {
    pub v: DMatrix<T>,
    pub d: DVector<T>,
    pub beta: T,
}

impl<T: Real> LowRankMetric<T> {
    /// Randomized eigendecomposition of the operator `h` from a fixed test
    /// matrix `omega` (`n × m`), keeping the leading `rank` pairs.
    pub fn randomized(
        mut h: impl FnMut(&DVector<T>) -> Result<DVector<T>>,
        omega: &DMatrix<T>,
        rank: usize,
        beta: T,
    ) -> Result<Self> {
        let (n, m) = omega.shape();
        let mut y = DMatrix::zeros(n, m);
        for c in 0..m {
            y.set_column(c, &h(&omega.column(c).into_owned())?);
        }
        let q = y.qr().q();
        let mut hq = DMatrix::zeros(n, q.ncols());
        for c in 0..q.ncols() {
            hq.set_column(c, &h(&q.column(c).into_owned())?);
        }
        let b = q.tr_mul(&hq);
        let b = (&b + b.transpose()) * T::of(0.5);
        let eig = SymmetricEigen::new(b);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap_or(std::cmp::Ordering::Equal));
        order.truncate(rank.min(order.len()));
        let u = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
        let d = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i].max(T::zero())));
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gauss-Newton spectrum".into()));
        }
        Ok(Self { v: q * u, d, beta })
    }

    fn project(&self, x: &DVector<T>, f: impl Fn(T) -> T) -> DVector<T> {
        let mut c = self.v.tr_mul(x);
        for (ci, &di) in c.iter_mut().zip(self.d.iter()) {
            *ci *= f(di);
        }
        &self.v * c
    }

    /// `H̃ x`.
    pub fn h_apply(&self, x: &DVector<T>) -> DVector<T> {
        self.project(x, |d| d)
    }

    /// `K x = (I + βH̃)⁻¹ x`.
    pub fn k_apply(&self, x: &DVector<T>) -> DVector<T> {
        let b = self.beta;
        x - self.project(x, |d| b * d / (T::one() + b * d))
    }

    /// `K^{1/2} z`.
    pub fn k_sqrt_apply(&self, z: &DVector<T>) -> DVector<T> {
        let b = self.beta;
        z + self.project(z, |d| T::one() / (T::one() + b * d).sqrt() - T::one())
    }

    /// `log |K^{-1/2}| = ½ Σ log(1 + β d)`.
    pub fn log_det_k_inv_half(&self) -> T {
        self.d.iter().fold(T::zero(), |acc, &d| acc + (T::one() + self.beta * d).ln()) * T::of(0.5)
    }
}

/// One leapfrog step `(ζ₀, η₀) ↦ (ζ_ε, η_ε)`.
///
/// `g0` is `g(ζ₀)`; `g` evaluates the kick at the new position, which is
/// returned alongside the state.
pub fn leapfrog_step<T: Real>(
    zeta: &DMatrix<T>,
    eta: &DMatrix<T>,
    g0: &DMatrix<T>,
    eps: T,
    mut g: impl FnMut(&DMatrix<T>) -> Result<DMatrix<T>>,
) -> Result<(DMatrix<T>, DMatrix<T>, DMatrix<T>)> {
    let half = eps * T::of(0.5);
    let eta_minus = eta + g0 * half;
    let (s, c) = (eps.sin(), eps.cos());
    let zeta_new = zeta * c + &eta_minus * s;
    let eta_plus = eta_minus * c - zeta * s;
    let g1 = g(&zeta_new)?;
    let eta_new = eta_plus + &g1 * half;
    Ok((zeta_new, eta_new, g1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain<T: Real> {
    /// Post burn-in states, thinned.
    pub samples: Vec<WhitenedMatrix<T>>,
    /// Acceptance decision of every iteration, burn-in included.
    pub accepted: Vec<bool>,
    /// Potential of the current state after every iteration.
    pub potential: Vec<T>,
    /// `ΔE` of every proposal (`+∞` for rejected non-finite trajectories).
    pub delta_e: Vec<T>,
    pub n_burnin: usize,
    pub step_size: T,
}

impl<T: Real> Chain<T> {
    /// Acceptance rate after burn-in.
    pub fn acceptance_rate(&self) -> f64 {
        let post = &self.accepted[self.n_burnin.min(self.accepted.len())..];
        if post.is_empty() {
            return 0.0;
        }
        post.iter().filter(|&&a| a).count() as f64 / post.len() as f64
    }

    /// Samples mapped to fields through `T`.
    pub fn fields(&self, spec: &PriorSpec<T>) -> Result<Vec<SpaceTimeField<T>>> {
        self.samples.iter().map(|z| transform_t(z, spec)).collect()
    }

    /// Pointwise mean and standard deviation of the sampled fields.
    pub fn field_moments(&self, spec: &PriorSpec<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
        let n = self.samples.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty chain".into()));
        }
        let mut mean = DMatrix::zeros(spec.n_sites(), spec.n_times());
        let mut sq = mean.clone();
        for z in &self.samples {
            let u = transform_t(z, spec)?.values;
            sq += u.component_mul(&u);
            mean += u;
        }
        let nf = T::of_usize(n);
        mean /= nf;
        let var = sq / nf - mean.component_mul(&mean);
        Ok((mean, var.map(|v| v.max(T::zero()).sqrt())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McmcProgress<T> {
    pub iter: usize,
    pub potential: T,
    pub acceptance_rate: f64,
    pub step_size: T,
}

/// Position-dependent quantities of the dynamics.
struct Point<T: Real> {
    zeta: DMatrix<T>,
    phi: T,
    g: DMatrix<T>,
    metric: Option<LowRankMetric<T>>,
}

struct Sampler<'a, T: Real, P: ?Sized> {
    pot: &'a P,
    opts: &'a McmcOptions<T>,
    omega: Option<DMatrix<T>>,
}

fn flat<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_column_slice(m.as_slice())
}

fn unflat<T: Real>(v: &DVector<T>, shape: (usize, usize)) -> DMatrix<T> {
    DMatrix::from_column_slice(shape.0, shape.1, v.as_slice())
}

impl<T: Real, P: Potential<T> + ?Sized> Sampler<'_, T, P> {
    fn eval(&self, zeta: &DMatrix<T>) -> Result<Point<T>> {
        let (phi, grad) = self.pot.potential(zeta)?;
        if !phi.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("potential".into()));
        }
        let shape = zeta.shape();
        let Some(omega) = &self.omega else {
            return Ok(Point { zeta: zeta.clone(), phi, g: grad * (-self.opts.alpha), metric: None });
        };
        let metric = LowRankMetric::randomized(
            |v| Ok(flat(&self.pot.gauss_newton(zeta, &unflat(v, shape))?)),
            omega,
            self.opts.metric_rank,
            self.opts.beta,
        )?;
        let force = flat(&grad) * self.opts.alpha - metric.h_apply(&flat(zeta)) * self.opts.beta;
        let g = unflat(&-metric.k_apply(&force), shape);
        Ok(Point { zeta: zeta.clone(), phi, g, metric: Some(metric) })
    }

    /// `(β/2) ηᵀ H̃ η - log|K^{-1/2}|` at a point.
    fn metric_energy(&self, p: &Point<T>, eta: &DMatrix<T>) -> T {
        match &p.metric {
            None => T::zero(),
            Some(m) => {
                let e = flat(eta);
                self.opts.beta * T::of(0.5) * e.dot(&m.h_apply(&e)) - m.log_det_k_inv_half()
            }
        }
    }

    fn draw_velocity<R: Rng + ?Sized>(&self, rng: &mut R, p: &Point<T>) -> DMatrix<T> {
        let (r, c) = p.zeta.shape();
        let z = DMatrix::from_fn(r, c, |_, _| T::of(StandardNormal.sample(rng)));
        match &p.metric {
            None => z,
            Some(m) => unflat(&m.k_sqrt_apply(&flat(&z)), (r, c)),
        }
    }

    /// Runs the trajectory from `(start, eta)`; returns the end point and `ΔE`.
    fn trajectory(&self, start: &Point<T>, eta0: &DMatrix<T>, eps: T) -> Result<(Point<T>, DMatrix<T>, T)> {
        let mut running = T::zero();
        let mut eta = eta0.clone();
        let mut cur: Option<Point<T>> = None;
        for _ in 0..self.opts.leapfrog_steps {
            let p = cur.as_ref().unwrap_or(start);
            let mut next = None;
            let (_, eta_new, g_new) = leapfrog_step(&p.zeta, &eta, &p.g, eps, |z| {
                let q = self.eval(z)?;
                let g = q.g.clone();
                next = Some(q);
                Ok(g)
            })?;
            running += p.g.dot(&eta) + g_new.dot(&eta_new);
            eta = eta_new;
            cur = next;
        }
        let end = cur.expect("at least one leapfrog step");
        let de = end.phi - start.phi + self.metric_energy(&end, &eta) - self.metric_energy(start, eta0)
            + eps * T::of(0.5) * running
            - eps * eps / T::of(8.0) * (end.g.norm_squared() - start.g.norm_squared());
        Ok((end, eta, de))
    }
}

/// Step-size adaptation by dual averaging.
struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps_bar: f64,
    m: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64) -> Self {
        Self { mu: (10.0 * eps0).ln(), h_bar: 0.0, log_eps_bar: 0.0, m: 0.0 }
    }

    fn update(&mut self, accept_prob: f64, target: f64) -> f64 {
        self.m += 1.0;
        let w = 1.0 / (self.m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (target - accept_prob);
        let log_eps = (self.mu - self.m.sqrt() / Self::GAMMA * self.h_bar).min(std::f64::consts::FRAC_PI_2.ln());
        let mk = self.m.powf(-Self::KAPPA);
        self.log_eps_bar = mk * log_eps + (1.0 - mk) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

pub fn wn_mcmc_run<T: Real, P: Potential<T> + ?Sized, R: Rng + ?Sized>(
    pot: &P,
    init: WhitenedMatrix<T>,
    opts: &McmcOptions<T>,
    rng: &mut R,
) -> Result<Chain<T>> {
    wn_mcmc_run_with(pot, init, opts, rng, None)
}

/// Runs `n_burnin + n_samples · thin` iterations of the sampler.
pub fn wn_mcmc_run_with<T: Real, P: Potential<T> + ?Sized, R: Rng + ?Sized>(
    pot: &P,
    init: WhitenedMatrix<T>,
    opts: &McmcOptions<T>,
    rng: &mut R,
    mut progress: Option<&mut dyn FnMut(&McmcProgress<T>)>,
) -> Result<Chain<T>> {
    opts.validate()?;
    let n = init.0.len();
    // a fixed test matrix makes H̃(ζ) a deterministic function of ζ
    let omega = (opts.beta > T::zero()).then(|| {
        let m = (opts.metric_rank + opts.metric_oversample).min(n);
        DMatrix::from_fn(n, m, |_, _| T::of(StandardNormal.sample(rng)))
    });
    let sampler = Sampler { pot, opts, omega };
    let mut cur = sampler.eval(&init.0)?;

    let total = opts.n_burnin + opts.n_samples * opts.thin;
    let mut chain = Chain {
        samples: Vec::with_capacity(opts.n_samples),
        accepted: Vec::with_capacity(total),
        potential: Vec::with_capacity(total),
        delta_e: Vec::with_capacity(total),
        n_burnin: opts.n_burnin,
        step_size: opts.step_size,
    };
    let mut eps = opts.step_size;
    let mut adapt = DualAveraging::new(eps.as_f64());
    let mut post_accepts = 0usize;

    for it in 0..total {
        let eta0 = sampler.draw_velocity(rng, &cur);
        let (proposal, de) = match sampler.trajectory(&cur, &eta0, eps) {
            Ok((end, _, de)) if de.is_finite() => (Some(end), de),
            _ => (None, T::of(f64::INFINITY)),
        };
        let accept_prob = (-de.as_f64()).exp().min(1.0);
        let u: f64 = rng.random();
        let accepted = proposal.is_some() && u < accept_prob;
        if accepted {
            cur = proposal.expect("checked above");
        }
        chain.accepted.push(accepted);
        chain.potential.push(cur.phi);
        chain.delta_e.push(de);

        if it < opts.n_burnin {
            if opts.adapt {
                eps = T::of(adapt.update(accept_prob, opts.target_accept.as_f64()));
                if it + 1 == opts.n_burnin {
                    eps = T::of(adapt.final_step());
                }
            }
        } else {
            post_accepts += accepted as usize;
            if (it - opts.n_burnin + 1).is_multiple_of(opts.thin) {
                chain.samples.push(WhitenedMatrix(cur.zeta.clone()));
            }
        }
        if let Some(cb) = progress.as_deref_mut() {
            let done = it + 1;
            let rate = if it < opts.n_burnin {
                chain.accepted.iter().filter(|&&a| a).count() as f64 / done as f64
            } else {
                post_accepts as f64 / (done - opts.n_burnin) as f64
            };
            cb(&McmcProgress { iter: done, potential: cur.phi, acceptance_rate: rate, step_size: eps });
        }
    }
    chain.step_size = eps;
    Ok(chain)
}
