//! Monte Carlo checks of the samplers against closed-form moments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;

use stbp::basis::{build_grid, eval_basis, BasisKind, Domain};
use stbp::forward::{ForwardOp, NoiseModel, Observations, Posterior};
use stbp::infer::{map_optimize, wn_mcmc_run, MapOptions, McmcOptions};
use stbp::prior::{init_whitened, kappa_gibbs_update, prior_sample, transform_t, KappaUpdate, PriorSpec};
use stbp::qed::{qed_sample, QedParams};
use stbp::tkernel::{matern_cov, uniform_time_grid, KernelFactor, TemporalKernel};

fn spec(q: f64, n: usize, j: usize, l: usize, identity: bool) -> PriorSpec<f64> {
    let g = build_grid(n, n, Domain::symmetric_unit()).unwrap();
    let t = uniform_time_grid(j, 0.0, 1.0);
    let basis = eval_basis(&g, l, BasisKind::FourierCosine).unwrap();
    let k = if identity {
        TemporalKernel::identity(1.0, t.clone()).unwrap()
    } else {
        TemporalKernel::matern(1.0, 0.2, 0.5, 1.0, t.clone()).unwrap()
    };
    let kernel: KernelFactor<f64> = matern_cov(&k).unwrap();
    PriorSpec::new(q, 1.0, g, t, basis, kernel).unwrap()
}

/// `E[ξ ξᵀ] = E[r]/J · C` with `r^{q/2} ~ χ²(J)`.
#[test]
fn qed_second_moment() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (q, j) = (1.2, 4);
    let f = DMatrix::from_row_slice(4, 4, &[1.0, 0.0, 0.0, 0.0, 0.5, 0.8, 0.0, 0.0, -0.3, 0.2, 1.1, 0.0, 0.1, 0.4, -0.2, 0.7]);
    let cov = &f * f.transpose();
    let p = QedParams::new(q, DVector::zeros(j), f).unwrap();
    let n = 200_000;
    let mut acc = DMatrix::zeros(j, j);
    for _ in 0..n {
        let x = qed_sample(&mut rng, &p);
        acc += &x * x.transpose();
    }
    acc /= n as f64;
    let half = j as f64 / 2.0;
    let mean_r = (2.0 / q * 2f64.ln() + ln_gamma(half + 2.0 / q) - ln_gamma(half)).exp();
    let want = cov * (mean_r / j as f64);
    let err = (&acc - &want).amax() / want.amax();
    assert!(err < 0.02, "relative error {err}");
}

#[test]
fn prior_field_is_centered_with_matching_variance() {
    // identity kernel, q = 2: u(x, t) ~ N(0, Σ φ_ℓ(x)² γ_ℓ²) independently over t
    let s = spec(2.0, 6, 3, 10, true);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let want = s.basis.values.map(|v| v * v) * s.gamma.map(|g| g * g);
    let n = 20_000;
    let mut sum = DMatrix::zeros(36, 3);
    let mut sq = DMatrix::zeros(36, 3);
    for _ in 0..n {
        let u = prior_sample(&mut rng, &s).1.values;
        sq += u.component_mul(&u);
        sum += u;
    }
    let nf = n as f64;
    for i in 0..36 {
        for t in 0..3 {
            let v = want[i];
            assert!((sum[(i, t)] / nf).abs() < 5.0 * (v / nf).sqrt());
            assert!((sq[(i, t)] / nf / v - 1.0).abs() < 0.06, "site {i} time {t}");
        }
    }
}

#[test]
fn whitened_gaussian_pushes_to_prior() {
    // T(Ζ) with Ζ ~ N(0, I) has the prior's radial law
    let s = spec(1.0, 4, 5, 8, false);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 4000;
    let (mut direct, mut pushed) = (0.0, 0.0);
    for _ in 0..n {
        direct += prior_sample(&mut rng, &s).1.values.norm_squared();
        let z = stbp::prior::WhitenedMatrix(DMatrix::from_fn(5, 8, |_, _| rng.sample(StandardNormal)));
        pushed += transform_t(&z, &s).unwrap().values.norm_squared();
    }
    let rel = (direct - pushed).abs() / direct;
    assert!(rel < 0.08, "mean squared norms differ by {rel}");
}

#[test]
fn kappa_mode_tracks_generating_scale() {
    let base = spec(1.5, 8, 6, 40, false);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for kappa in [0.3, 1.0, 4.0] {
        let s = base.with_kappa(kappa).unwrap();
        let (xi, _) = prior_sample(&mut rng, &s);
        let est = kappa_gibbs_update(&mut rng, &xi, 1.0, 1e-3, &base, KappaUpdate::Mode).unwrap();
        assert!((est / kappa).ln().abs() < 0.3, "kappa {kappa} estimated as {est}");
    }
}

/// Gaussian prior, identity observation: posterior mean is linear shrinkage.
#[test]
fn map_and_mcmc_agree_on_linear_gaussian() {
    let s = spec(2.0, 4, 2, 6, true);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let truth = prior_sample(&mut rng, &s).1.values;
    let op = ForwardOp::identity(16, 2);
    let noise = NoiseModel::isotropic(0.3).unwrap();
    let obs = Observations::simulate(&mut rng, &op, &noise, &truth, s.t_grid.clone()).unwrap();
    let post = Posterior::new(&s, &op, &noise, &obs).unwrap();

    let map = map_optimize(&post, init_whitened(&mut rng, &s), &MapOptions::default()).unwrap();
    let opts = McmcOptions { n_samples: 20_000, n_burnin: 1_000, ..McmcOptions::hmc(0.4, 4) };
    let chain = wn_mcmc_run(&post, map.zeta.clone(), &opts, &mut rng).unwrap();
    let mut mean = DMatrix::zeros(2, 6);
    for z in &chain.samples {
        mean += &z.0;
    }
    mean /= chain.samples.len() as f64;
    // at q = 2 the whitening map is linear, so the posterior on Ζ is Gaussian and its mean is the MAP
    let err = (&mean - &map.zeta.0).amax();
    assert!(err < 0.05, "MCMC mean differs from MAP by {err}");
}
