//! Builds problems from a config and runs MAP / MCMC with file output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stbp::basis::{build_grid, default_truncation, eval_basis, BasisKind, Domain};
use stbp::forward::{ForwardOp, NoiseModel, Observations, Posterior};
use stbp::infer::{map_optimize_with, wn_mcmc_run_with, Chain, MapOptions, MapProgress, MapResult, McmcOptions, McmcProgress};
use stbp::metrics::{rle, MetricReport, NormVariant};
use stbp::prior::{init_whitened, transform_t, PriorSpec, SpaceTimeField, WhitenedMatrix};
use stbp::tkernel::{matern_cov, uniform_time_grid, TemporalKernel};

use crate::config::{BasisChoice, Experiment, ExperimentConfig, Model, NormChoice};
use crate::io::ArrayFile;
use crate::pgm::write_pgm;
use crate::phantom::{default_scene, phantom_annulus, phantom_dynamic_ct, random_shapes, Shape};
use crate::CliError;

/// Default absolute noise for the annulus regression.
pub const ANNULUS_SIGMA: f64 = 0.1;
/// Default per-frame relative noise for dynamic CT.
pub const CT_RELATIVE_NOISE: f64 = 0.01;

pub const METRICS_HEADER: &str = "model,I,J,rle,psnr,ssim,loglik,seed";

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Phantom = 0,
    Noise = 1,
    Init = 2,
    Mcmc = 3,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Invalid arguments found while assembling a problem are config errors.
fn setup(e: stbp::Error) -> CliError {
    match e {
        stbp::Error::InvalidArgument(m) => CliError::Config(m),
        other => CliError::Numerical(other),
    }
}

/// Truth and observations; independent of the prior model.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub truth: SpaceTimeField<f64>,
    pub op: ForwardOp<f64>,
    pub noise: NoiseModel<f64>,
    pub obs: Observations<f64>,
}

pub fn time_grid(cfg: &ExperimentConfig) -> Vec<f64> {
    uniform_time_grid(cfg.time.j, cfg.time.t0, cfg.time.t1)
}

/// Angles of frame `j`: `n_a` equispaced angles in `[0, π)`, optionally
/// rotated by `j / J` of their spacing.
pub fn frame_angles(n_angles: usize, j: usize, n_frames: usize, rotate: bool) -> Vec<f64> {
    let spacing = std::f64::consts::PI / n_angles as f64;
    let shift = if rotate { spacing * j as f64 / n_frames as f64 } else { 0.0 };
    (0..n_angles).map(|k| shift + spacing * k as f64).collect()
}

pub fn truth_field(cfg: &ExperimentConfig, seed: u64) -> Result<SpaceTimeField<f64>, CliError> {
    let grid = build_grid(cfg.grid.nx, cfg.grid.ny, Domain::symmetric_unit()).map_err(setup)?;
    let t = time_grid(cfg);
    Ok(match cfg.experiment {
        Experiment::AnnulusRegression => phantom_annulus(&grid, &t),
        Experiment::DynamicCt => {
            let mut shapes: Vec<Shape> = if cfg.phantom.shapes.is_empty() && cfg.phantom.random_shapes == 0 {
                default_scene()
            } else {
                cfg.phantom.shapes.iter().map(Shape::from).collect()
            };
            shapes.extend(random_shapes(&mut rng_for(seed, Stream::Phantom), cfg.phantom.random_shapes));
            // shapes are positioned over a unit time span
            let span = cfg.time.t1 - cfg.time.t0;
            let rel: Vec<f64> = t.iter().map(|&tj| (tj - cfg.time.t0) / span).collect();
            let f = phantom_dynamic_ct(&grid, &rel, &shapes);
            SpaceTimeField::new(f.values, grid, t).map_err(setup)?
        }
    })
}

pub fn build_scenario(cfg: &ExperimentConfig, seed: u64) -> Result<Scenario, CliError> {
    let truth = truth_field(cfg, seed)?;
    let (n, j) = (truth.grid.len(), cfg.time.j);
    let op = match (&cfg.experiment, &cfg.forward.ct) {
        (Experiment::DynamicCt, Some(ct)) | (Experiment::AnnulusRegression, Some(ct)) => {
            let angles: Vec<Vec<f64>> = (0..j).map(|k| frame_angles(ct.n_angles, k, j, ct.rotate)).collect();
            ForwardOp::radon(&truth.grid, &angles, ct.n_det).map_err(setup)?
        }
        (Experiment::AnnulusRegression, None) => ForwardOp::identity(n, j),
        (Experiment::DynamicCt, None) => return Err(CliError::Config("dynamic-ct needs [forward.ct]".into())),
    };
    let f = &cfg.forward;
    let noise = if let Some(s) = f.noise_sigma {
        NoiseModel::isotropic(s)
    } else if let Some(level) = f.noise_relative {
        NoiseModel::relative(&op, &truth.values, level)
    } else if let Some(path) = &f.noise_cov_file {
        let cov = ArrayFile::read(path)
            .and_then(|a| a.to_matrix())
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        NoiseModel::full(cov)
    } else {
        match cfg.experiment {
            Experiment::AnnulusRegression => NoiseModel::isotropic(ANNULUS_SIGMA),
            Experiment::DynamicCt => NoiseModel::relative(&op, &truth.values, CT_RELATIVE_NOISE),
        }
    }
    .map_err(setup)?;
    noise.check(&op).map_err(setup)?;
    let obs = Observations::simulate(&mut rng_for(seed, Stream::Noise), &op, &noise, &truth.values, truth.t_grid.clone())?;
    Ok(Scenario { truth, op, noise, obs })
}

pub fn build_prior(cfg: &ExperimentConfig, model: Model, grid: &stbp::basis::SpatialGrid<f64>) -> Result<PriorSpec<f64>, CliError> {
    let p = &cfg.prior;
    let t = time_grid(cfg);
    let kernel = if cfg.identity_kernel_for(model) {
        TemporalKernel::identity(p.kappa, t.clone())
    } else {
        TemporalKernel::matern(p.kappa, p.kernel.rho, p.kernel.nu, p.kernel.s_exp, t.clone())
    }
    .map_err(setup)?;
    let factor = matern_cov(&kernel).map_err(setup)?;
    let l = p.truncation.unwrap_or_else(|| default_truncation(grid.len()));
    let kind = match p.basis {
        BasisChoice::Cosine => BasisKind::FourierCosine,
        BasisChoice::Haar => BasisKind::HaarWavelet,
    };
    let basis = eval_basis(grid, l, kind).map_err(setup)?;
    PriorSpec::new(cfg.q_for(model), p.s, grid.clone(), t, basis, factor).map_err(setup)
}

pub fn norm_variant(c: NormChoice) -> NormVariant {
    match c {
        NormChoice::Frobenius => NormVariant::Frobenius,
        NormChoice::Infty1 => NormVariant::Infty1,
    }
}

pub fn map_options(cfg: &ExperimentConfig) -> MapOptions<f64> {
    let m = &cfg.map;
    MapOptions {
        max_iter: m.max_iter,
        grad_tol: m.grad_tol,
        step_tol: m.step_tol,
        memory: m.memory,
        error_threshold: m.error_threshold,
        ..Default::default()
    }
}

pub fn mcmc_options(cfg: &ExperimentConfig) -> McmcOptions<f64> {
    let m = &cfg.mcmc;
    McmcOptions {
        beta: m.beta,
        n_samples: m.n_samples,
        n_burnin: m.n_burnin,
        thin: m.thin,
        adapt: m.adapt,
        metric_rank: m.metric_rank,
        ..McmcOptions::hmc(m.step_size, m.leapfrog_steps)
    }
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model: Model,
    pub n_sites: usize,
    pub n_times: usize,
    pub report: MetricReport,
    pub seed: u64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        let psnr = if r.psnr.infinite { "inf".to_string() } else { r.psnr.db.to_string() };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.model.label(),
            self.n_sites,
            self.n_times,
            r.rle,
            psnr,
            r.ssim,
            r.log_likelihood,
            self.seed
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct MapRun {
    pub spec: PriorSpec<f64>,
    pub result: MapResult<f64>,
    pub estimate: SpaceTimeField<f64>,
    pub metrics: MetricsRow,
}

/// Progress sink: `None` keeps quiet.
pub type Log<'a> = Option<&'a (dyn Fn(&str) + Sync)>;

pub fn run_map(cfg: &ExperimentConfig, model: Model, seed: u64, scenario: &Scenario, log: Log) -> Result<MapRun, CliError> {
    let spec = build_prior(cfg, model, &scenario.truth.grid)?;
    let post = Posterior::new(&spec, &scenario.op, &scenario.noise, &scenario.obs)?.with_jacobian(cfg.map.jacobian);
    let variant = norm_variant(cfg.map.norm);
    let truth = &scenario.truth;
    let error = |z: &DMatrix<f64>| {
        transform_t(&WhitenedMatrix(z.clone()), &spec)
            .and_then(|u| rle(&u, truth, variant))
            .unwrap_or(f64::NAN)
    };
    let every = cfg.report.progress_every.unwrap_or(10).max(1);
    let tag = format!("map model={} seed={seed}", model.label());
    let mut cb = |p: &MapProgress<f64>| {
        if let Some(log) = log {
            if p.iter.is_multiple_of(every) {
                log(&format!("{tag} iter={} objective={:.6e} grad={:.3e} rle={:.5}", p.iter, p.objective, p.grad_norm, p.error.unwrap_or(f64::NAN)));
            }
        }
    };
    let init = init_whitened(&mut rng_for(seed, Stream::Init), &spec);
    let result = map_optimize_with(&post, init, &map_options(cfg), Some(&error), Some(&mut cb))?;
    if let Some(log) = log {
        log(&format!("{tag} done iter={} stop={:?} objective={:.6e}", result.iterations, result.stop, result.objective));
    }
    let estimate = transform_t(&result.zeta, &spec)?;
    let loglik = post.log_likelihood(&result.zeta)?;
    let report = MetricReport::evaluate(&estimate, truth, variant, loglik)?;
    let metrics = MetricsRow { model, n_sites: truth.grid.len(), n_times: truth.n_times(), report, seed };
    Ok(MapRun { spec, result, estimate, metrics })
}

#[derive(Debug, Clone)]
pub struct McmcRun {
    pub chain: Chain<f64>,
    pub mean: DMatrix<f64>,
    pub std: DMatrix<f64>,
    pub metrics: MetricsRow,
}

pub fn run_mcmc(
    cfg: &ExperimentConfig,
    model: Model,
    seed: u64,
    scenario: &Scenario,
    start: Option<&MapRun>,
    log: Log,
) -> Result<McmcRun, CliError> {
    let spec = build_prior(cfg, model, &scenario.truth.grid)?;
    let post = Posterior::new(&spec, &scenario.op, &scenario.noise, &scenario.obs)?.with_jacobian(cfg.mcmc.jacobian);
    let init = match start {
        Some(m) => m.result.zeta.clone(),
        None => init_whitened(&mut rng_for(seed, Stream::Init), &spec),
    };
    let every = cfg.report.progress_every.unwrap_or(100).max(1);
    let tag = format!("mcmc model={} seed={seed}", model.label());
    let mut cb = |p: &McmcProgress<f64>| {
        if let Some(log) = log {
            if p.iter.is_multiple_of(every) {
                log(&format!("{tag} iter={} potential={:.6e} accept={:.3} eps={:.4e}", p.iter, p.potential, p.acceptance_rate, p.step_size));
            }
        }
    };
    let chain = wn_mcmc_run_with(&post, init, &mcmc_options(cfg), &mut rng_for(seed, Stream::Mcmc), Some(&mut cb))?;
    if let Some(log) = log {
        log(&format!("{tag} done accept={:.3} eps={:.4e}", chain.acceptance_rate(), chain.step_size));
    }
    let (mean, std) = chain.field_moments(&spec)?;
    let variant = norm_variant(cfg.map.norm);
    let truth = &scenario.truth;
    let mean_field = SpaceTimeField::new(mean.clone(), truth.grid.clone(), truth.t_grid.clone())?;
    let loglik = stbp::forward::log_likelihood(&mean, &scenario.op, &scenario.noise, &scenario.obs)?;
    let report = MetricReport::evaluate(&mean_field, truth, variant, loglik)?;
    let metrics = MetricsRow { model, n_sites: truth.grid.len(), n_times: truth.n_times(), report, seed };
    Ok(McmcRun { chain, mean, std, metrics })
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_array(path: &Path, a: &ArrayFile) -> Result<(), CliError> {
    a.write(path).map_err(io_at(path))
}

fn write_text(path: &Path, s: &str) -> Result<(), CliError> {
    fs::write(path, s).map_err(io_at(path))
}

/// `I × J` field as `[J, nx, ny]` frames.
fn frames_array(u: &DMatrix<f64>, nx: usize, ny: usize) -> Result<ArrayFile, CliError> {
    let frames: Vec<DMatrix<f64>> = (0..u.ncols()).map(|j| frame(u, j, nx, ny)).collect();
    Ok(ArrayFile::from_stack(&frames)?)
}

fn frame(u: &DMatrix<f64>, j: usize, nx: usize, ny: usize) -> DMatrix<f64> {
    DMatrix::from_fn(nx, ny, |ix, iy| u[(ix * ny + iy, j)])
}

fn write_snapshots(dir: &Path, prefix: &str, u: &DMatrix<f64>, cfg: &ExperimentConfig) -> Result<(), CliError> {
    for j in cfg.frames() {
        let path = dir.join(format!("{prefix}_t{j:03}.pgm"));
        write_pgm(&path, &frame(u, j, cfg.grid.nx, cfg.grid.ny)).map_err(io_at(&path))?;
    }
    Ok(())
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_at(dir))
}

/// Truth and observations: `truth.stba`, `observations.stba`, snapshots.
pub fn write_scenario(dir: &Path, cfg: &ExperimentConfig, sc: &Scenario) -> Result<(), CliError> {
    create_dir(dir)?;
    let (nx, ny) = (cfg.grid.nx, cfg.grid.ny);
    write_array(&dir.join("truth.stba"), &frames_array(&sc.truth.values, nx, ny)?)?;
    let m = sc.obs.data.iter().map(|y| y.len()).max().unwrap_or(0);
    if sc.obs.data.iter().all(|y| y.len() == m) {
        let data: Vec<f64> = sc.obs.data.iter().flat_map(|y| y.iter().copied()).collect();
        write_array(&dir.join("observations.stba"), &ArrayFile::new(vec![sc.obs.data.len(), m], data)?)?;
    } else {
        for (j, y) in sc.obs.data.iter().enumerate() {
            write_array(&dir.join(format!("observations_t{j:03}.stba")), &ArrayFile::new(vec![y.len()], y.as_slice().to_vec())?)?;
        }
    }
    write_snapshots(dir, "truth", &sc.truth.values, cfg)?;
    if matches!(sc.op.step(0), stbp::forward::StepOp::Identity) {
        let y = DMatrix::from_fn(sc.truth.grid.len(), sc.obs.data.len(), |i, j| sc.obs.data[j][i]);
        write_snapshots(dir, "observations", &y, cfg)?;
    }
    Ok(())
}

pub fn write_map(dir: &Path, cfg: &ExperimentConfig, run: &MapRun) -> Result<(), CliError> {
    create_dir(dir)?;
    write_array(&dir.join("map.stba"), &frames_array(&run.estimate.values, cfg.grid.nx, cfg.grid.ny)?)?;
    write_array(&dir.join("map_zeta.stba"), &ArrayFile::from_matrix(&run.result.zeta.0))?;
    write_snapshots(dir, "map", &run.estimate.values, cfg)?;
    let mut trace = String::from("iter,objective,rle\n");
    for (k, f) in run.result.objective_trace.iter().enumerate() {
        let e = run.result.error_trace.get(k).copied().unwrap_or(f64::NAN);
        let _ = writeln!(trace, "{k},{f},{e}");
    }
    write_text(&dir.join("trace_map.csv"), &trace)?;
    write_text(&dir.join("metrics_map.csv"), &metrics_csv(std::slice::from_ref(&run.metrics)))
}

pub fn write_mcmc(dir: &Path, cfg: &ExperimentConfig, run: &McmcRun) -> Result<(), CliError> {
    create_dir(dir)?;
    let (nx, ny) = (cfg.grid.nx, cfg.grid.ny);
    write_array(&dir.join("mcmc_mean.stba"), &frames_array(&run.mean, nx, ny)?)?;
    write_array(&dir.join("mcmc_std.stba"), &frames_array(&run.std, nx, ny)?)?;
    write_snapshots(dir, "mcmc_mean", &run.mean, cfg)?;
    write_snapshots(dir, "mcmc_std", &run.std, cfg)?;
    let mut trace = String::from("iter,potential,delta_e,accepted\n");
    let c = &run.chain;
    for k in 0..c.potential.len() {
        let _ = writeln!(trace, "{k},{},{},{}", c.potential[k], c.delta_e[k], u8::from(c.accepted[k]));
    }
    write_text(&dir.join("trace_mcmc.csv"), &trace)?;
    write_text(&dir.join("metrics_mcmc.csv"), &metrics_csv(std::slice::from_ref(&run.metrics)))
}

/// Output directory of one run.
pub fn run_dir(root: &Path, model: Model, seed: u64) -> PathBuf {
    root.join(model.label()).join(format!("seed-{seed}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Map,
    Mcmc,
    Both,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub map: Option<MetricsRow>,
    pub mcmc: Option<MetricsRow>,
}

/// One seed end to end, writing into its own subdirectory.
pub fn run_seed(cfg: &ExperimentConfig, model: Model, seed: u64, stage: Stage, root: &Path, log: Log) -> Result<RunOutput, CliError> {
    let dir = run_dir(root, model, seed);
    let scenario = build_scenario(cfg, seed)?;
    write_scenario(&dir, cfg, &scenario)?;
    let map = if stage != Stage::Mcmc || cfg.mcmc.init_from_map {
        let run = run_map(cfg, model, seed, &scenario, log)?;
        write_map(&dir, cfg, &run)?;
        Some(run)
    } else {
        None
    };
    let mcmc = if stage != Stage::Map {
        let run = run_mcmc(cfg, model, seed, &scenario, map.as_ref().filter(|_| cfg.mcmc.init_from_map), log)?;
        write_mcmc(&dir, cfg, &run)?;
        Some(run.metrics)
    } else {
        None
    };
    Ok(RunOutput { map: map.map(|m| m.metrics), mcmc })
}

/// Replicates at seeds `seed, seed + 1, ...` on a pool of worker threads.
/// Results come back in seed order whatever the scheduling.
pub fn run_batch(cfg: &ExperimentConfig, model: Model, seed: u64, stage: Stage, root: &Path, log: Log) -> Result<Vec<RunOutput>, CliError> {
    let seeds: Vec<u64> = (0..cfg.replicates as u64).map(|k| seed.wrapping_add(k)).collect();
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(seeds.len())
    .max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<RunOutput, CliError>>> = (0..seeds.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if k >= seeds.len() {
                    break;
                }
                let r = run_seed(cfg, model, seeds[k], stage, root, log);
                done.lock().expect("worker panicked").push((k, r));
            });
        }
    });
    for (k, r) in done.into_inner().expect("worker panicked") {
        slots[k] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every seed ran")).collect()
}

/// Runs a batch and writes the aggregate `metrics.csv` (and
/// `metrics_mcmc.csv`) under `root`.
pub fn run_experiment(cfg: &ExperimentConfig, model: Model, seed: u64, stage: Stage, root: &Path, log: Log) -> Result<Vec<RunOutput>, CliError> {
    create_dir(root)?;
    let out = run_batch(cfg, model, seed, stage, root, log)?;
    let map_rows: Vec<MetricsRow> = out.iter().filter_map(|o| o.map.clone()).collect();
    let mcmc_rows: Vec<MetricsRow> = out.iter().filter_map(|o| o.mcmc.clone()).collect();
    if !map_rows.is_empty() && stage != Stage::Mcmc {
        write_text(&root.join("metrics.csv"), &metrics_csv(&map_rows))?;
    }
    if !mcmc_rows.is_empty() {
        let name = if stage == Stage::Mcmc { "metrics.csv" } else { "metrics_mcmc.csv" };
        write_text(&root.join(name), &metrics_csv(&mcmc_rows))?;
    }
    Ok(out)
}
