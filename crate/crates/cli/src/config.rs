//! Experiment configuration read from TOML. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    AnnulusRegression,
    DynamicCt,
}

/// Prior family. `Stgp` forces `q = 2`; `IidTime` swaps the temporal
/// kernel for the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    Stbp,
    Stgp,
    IidTime,
}

impl Model {
    pub fn label(self) -> &'static str {
        match self {
            Model::Stbp => "stbp",
            Model::Stgp => "stgp",
            Model::IidTime => "iid-time",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BasisChoice {
    #[default]
    Cosine,
    Haar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormChoice {
    Frobenius,
    #[default]
    Infty1,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output: PathBuf,
    #[serde(default = "default_model")]
    pub model: Model,
    /// Independent runs at seeds `seed, seed + 1, ...`.
    #[serde(default = "one")]
    pub replicates: usize,
    /// Worker threads for replicate batches; 0 picks the available parallelism.
    #[serde(default)]
    pub threads: usize,
    pub grid: GridConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub forward: ForwardConfig,
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub map: MapConfig,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub j: usize,
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "unit")]
    pub t1: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Used by `stbp` and `iid-time`; `stgp` always uses 2.
    #[serde(default = "unit")]
    pub q: f64,
    #[serde(default = "unit")]
    pub s: f64,
    #[serde(default = "unit")]
    pub kappa: f64,
    /// Truncation `L`; defaults to `min(2000, I)`.
    pub truncation: Option<usize>,
    #[serde(default)]
    pub basis: BasisChoice,
    #[serde(default)]
    pub kernel: KernelConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { q: 1.0, s: 1.0, kappa: 1.0, truncation: None, basis: BasisChoice::Cosine, kernel: KernelConfig::default() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default = "half")]
    pub nu: f64,
    #[serde(default = "tenth")]
    pub rho: f64,
    #[serde(default = "unit")]
    pub s_exp: f64,
    /// Identity temporal kernel regardless of model.
    #[serde(default)]
    pub identity: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { nu: 0.5, rho: 0.1, s_exp: 1.0, identity: false }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ForwardConfig {
    /// Absolute noise standard deviation.
    pub noise_sigma: Option<f64>,
    /// Per-frame level `‖ε_j‖ / ‖G_j u_j‖`.
    pub noise_relative: Option<f64>,
    /// ArrayFile with an `m × m` covariance shared by every frame.
    pub noise_cov_file: Option<PathBuf>,
    pub ct: Option<CtConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtConfig {
    pub n_angles: usize,
    pub n_det: usize,
    /// Rotate the angle set by a fraction of its spacing every frame.
    #[serde(default = "yes")]
    pub rotate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Rect,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeConfig {
    pub kind: ShapeKind,
    pub center: [f64; 2],
    /// Radius for disks.
    #[serde(default)]
    pub radius: f64,
    /// Half side lengths for rectangles.
    #[serde(default)]
    pub half: [f64; 2],
    /// Displacement per unit time.
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default = "unit")]
    pub value: f64,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// Explicit shapes; when empty a default scene is used.
    #[serde(default)]
    pub shapes: Vec<ShapeConfig>,
    /// Extra shapes drawn at random from the seed.
    #[serde(default)]
    pub random_shapes: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "thousand")]
    pub max_iter: usize,
    #[serde(default = "grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "step_tol")]
    pub step_tol: f64,
    #[serde(default = "ten")]
    pub memory: usize,
    /// Stop once the relative error against the truth falls below this.
    pub error_threshold: Option<f64>,
    /// Add `-log|dΛ|`, which turns the objective into `misfit + ½‖Ζ‖²`.
    /// Off by default: the plain whitened posterior is unbounded below for
    /// `q < 2` and the optimizer stops where steps stall.
    #[serde(default)]
    pub jacobian: bool,
    #[serde(default)]
    pub norm: NormChoice,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_iter: 1000,
            grad_tol: grad_tol(),
            step_tol: step_tol(),
            memory: 10,
            error_threshold: None,
            jacobian: false,
            norm: NormChoice::Infty1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcConfig {
    /// `run` only samples when set; the `mcmc` subcommand always does.
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "tenth")]
    pub step_size: f64,
    #[serde(default = "four")]
    pub leapfrog_steps: usize,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "thousand")]
    pub n_samples: usize,
    #[serde(default = "five_hundred")]
    pub n_burnin: usize,
    #[serde(default = "one")]
    pub thin: usize,
    #[serde(default = "yes")]
    pub adapt: bool,
    #[serde(default = "twenty")]
    pub metric_rank: usize,
    /// Start the chain at the MAP estimate.
    #[serde(default = "yes")]
    pub init_from_map: bool,
    /// Add `-log|dΛ|` to the misfit potential.
    #[serde(default)]
    pub jacobian: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            step_size: 0.1,
            leapfrog_steps: 4,
            beta: 0.0,
            n_samples: 1000,
            n_burnin: 500,
            thin: 1,
            adapt: true,
            metric_rank: 20,
            init_from_map: true,
            jacobian: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Frame indices written as PGM; defaults to four evenly spread frames.
    pub frames: Option<Vec<usize>>,
    /// Print progress every this many iterations.
    #[serde(default)]
    pub progress_every: Option<usize>,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_model() -> Model {
    Model::Stbp
}
fn one() -> usize {
    1
}
fn four() -> usize {
    4
}
fn ten() -> usize {
    10
}
fn twenty() -> usize {
    20
}
fn five_hundred() -> usize {
    500
}
fn thousand() -> usize {
    1000
}
fn unit() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn tenth() -> f64 {
    0.1
}
fn grad_tol() -> f64 {
    1e-6
}
fn step_tol() -> f64 {
    1e-12
}
fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(f), Some(dir)) = (cfg.forward.noise_cov_file.as_mut(), path.parent()) {
            if f.is_relative() {
                *f = dir.join(&*f);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.grid.nx == 0 || self.grid.ny == 0 || self.time.j == 0 {
            return bad("grid sides and J must be positive".into());
        }
        if self.time.t1.partial_cmp(&self.time.t0) != Some(std::cmp::Ordering::Greater) {
            return bad(format!("time interval ({}, {}] is empty", self.time.t0, self.time.t1));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        let f = &self.forward;
        let n_noise = [f.noise_sigma.is_some(), f.noise_relative.is_some(), f.noise_cov_file.is_some()]
            .iter()
            .filter(|&&b| b)
            .count();
        if n_noise > 1 {
            return bad("set only one of noise_sigma, noise_relative, noise_cov_file".into());
        }
        if self.experiment == Experiment::DynamicCt && f.ct.is_none() {
            return bad("dynamic-ct needs a [forward.ct] section".into());
        }
        if let Some(ct) = &f.ct {
            if ct.n_angles == 0 || ct.n_det == 0 {
                return bad("n_angles and n_det must be positive".into());
            }
        }
        if let Some(frames) = &self.report.frames {
            if let Some(&k) = frames.iter().find(|&&k| k >= self.time.j) {
                return bad(format!("report frame {k} is out of range for J = {}", self.time.j));
            }
        }
        Ok(())
    }

    /// Effective `q` for a model.
    pub fn q_for(&self, model: Model) -> f64 {
        match model {
            Model::Stgp => 2.0,
            _ => self.prior.q,
        }
    }

    pub fn identity_kernel_for(&self, model: Model) -> bool {
        model == Model::IidTime || self.prior.kernel.identity
    }

    /// PGM frames: configured, else four spread over `(0, J)`.
    pub fn frames(&self) -> Vec<usize> {
        self.report.frames.clone().unwrap_or_else(|| {
            let j = self.time.j;
            let mut v: Vec<usize> = [0.1, 0.3, 0.6, 0.9].iter().map(|f| ((f * j as f64).round() as usize).clamp(1, j) - 1).collect();
            v.dedup();
            v
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
experiment = "annulus-regression"
[grid]
nx = 16
ny = 16
[time]
j = 10
"#;

    #[test]
    fn defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.model, Model::Stbp);
        assert_eq!(c.prior.q, 1.0);
        assert_eq!(c.prior.kernel.rho, 0.1);
        assert!(!c.map.jacobian && !c.mcmc.jacobian);
        assert_eq!(c.frames(), vec![0, 2, 5, 8]);
        assert_eq!(c.q_for(Model::Stgp), 2.0);
        assert!(c.identity_kernel_for(Model::IidTime) && !c.identity_kernel_for(Model::Stbp));
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = format!("{MINIMAL}\n[prior]\nqq = 1.0\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(CliError::Config(_))));
        let text = format!("bogus = 1\n{MINIMAL}");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn rejects_inconsistent() {
        let ct = MINIMAL.replace("annulus-regression", "dynamic-ct");
        assert!(ExperimentConfig::from_toml(&ct).is_err());
        let two = format!("{MINIMAL}\n[forward]\nnoise_sigma = 0.1\nnoise_relative = 0.01\n");
        assert!(ExperimentConfig::from_toml(&two).is_err());
        let frames = format!("{MINIMAL}\n[report]\nframes = [10]\n");
        assert!(ExperimentConfig::from_toml(&frames).is_err());
    }
}
