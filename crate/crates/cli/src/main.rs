use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use stbp::metrics::MetricReport;
use stbp::prior::SpaceTimeField;
use stbp_cli::config::{ExperimentConfig, Model};
use stbp_cli::io::ArrayFile;
use stbp_cli::runner::{self, MetricsRow, Stage};
use stbp_cli::CliError;

#[derive(Parser)]
#[command(name = "stbp", version, about = "Spatiotemporal Besov prior experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the truth, observations and snapshots.
    Phantom(Common),
    /// MAP estimation.
    Map(Common),
    /// White-noise MCMC.
    Mcmc(Common),
    /// Recompute the metrics row of a finished MAP run.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Estimate to score instead of the run's `map.stba`.
        #[arg(long)]
        estimate: Option<PathBuf>,
    },
    /// MAP, then MCMC when enabled in the config.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<Model>,
    /// No progress on stderr.
    #[arg(long)]
    quiet: bool,
}

struct Resolved {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
    model: Model,
    quiet: bool,
}

impl Common {
    fn resolve(&self) -> Result<Resolved, CliError> {
        let cfg = ExperimentConfig::load(&self.config)?;
        Ok(Resolved {
            seed: self.seed.unwrap_or(cfg.seed),
            out: self.out.clone().unwrap_or_else(|| cfg.output.clone()),
            model: self.model.unwrap_or(cfg.model),
            quiet: self.quiet,
            cfg,
        })
    }
}

fn eprint_line(s: &str) {
    eprintln!("{s}");
}

fn experiment(r: &Resolved, stage: Stage) -> Result<(), CliError> {
    let log: runner::Log = (!r.quiet).then_some(&eprint_line as &(dyn Fn(&str) + Sync));
    runner::run_experiment(&r.cfg, r.model, r.seed, stage, &r.out, log)?;
    if !r.quiet {
        eprintln!("wrote {}", r.out.display());
    }
    Ok(())
}

fn read_field(path: &Path, like: &SpaceTimeField<f64>) -> Result<DMatrix<f64>, CliError> {
    let a = ArrayFile::read(path).map_err(|e| CliError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let (n, j) = (like.grid.len(), like.n_times());
    if a.dims.len() != 3 || a.dims[0] != j || a.dims[1] * a.dims[2] != n {
        return Err(CliError::Config(format!("{} has dims {:?}, expected [{j}, nx, ny]", path.display(), a.dims)));
    }
    // frames are [j][ix][iy]; sites are ix * ny + iy
    Ok(DMatrix::from_fn(n, j, |i, t| a.data[t * n + i]))
}

fn metrics(r: &Resolved, estimate: Option<&Path>) -> Result<(), CliError> {
    let sc = runner::build_scenario(&r.cfg, r.seed)?;
    let dir = runner::run_dir(&r.out, r.model, r.seed);
    let path = estimate.map_or_else(|| dir.join("map.stba"), Path::to_path_buf);
    let u = read_field(&path, &sc.truth)?;
    let loglik = stbp::forward::log_likelihood(&u, &sc.op, &sc.noise, &sc.obs)?;
    let variant = runner::norm_variant(r.cfg.map.norm);
    let report = MetricReport::evaluate(&u, &sc.truth.values, variant, loglik)?;
    let row = MetricsRow { model: r.model, n_sites: sc.truth.grid.len(), n_times: sc.truth.n_times(), report, seed: r.seed };
    print!("{}", runner::metrics_csv(&[row]));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Phantom(c) => {
            let r = c.resolve()?;
            let sc = runner::build_scenario(&r.cfg, r.seed)?;
            runner::write_scenario(&r.out, &r.cfg, &sc)?;
            if !r.quiet {
                eprintln!("wrote {}", r.out.display());
            }
            Ok(())
        }
        Command::Map(c) => experiment(&c.resolve()?, Stage::Map),
        Command::Mcmc(c) => experiment(&c.resolve()?, Stage::Mcmc),
        Command::Run(c) => {
            let r = c.resolve()?;
            let stage = if r.cfg.mcmc.enabled { Stage::Both } else { Stage::Map };
            experiment(&r, stage)
        }
        Command::Metrics { common, estimate } => metrics(&common.resolve()?, estimate.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
