//! Command-line front end: config parsing, study dispatch and report emission.

pub mod config;
pub mod output;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use lpmreg::experiments::{self, Study};
use lpmreg::fit_grid;

use crate::output::{emit_fit, emit_report, FitRow, Format};

/// Exit status: every check passed.
pub const EXIT_OK: i32 = 0;
/// Exit status: a study check failed its tolerance.
pub const EXIT_TOLERANCE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("write error: {0}")]
    Write(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) | CliError::Write(_) => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lpmreg", version, about = "Local polynomial M-regression fits and Monte Carlo studies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `base_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Worker threads (default: available cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Local fit over a grid.
    Fit(Common),
    /// Bahadur remainder rate study.
    Bahadur(Common),
    /// Monte Carlo bias check.
    Bias(Common),
    /// Marginal-integration CLT study.
    Additive(Common),
    /// Any study named by the file's `study` key.
    Mc(Common),
    /// Algebraic identity suite.
    Identity(Common),
}

/// Parses `argv`, runs the command and returns the exit status.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("lpmreg: {e}");
            e.exit_code()
        }
    }
}

fn execute(cmd: &Command) -> Result<i32, CliError> {
    let (common, study) = match cmd {
        Command::Fit(c) => return run_fit(c),
        Command::Bahadur(c) => (c, Some(Study::BahadurRate)),
        Command::Bias(c) => (c, Some(Study::BiasCheck)),
        Command::Additive(c) => (c, Some(Study::AdditiveClt)),
        Command::Identity(c) => (c, Some(Study::IdentitySuite)),
        Command::Mc(c) => (c, None),
    };
    let spec = config::load_experiment(&common.config, study, common.seed, common.threads)?;
    let start = Instant::now();
    let report = experiments::run(&spec).map_err(|e| CliError::Runtime(e.to_string()))?;
    log::info!("{:?} finished in {:.2?}", spec.study, start.elapsed());
    let written = emit_report(&report, common.format, &common.out)?;
    for p in &written {
        log::info!("wrote {}", p.display());
    }
    for c in report.checks.iter().filter(|c| !c.pass) {
        eprintln!("check failed: {}: {} not in [{}, {}]", c.name, c.value, c.lower, c.upper);
    }
    Ok(if report.all_pass() { EXIT_OK } else { EXIT_TOLERANCE })
}

fn run_fit(common: &Common) -> Result<i32, CliError> {
    let file = config::load_fit(&common.config, common.seed, common.threads)?;
    let data = file.dataset()?;
    let cfg_err = |e: lpmreg::Error| CliError::Config(e.to_string());
    let h = file.fit.bandwidth.at(data.len());
    let cfg = file.fit.fit_config(data.dim(), vec![h; data.dim()]).map_err(cfg_err)?;
    let grid = if file.points.is_empty() {
        file.grid.build(&cfg.bandwidths).map_err(cfg_err)?
    } else {
        file.points.clone()
    };
    if grid.iter().any(|p| p.len() != data.dim()) {
        return Err(CliError::Config(format!("evaluation points must have dimension {}", data.dim())));
    }
    let fits = match file.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(|| fit_grid(&data, &grid, &cfg)),
        None => fit_grid(&data, &grid, &cfg),
    };
    let n_deriv = cfg.layout.len() - 1;
    let rows: Vec<FitRow> = fits
        .into_iter()
        .map(|g| match g.result {
            Ok(r) => FitRow {
                x: g.point,
                m_hat: r.m_hat,
                derivatives: r.beta_hat[1..].to_vec(),
                converged: r.converged,
                error: None,
            },
            Err(e) => {
                log::warn!("fit at {:?} failed: {e}", g.point);
                FitRow {
                    x: g.point,
                    m_hat: f64::NAN,
                    derivatives: vec![f64::NAN; n_deriv],
                    converged: false,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let path = emit_fit(&rows, &cfg.layout, common.format, &common.out)?;
    log::info!("wrote {}", path.display());
    Ok(EXIT_OK)
}
