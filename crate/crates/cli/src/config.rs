//! Configuration files: one TOML document per run.

use std::fs;
use std::path::{Path, PathBuf};

use lpmreg::bahadur::GridSpec;
use lpmreg::dgp::{simulate_stream, DgpSpec};
use lpmreg::experiments::{ExperimentSpec, FitSection, Study};
use lpmreg::{Dataset, SampleKind};
use serde::Deserialize;

use crate::CliError;

/// Settings of the `fit` subcommand.
#[derive(Debug, Clone, Deserialize)]
pub struct FitFile {
    pub fit: FitSection,
    /// CSV with header `y,x1,…,xd`; resolved relative to the config file.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Simulated design used when `data` is absent.
    #[serde(default)]
    pub dgp: Option<DgpSpec>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub grid: GridSpec,
    /// Explicit evaluation points; override `grid` when non-empty.
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_n() -> usize {
    500
}

impl FitFile {
    /// Loads or simulates the sample.
    pub fn dataset(&self) -> Result<Dataset, CliError> {
        match (&self.data, &self.dgp) {
            (Some(path), _) => read_data(path),
            (None, Some(dgp)) => {
                let mut spec = dgp.clone();
                spec.seed = self.base_seed;
                spec.center_for = self.fit.loss;
                spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
                simulate_stream(&spec, self.n, 0)
                    .map(|s| s.dataset)
                    .map_err(|e| CliError::Config(e.to_string()))
            }
            (None, None) => Err(CliError::Config("fit needs either `data` or a [dgp] table".into())),
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn parse_table(path: &Path) -> Result<toml::Table, CliError> {
    read_text(path)?
        .parse::<toml::Table>()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Reads a fit configuration, resolving `data` against the config directory.
pub fn load_fit(path: &Path, seed: Option<u64>, threads: Option<usize>) -> Result<FitFile, CliError> {
    let mut file: FitFile = parse_table(path)?
        .try_into()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(data) = &file.data {
        if data.is_relative() {
            file.data = Some(path.parent().unwrap_or(Path::new(".")).join(data));
        }
    }
    if let Some(s) = seed {
        file.base_seed = s;
    }
    if threads.is_some() {
        file.threads = threads;
    }
    Ok(file)
}

/// Reads a study configuration; `study` fills in or must match the file's `study` key.
pub fn load_experiment(
    path: &Path,
    study: Option<Study>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<ExperimentSpec, CliError> {
    let mut table = parse_table(path)?;
    if let Some(s) = study {
        let name = toml::Value::try_from(s).map_err(|e| CliError::Config(e.to_string()))?;
        match table.get("study") {
            Some(v) if *v != name => {
                return Err(CliError::Config(format!(
                    "{}: study {v} does not match the subcommand ({name})",
                    path.display()
                )))
            }
            _ => {
                table.insert("study".into(), name);
            }
        }
    }
    let mut spec: ExperimentSpec = table
        .try_into()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        spec.base_seed = s;
    }
    if threads.is_some() {
        spec.threads = threads;
    }
    spec.validate().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(spec)
}

/// Reads `y,x1,…,xd` rows.
pub fn read_data(path: &Path) -> Result<Dataset, CliError> {
    let bad = |m: String| CliError::Config(format!("{}: {m}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let width = reader.headers().map_err(|e| bad(e.to_string()))?.len();
    if width < 2 {
        return Err(bad("expected columns y,x1,...,xd".into()));
    }
    let mut y = Vec::new();
    let mut x = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        for (k, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| bad(format!("not a number: {field:?}")))?;
            if k == 0 {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    Dataset::new(y, x, width - 1, SampleKind::Iid).map_err(|e| bad(e.to_string()))
}
