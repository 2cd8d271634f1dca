//! CSV and JSON emission. Every file is written to a temporary sibling and renamed.

use std::io::Write;
use std::path::{Path, PathBuf};

use lpmreg::experiments::ExperimentReport;
use lpmreg::{BasisLayout, LossModel, RateReport};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Reals with 17 significant digits; NaN as the literal `NaN`.
pub fn real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Write(format!("{}: {e}", path.display()));
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// RFC-4180 table with a header row; always ends with a newline.
pub fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Write(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Write(e.to_string()))
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| CliError::Write(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn s(v: impl ToString) -> String {
    v.to_string()
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|n| n.to_string()).collect()
}

fn point(p: &[f64]) -> String {
    p.iter().map(|v| real(*v)).collect::<Vec<_>>().join(";")
}

/// File stem for a rate table, e.g. `rate_quantile`.
fn rate_stem(loss: &LossModel) -> String {
    let name = match loss {
        LossModel::Squared => "squared",
        LossModel::Quantile { .. } => "quantile",
        LossModel::Huber { .. } => "huber",
        LossModel::Lq { .. } => "lq",
    };
    format!("rate_{name}")
}

/// Columns `n, h, median_sup_remainder, theory_scale`, then the `slope` and `slope_se` footer rows.
pub fn rate_table(rate: &RateReport) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rows: Vec<Vec<String>> = rate
        .records
        .iter()
        .map(|r| vec![s(r.n), real(r.h), real(r.median_sup_remainder), real(r.theory_scale)])
        .collect();
    rows.push(vec![s("slope"), real(rate.fitted_slope), String::new(), String::new()]);
    rows.push(vec![s("slope_se"), real(rate.slope_se), String::new(), String::new()]);
    (header(&["n", "h", "median_sup_remainder", "theory_scale"]), rows)
}

/// Writes a study report into `dir`; returns the paths written.
pub fn emit_report(report: &ExperimentReport, format: Format, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    match format {
        Format::Json => files.push((dir.join("report.json"), json_bytes(report)?)),
        Format::Csv => {
            let cells = report
                .cells
                .iter()
                .map(|c| {
                    vec![
                        c.label.clone(),
                        c.quantity.clone(),
                        s(c.n),
                        real(c.h),
                        point(&c.point),
                        real(c.mean),
                        real(c.sd),
                        real(c.se),
                        real(c.median),
                        real(c.reference),
                        s(c.replications),
                        s(c.failures),
                    ]
                })
                .collect::<Vec<_>>();
            let h = header(&[
                "label", "quantity", "n", "h", "point", "mean", "sd", "se", "median", "reference", "replications", "failures",
            ]);
            files.push((dir.join("cells.csv"), csv_bytes(&h, &cells)?));
            let checks = report
                .checks
                .iter()
                .map(|c| vec![c.name.clone(), real(c.value), real(c.lower), real(c.upper), s(c.pass)])
                .collect::<Vec<_>>();
            files.push((
                dir.join("checks.csv"),
                csv_bytes(&header(&["name", "value", "lower", "upper", "pass"]), &checks)?,
            ));
            let diags = report
                .diagnostics
                .iter()
                .map(|d| vec![d.name.clone(), real(d.value)])
                .collect::<Vec<_>>();
            files.push((dir.join("diagnostics.csv"), csv_bytes(&header(&["name", "value"]), &diags)?));
            for rate in &report.rate {
                let (h, rows) = rate_table(rate);
                files.push((dir.join(format!("{}.csv", rate_stem(&rate.loss))), csv_bytes(&h, &rows)?));
            }
        }
    }
    for (path, bytes) in &files {
        write_atomic(path, bytes)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// One row of `fit` output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitRow {
    pub x: Vec<f64>,
    #[serde(with = "lpmreg::serde_nan")]
    pub m_hat: f64,
    /// Derivative estimates in basis order after the intercept.
    #[serde(with = "lpmreg::serde_nan::vec")]
    pub derivatives: Vec<f64>,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Column names `deriv_<r>` for every multi-index of order ≥ 1.
pub fn derivative_columns(layout: &BasisLayout) -> Vec<String> {
    layout.order()[1..]
        .iter()
        .map(|r| {
            let parts: Vec<String> = r.entries().iter().map(|e| e.to_string()).collect();
            format!("deriv_{}", parts.join("_"))
        })
        .collect()
}

/// Writes `fit.csv` (`x…, m_hat, deriv_…, converged`) or `fit.json`.
pub fn emit_fit(rows: &[FitRow], layout: &BasisLayout, format: Format, dir: &Path) -> Result<PathBuf, CliError> {
    let (path, bytes) = match format {
        Format::Json => (dir.join("fit.json"), json_bytes(&rows)?),
        Format::Csv => {
            let d = layout.dim();
            let mut h: Vec<String> = if d == 1 { vec![s("x")] } else { (1..=d).map(|k| format!("x{k}")).collect() };
            h.push(s("m_hat"));
            h.extend(derivative_columns(layout));
            h.push(s("converged"));
            let body = rows
                .iter()
                .map(|r| {
                    let mut v: Vec<String> = r.x.iter().map(|t| real(*t)).collect();
                    v.push(real(r.m_hat));
                    v.extend(r.derivatives.iter().map(|t| real(*t)));
                    v.push(s(r.converged));
                    v
                })
                .collect::<Vec<_>>();
            (dir.join("fit.csv"), csv_bytes(&h, &body)?)
        }
    };
    write_atomic(&path, &bytes)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_keep_seventeen_digits() {
        assert_eq!(real(0.1), "1.0000000000000001e-1");
        assert_eq!(real(f64::NAN), "NaN");
        assert_eq!(real(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn empty_table_is_header_only() {
        let b = csv_bytes(&header(&["a", "b"]), &[]).unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), "a,b\r\n");
    }

    #[test]
    fn fields_are_quoted_when_needed() {
        let b = csv_bytes(&header(&["label"]), &[vec![s("n=1 x=[0.5, 0.25]")], vec![s("say \"hi\"")]]).unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), "label\r\n\"n=1 x=[0.5, 0.25]\"\r\n\"say \"\"hi\"\"\"\r\n");
    }

    #[test]
    fn derivative_column_names() {
        let layout = BasisLayout::new(2, 2).unwrap();
        assert_eq!(
            derivative_columns(&layout),
            ["deriv_0_1", "deriv_1_0", "deriv_0_2", "deriv_1_1", "deriv_2_0"]
        );
    }
}
