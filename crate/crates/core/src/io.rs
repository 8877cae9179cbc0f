//! CSV ingestion and JSON / CSV report emission.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::{build_table, ColumnSchema, Columns, ObservationTable};
use crate::error::{DslError, Result};
use crate::inference::FitResult;
use crate::simulation::SimulationReport;

pub const FIT_SCHEMA_VERSION: u32 = 1;

/// Cells treated as missing in the outcome column.
const MISSING: [&str; 4] = ["", "NA", "na", "NaN"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = DslError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(DslError::InvalidSpec(format!("unknown report format `{s}`"))),
        }
    }
}

impl ReportFormat {
    /// `csv` for `*.csv` paths, JSON otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

/// Reads a headed CSV and validates it against `schema`. Only the outcome
/// column may contain empty cells, and only where the gold indicator is 0.
pub fn ingest_csv(path: &Path, schema: &ColumnSchema) -> Result<ObservationTable> {
    let columns = parse_csv(path)?;
    table_from_columns(columns, schema)
}

pub fn table_from_columns(columns: ParsedColumns, schema: &ColumnSchema) -> Result<ObservationTable> {
    let mut numeric = Columns::new();
    let roles = [&schema.outcome, &schema.gold, &schema.probability]
        .into_iter()
        .chain(&schema.surrogates)
        .chain(&schema.auxiliary)
        .chain(&schema.covariates);
    for name in roles {
        let cells = columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c)
            .ok_or_else(|| DslError::MissingColumn(name.clone()))?;
        let mut values = Vec::with_capacity(cells.len());
        for (row, cell) in cells.iter().enumerate() {
            let v = if MISSING.contains(&cell.as_str()) {
                if name == &schema.outcome {
                    f64::NAN
                } else {
                    return Err(DslError::NonNumeric {
                        column: name.clone(),
                        row,
                        value: cell.clone(),
                    });
                }
            } else {
                cell.parse::<f64>().map_err(|_| DslError::NonNumeric {
                    column: name.clone(),
                    row,
                    value: cell.clone(),
                })?
            };
            values.push(v);
        }
        numeric.insert(name.clone(), values);
    }
    build_table(&numeric, schema)
}

/// Column name with its raw cells, in header order.
pub type ParsedColumns = Vec<(String, Vec<String>)>;

/// Reads a headed CSV into raw string columns.
pub fn parse_csv(path: &Path) -> Result<ParsedColumns> {
    let text = fs::read_to_string(path).map_err(|source| DslError::Io {
        context: format!("cannot read {}", path.display()),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for record in reader.records() {
        for (j, cell) in record?.iter().enumerate() {
            cells[j].push(cell.to_string());
        }
    }
    Ok(headers.into_iter().zip(cells).collect())
}

#[derive(Debug, Clone, Copy)]
pub enum Report<'a> {
    Fit(&'a FitResult),
    Simulation(&'a SimulationReport),
}

#[derive(Serialize)]
struct FitEnvelope<'a> {
    schema_version: u32,
    #[serde(flatten)]
    result: &'a FitResult,
}

pub fn render_report(report: Report<'_>, format: ReportFormat) -> Result<String> {
    match (report, format) {
        (Report::Fit(fit), ReportFormat::Json) => {
            let mut s = serde_json::to_string_pretty(&FitEnvelope {
                schema_version: FIT_SCHEMA_VERSION,
                result: fit,
            })?;
            s.push('\n');
            Ok(s)
        }
        (Report::Simulation(sim), ReportFormat::Json) => {
            let mut s = serde_json::to_string_pretty(sim)?;
            s.push('\n');
            Ok(s)
        }
        (Report::Fit(fit), ReportFormat::Csv) => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["term", "estimate", "std_error", "ci_lower", "ci_upper"])?;
            for j in 0..fit.beta_hat.len() {
                w.write_record([
                    fit.terms[j].clone(),
                    fit.beta_hat[j].to_string(),
                    fit.std_errors[j].to_string(),
                    fit.ci_lower[j].to_string(),
                    fit.ci_upper[j].to_string(),
                ])?;
            }
            finish(w)
        }
        (Report::Simulation(sim), ReportFormat::Csv) => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "cell",
                "accuracy",
                "n",
                "expected_gold",
                "estimator",
                "term",
                "truth",
                "mean_estimate",
                "bias",
                "mc_se",
                "standardized_bias",
                "coverage",
                "coverage_mc_se",
                "rmse",
                "rmse_mc_se",
                "mean_std_error",
                "se_ratio",
                "failures",
                "valid",
            ])?;
            for cell in &sim.cells {
                for e in &cell.estimators {
                    for c in &e.coefficients {
                        w.write_record([
                            cell.label.clone(),
                            cell.accuracy.map_or(String::new(), |a| a.to_string()),
                            cell.n.to_string(),
                            cell.expected_gold.to_string(),
                            e.estimator.to_string(),
                            c.term.clone(),
                            c.truth.to_string(),
                            c.mean_estimate.to_string(),
                            c.bias.to_string(),
                            c.bias_mc_se.to_string(),
                            c.standardized_bias.to_string(),
                            c.coverage.to_string(),
                            c.coverage_mc_se.to_string(),
                            c.rmse.to_string(),
                            c.rmse_mc_se.to_string(),
                            c.mean_std_error.to_string(),
                            c.se_ratio.to_string(),
                            e.failures.to_string(),
                            e.valid.to_string(),
                        ])?;
                    }
                }
            }
            finish(w)
        }
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| DslError::Io {
        context: "cannot flush csv".into(),
        source: e.into_error(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn emit_report(report: Report<'_>, format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(report, format)?;
    fs::write(path, text).map_err(|source| DslError::Io {
        context: format!("cannot write {}", path.display()),
        source,
    })
}
