//! Python bindings for `dsl-core`.
//!
//! Matrices cross the boundary as lists of rows, reports as JSON strings.
//! Invalid input raises `ValueError`; solver and simulation breakdowns raise
//! `dsl_py.NumericalError`.

use std::path::PathBuf;

use dsl_core::cli::RunConfig;
use dsl_core::data::ColumnSchema;
use dsl_core::estimators::{Estimator, FitSettings, ModelKind, MomentModel};
use dsl_core::inference::FitResult;
use dsl_core::io::{ingest_csv, render_report, Report, ReportFormat};
use dsl_core::simulation::{
    generate_corpus as core_generate, DgpSpec, GoldDesign, SimulationReport, SurrogateMechanism,
};
use dsl_core::{DslError, LearnerSpec, ObservationTable};
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

create_exception!(dsl_py, NumericalError, PyRuntimeError);

fn to_py(err: DslError) -> PyErr {
    if err.is_numerical() {
        NumericalError::new_err(err.to_string())
    } else {
        PyValueError::new_err(err.to_string())
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!("{what}: rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Validated observation table.
#[pyclass(name = "Table", module = "dsl_py", frozen)]
pub struct PyTable {
    inner: ObservationTable,
}

#[pymethods]
impl PyTable {
    /// `y` entries may be `None` where `r` is 0. `x` should include an
    /// intercept column if one is wanted.
    #[new]
    #[pyo3(signature = (x, q, y, r, pi, w=None, names=None))]
    fn new(
        x: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        y: Vec<Option<f64>>,
        r: Vec<f64>,
        pi: Vec<f64>,
        w: Option<Vec<Vec<f64>>>,
        names: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let x = matrix(&x, "x")?;
        let q = matrix(&q, "q")?;
        let w = w.map(|w| matrix(&w, "w")).transpose()?;
        let y = y.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let names = names.unwrap_or_else(|| (0..x.ncols()).map(|j| format!("x{j}")).collect());
        ObservationTable::with_names(x, q, w, y, r, pi, names)
            .map(|inner| Self { inner })
            .map_err(to_py)
    }

    /// Reads a headed CSV. Unnamed roles default to `y`, `r`, `pi` and the
    /// columns starting with `q`, `w` and `x`.
    #[staticmethod]
    #[pyo3(signature = (path, outcome="y", gold="r", probability="pi", surrogates=None, auxiliary=None, covariates=None, intercept=true))]
    #[allow(clippy::too_many_arguments)]
    fn from_csv(
        path: PathBuf,
        outcome: &str,
        gold: &str,
        probability: &str,
        surrogates: Option<Vec<String>>,
        auxiliary: Option<Vec<String>>,
        covariates: Option<Vec<String>>,
        intercept: bool,
    ) -> PyResult<Self> {
        let headers: Vec<String> = dsl_core::io::parse_csv(&path)
            .map_err(to_py)?
            .into_iter()
            .map(|(h, _)| h)
            .collect();
        let pick = |prefix: char| -> Vec<String> {
            headers
                .iter()
                .filter(|h| h.starts_with(prefix) && ![outcome, gold, probability].contains(&h.as_str()))
                .cloned()
                .collect()
        };
        let schema = ColumnSchema {
            outcome: outcome.into(),
            gold: gold.into(),
            probability: probability.into(),
            surrogates: surrogates.unwrap_or_else(|| pick('q')),
            auxiliary: auxiliary.unwrap_or_else(|| pick('w')),
            covariates: covariates.unwrap_or_else(|| pick('x')),
            intercept,
        };
        ingest_csv(&path, &schema).map(|inner| Self { inner }).map_err(to_py)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn n_gold(&self) -> usize {
        self.inner.n_gold()
    }

    #[getter]
    fn x_names(&self) -> Vec<String> {
        self.inner.x_names().to_vec()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        rows(self.inner.x())
    }

    #[getter]
    fn q(&self) -> Vec<Vec<f64>> {
        rows(self.inner.q())
    }

    #[getter]
    fn pi(&self) -> Vec<f64> {
        self.inner.pi().to_vec()
    }

    #[getter]
    fn r(&self) -> Vec<f64> {
        self.inner.r()
    }

    /// Gold outcomes, `None` on unlabeled rows.
    #[getter]
    fn y(&self) -> Vec<Option<f64>> {
        (0..self.inner.n()).map(|i| self.inner.gold_outcome(i)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Table(n={}, n_gold={}, x={:?})", self.inner.n(), self.inner.n_gold(), self.inner.x_names())
    }
}

#[pyclass(name = "FitResult", module = "dsl_py", frozen)]
pub struct PyFitResult {
    inner: FitResult,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn estimator(&self) -> &'static str {
        self.inner.estimator.name()
    }

    #[getter]
    fn model(&self) -> String {
        self.inner.model.clone()
    }

    #[getter]
    fn terms(&self) -> Vec<String> {
        self.inner.terms.clone()
    }

    #[getter]
    fn beta_hat(&self) -> Vec<f64> {
        self.inner.beta_hat.clone()
    }

    #[getter]
    fn std_errors(&self) -> Vec<f64> {
        self.inner.std_errors.clone()
    }

    #[getter]
    fn ci_lower(&self) -> Vec<f64> {
        self.inner.ci_lower.clone()
    }

    #[getter]
    fn ci_upper(&self) -> Vec<f64> {
        self.inner.ci_upper.clone()
    }

    #[getter]
    fn vcov(&self) -> Vec<Vec<f64>> {
        self.inner.vcov.clone()
    }

    #[getter]
    fn confidence_level(&self) -> f64 {
        self.inner.confidence_level
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.diagnostics.iterations
    }

    #[getter]
    fn moment_norm(&self) -> f64 {
        self.inner.diagnostics.moment_norm
    }

    #[getter]
    fn fold_fallbacks(&self) -> Vec<bool> {
        self.inner.diagnostics.fold_fallbacks.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        render_report(Report::Fit(&self.inner), ReportFormat::Json).map_err(to_py)
    }

    fn to_csv(&self) -> PyResult<String> {
        render_report(Report::Fit(&self.inner), ReportFormat::Csv).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "FitResult(estimator={}, model={}, beta_hat={:?})",
            self.inner.estimator, self.inner.model, self.inner.beta_hat
        )
    }
}

/// Zero-based fold id for each of `n` rows.
#[pyfunction]
fn make_folds(n: usize, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    dsl_core::make_folds(n, k, seed)
        .map(|f| f.fold_of().to_vec())
        .map_err(to_py)
}

#[pyfunction]
fn pseudo_outcome(g_hat: f64, r: bool, y: f64, pi: f64) -> PyResult<f64> {
    dsl_core::pseudo_outcome(g_hat, r, y, pi).map_err(to_py)
}

/// Fits one estimator. `learner` uses the CLI syntax, e.g. `"knn:10"`.
#[pyfunction]
#[pyo3(signature = (table, estimator="dsl", model="logit", learner="stump_ensemble", folds=5, seed=0, confidence=0.95, min_gold_per_fit=10))]
#[allow(clippy::too_many_arguments)]
fn fit(
    table: &PyTable,
    estimator: &str,
    model: &str,
    learner: &str,
    folds: usize,
    seed: u64,
    confidence: f64,
    min_gold_per_fit: usize,
) -> PyResult<PyFitResult> {
    let estimator: Estimator = estimator.parse().map_err(to_py)?;
    let model = MomentModel::Builtin(model.parse::<ModelKind>().map_err(to_py)?);
    let learner: LearnerSpec = learner.parse().map_err(to_py)?;
    let assignment = dsl_core::make_folds(table.inner.n(), folds, seed).map_err(to_py)?;
    let settings = FitSettings {
        confidence_level: confidence,
        min_gold_per_fit,
        ..FitSettings::default()
    };
    dsl_core::fit(estimator, &table.inner, &model, &assignment, &learner, &settings)
        .map(|inner| PyFitResult { inner })
        .map_err(to_py)
}

/// Draws a synthetic corpus; returns the table and every row's true outcome.
#[pyfunction]
#[pyo3(signature = (n=1000, beta_star=None, mechanism="differential", accuracy=0.7, gold_prob=0.2, seed=0))]
fn generate_corpus(
    n: usize,
    beta_star: Option<Vec<f64>>,
    mechanism: &str,
    accuracy: f64,
    gold_prob: f64,
    seed: u64,
) -> PyResult<(PyTable, Vec<f64>)> {
    let base = DgpSpec::default();
    let beta_star = beta_star.unwrap_or(base.beta_star);
    let surrogate = match mechanism {
        "differential" => {
            let mut flip_slope = vec![-1.0, 1.5];
            flip_slope.resize(beta_star.len(), 0.0);
            SurrogateMechanism::Differential { accuracy, flip_slope }
        }
        "nondifferential" => SurrogateMechanism::Nondifferential { accuracy },
        other => return Err(PyValueError::new_err(format!("unknown mechanism `{other}`"))),
    };
    let spec = DgpSpec {
        n,
        beta_star,
        surrogate,
        gold: GoldDesign::Uniform { prob: gold_prob },
        surrogates: 1,
    };
    let corpus = core_generate(&spec, seed).map_err(to_py)?;
    Ok((PyTable { inner: corpus.table }, corpus.y_full))
}

fn report_json(report: &SimulationReport) -> PyResult<String> {
    render_report(Report::Simulation(report), ReportFormat::Json).map_err(to_py)
}

fn parse_config(config: &str) -> PyResult<RunConfig> {
    RunConfig::from_toml(config).map_err(to_py)
}

/// Accuracy sweep configured by a TOML string with the CLI's keys; returns
/// the report as JSON.
#[pyfunction]
#[pyo3(signature = (config=""))]
fn simulate(py: Python<'_>, config: &str) -> PyResult<String> {
    let config = parse_config(config)?;
    let report = py.detach(|| config.simulate()).map_err(to_py)?;
    report_json(&report)
}

/// Prevalence experiment configured by a TOML string; returns JSON.
#[pyfunction]
#[pyo3(signature = (config=""))]
fn prevalence(py: Python<'_>, config: &str) -> PyResult<String> {
    let config = parse_config(config)?;
    let report = py.detach(|| config.prevalence()).map_err(to_py)?;
    report_json(&report)
}

#[pymodule]
pub fn dsl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTable>()?;
    m.add_class::<PyFitResult>()?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_function(wrap_pyfunction!(make_folds, m)?)?;
    m.add_function(wrap_pyfunction!(pseudo_outcome, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(prevalence, m)?)?;
    Ok(())
}
