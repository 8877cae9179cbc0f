//! Command-line entry point and run configuration.
//!
//! A run is described by a flat TOML document (`--config`); command-line
//! flags override its keys. Exit codes: 0 on success, 1 for invalid input or
//! configuration, 2 when a numerical routine fails.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{CommandFactory, Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, ColumnSchema};
use crate::error::{DslError, Result};
use crate::estimators::{fit, Estimator, FitSettings, ModelKind, MomentModel, SolverSettings};
use crate::inference::FitResult;
use crate::io::{emit_report, ingest_csv, parse_csv, render_report, Report, ReportFormat};
use crate::learners::LearnerSpec;
use crate::simulation::{
    accuracy_grid, prevalence_experiment, run_replications, DgpSpec, GoldDesign, PrevalenceDesign,
    SimulationReport, SimulationSettings, SurrogateMechanism,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Fit,
    Simulate,
    Prevalence,
}

/// Flat run configuration. Every key is optional; unset keys take defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub format: Option<String>,
    pub estimator: Option<String>,
    pub estimators: Option<Vec<String>>,
    pub model: Option<String>,
    pub learner: Option<String>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub confidence: Option<f64>,
    pub max_iterations: Option<usize>,
    pub tolerance: Option<f64>,
    pub max_step_halvings: Option<usize>,
    pub min_gold_per_fit: Option<usize>,

    // column roles (fit)
    pub outcome: Option<String>,
    pub gold: Option<String>,
    pub probability: Option<String>,
    pub surrogates: Option<Vec<String>>,
    pub auxiliary: Option<Vec<String>>,
    pub covariates: Option<Vec<String>>,
    pub intercept: Option<bool>,

    // simulate
    pub n: Option<usize>,
    pub beta_star: Option<Vec<f64>>,
    pub mechanism: Option<String>,
    pub accuracies: Option<Vec<f64>>,
    pub flip_slope: Option<Vec<f64>>,
    pub gold_prob: Option<f64>,
    pub num_surrogates: Option<usize>,

    // prevalence
    pub n_gold: Option<usize>,
    pub prevalence: Option<f64>,
    pub sensitivity: Option<f64>,
    pub overlabel: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DslError::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| DslError::Io {
            context: format!("cannot read config {}", path.display()),
            source,
        })?;
        Self::from_toml(&text)
    }

    fn fit_settings(&self) -> Result<FitSettings> {
        let d = FitSettings::default();
        let s = FitSettings {
            solver: SolverSettings {
                max_iterations: self.max_iterations.unwrap_or(d.solver.max_iterations),
                tolerance: self.tolerance.unwrap_or(d.solver.tolerance),
                max_step_halvings: self.max_step_halvings.unwrap_or(d.solver.max_step_halvings),
                initial: None,
            },
            confidence_level: self.confidence.unwrap_or(d.confidence_level),
            min_gold_per_fit: self.min_gold_per_fit.unwrap_or(d.min_gold_per_fit),
        };
        s.solver.validate()?;
        crate::inference::normal_critical_value(s.confidence_level)?;
        Ok(s)
    }

    fn learner(&self) -> Result<LearnerSpec> {
        self.learner
            .as_deref()
            .map_or(Ok(LearnerSpec::default()), str::parse)
    }

    fn model(&self, default: ModelKind) -> Result<ModelKind> {
        self.model.as_deref().map_or(Ok(default), str::parse)
    }

    fn format(&self) -> Result<ReportFormat> {
        match (&self.format, &self.output) {
            (Some(f), _) => f.parse(),
            (None, Some(p)) => Ok(ReportFormat::from_path(p)),
            (None, None) => Ok(ReportFormat::Json),
        }
    }

    /// Column roles. Unset roles default to `y`, `r`, `pi` and the headers
    /// starting with `q`, `w` and `x` respectively.
    fn schema(&self, headers: &[String]) -> ColumnSchema {
        let pick = |prefix: char, skip: &[&str]| -> Vec<String> {
            headers
                .iter()
                .filter(|h| h.starts_with(prefix) && !skip.contains(&h.as_str()))
                .cloned()
                .collect()
        };
        let outcome = self.outcome.clone().unwrap_or_else(|| "y".into());
        let gold = self.gold.clone().unwrap_or_else(|| "r".into());
        let probability = self.probability.clone().unwrap_or_else(|| "pi".into());
        let taken = [outcome.as_str(), gold.as_str(), probability.as_str()];
        ColumnSchema {
            surrogates: self.surrogates.clone().unwrap_or_else(|| pick('q', &taken)),
            auxiliary: self.auxiliary.clone().unwrap_or_else(|| pick('w', &taken)),
            covariates: self.covariates.clone().unwrap_or_else(|| pick('x', &taken)),
            intercept: self.intercept.unwrap_or(true),
            outcome,
            gold,
            probability,
        }
    }

    fn estimator_list(&self) -> Result<Vec<Estimator>> {
        if let Some(e) = &self.estimator {
            return Ok(vec![e.parse()?]);
        }
        match &self.estimators {
            Some(list) => list.iter().map(|e| e.parse()).collect(),
            None => Ok(Estimator::ALL.to_vec()),
        }
    }

    fn simulation_settings(&self, default_model: ModelKind) -> Result<SimulationSettings> {
        let d = SimulationSettings::default();
        Ok(SimulationSettings {
            reps: self.reps.unwrap_or(d.reps),
            seed: self.seed.unwrap_or(d.seed),
            folds: self.folds.unwrap_or(d.folds),
            learner: self.learner()?,
            model: self.model(default_model)?,
            estimators: self.estimator_list()?,
            fit: self.fit_settings()?,
        })
    }

    fn dgp(&self) -> Result<DgpSpec> {
        let d = DgpSpec::default();
        let beta_star = self.beta_star.clone().unwrap_or(d.beta_star);
        let accuracy = 0.7;
        let surrogate = match self.mechanism.as_deref().unwrap_or("differential") {
            "differential" => {
                let mut slope = self.flip_slope.clone().unwrap_or_else(|| vec![-1.0, 1.5]);
                slope.resize(beta_star.len(), 0.0);
                SurrogateMechanism::Differential {
                    accuracy,
                    flip_slope: slope,
                }
            }
            "nondifferential" => SurrogateMechanism::Nondifferential { accuracy },
            other => {
                return Err(DslError::Config(format!(
                    "unknown mechanism `{other}` (expected differential or nondifferential)"
                )))
            }
        };
        Ok(DgpSpec {
            n: self.n.unwrap_or(d.n),
            beta_star,
            surrogate,
            gold: GoldDesign::Uniform {
                prob: self.gold_prob.unwrap_or(0.2),
            },
            surrogates: self.num_surrogates.unwrap_or(1),
        })
    }

    /// Runs the surrogate-accuracy sweep this configuration describes.
    pub fn simulate(&self) -> Result<SimulationReport> {
        let settings = self.simulation_settings(ModelKind::Logit)?;
        let accuracies = self
            .accuracies
            .clone()
            .unwrap_or_else(|| vec![0.6, 0.7, 0.8, 0.9, 1.0]);
        run_replications(&accuracy_grid(&self.dgp()?, &accuracies), &settings)
    }

    pub fn prevalence(&self) -> Result<SimulationReport> {
        let settings = self.simulation_settings(ModelKind::Mean)?;
        prevalence_experiment(&self.prevalence_design(), &settings)
    }

    fn prevalence_design(&self) -> PrevalenceDesign {
        let d = PrevalenceDesign::default();
        PrevalenceDesign {
            n: self.n.unwrap_or(d.n),
            n_gold: self.n_gold.unwrap_or(d.n_gold),
            prevalence: self.prevalence.unwrap_or(d.prevalence),
            sensitivity: self.sensitivity.unwrap_or(d.sensitivity),
            overlabel: self.overlabel.clone().unwrap_or(d.overlabel),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dsl", version, about = "Regression with surrogate labels and a known-probability gold subsample")]
pub struct Args {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Flat TOML run configuration; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// json or csv; inferred from the output extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
    /// so, gso, ssl or dsl.
    #[arg(long)]
    pub estimator: Option<String>,
    /// logit, linear or mean.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// e.g. stump_ensemble:100:0.1, knn:10, ridge_logit:1, constant:0.5, identity_surrogate:0
    #[arg(long)]
    pub learner: Option<String>,
    #[arg(long)]
    pub confidence: Option<f64>,
}

impl Args {
    fn merged(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => { $( if self.$f.is_some() { c.$f = self.$f.clone(); } )* };
        }
        over!(mode, input, output, format, estimator, model, folds, seed, reps, learner, confidence);
        Ok(c)
    }
}

fn usage() -> String {
    Args::command().render_usage().to_string()
}

/// Parses `argv` (program name first), runs the selected mode and returns
/// the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    run_cli_with(argv, &mut out, &mut err)
}

pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&args, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if matches!(e, DslError::Config(_)) || e.to_string().starts_with("fit mode") {
                let _ = writeln!(err, "{}", usage());
            }
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn io_err(e: std::io::Error) -> DslError {
    DslError::Io {
        context: "cannot write to stdout".into(),
        source: e,
    }
}

pub fn execute(args: &Args, out: &mut dyn Write) -> Result<()> {
    let config = args.merged()?;
    let mode = config
        .mode
        .ok_or_else(|| DslError::Config("missing --mode (fit, simulate or prevalence)".into()))?;
    match mode {
        Mode::Fit => {
            let input = config
                .input
                .clone()
                .ok_or_else(|| DslError::Config("fit mode requires --input".into()))?;
            let result = run_fit(&config, &input)?;
            write_fit_summary(&result, out).map_err(io_err)?;
            if let Some(path) = &config.output {
                emit_report(Report::Fit(&result), config.format()?, path)?;
            }
        }
        Mode::Simulate => {
            let report = config.simulate()?;
            write_simulation_summary(&report, 1.0, out).map_err(io_err)?;
            finish_simulation(&config, &report, out)?;
        }
        Mode::Prevalence => {
            let report = config.prevalence()?;
            write_simulation_summary(&report, 100.0, out).map_err(io_err)?;
            finish_simulation(&config, &report, out)?;
        }
    }
    Ok(())
}

fn finish_simulation(config: &RunConfig, report: &SimulationReport, out: &mut dyn Write) -> Result<()> {
    match &config.output {
        Some(path) => emit_report(Report::Simulation(report), config.format()?, path),
        None if config.format.is_some() => {
            let text = render_report(Report::Simulation(report), config.format()?)?;
            out.write_all(text.as_bytes()).map_err(io_err)
        }
        None => Ok(()),
    }
}

pub fn run_fit(config: &RunConfig, input: &std::path::Path) -> Result<FitResult> {
    let columns = parse_csv(input)?;
    let headers: Vec<String> = columns.iter().map(|(h, _)| h.clone()).collect();
    let schema = config.schema(&headers);
    let table = ingest_csv(input, &schema)?;
    let estimator: Estimator = config.estimator.as_deref().unwrap_or("dsl").parse()?;
    let model = MomentModel::Builtin(config.model(ModelKind::Logit)?);
    let folds = make_folds(
        table.n(),
        config.folds.unwrap_or(crate::crossfit::DEFAULT_FOLDS),
        config.seed.unwrap_or(0),
    )?;
    fit(estimator, &table, &model, &folds, &config.learner()?, &config.fit_settings()?)
}

pub fn write_fit_summary(fit: &FitResult, out: &mut dyn Write) -> std::io::Result<()> {
    let pct = 100.0 * fit.confidence_level;
    writeln!(
        out,
        "{} estimator, {} model: n = {}, gold = {}, {} iterations, moment norm {:.2e}",
        fit.estimator.name().to_uppercase(),
        fit.model,
        fit.diagnostics.n,
        fit.diagnostics.n_gold,
        fit.diagnostics.iterations,
        fit.diagnostics.moment_norm
    )?;
    if fit.diagnostics.fold_fallbacks.iter().any(|&f| f) {
        writeln!(out, "note: some folds fell back to the gold-mean learner")?;
    }
    writeln!(
        out,
        "{:<16} {:>12} {:>12} {:>12} {:>12}",
        "term",
        "estimate",
        "std.error",
        format!("{pct}% lower"),
        format!("{pct}% upper")
    )?;
    for j in 0..fit.beta_hat.len() {
        writeln!(
            out,
            "{:<16} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
            fit.terms[j], fit.beta_hat[j], fit.std_errors[j], fit.ci_lower[j], fit.ci_upper[j]
        )?;
    }
    Ok(())
}

/// `scale` multiplies bias and RMSE in the printout (100 for prevalence
/// in percentage points).
pub fn write_simulation_summary(report: &SimulationReport, scale: f64, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(
        out,
        "{} replications, {} model, learner {}, K = {}, seed {}",
        report.reps, report.model, report.learner, report.folds, report.seed
    )?;
    let unit = if scale == 1.0 { String::new() } else { format!(" (x{scale})") };
    for cell in &report.cells {
        writeln!(out, "\n[{}] n = {}, expected gold = {:.1}", cell.label, cell.n, cell.expected_gold)?;
        writeln!(
            out,
            "{:<5} {:<12} {:>10} {:>10} {:>9} {:>10} {:>8}",
            "",
            "term",
            format!("bias{unit}"),
            "std.bias",
            "coverage",
            format!("rmse{unit}"),
            "se/sd"
        )?;
        for e in &cell.estimators {
            for c in &e.coefficients {
                writeln!(
                    out,
                    "{:<5} {:<12} {:>10.4} {:>10.3} {:>8.1}% {:>10.4} {:>8.3}",
                    e.estimator.name().to_uppercase(),
                    c.term,
                    c.bias * scale,
                    c.standardized_bias,
                    100.0 * c.coverage,
                    c.rmse * scale,
                    c.se_ratio
                )?;
            }
            if e.failures > 0 {
                writeln!(
                    out,
                    "      {} failed fits{}",
                    e.failures,
                    if e.valid { "" } else { " (cell invalid)" }
                )?;
            }
        }
    }
    Ok(())
}
