//! Monte Carlo harness: synthetic corpora with controllable surrogate error,
//! every estimator fitted per replication, bias / coverage / RMSE aggregated
//! per coefficient.
//!
//! Replications are independent given seeds derived from the master seed,
//! so they run in parallel; aggregation always walks replications in index
//! order, which keeps reports bit-reproducible.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, ObservationTable, INTERCEPT};
use crate::error::{DslError, Result};
use crate::estimators::{fit, Estimator, FitSettings, ModelKind, MomentModel};
use crate::learners::LearnerSpec;
use crate::{expit, logit};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// How surrogate labels are corrupted from the true binary outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SurrogateMechanism {
    /// Each label is flipped with probability `1 - accuracy`, independent of
    /// everything else.
    Nondifferential { accuracy: f64 },
    /// Positives are flipped with probability `expit(x' flip_slope)`,
    /// negatives with constant probability `1 - accuracy`.
    Differential { accuracy: f64, flip_slope: Vec<f64> },
    /// Class-conditional labeling: `P(Q=1 | Y=1) = sensitivity`,
    /// `P(Q=1 | Y=0) = false_positive_rate`.
    Misclassification {
        sensitivity: f64,
        false_positive_rate: f64,
    },
}

impl SurrogateMechanism {
    pub fn accuracy(&self) -> Option<f64> {
        match self {
            SurrogateMechanism::Nondifferential { accuracy }
            | SurrogateMechanism::Differential { accuracy, .. } => Some(*accuracy),
            SurrogateMechanism::Misclassification { .. } => None,
        }
    }

    pub fn with_accuracy(&self, a: f64) -> Self {
        match self {
            SurrogateMechanism::Nondifferential { .. } => {
                SurrogateMechanism::Nondifferential { accuracy: a }
            }
            SurrogateMechanism::Differential { flip_slope, .. } => SurrogateMechanism::Differential {
                accuracy: a,
                flip_slope: flip_slope.clone(),
            },
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GoldDesign {
    /// Simple random (Bernoulli) sampling with constant probability.
    Uniform { prob: f64 },
    /// `pi(x) = clip(expit(x' delta), min, max)`.
    CovariateDependent { delta: Vec<f64>, min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n: usize,
    /// True logistic coefficients, intercept first. Covariates beyond the
    /// intercept are independent standard normals.
    pub beta_star: Vec<f64>,
    pub surrogate: SurrogateMechanism,
    pub gold: GoldDesign,
    /// Number of surrogate columns, each drawn independently.
    #[serde(default = "one")]
    pub surrogates: usize,
}

fn one() -> usize {
    1
}

impl Default for DgpSpec {
    /// Intercept plus two standard normal covariates, differential surrogate
    /// error that grows with the first covariate among positives.
    fn default() -> Self {
        Self {
            n: 1000,
            beta_star: vec![0.5, -1.0, 1.0],
            surrogate: SurrogateMechanism::Differential {
                accuracy: 0.7,
                flip_slope: vec![-1.0, 1.5, 0.0],
            },
            gold: GoldDesign::Uniform { prob: 0.2 },
            surrogates: 1,
        }
    }
}

fn unit_interval(v: f64, what: &str, open_left: bool) -> Result<()> {
    let ok = if open_left { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
    if ok {
        Ok(())
    } else {
        Err(DslError::InvalidSpec(format!("{what} = {v} out of range")))
    }
}

impl DgpSpec {
    pub fn d_x(&self) -> usize {
        self.beta_star.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(DslError::InvalidSpec("corpus needs at least two rows".into()));
        }
        if self.beta_star.is_empty() || self.beta_star.iter().any(|b| !b.is_finite()) {
            return Err(DslError::InvalidSpec("beta_star must be non-empty and finite".into()));
        }
        if self.surrogates < 1 {
            return Err(DslError::InvalidSpec("at least one surrogate column".into()));
        }
        match &self.surrogate {
            SurrogateMechanism::Nondifferential { accuracy } => unit_interval(*accuracy, "accuracy", true)?,
            SurrogateMechanism::Differential { accuracy, flip_slope } => {
                unit_interval(*accuracy, "accuracy", true)?;
                if flip_slope.len() != self.d_x() {
                    return Err(DslError::InvalidSpec(format!(
                        "flip_slope has {} entries, expected {}",
                        flip_slope.len(),
                        self.d_x()
                    )));
                }
            }
            SurrogateMechanism::Misclassification {
                sensitivity,
                false_positive_rate,
            } => {
                unit_interval(*sensitivity, "sensitivity", false)?;
                unit_interval(*false_positive_rate, "false_positive_rate", false)?;
            }
        }
        match &self.gold {
            GoldDesign::Uniform { prob } => unit_interval(*prob, "gold probability", true)?,
            GoldDesign::CovariateDependent { delta, min, max } => {
                unit_interval(*min, "pi_min", true)?;
                unit_interval(*max, "pi_max", true)?;
                if min > max || delta.len() != self.d_x() {
                    return Err(DslError::InvalidSpec("invalid covariate-dependent design".into()));
                }
            }
        }
        Ok(())
    }

    /// Target of the given model under this DGP, when it is known in closed
    /// form.
    pub fn truth(&self, model: ModelKind) -> Result<Vec<f64>> {
        match model {
            ModelKind::Logit => Ok(self.beta_star.clone()),
            ModelKind::Mean if self.d_x() == 1 => Ok(vec![expit(self.beta_star[0])]),
            ModelKind::Mean => Err(DslError::InvalidSpec(
                "the mean model is only simulated for intercept-only DGPs".into(),
            )),
            ModelKind::Linear => Err(DslError::InvalidSpec(
                "the linear model has no closed-form target under the logistic DGP".into(),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedCorpus {
    pub table: ObservationTable,
    pub beta_star: Vec<f64>,
    /// Outcomes of every row, including those masked in the table.
    pub y_full: Vec<f64>,
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

pub fn generate_corpus(spec: &DgpSpec, seed: u64) -> Result<SimulatedCorpus> {
    spec.validate()?;
    let (n, d) = (spec.n, spec.d_x());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for j in 1..d {
            x[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let lin = |i: usize, coef: &[f64]| (0..d).map(|j| x[(i, j)] * coef[j]).sum::<f64>();

    let y: Vec<f64> = (0..n)
        .map(|i| bernoulli(&mut rng, expit(lin(i, &spec.beta_star))) as u8 as f64)
        .collect();

    let mut q = DMatrix::zeros(n, spec.surrogates);
    for i in 0..n {
        let positive = y[i] == 1.0;
        for c in 0..spec.surrogates {
            let label = match &spec.surrogate {
                SurrogateMechanism::Nondifferential { accuracy } => {
                    positive ^ bernoulli(&mut rng, 1.0 - accuracy)
                }
                SurrogateMechanism::Differential {
                    accuracy,
                    flip_slope,
                } => {
                    let flip = if positive {
                        expit(lin(i, flip_slope))
                    } else {
                        1.0 - accuracy
                    };
                    positive ^ bernoulli(&mut rng, flip)
                }
                SurrogateMechanism::Misclassification {
                    sensitivity,
                    false_positive_rate,
                } => bernoulli(
                    &mut rng,
                    if positive { *sensitivity } else { *false_positive_rate },
                ),
            };
            q[(i, c)] = label as u8 as f64;
        }
    }

    let pi: Vec<f64> = (0..n)
        .map(|i| match &spec.gold {
            GoldDesign::Uniform { prob } => *prob,
            GoldDesign::CovariateDependent { delta, min, max } => expit(lin(i, delta)).clamp(*min, *max),
        })
        .collect();
    let r: Vec<f64> = pi.iter().map(|&p| bernoulli(&mut rng, p) as u8 as f64).collect();

    let mut names = vec![INTERCEPT.to_string()];
    names.extend((1..d).map(|j| format!("x{j}")));
    let table = ObservationTable::with_names(x, q, None, y.clone(), r, pi, names)?;
    Ok(SimulatedCorpus {
        table,
        beta_star: spec.beta_star.clone(),
        y_full: y,
    })
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub label: String,
    pub dgp: DgpSpec,
}

/// Cells that differ from `base` only in surrogate accuracy.
pub fn accuracy_grid(base: &DgpSpec, accuracies: &[f64]) -> Vec<GridCell> {
    accuracies
        .iter()
        .map(|&a| GridCell {
            label: format!("accuracy={a}"),
            dgp: DgpSpec {
                surrogate: base.surrogate.with_accuracy(a),
                ..base.clone()
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSettings {
    pub reps: usize,
    pub seed: u64,
    pub folds: usize,
    pub learner: LearnerSpec,
    pub model: ModelKind,
    pub estimators: Vec<Estimator>,
    pub fit: FitSettings,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            reps: 500,
            seed: 0,
            folds: crate::crossfit::DEFAULT_FOLDS,
            learner: LearnerSpec::default(),
            model: ModelKind::Logit,
            estimators: Estimator::ALL.to_vec(),
            fit: FitSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMetrics {
    pub term: String,
    pub truth: f64,
    pub mean_estimate: f64,
    /// `mean(beta_hat) - truth`
    pub bias: f64,
    /// Monte Carlo standard error of `bias`.
    pub bias_mc_se: f64,
    /// `|bias| / sd(beta_hat)`
    pub standardized_bias: f64,
    pub sd_estimate: f64,
    pub coverage: f64,
    pub coverage_mc_se: f64,
    pub rmse: f64,
    pub rmse_mc_se: f64,
    pub mean_std_error: f64,
    /// `mean(std_error) / sd(beta_hat)`
    pub se_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub estimator: Estimator,
    pub successes: usize,
    pub failures: usize,
    /// False when failures reach 1% of replications.
    pub valid: bool,
    pub coefficients: Vec<CoefficientMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub label: String,
    pub accuracy: Option<f64>,
    pub n: usize,
    pub expected_gold: f64,
    pub dgp: DgpSpec,
    pub estimators: Vec<EstimatorReport>,
}

impl CellReport {
    pub fn estimator(&self, e: Estimator) -> Option<&EstimatorReport> {
        self.estimators.iter().find(|r| r.estimator == e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub schema_version: u32,
    pub reps: usize,
    pub seed: u64,
    pub model: ModelKind,
    pub learner: LearnerSpec,
    pub folds: usize,
    pub cells: Vec<CellReport>,
}

impl SimulationReport {
    pub fn cell(&self, label: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.label == label)
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one replication stream; `stream` separates corpus and folds.
pub fn derive_seed(master: u64, cell: usize, rep: usize, stream: u64) -> u64 {
    mix(mix(mix(mix(master) ^ cell as u64) ^ rep as u64) ^ stream)
}

fn expected_gold(spec: &DgpSpec) -> f64 {
    match &spec.gold {
        GoldDesign::Uniform { prob } => prob * spec.n as f64,
        // not closed form; reported as NaN
        GoldDesign::CovariateDependent { .. } => f64::NAN,
    }
}

/// Estimates and standard errors of one successful fit.
type Draw = Option<(Vec<f64>, Vec<f64>, Vec<bool>)>;

fn replicate(
    cell: &GridCell,
    cell_index: usize,
    rep: usize,
    settings: &SimulationSettings,
    truth: &[f64],
) -> Result<Vec<Draw>> {
    let corpus = generate_corpus(&cell.dgp, derive_seed(settings.seed, cell_index, rep, 0))?;
    let folds = make_folds(
        cell.dgp.n,
        settings.folds,
        derive_seed(settings.seed, cell_index, rep, 1),
    )?;
    let model = MomentModel::Builtin(settings.model);
    Ok(settings
        .estimators
        .iter()
        .map(|&e| {
            fit(e, &corpus.table, &model, &folds, &settings.learner, &settings.fit)
                .ok()
                .map(|f| {
                    let covered = (0..truth.len()).map(|j| f.covers(j, truth[j])).collect();
                    (f.beta_hat, f.std_errors, covered)
                })
        })
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn aggregate(term: &str, truth: f64, estimates: &[f64], ses: &[f64], covered: &[bool]) -> CoefficientMetrics {
    let reps = estimates.len() as f64;
    let mean_estimate = mean(estimates);
    let bias = mean_estimate - truth;
    let sd_estimate = sd(estimates);
    let coverage = covered.iter().filter(|&&c| c).count() as f64 / reps;
    let sq: Vec<f64> = estimates.iter().map(|b| (b - truth).powi(2)).collect();
    let rmse = mean(&sq).sqrt();
    let mean_std_error = mean(ses);
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else if a == 0.0 { 0.0 } else { f64::INFINITY };
    CoefficientMetrics {
        term: term.to_string(),
        truth,
        mean_estimate,
        bias,
        bias_mc_se: sd_estimate / reps.sqrt(),
        standardized_bias: ratio(bias.abs(), sd_estimate),
        sd_estimate,
        coverage,
        coverage_mc_se: (coverage * (1.0 - coverage) / reps).sqrt(),
        rmse,
        rmse_mc_se: ratio(sd(&sq) / reps.sqrt(), 2.0 * rmse),
        mean_std_error,
        se_ratio: ratio(mean_std_error, sd_estimate),
    }
}

pub fn run_replications(grid: &[GridCell], settings: &SimulationSettings) -> Result<SimulationReport> {
    if settings.reps < 2 {
        return Err(DslError::InvalidSpec("at least two replications are required".into()));
    }
    if settings.estimators.is_empty() {
        return Err(DslError::InvalidSpec("no estimators selected".into()));
    }
    settings.learner.validate()?;
    let mut cells = Vec::with_capacity(grid.len());
    for (cell_index, cell) in grid.iter().enumerate() {
        cell.dgp.validate()?;
        let truth = cell.dgp.truth(settings.model)?;
        let terms: Vec<String> = match settings.model {
            ModelKind::Mean => vec![INTERCEPT.to_string()],
            _ => std::iter::once(INTERCEPT.to_string())
                .chain((1..truth.len()).map(|j| format!("x{j}")))
                .collect(),
        };
        let draws: Vec<Vec<Draw>> = (0..settings.reps)
            .into_par_iter()
            .map(|rep| replicate(cell, cell_index, rep, settings, &truth))
            .collect::<Result<_>>()?;

        let mut estimators = Vec::with_capacity(settings.estimators.len());
        for (slot, &estimator) in settings.estimators.iter().enumerate() {
            let ok: Vec<&(Vec<f64>, Vec<f64>, Vec<bool>)> =
                draws.iter().filter_map(|d| d[slot].as_ref()).collect();
            let failures = settings.reps - ok.len();
            if ok.is_empty() {
                return Err(DslError::AllReplicationsFailed {
                    cell: cell.label.clone(),
                    estimator: estimator.to_string(),
                    reps: settings.reps,
                });
            }
            let coefficients = (0..truth.len())
                .map(|j| {
                    let est: Vec<f64> = ok.iter().map(|d| d.0[j]).collect();
                    let se: Vec<f64> = ok.iter().map(|d| d.1[j]).collect();
                    let cov: Vec<bool> = ok.iter().map(|d| d.2[j]).collect();
                    aggregate(&terms[j], truth[j], &est, &se, &cov)
                })
                .collect();
            estimators.push(EstimatorReport {
                estimator,
                successes: ok.len(),
                failures,
                valid: failures * 100 < settings.reps,
                coefficients,
            });
        }
        cells.push(CellReport {
            label: cell.label.clone(),
            accuracy: cell.dgp.surrogate.accuracy(),
            n: cell.dgp.n,
            expected_gold: expected_gold(&cell.dgp),
            dgp: cell.dgp.clone(),
            estimators,
        });
    }
    Ok(SimulationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        reps: settings.reps,
        seed: settings.seed,
        model: settings.model,
        learner: settings.learner.clone(),
        folds: settings.folds,
        cells,
    })
}

/// Class-prevalence setup: intercept-only outcome with a surrogate that
/// over-labels the positive class by a fixed number of percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceDesign {
    pub n: usize,
    pub n_gold: usize,
    pub prevalence: f64,
    pub sensitivity: f64,
    /// Surrogate prevalence minus true prevalence for each cell.
    pub overlabel: Vec<f64>,
}

impl Default for PrevalenceDesign {
    fn default() -> Self {
        Self {
            n: 2500,
            n_gold: 100,
            prevalence: 0.3,
            sensitivity: 0.9,
            overlabel: vec![0.2],
        }
    }
}

impl PrevalenceDesign {
    pub fn grid(&self) -> Result<Vec<GridCell>> {
        if self.n_gold == 0 || self.n_gold > self.n {
            return Err(DslError::InvalidSpec(format!(
                "n_gold = {} must be in 1..={}",
                self.n_gold, self.n
            )));
        }
        unit_interval(self.prevalence, "prevalence", true)?;
        let p = self.prevalence;
        self.overlabel
            .iter()
            .map(|&b| {
                // mean surrogate = sensitivity * p + fpr * (1 - p) = p + b
                let fpr = (p + b - self.sensitivity * p) / (1.0 - p);
                if !(0.0..=1.0).contains(&fpr) {
                    return Err(DslError::InvalidSpec(format!(
                        "over-labeling {b} is unreachable with sensitivity {}",
                        self.sensitivity
                    )));
                }
                Ok(GridCell {
                    label: format!("overlabel={b}"),
                    dgp: DgpSpec {
                        n: self.n,
                        beta_star: vec![logit(p)],
                        surrogate: SurrogateMechanism::Misclassification {
                            sensitivity: self.sensitivity,
                            false_positive_rate: fpr,
                        },
                        gold: GoldDesign::Uniform {
                            prob: self.n_gold as f64 / self.n as f64,
                        },
                        surrogates: 1,
                    },
                })
            })
            .collect()
    }
}

/// Runs the prevalence comparison; `settings.model` is forced to the mean.
pub fn prevalence_experiment(design: &PrevalenceDesign, settings: &SimulationSettings) -> Result<SimulationReport> {
    let settings = SimulationSettings {
        model: ModelKind::Mean,
        ..settings.clone()
    };
    run_replications(&design.grid()?, &settings)
}
