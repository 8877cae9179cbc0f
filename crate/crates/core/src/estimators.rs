//! Moment solvers and the four estimators.
//!
//! Every estimator solves an estimating equation of the form
//! `(1/n) sum_i w_i m(outcome_i, x_i; beta) = 0`; they differ only in which
//! outcome and weights they plug in:
//!
//! | estimator | rows      | outcome                | weight |
//! |-----------|-----------|------------------------|--------|
//! | SO        | all       | mean surrogate         | 1      |
//! | GSO       | gold only | gold outcome           | 1/pi   |
//! | SSL       | all       | cross-fitted prediction| 1      |
//! | DSL       | all       | pseudo-outcome         | 1      |
//!
//! Outcomes are never assumed to be binary: pseudo-outcomes routinely fall
//! outside `[0, 1]`, so the logistic moment is solved directly by Newton's
//! method rather than by maximizing a likelihood.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::crossfit::{build_pseudo_outcomes, cross_fit, DEFAULT_MIN_GOLD_PER_FIT};
use crate::data::{FoldAssignment, ObservationTable, INTERCEPT};
use crate::error::{DslError, Result};
use crate::expit;
use crate::inference::{
    checked_inverse, mean_moment, numeric_jacobian, sandwich_custom, sandwich_linear,
    sandwich_logit, Diagnostics, FitResult, DEFAULT_CONFIDENCE,
};
use crate::learners::LearnerSpec;

/// A just-identified moment function `m(y, x; beta)` evaluated per row.
pub trait DesignMoment: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, y: f64, x: &[f64], beta: &[f64], out: &mut [f64]);
}

/// `(y - expit(x'beta)) x` over `d` covariates.
#[derive(Debug, Clone, Copy)]
pub struct LogitMoment(pub usize);

/// `(y - x'beta) x` over `d` covariates.
#[derive(Debug, Clone, Copy)]
pub struct LinearMoment(pub usize);

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl DesignMoment for LogitMoment {
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&self, y: f64, x: &[f64], beta: &[f64], out: &mut [f64]) {
        let r = y - expit(dot(x, beta));
        for (o, xi) in out.iter_mut().zip(x) {
            *o = r * xi;
        }
    }
}

impl DesignMoment for LinearMoment {
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&self, y: f64, x: &[f64], beta: &[f64], out: &mut [f64]) {
        let r = y - dot(x, beta);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = r * xi;
        }
    }
}

/// Wraps a closure as a moment of fixed dimension.
pub struct FnMoment<F> {
    dim: usize,
    f: F,
}

impl<F> FnMoment<F>
where
    F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> DesignMoment for FnMoment<F>
where
    F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, y: f64, x: &[f64], beta: &[f64], out: &mut [f64]) {
        (self.f)(y, x, beta, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logit,
    Linear,
    /// Intercept-only linear model: the mean (class prevalence).
    Mean,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Logit => "logit",
            ModelKind::Linear => "linear",
            ModelKind::Mean => "mean",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = DslError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(ModelKind::Logit),
            "linear" => Ok(ModelKind::Linear),
            "mean" => Ok(ModelKind::Mean),
            _ => Err(DslError::InvalidSpec(format!("unknown model `{s}`"))),
        }
    }
}

#[derive(Clone)]
pub enum MomentModel {
    Builtin(ModelKind),
    Custom(Arc<dyn DesignMoment>),
}

impl fmt::Debug for MomentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MomentModel::Builtin(k) => write!(f, "Builtin({k})"),
            MomentModel::Custom(m) => write!(f, "Custom(dim = {})", m.dim()),
        }
    }
}

impl From<ModelKind> for MomentModel {
    fn from(kind: ModelKind) -> Self {
        MomentModel::Builtin(kind)
    }
}

impl MomentModel {
    pub fn name(&self) -> &'static str {
        match self {
            MomentModel::Builtin(k) => k.name(),
            MomentModel::Custom(_) => "custom",
        }
    }

    /// Design matrix and term names used for this model.
    fn design(&self, table: &ObservationTable) -> Result<(DMatrix<f64>, Vec<String>)> {
        match self {
            MomentModel::Builtin(ModelKind::Mean) => Ok((
                DMatrix::from_element(table.n(), 1, 1.0),
                vec![INTERCEPT.to_string()],
            )),
            MomentModel::Custom(m) if m.dim() != table.x().ncols() => {
                Err(DslError::InvalidSpec(format!(
                    "custom moment has dimension {} but there are {} covariates",
                    m.dim(),
                    table.x().ncols()
                )))
            }
            _ => Ok((table.x().clone(), table.x_names().to_vec())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    So,
    Gso,
    Ssl,
    Dsl,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::So, Estimator::Gso, Estimator::Ssl, Estimator::Dsl];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::So => "so",
            Estimator::Gso => "gso",
            Estimator::Ssl => "ssl",
            Estimator::Dsl => "dsl",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = DslError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "so" => Ok(Estimator::So),
            "gso" => Ok(Estimator::Gso),
            "ssl" => Ok(Estimator::Ssl),
            "dsl" => Ok(Estimator::Dsl),
            _ => Err(DslError::InvalidSpec(format!("unknown estimator `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Convergence threshold on the max-norm of the mean moment.
    pub tolerance: f64,
    pub max_step_halvings: usize,
    /// Starting point; zeros when absent.
    pub initial: Option<Vec<f64>>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-10,
            max_step_halvings: 30,
            initial: None,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if self.tolerance.is_nan() || self.tolerance <= 0.0 || self.max_iterations < 1 || self.max_step_halvings < 1 {
            return Err(DslError::InvalidSpec(
                "solver tolerance must be > 0 and limits >= 1".into(),
            ));
        }
        Ok(())
    }

    fn start(&self, d: usize) -> Result<DVector<f64>> {
        match &self.initial {
            Some(v) if v.len() == d => Ok(DVector::from_column_slice(v)),
            Some(v) => Err(DslError::InvalidSpec(format!(
                "initial value has {} entries, expected {d}",
                v.len()
            ))),
            None => Ok(DVector::zeros(d)),
        }
    }
}

/// Everything an estimator call needs beyond the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub solver: SolverSettings,
    pub confidence_level: f64,
    pub min_gold_per_fit: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            solver: SolverSettings::default(),
            confidence_level: DEFAULT_CONFIDENCE,
            min_gold_per_fit: DEFAULT_MIN_GOLD_PER_FIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub moment_norm: f64,
}

fn check_inputs(outcomes: &[f64], x: &DMatrix<f64>, weights: &[f64]) -> Result<()> {
    let n = outcomes.len();
    if x.nrows() != n || weights.len() != n {
        return Err(DslError::LengthMismatch {
            column: if x.nrows() != n { "x" } else { "weights" }.into(),
            expected: n,
            found: if x.nrows() != n { x.nrows() } else { weights.len() },
        });
    }
    if n == 0 {
        return Err(DslError::InsufficientGold { needed: 1, found: 0 });
    }
    if let Some(i) = outcomes.iter().position(|v| !v.is_finite()) {
        return Err(DslError::NonFinite {
            column: "outcome".into(),
            row: i,
        });
    }
    if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(DslError::InvalidSpec(format!("weight at row {i} is negative or non-finite")));
    }
    Ok(())
}

/// `(1/n) sum w x x'`, rejected when numerically rank deficient.
fn weighted_gram(x: &DMatrix<f64>, weights: &[f64]) -> Result<DMatrix<f64>> {
    let w = DVector::from_column_slice(weights);
    let mut xw = x.clone();
    for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
        row *= *wi;
    }
    let gram = x.transpose() * xw / x.nrows() as f64;
    checked_inverse(&gram, "weighted design")
        .map_err(|_| DslError::SingularDesign("weighted design is rank deficient".into()))?;
    Ok(gram)
}

fn logit_moment_and_jacobian(
    outcomes: &[f64],
    x: &DMatrix<f64>,
    weights: &[f64],
    beta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.nrows(), x.ncols());
    let eta = x * beta;
    let mut moment = DVector::zeros(d);
    let mut jac = DMatrix::zeros(d, d);
    for i in 0..n {
        let p = expit(eta[i]);
        let r = weights[i] * (outcomes[i] - p);
        let h = weights[i] * p * (1.0 - p);
        for a in 0..d {
            let xa = x[(i, a)];
            moment[a] += r * xa;
            for c in 0..=a {
                jac[(a, c)] += h * xa * x[(i, c)];
            }
        }
    }
    for a in 0..d {
        for c in 0..a {
            jac[(c, a)] = jac[(a, c)];
        }
    }
    (moment / n as f64, jac / n as f64)
}

fn logit_moment(outcomes: &[f64], x: &DMatrix<f64>, weights: &[f64], beta: &DVector<f64>) -> DVector<f64> {
    let eta = x * beta;
    let mut moment = DVector::zeros(x.ncols());
    for i in 0..x.nrows() {
        let r = weights[i] * (outcomes[i] - expit(eta[i]));
        for a in 0..x.ncols() {
            moment[a] += r * x[(i, a)];
        }
    }
    moment / x.nrows() as f64
}

/// Solves `(1/n) sum w_i (y_i - expit(x_i'b)) x_i = 0` by Newton's method
/// with step halving on the Euclidean moment norm. The Jacobian
/// `(1/n) sum w p (1-p) x x'` is positive definite for full-rank `x` no
/// matter what the outcomes are.
pub fn solve_logit_moment(
    outcomes: &[f64],
    x: &DMatrix<f64>,
    weights: &[f64],
    settings: &SolverSettings,
) -> Result<Solution> {
    settings.validate()?;
    check_inputs(outcomes, x, weights)?;
    weighted_gram(x, weights)?;
    let mut beta = settings.start(x.ncols())?;
    let (mut moment, mut jac) = logit_moment_and_jacobian(outcomes, x, weights, &beta);
    for iteration in 0..=settings.max_iterations {
        let norm = moment.amax();
        if norm <= settings.tolerance {
            return Ok(Solution {
                beta: beta.iter().copied().collect(),
                iterations: iteration,
                moment_norm: norm,
            });
        }
        if iteration == settings.max_iterations {
            break;
        }
        // The design already passed the rank check, so a Jacobian that is no
        // longer positive definite means the fitted probabilities saturated.
        let chol = jac.clone().cholesky().ok_or(DslError::NonConvergence {
            iterations: iteration,
            norm,
        })?;
        let step = chol.solve(&moment);
        let current = moment.norm();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..settings.max_step_halvings {
            let cand = &beta + t * &step;
            let cand_moment = logit_moment(outcomes, x, weights, &cand);
            if cand_moment.norm() < current {
                beta = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(DslError::NonConvergence {
                iterations: iteration,
                norm,
            });
        }
        (moment, jac) = logit_moment_and_jacobian(outcomes, x, weights, &beta);
    }
    Err(DslError::NonConvergence {
        iterations: settings.max_iterations,
        norm: moment.amax(),
    })
}

/// Closed-form weighted least squares.
pub fn solve_linear_moment(outcomes: &[f64], x: &DMatrix<f64>, weights: &[f64]) -> Result<Solution> {
    check_inputs(outcomes, x, weights)?;
    let gram = weighted_gram(x, weights)?;
    let n = x.nrows() as f64;
    let mut rhs = DVector::zeros(x.ncols());
    for i in 0..x.nrows() {
        for a in 0..x.ncols() {
            rhs[a] += weights[i] * outcomes[i] * x[(i, a)];
        }
    }
    rhs /= n;
    let chol = gram
        .cholesky()
        .ok_or_else(|| DslError::SingularDesign("weighted design is not positive definite".into()))?;
    let beta = chol.solve(&rhs);
    let fitted = x * &beta;
    let mut moment = DVector::zeros(x.ncols());
    for i in 0..x.nrows() {
        for a in 0..x.ncols() {
            moment[a] += weights[i] * (outcomes[i] - fitted[i]) * x[(i, a)];
        }
    }
    Ok(Solution {
        beta: beta.iter().copied().collect(),
        iterations: 1,
        moment_norm: (moment / n).amax(),
    })
}

/// Damped Newton iteration for an arbitrary just-identified moment using a
/// central-difference Jacobian. When the Jacobian is singular the step falls
/// back to a Levenberg-Marquardt regularized direction.
pub fn solve_custom_moment(
    moment: &dyn DesignMoment,
    outcomes: &[f64],
    x: &DMatrix<f64>,
    weights: &[f64],
    settings: &SolverSettings,
) -> Result<Solution> {
    settings.validate()?;
    check_inputs(outcomes, x, weights)?;
    let d = moment.dim();
    let mut beta: Vec<f64> = settings.start(d)?.iter().copied().collect();
    let mut value = mean_moment(moment, outcomes, x, Some(weights), &beta);
    for iteration in 0..=settings.max_iterations {
        let norm = value.amax();
        if !norm.is_finite() {
            break;
        }
        if norm <= settings.tolerance {
            return Ok(Solution {
                beta,
                iterations: iteration,
                moment_norm: norm,
            });
        }
        if iteration == settings.max_iterations {
            break;
        }
        let jac = numeric_jacobian(moment, outcomes, x, Some(weights), &beta);
        let step = match checked_inverse(&jac, "moment Jacobian") {
            Ok(inv) => -(inv * &value),
            Err(_) => {
                let jtj = jac.transpose() * &jac;
                let mu = 1e-8 * (1.0 + jtj.amax());
                let reg = jtj + DMatrix::identity(d, d) * mu;
                match reg.cholesky() {
                    Some(c) => -c.solve(&(jac.transpose() * &value)),
                    None => DVector::zeros(d),
                }
            }
        };
        let current = value.norm();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..settings.max_step_halvings {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let cand_value = mean_moment(moment, outcomes, x, Some(weights), &cand);
            if cand_value.norm() < current {
                beta = cand;
                value = cand_value;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(DslError::NonConvergence {
                iterations: iteration,
                norm,
            });
        }
    }
    Err(DslError::NonConvergence {
        iterations: settings.max_iterations,
        norm: value.amax(),
    })
}

/// Solves the model's moment and attaches its sandwich covariance.
#[allow(clippy::too_many_arguments)]
fn solve_and_infer(
    estimator: Estimator,
    model: &MomentModel,
    outcomes: &[f64],
    x: &DMatrix<f64>,
    terms: Vec<String>,
    weights: Option<&[f64]>,
    settings: &FitSettings,
    mut diagnostics: Diagnostics,
) -> Result<FitResult> {
    let ones;
    let w = match weights {
        Some(w) => w,
        None => {
            ones = vec![1.0; outcomes.len()];
            &ones
        }
    };
    let (solution, vcov) = match model {
        MomentModel::Builtin(ModelKind::Logit) => {
            let s = solve_logit_moment(outcomes, x, w, &settings.solver)?;
            let v = sandwich_logit(outcomes, x, &s.beta, weights)?;
            (s, v)
        }
        MomentModel::Builtin(ModelKind::Linear | ModelKind::Mean) => {
            let s = solve_linear_moment(outcomes, x, w)?;
            let v = sandwich_linear(outcomes, x, &s.beta, weights)?;
            (s, v)
        }
        MomentModel::Custom(m) => {
            let s = solve_custom_moment(m.as_ref(), outcomes, x, w, &settings.solver)?;
            let v = sandwich_custom(m.as_ref(), outcomes, x, &s.beta, weights)?;
            (s, v)
        }
    };
    diagnostics.iterations = solution.iterations;
    diagnostics.moment_norm = solution.moment_norm;
    FitResult::new(
        estimator,
        model.name(),
        terms,
        solution.beta,
        &vcov,
        settings.confidence_level,
        diagnostics,
    )
}

fn diagnostics(table: &ObservationTable, fold_fallbacks: Vec<bool>) -> Diagnostics {
    Diagnostics {
        iterations: 0,
        moment_norm: f64::NAN,
        n: table.n(),
        n_gold: table.n_gold(),
        fold_fallbacks,
    }
}

/// Surrogate only: regress the row-wise mean surrogate on `x`.
pub fn fit_so(table: &ObservationTable, model: &MomentModel, settings: &FitSettings) -> Result<FitResult> {
    let (x, terms) = model.design(table)?;
    let outcomes = table.surrogate_mean();
    solve_and_infer(Estimator::So, model, &outcomes, &x, terms, None, settings, diagnostics(table, vec![]))
}

/// Gold-standard only, with inverse-probability weights `1/pi`.
pub fn fit_gso(table: &ObservationTable, model: &MomentModel, settings: &FitSettings) -> Result<FitResult> {
    let (x, terms) = model.design(table)?;
    let gold = table.gold_rows();
    let needed = x.ncols() + 1;
    if gold.len() < needed {
        return Err(DslError::InsufficientGold {
            needed,
            found: gold.len(),
        });
    }
    let xg = DMatrix::from_fn(gold.len(), x.ncols(), |i, j| x[(gold[i], j)]);
    let yg: Vec<f64> = gold.iter().map(|&i| table.y_raw()[i]).collect();
    let wg: Vec<f64> = gold.iter().map(|&i| 1.0 / table.pi()[i]).collect();
    solve_and_infer(Estimator::Gso, model, &yg, &xg, terms, Some(&wg), settings, diagnostics(table, vec![]))
}

/// Semi-supervised: cross-fitted predictions used as outcomes.
pub fn fit_ssl(
    table: &ObservationTable,
    model: &MomentModel,
    folds: &FoldAssignment,
    learner: &LearnerSpec,
    settings: &FitSettings,
) -> Result<FitResult> {
    let (x, terms) = model.design(table)?;
    let first = cross_fit(table, folds, learner, settings.min_gold_per_fit)?;
    let flags = first.fold_fits.iter().map(|f| f.fallback).collect();
    solve_and_infer(Estimator::Ssl, model, &first.predictions, &x, terms, None, settings, diagnostics(table, flags))
}

/// Design-based semi-supervised: bias-corrected pseudo-outcomes as outcomes.
pub fn fit_dsl(
    table: &ObservationTable,
    model: &MomentModel,
    folds: &FoldAssignment,
    learner: &LearnerSpec,
    settings: &FitSettings,
) -> Result<FitResult> {
    let (x, terms) = model.design(table)?;
    let pseudo = build_pseudo_outcomes(table, folds, learner, settings.min_gold_per_fit)?;
    let flags = pseudo.first_stage.fold_fits.iter().map(|f| f.fallback).collect();
    solve_and_infer(Estimator::Dsl, model, &pseudo.y_tilde, &x, terms, None, settings, diagnostics(table, flags))
}

/// DSL with a user-supplied design-based moment.
pub fn fit_custom_design_based(
    table: &ObservationTable,
    moment: Arc<dyn DesignMoment>,
    folds: &FoldAssignment,
    learner: &LearnerSpec,
    settings: &FitSettings,
) -> Result<FitResult> {
    fit_dsl(table, &MomentModel::Custom(moment), folds, learner, settings)
}

/// Fits the chosen estimator; `folds` and `learner` are ignored by SO and GSO.
pub fn fit(
    estimator: Estimator,
    table: &ObservationTable,
    model: &MomentModel,
    folds: &FoldAssignment,
    learner: &LearnerSpec,
    settings: &FitSettings,
) -> Result<FitResult> {
    match estimator {
        Estimator::So => fit_so(table, model, settings),
        Estimator::Gso => fit_gso(table, model, settings),
        Estimator::Ssl => fit_ssl(table, model, folds, learner, settings),
        Estimator::Dsl => fit_dsl(table, model, folds, learner, settings),
    }
}

/// Built-in moment as a [`DesignMoment`] over `d` covariates.
pub fn builtin_moment(kind: ModelKind, d: usize) -> Arc<dyn DesignMoment> {
    match kind {
        ModelKind::Logit => Arc::new(LogitMoment(d)),
        ModelKind::Linear | ModelKind::Mean => Arc::new(LinearMoment(d)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_folds;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intercept(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn intercept_only_logit_is_logit_of_mean() {
        let y = [0.2, 0.8, 1.7, -0.3];
        let s = solve_logit_moment(&y, &intercept(4), &[1.0; 4], &SolverSettings::default()).unwrap();
        assert!((s.beta[0] - (0.6f64 / 0.4).ln()).abs() < 1e-10);
        assert!((s.beta[0] - 0.405465).abs() < 1e-6);
        assert!(s.moment_norm <= 1e-10);
    }

    #[test]
    fn constant_half_outcomes_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(30, 3, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() - 0.5 });
        let s = solve_logit_moment(&[0.5; 30], &x, &[1.0; 30], &SolverSettings::default()).unwrap();
        assert!(s.beta.iter().all(|b| b.abs() < 1e-12));
    }

    #[test]
    fn singular_design_rejected() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let err = solve_logit_moment(&[0.0, 1.0, 1.0], &x, &[1.0; 3], &SolverSettings::default()).unwrap_err();
        assert!(err.to_string().contains("singular design"));
        assert!(solve_linear_moment(&[0.0, 1.0, 1.0], &x, &[1.0; 3]).is_err());
    }

    #[test]
    fn unsolvable_logit_reports_norm() {
        // Intercept-only moment with mean outcome above one has no root.
        let err = solve_logit_moment(&[1.5, 1.5], &intercept(2), &[1.0; 2], &SolverSettings::default())
            .unwrap_err();
        assert!(matches!(err, DslError::NonConvergence { .. }));
    }

    #[test]
    fn linear_examples() {
        let s = solve_linear_moment(&[1.0, 2.0, 3.0], &intercept(3), &[1.0; 3]).unwrap();
        assert!((s.beta[0] - 2.0).abs() < 1e-14);
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.5, 1.0, -1.0]);
        let y: Vec<f64> = (0..4).map(|i| 2.0 * x[(i, 1)]).collect();
        let s = solve_linear_moment(&y, &x, &[1.0; 4]).unwrap();
        assert!(s.beta[0].abs() < 1e-12 && (s.beta[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn custom_constant_moment_does_not_converge() {
        let m = FnMoment::new(1, |_, _, _, out: &mut [f64]| out[0] = 1.0);
        let err = solve_custom_moment(&m, &[0.0, 1.0], &intercept(2), &[1.0; 2], &SolverSettings::default())
            .unwrap_err();
        assert!(matches!(err, DslError::NonConvergence { .. }));
    }

    #[test]
    fn custom_logit_matches_builtin() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 80;
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 2.0 - 1.0 });
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 1.6 - 0.3).collect();
        let settings = SolverSettings::default();
        let a = solve_logit_moment(&y, &x, &vec![1.0; n], &settings).unwrap();
        let m = builtin_moment(ModelKind::Logit, 2);
        let b = solve_custom_moment(m.as_ref(), &y, &x, &vec![1.0; n], &settings).unwrap();
        for (p, q) in a.beta.iter().zip(&b.beta) {
            assert!((p - q).abs() < 1e-8);
        }
    }

    fn small_table(seed: u64, n: usize, gold_prob: f64) -> ObservationTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 2.0 - 1.0 });
        let y: Vec<f64> = (0..n)
            .map(|i| (rng.random::<f64>() < expit(0.3 + x[(i, 1)])) as u8 as f64)
            .collect();
        let q = DMatrix::from_fn(n, 2, |i, _| if rng.random::<f64>() < 0.8 { y[i] } else { 1.0 - y[i] });
        let r: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() < gold_prob) as u8 as f64).collect();
        ObservationTable::new(x, q, None, y, r, vec![gold_prob; n]).unwrap()
    }

    #[test]
    fn surrogate_average_feeds_so() {
        let x = intercept(2);
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 1.0]);
        let t = ObservationTable::new(x, q, None, vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(t.surrogate_mean(), vec![0.5, 1.0]);
        let fit = fit_so(&t, &ModelKind::Mean.into(), &FitSettings::default()).unwrap();
        assert!((fit.beta_hat[0] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn gso_constant_weights_cancel() {
        let t = small_table(3, 300, 0.5);
        let settings = FitSettings::default();
        let gso = fit_gso(&t, &ModelKind::Logit.into(), &settings).unwrap();
        let gold = t.gold_rows();
        let xg = DMatrix::from_fn(gold.len(), 2, |i, j| t.x()[(gold[i], j)]);
        let yg: Vec<f64> = gold.iter().map(|&i| t.y_raw()[i]).collect();
        let plain = solve_logit_moment(&yg, &xg, &vec![1.0; gold.len()], &settings.solver).unwrap();
        for (a, b) in gso.beta_hat.iter().zip(&plain.beta) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gso_needs_gold_rows() {
        let x = DMatrix::from_fn(4, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let t = ObservationTable::new(x, intercept(4), None, vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 1.0, 0.0, 0.0], vec![0.5; 4])
            .unwrap();
        assert!(matches!(
            fit_gso(&t, &ModelKind::Logit.into(), &FitSettings::default()),
            Err(DslError::InsufficientGold { needed: 3, found: 2 })
        ));
    }

    #[test]
    fn ssl_constant_learner_intercept_zero() {
        let t = small_table(4, 100, 0.3);
        let folds = make_folds(100, 5, 0).unwrap();
        let fit = fit_ssl(&t, &ModelKind::Mean.into(), &folds, &LearnerSpec::Constant { value: 0.5 }, &FitSettings::default())
            .unwrap();
        assert!((fit.beta_hat[0] - 0.5).abs() < 1e-14);
        // logit intercept-only analogue
        let x = intercept(100);
        let s = solve_logit_moment(&[0.5; 100], &x, &[1.0; 100], &SolverSettings::default()).unwrap();
        assert_eq!(s.beta[0], 0.0);
    }

    #[test]
    fn dsl_mean_is_pseudo_outcome_mean() {
        let y = [0.2, 0.8, 1.7, -0.3];
        let s = solve_linear_moment(&y, &intercept(4), &[1.0; 4]).unwrap();
        assert!((s.beta[0] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn custom_mean_matches_dsl_mean() {
        let t = small_table(5, 120, 0.4);
        let folds = make_folds(120, 5, 2).unwrap();
        let settings = FitSettings::default();
        let learner = LearnerSpec::Knn { neighbors: 5 };
        let builtin = fit_dsl(&t, &ModelKind::Linear.into(), &folds, &learner, &settings).unwrap();
        let custom = fit_custom_design_based(&t, builtin_moment(ModelKind::Linear, 2), &folds, &learner, &settings)
            .unwrap();
        for j in 0..2 {
            assert!((builtin.beta_hat[j] - custom.beta_hat[j]).abs() < 1e-8);
            assert!((builtin.std_errors[j] - custom.std_errors[j]).abs() < 1e-6);
        }
        assert_eq!(custom.model, "custom");
    }

    #[test]
    fn logit_jacobian_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let x = DMatrix::from_fn(25, 3, |_, j| if j == 0 { 1.0 } else { rng.random::<f64>() * 4.0 - 2.0 });
            let beta = DVector::from_fn(3, |_, _| rng.random::<f64>() * 6.0 - 3.0);
            let y: Vec<f64> = (0..25).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let (_, jac) = logit_moment_and_jacobian(&y, &x, &[1.0; 25], &beta);
            let eig = jac.symmetric_eigenvalues();
            assert!(eig.min() > 0.0);
        }
    }
}
