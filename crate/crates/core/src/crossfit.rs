//! Cross-fitted first stage and bias-corrected pseudo-outcomes.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::data::{FoldAssignment, ObservationTable};
use crate::error::{DslError, Result};
use crate::learners::{fit_learner, FittedLearner, LearnerSpec};

pub const DEFAULT_MIN_GOLD_PER_FIT: usize = 10;
pub const DEFAULT_FOLDS: usize = 5;

/// `g + (r / pi) (y - g)`. The outcome is ignored when `r = 0`.
pub fn pseudo_outcome(g_hat: f64, r: bool, y: f64, pi: f64) -> Result<f64> {
    if !(pi > 0.0 && pi <= 1.0) {
        return Err(DslError::Assumption1Violation {
            column: "pi".into(),
            row: 0,
            value: pi,
        });
    }
    Ok(if r { g_hat + (y - g_hat) / pi } else { g_hat })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldFit {
    pub fold: usize,
    /// Gold rows outside the fold that the learner was trained on.
    pub training_rows: Vec<usize>,
    /// True when too few gold rows were available and the learner fell back
    /// to the out-of-fold gold mean.
    pub fallback: bool,
}

impl FoldFit {
    pub fn gold_used(&self) -> usize {
        self.training_rows.len()
    }
}

/// Out-of-fold predictions `g_k(Q_i, W_i, X_i)` for every row.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitPredictions {
    pub predictions: Vec<f64>,
    pub folds: FoldAssignment,
    pub learner: LearnerSpec,
    pub fold_fits: Vec<FoldFit>,
}

impl CrossFitPredictions {
    pub fn any_fallback(&self) -> bool {
        self.fold_fits.iter().any(|f| f.fallback)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcomeVector {
    pub y_tilde: Vec<f64>,
    pub first_stage: CrossFitPredictions,
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len() as f64;
    v.sum::<f64>() / n
}

/// Trains one learner per fold on the gold rows outside it and predicts the
/// rows inside it.
pub fn cross_fit(
    table: &ObservationTable,
    folds: &FoldAssignment,
    spec: &LearnerSpec,
    min_gold_per_fit: usize,
) -> Result<CrossFitPredictions> {
    if folds.n() != table.n() {
        return Err(DslError::InvalidFolds(format!(
            "fold assignment covers {} rows, table has {}",
            folds.n(),
            table.n()
        )));
    }
    spec.validate()?;
    let features = table.learner_features();
    let gold = table.gold_rows();
    let global_mean = if gold.is_empty() {
        None
    } else {
        Some(mean(gold.iter().map(|&i| table.y_raw()[i])))
    };

    let mut predictions = vec![0.0; table.n()];
    let mut fold_fits = Vec::with_capacity(folds.k());
    for fold in 0..folds.k() {
        let inside = folds.members(fold);
        let training: Vec<usize> = gold
            .iter()
            .copied()
            .filter(|&i| folds.fold_of()[i] != fold)
            .collect();
        let targets: Vec<f64> = training.iter().map(|&i| table.y_raw()[i]).collect();
        let fallback_value = if targets.is_empty() {
            global_mean.ok_or(DslError::CannotTrain)?
        } else {
            mean(targets.iter().copied())
        };

        let fitted = if training.len() < min_gold_per_fit.max(1) {
            None
        } else {
            match fit_learner(spec, &select_rows(&features, &training), &targets) {
                Ok(f) => Some(f),
                Err(DslError::InsufficientGold { .. }) => None,
                Err(e) => return Err(e),
            }
        };
        let fallback = fitted.is_none();
        let learner =
            fitted.unwrap_or_else(|| FittedLearner::constant(fallback_value, features.ncols()));
        let preds = learner.predict(&select_rows(&features, &inside))?;
        for (&i, p) in inside.iter().zip(preds) {
            predictions[i] = p;
        }
        fold_fits.push(FoldFit {
            fold,
            training_rows: training,
            fallback,
        });
    }
    Ok(CrossFitPredictions {
        predictions,
        folds: folds.clone(),
        learner: spec.clone(),
        fold_fits,
    })
}

pub fn build_pseudo_outcomes(
    table: &ObservationTable,
    folds: &FoldAssignment,
    spec: &LearnerSpec,
    min_gold_per_fit: usize,
) -> Result<PseudoOutcomeVector> {
    let first_stage = cross_fit(table, folds, spec, min_gold_per_fit)?;
    let y_tilde = first_stage
        .predictions
        .iter()
        .enumerate()
        .map(|(i, &g)| match table.gold_outcome(i) {
            Some(y) => pseudo_outcome(g, true, y, table.pi()[i]),
            None => pseudo_outcome(g, false, 0.0, table.pi()[i]),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoOutcomeVector {
        y_tilde,
        first_stage,
    })
}
