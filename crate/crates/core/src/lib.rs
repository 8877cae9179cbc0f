//! Design-based semi-supervised (DSL) regression on imperfect surrogate labels.
//!
//! A corpus has cheap surrogate labels for every document and expert gold
//! labels for a subset sampled with known probability. The DSL estimator
//! combines both through cross-fitted, bias-corrected pseudo-outcomes and
//! stays consistent with valid confidence intervals no matter how poor the
//! surrogates or the first-stage learner are. Surrogate-only (SO),
//! gold-only (GSO) and plain semi-supervised (SSL) baselines are provided for
//! comparison, along with a Monte Carlo harness to measure bias, coverage
//! and RMSE.

pub mod cli;
pub mod crossfit;
pub mod data;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod io;
pub mod learners;
pub mod simulation;

pub use crossfit::{build_pseudo_outcomes, cross_fit, pseudo_outcome, PseudoOutcomeVector};
pub use data::{build_table, make_folds, ColumnSchema, Columns, FoldAssignment, ObservationTable};
pub use error::{DslError, Result};
pub use estimators::{
    fit, fit_custom_design_based, fit_dsl, fit_gso, fit_so, fit_ssl, solve_linear_moment,
    solve_logit_moment, DesignMoment, Estimator, FitSettings, ModelKind, MomentModel,
    SolverSettings,
};
pub use inference::{sandwich_custom, sandwich_linear, sandwich_logit, FitResult};
pub use learners::{fit_learner, FittedLearner, LearnerSpec};
pub use simulation::{DgpSpec, SimulationReport};

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
