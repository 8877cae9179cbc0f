//! First-stage learners for `E(Y | Q, W, X)`.
//!
//! Every learner clamps its predictions to `[-bound, bound]` (default
//! [`DEFAULT_BOUND`]) so the first stage never diverges. The downstream
//! estimators stay valid for any such learner; the choice here only affects
//! efficiency.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DslError, Result};
use crate::expit;

pub const DEFAULT_BOUND: f64 = 10.0;

/// Smallest number of rows allowed in a stump leaf.
const MIN_LEAF: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    /// Mean of the `neighbors` nearest training rows (standardized Euclidean).
    Knn { neighbors: usize },
    /// L2-penalized logistic regression on standardized features.
    RidgeLogit { penalty: f64 },
    /// Gradient-boosted depth-1 regression trees on squared error.
    StumpEnsemble { trees: usize, learning_rate: f64 },
    /// Predicts `value` everywhere.
    Constant { value: f64 },
    /// Passes feature column `column` through; with `(Q, W, X)` features the
    /// first columns are the surrogates.
    IdentitySurrogate { column: usize },
}

impl Default for LearnerSpec {
    fn default() -> Self {
        LearnerSpec::StumpEnsemble {
            trees: 100,
            learning_rate: 0.1,
        }
    }
}

impl LearnerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DslError::InvalidSpec(msg));
        match *self {
            LearnerSpec::Knn { neighbors } if neighbors < 1 => {
                bad("knn needs at least one neighbor".into())
            }
            LearnerSpec::RidgeLogit { penalty } if !(penalty >= 0.0 && penalty.is_finite()) => {
                bad(format!("ridge penalty {penalty} must be finite and >= 0"))
            }
            LearnerSpec::StumpEnsemble {
                trees,
                learning_rate,
            } => {
                if trees < 1 {
                    bad("stump ensemble needs at least one tree".into())
                } else if !(learning_rate > 0.0 && learning_rate <= 1.0) {
                    bad(format!("learning rate {learning_rate} not in (0, 1]"))
                } else {
                    Ok(())
                }
            }
            LearnerSpec::Constant { value } if !value.is_finite() => {
                bad("constant learner value must be finite".into())
            }
            _ => Ok(()),
        }
    }

    pub fn min_rows(&self) -> usize {
        match *self {
            LearnerSpec::Knn { neighbors } => neighbors.max(1),
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LearnerSpec::Knn { .. } => "knn",
            LearnerSpec::RidgeLogit { .. } => "ridge_logit",
            LearnerSpec::StumpEnsemble { .. } => "stump_ensemble",
            LearnerSpec::Constant { .. } => "constant",
            LearnerSpec::IdentitySurrogate { .. } => "identity_surrogate",
        }
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnerSpec::Knn { neighbors } => write!(f, "knn:{neighbors}"),
            LearnerSpec::RidgeLogit { penalty } => write!(f, "ridge_logit:{penalty}"),
            LearnerSpec::StumpEnsemble {
                trees,
                learning_rate,
            } => write!(f, "stump_ensemble:{trees}:{learning_rate}"),
            LearnerSpec::Constant { value } => write!(f, "constant:{value}"),
            LearnerSpec::IdentitySurrogate { column } => write!(f, "identity_surrogate:{column}"),
        }
    }
}

/// Parses `kind[:param[:param]]`, e.g. `knn:5`, `stump_ensemble:200:0.05`.
impl FromStr for LearnerSpec {
    type Err = DslError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let kind = parts.next().unwrap_or_default();
        let params: Vec<&str> = parts.collect();
        let bad = || DslError::InvalidSpec(format!("cannot parse learner `{s}`"));
        let num = |i: usize| -> Result<Option<f64>> {
            params
                .get(i)
                .map(|p| p.parse::<f64>().map_err(|_| bad()))
                .transpose()
        };
        let int = |i: usize| -> Result<Option<usize>> {
            params
                .get(i)
                .map(|p| p.parse::<usize>().map_err(|_| bad()))
                .transpose()
        };
        let (spec, allowed) = match kind {
            "knn" => (
                LearnerSpec::Knn {
                    neighbors: int(0)?.unwrap_or(10),
                },
                1,
            ),
            "ridge_logit" => (
                LearnerSpec::RidgeLogit {
                    penalty: num(0)?.unwrap_or(1.0),
                },
                1,
            ),
            "stump_ensemble" => (
                LearnerSpec::StumpEnsemble {
                    trees: int(0)?.unwrap_or(100),
                    learning_rate: num(1)?.unwrap_or(0.1),
                },
                2,
            ),
            "constant" => (
                LearnerSpec::Constant {
                    value: num(0)?.unwrap_or(0.5),
                },
                1,
            ),
            "identity_surrogate" => (
                LearnerSpec::IdentitySurrogate {
                    column: int(0)?.unwrap_or(0),
                },
                1,
            ),
            _ => return Err(bad()),
        };
        if params.len() > allowed {
            return Err(bad());
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-column centering and scaling. Zero-variance columns map to zero.
#[derive(Debug, Clone, PartialEq)]
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(features: &DMatrix<f64>) -> Self {
        let m = features.nrows() as f64;
        let (mut mean, mut scale) = (Vec::new(), Vec::new());
        for col in features.column_iter() {
            let mu = col.iter().sum::<f64>() / m;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m;
            let sd = var.sqrt();
            mean.push(mu);
            scale.push(if sd > 1e-12 { 1.0 / sd } else { 0.0 });
        }
        Self { mean, scale }
    }

    fn row(&self, features: &DMatrix<f64>, i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend((0..features.ncols()).map(|j| (features[(i, j)] - self.mean[j]) * self.scale[j]));
    }

    fn transform(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            (features[(i, j)] - self.mean[j]) * self.scale[j]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stump {
    feature: usize,
    threshold: f64,
    left: f64,
    right: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    Knn {
        standardizer: Standardizer,
        train: DMatrix<f64>,
        targets: Vec<f64>,
    },
    RidgeLogit {
        standardizer: Standardizer,
        /// Intercept first, then one coefficient per feature.
        coef: Vec<f64>,
    },
    Stumps {
        base: f64,
        stumps: Vec<Stump>,
        range: (f64, f64),
    },
    Constant(f64),
    Identity(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedLearner {
    spec: LearnerSpec,
    state: State,
    width: usize,
    training_rows: usize,
    bound: f64,
}

impl FittedLearner {
    /// A constant predictor that did not see any data.
    pub fn constant(value: f64, width: usize) -> Self {
        Self {
            spec: LearnerSpec::Constant { value },
            state: State::Constant(value),
            width,
            training_rows: 0,
            bound: DEFAULT_BOUND,
        }
    }

    pub fn spec(&self) -> &LearnerSpec {
        &self.spec
    }

    pub fn training_rows(&self) -> usize {
        self.training_rows
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        if features.ncols() != self.width {
            return Err(DslError::WidthMismatch {
                expected: self.width,
                found: features.ncols(),
            });
        }
        let b = self.bound;
        let p = features.nrows();
        let out = match &self.state {
            State::Constant(c) => vec![c.clamp(-b, b); p],
            State::Identity(col) => (0..p).map(|i| features[(i, *col)].clamp(-b, b)).collect(),
            State::Knn {
                standardizer,
                train,
                targets,
            } => {
                let k = match self.spec {
                    LearnerSpec::Knn { neighbors } => neighbors,
                    _ => unreachable!(),
                };
                let mut row = Vec::with_capacity(self.width);
                let mut dists: Vec<(f64, usize)> = Vec::with_capacity(train.nrows());
                (0..p)
                    .map(|i| {
                        standardizer.row(features, i, &mut row);
                        dists.clear();
                        dists.extend((0..train.nrows()).map(|t| {
                            let d2: f64 = row
                                .iter()
                                .enumerate()
                                .map(|(j, v)| (v - train[(t, j)]).powi(2))
                                .sum();
                            (d2, t)
                        }));
                        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
                            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
                        };
                        if k < dists.len() {
                            dists.select_nth_unstable_by(k - 1, cmp);
                        }
                        let avg = dists[..k].iter().map(|&(_, t)| targets[t]).sum::<f64>()
                            / k as f64;
                        avg.clamp(-b, b)
                    })
                    .collect()
            }
            State::RidgeLogit { standardizer, coef } => {
                let mut row = Vec::with_capacity(self.width);
                (0..p)
                    .map(|i| {
                        standardizer.row(features, i, &mut row);
                        let eta = coef[0]
                            + row.iter().zip(&coef[1..]).map(|(v, c)| v * c).sum::<f64>();
                        expit(eta.clamp(-b, b))
                    })
                    .collect()
            }
            State::Stumps {
                base,
                stumps,
                range,
            } => {
                let lr = match self.spec {
                    LearnerSpec::StumpEnsemble { learning_rate, .. } => learning_rate,
                    _ => unreachable!(),
                };
                (0..p)
                    .map(|i| {
                        let mut v = *base;
                        for s in stumps {
                            v += lr * if features[(i, s.feature)] <= s.threshold {
                                s.left
                            } else {
                                s.right
                            };
                        }
                        v.clamp(range.0, range.1).clamp(-b, b)
                    })
                    .collect()
            }
        };
        Ok(out)
    }
}

pub fn predict(model: &FittedLearner, features: &DMatrix<f64>) -> Result<Vec<f64>> {
    model.predict(features)
}

pub fn fit_learner(
    spec: &LearnerSpec,
    features: &DMatrix<f64>,
    targets: &[f64],
) -> Result<FittedLearner> {
    spec.validate()?;
    let m = features.nrows();
    if targets.len() != m {
        return Err(DslError::LengthMismatch {
            column: "targets".into(),
            expected: m,
            found: targets.len(),
        });
    }
    if m < spec.min_rows() {
        return Err(DslError::InsufficientGold {
            needed: spec.min_rows(),
            found: m,
        });
    }
    if targets.iter().any(|t| !t.is_finite()) || features.iter().any(|v| !v.is_finite()) {
        return Err(DslError::InvalidSpec(
            "learner training data must be finite".into(),
        ));
    }
    let state = match *spec {
        LearnerSpec::Constant { value } => State::Constant(value),
        LearnerSpec::IdentitySurrogate { column } => {
            if column >= features.ncols() {
                return Err(DslError::InvalidSpec(format!(
                    "surrogate column {column} out of range for {} features",
                    features.ncols()
                )));
            }
            State::Identity(column)
        }
        LearnerSpec::Knn { .. } => {
            let standardizer = Standardizer::fit(features);
            State::Knn {
                train: standardizer.transform(features),
                standardizer,
                targets: targets.to_vec(),
            }
        }
        LearnerSpec::RidgeLogit { penalty } => {
            if targets.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
                return Err(DslError::InvalidSpec(
                    "ridge_logit targets must lie in [0, 1]".into(),
                ));
            }
            let standardizer = Standardizer::fit(features);
            let z = standardizer.transform(features);
            State::RidgeLogit {
                coef: fit_ridge_logit(&z, targets, penalty),
                standardizer,
            }
        }
        LearnerSpec::StumpEnsemble {
            trees,
            learning_rate,
        } => fit_stumps(features, targets, trees, learning_rate),
    };
    Ok(FittedLearner {
        spec: spec.clone(),
        state,
        width: features.ncols(),
        training_rows: m,
        bound: DEFAULT_BOUND,
    })
}

fn ridge_objective(z: &DMatrix<f64>, y: &[f64], penalty: f64, coef: &DVector<f64>) -> f64 {
    let mut loss = 0.0;
    for i in 0..z.nrows() {
        let eta = coef[0] + (0..z.ncols()).map(|j| z[(i, j)] * coef[j + 1]).sum::<f64>();
        // log(1 + e^eta) computed stably
        let softplus = if eta > 0.0 {
            eta + (-eta).exp().ln_1p()
        } else {
            eta.exp().ln_1p()
        };
        loss += softplus - y[i] * eta;
    }
    loss + 0.5 * penalty * coef.norm_squared()
}

/// Newton's method with step halving on the penalized negative log-likelihood.
/// The intercept is penalized along with the slopes.
fn fit_ridge_logit(z: &DMatrix<f64>, y: &[f64], penalty: f64) -> Vec<f64> {
    let (m, d) = (z.nrows(), z.ncols() + 1);
    let design = z.clone().insert_column(0, 1.0);
    let mut coef = DVector::<f64>::zeros(d);
    let mut obj = ridge_objective(z, y, penalty, &coef);
    for _ in 0..100 {
        let eta = &design * &coef;
        let mut grad = penalty * &coef;
        let mut hess = DMatrix::<f64>::identity(d, d) * (penalty + 1e-10);
        for i in 0..m {
            let p = expit(eta[i]);
            let xi = design.row(i).transpose();
            grad += (p - y[i]) * &xi;
            hess += (p * (1.0 - p)) * &xi * xi.transpose();
        }
        if grad.amax() < 1e-10 * m as f64 {
            break;
        }
        let Some(chol) = hess.cholesky() else { break };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand = &coef - t * &step;
            let cand_obj = ridge_objective(z, y, penalty, &cand);
            if cand_obj < obj {
                coef = cand;
                obj = cand_obj;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        // Separable data without a penalty sends the logits to infinity;
        // predictions are clamped, so stop once they are far past the bound.
        if !improved || (&design * &coef).amax() > 50.0 {
            break;
        }
    }
    coef.iter().copied().collect()
}

fn fit_stumps(features: &DMatrix<f64>, targets: &[f64], trees: usize, lr: f64) -> State {
    let (m, d) = (features.nrows(), features.ncols());
    let base = targets.iter().sum::<f64>() / m as f64;
    let lo = targets.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let orders: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            let mut o: Vec<usize> = (0..m).collect();
            o.sort_by(|&a, &b| features[(a, j)].total_cmp(&features[(b, j)]).then(a.cmp(&b)));
            o
        })
        .collect();
    let mut fitted = vec![base; m];
    let mut stumps = Vec::new();
    for _ in 0..trees {
        let resid: Vec<f64> = targets.iter().zip(&fitted).map(|(t, f)| t - f).collect();
        let total: f64 = resid.iter().sum();
        let baseline = total * total / m as f64;
        let mut best: Option<(f64, Stump)> = None;
        for (j, order) in orders.iter().enumerate() {
            let mut left_sum = 0.0;
            for (pos, &i) in order.iter().enumerate().take(m - 1) {
                left_sum += resid[i];
                let n_left = pos + 1;
                let n_right = m - n_left;
                let (v, next) = (features[(i, j)], features[(order[pos + 1], j)]);
                if n_left < MIN_LEAF || n_right < MIN_LEAF || v == next {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / n_left as f64
                    + right_sum * right_sum / n_right as f64
                    - baseline;
                if best.as_ref().is_none_or(|(g, _)| gain > *g) {
                    best = Some((
                        gain,
                        Stump {
                            feature: j,
                            threshold: 0.5 * (v + next),
                            left: left_sum / n_left as f64,
                            right: right_sum / n_right as f64,
                        },
                    ));
                }
            }
        }
        let Some((gain, stump)) = best else { break };
        if gain <= 1e-14 {
            break;
        }
        for (i, f) in fitted.iter_mut().enumerate() {
            *f += lr * if features[(i, stump.feature)] <= stump.threshold {
                stump.left
            } else {
                stump.right
            };
        }
        stumps.push(stump);
    }
    State::Stumps {
        base,
        stumps,
        range: (lo, hi),
    }
}
