//! Sandwich covariance estimates and Wald intervals.
//!
//! All covariance matrices returned here are for the estimate itself, i.e.
//! `bread^-1 meat bread^-T / n`, with plain `1/n` normalization and no
//! degrees-of-freedom correction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{DslError, Result};
use crate::estimators::{DesignMoment, Estimator};
use crate::expit;

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

/// Relative cutoff on singular values below which a matrix is treated as
/// singular.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub moment_norm: f64,
    pub n: usize,
    pub n_gold: usize,
    /// One flag per cross-fitting fold; empty for estimators without a
    /// first stage.
    pub fold_fallbacks: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub estimator: Estimator,
    pub model: String,
    pub terms: Vec<String>,
    pub beta_hat: Vec<f64>,
    pub vcov: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub confidence_level: f64,
    pub diagnostics: Diagnostics,
}

/// Two-sided normal critical value, e.g. 1.959964 for 0.95.
pub fn normal_critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(DslError::InvalidSpec(format!(
            "confidence level {level} not in (0, 1)"
        )));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 + level / 2.0))
}

impl FitResult {
    pub fn new(
        estimator: Estimator,
        model: impl Into<String>,
        terms: Vec<String>,
        beta_hat: Vec<f64>,
        vcov: &DMatrix<f64>,
        confidence_level: f64,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        let z = normal_critical_value(confidence_level)?;
        let d = beta_hat.len();
        let std_errors: Vec<f64> = (0..d).map(|j| vcov[(j, j)].max(0.0).sqrt()).collect();
        let ci_lower = (0..d).map(|j| beta_hat[j] - z * std_errors[j]).collect();
        let ci_upper = (0..d).map(|j| beta_hat[j] + z * std_errors[j]).collect();
        Ok(Self {
            estimator,
            model: model.into(),
            terms,
            vcov: (0..d).map(|i| (0..d).map(|j| vcov[(i, j)]).collect()).collect(),
            beta_hat,
            std_errors,
            ci_lower,
            ci_upper,
            confidence_level,
            diagnostics,
        })
    }

    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        let d = self.beta_hat.len();
        DMatrix::from_fn(d, d, |i, j| self.vcov[i][j])
    }

    /// Whether `truth[j]` lies inside the interval for every `j`.
    pub fn covers(&self, j: usize, truth: f64) -> bool {
        self.ci_lower[j] <= truth && truth <= self.ci_upper[j]
    }
}

/// Inverts `bread` after a relative rank check.
pub(crate) fn checked_inverse(bread: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sv = bread.clone().singular_values();
    let max = sv.max();
    if max.is_nan() || max <= 0.0 || sv.min() <= RANK_TOL * max || !sv.iter().all(|s| s.is_finite()) {
        return Err(DslError::SingularDesign(format!("{what} is singular")));
    }
    bread
        .clone()
        .try_inverse()
        .ok_or_else(|| DslError::SingularDesign(format!("{what} is singular")))
}

/// `bread^-1 meat bread^-T / n`, symmetrized.
pub fn sandwich(bread: &DMatrix<f64>, meat: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let inv = checked_inverse(bread, "bread matrix")?;
    let v = &inv * meat * inv.transpose() / n as f64;
    Ok((&v + v.transpose()) * 0.5)
}

fn check_shapes(y: &[f64], x: &DMatrix<f64>, beta: &[f64], weights: Option<&[f64]>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(DslError::LengthMismatch {
            column: "x".into(),
            expected: y.len(),
            found: x.nrows(),
        });
    }
    if beta.len() != x.ncols() {
        return Err(DslError::LengthMismatch {
            column: "beta".into(),
            expected: x.ncols(),
            found: beta.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != y.len() {
            return Err(DslError::LengthMismatch {
                column: "weights".into(),
                expected: y.len(),
                found: w.len(),
            });
        }
    }
    if y.is_empty() {
        return Err(DslError::InsufficientGold { needed: 1, found: 0 });
    }
    Ok(())
}

/// Accumulates `bread = (1/n) sum_i b_i x_i x_i'` and
/// `meat = (1/n) sum_i s_i x_i x_i'`.
fn outer_sums(
    x: &DMatrix<f64>,
    mut bread_w: impl FnMut(usize) -> f64,
    mut meat_w: impl FnMut(usize) -> f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, d) = (x.nrows(), x.ncols());
    let mut bread = DMatrix::zeros(d, d);
    let mut meat = DMatrix::zeros(d, d);
    for i in 0..n {
        let (b, s) = (bread_w(i), meat_w(i));
        for a in 0..d {
            let xa = x[(i, a)];
            for c in 0..=a {
                let xx = xa * x[(i, c)];
                bread[(a, c)] += b * xx;
                meat[(a, c)] += s * xx;
            }
        }
    }
    for a in 0..d {
        for c in 0..a {
            bread[(c, a)] = bread[(a, c)];
            meat[(c, a)] = meat[(a, c)];
        }
    }
    (bread / n as f64, meat / n as f64)
}

/// Covariance of a logistic moment estimate. With unit weights,
/// `bread = (1/n) sum p(1-p) x x'` and `meat = (1/n) sum (y - p)^2 x x'`;
/// a row weight scales that row's estimating function, so it enters the
/// bread once and the meat squared.
pub fn sandwich_logit(
    y_effective: &[f64],
    x: &DMatrix<f64>,
    beta_hat: &[f64],
    weights: Option<&[f64]>,
) -> Result<DMatrix<f64>> {
    check_shapes(y_effective, x, beta_hat, weights)?;
    let beta = DVector::from_column_slice(beta_hat);
    let p: Vec<f64> = (x * &beta).iter().map(|&e| expit(e)).collect();
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let (bread, meat) = outer_sums(
        x,
        |i| w(i) * p[i] * (1.0 - p[i]),
        |i| (w(i) * (y_effective[i] - p[i])).powi(2),
    );
    sandwich(&bread, &meat, x.nrows())
}

/// Covariance of a (weighted) least-squares moment estimate.
pub fn sandwich_linear(
    y_effective: &[f64],
    x: &DMatrix<f64>,
    beta_hat: &[f64],
    weights: Option<&[f64]>,
) -> Result<DMatrix<f64>> {
    check_shapes(y_effective, x, beta_hat, weights)?;
    let beta = DVector::from_column_slice(beta_hat);
    let fitted = x * &beta;
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let (bread, meat) = outer_sums(x, w, |i| (w(i) * (y_effective[i] - fitted[i])).powi(2));
    sandwich(&bread, &meat, x.nrows())
}

pub(crate) fn row_vec(x: &DMatrix<f64>, i: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend((0..x.ncols()).map(|j| x[(i, j)]));
}

/// Mean of `w_i m(y_i, x_i; beta)` over rows.
pub(crate) fn mean_moment(
    moment: &dyn DesignMoment,
    y: &[f64],
    x: &DMatrix<f64>,
    weights: Option<&[f64]>,
    beta: &[f64],
) -> DVector<f64> {
    let dim = moment.dim();
    let mut total = DVector::zeros(dim);
    let mut row = Vec::with_capacity(x.ncols());
    let mut out = vec![0.0; dim];
    for i in 0..y.len() {
        row_vec(x, i, &mut row);
        moment.eval(y[i], &row, beta, &mut out);
        let w = weights.map_or(1.0, |w| w[i]);
        for (t, o) in total.iter_mut().zip(&out) {
            *t += w * o;
        }
    }
    total / y.len() as f64
}

/// Central-difference Jacobian of the mean moment, step `1e-6 (1 + |beta_j|)`.
pub(crate) fn numeric_jacobian(
    moment: &dyn DesignMoment,
    y: &[f64],
    x: &DMatrix<f64>,
    weights: Option<&[f64]>,
    beta: &[f64],
) -> DMatrix<f64> {
    let d = beta.len();
    let mut jac = DMatrix::zeros(moment.dim(), d);
    let mut probe = beta.to_vec();
    for j in 0..d {
        let h = 1e-6 * (1.0 + beta[j].abs());
        probe[j] = beta[j] + h;
        let up = mean_moment(moment, y, x, weights, &probe);
        probe[j] = beta[j] - h;
        let down = mean_moment(moment, y, x, weights, &probe);
        probe[j] = beta[j];
        jac.set_column(j, &((up - down) / (2.0 * h)));
    }
    jac
}

/// Generic M-estimation sandwich with a finite-difference bread.
pub fn sandwich_custom(
    moment: &dyn DesignMoment,
    y_effective: &[f64],
    x: &DMatrix<f64>,
    beta_hat: &[f64],
    weights: Option<&[f64]>,
) -> Result<DMatrix<f64>> {
    check_shapes(y_effective, x, beta_hat, weights)?;
    if moment.dim() != beta_hat.len() {
        return Err(DslError::InvalidSpec(format!(
            "moment dimension {} differs from parameter dimension {}",
            moment.dim(),
            beta_hat.len()
        )));
    }
    let n = y_effective.len();
    let jac = numeric_jacobian(moment, y_effective, x, weights, beta_hat);
    let inv = checked_inverse(&jac, "moment Jacobian")?;
    let dim = moment.dim();
    let mut meat = DMatrix::zeros(dim, dim);
    let mut row = Vec::with_capacity(x.ncols());
    let mut out = vec![0.0; dim];
    for i in 0..n {
        row_vec(x, i, &mut row);
        moment.eval(y_effective[i], &row, beta_hat, &mut out);
        let w = weights.map_or(1.0, |w| w[i]);
        let m = DVector::from_iterator(dim, out.iter().map(|o| w * o));
        meat += &m * m.transpose();
    }
    meat /= n as f64;
    let v = &inv * meat * inv.transpose() / n as f64;
    Ok((&v + v.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{FnMoment, LinearMoment, LogitMoment};

    #[test]
    fn critical_value_95() {
        assert!((normal_critical_value(0.95).unwrap() - 1.959964).abs() < 1e-6);
        assert!(normal_critical_value(1.0).is_err());
    }

    #[test]
    fn two_row_logit_fixture() {
        let x = DMatrix::from_element(2, 1, 1.0);
        let v = sandwich_logit(&[0.0, 1.0], &x, &[0.0], None).unwrap();
        assert!((v[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((v[(0, 0)].sqrt() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_residuals_zero_vcov() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, -2.0]);
        let beta = [0.3, -0.4];
        let y: Vec<f64> = (0..3).map(|i| expit(beta[0] + beta[1] * x[(i, 1)])).collect();
        assert!(sandwich_logit(&y, &x, &beta, None).unwrap().amax() < 1e-15);
        let y: Vec<f64> = (0..3).map(|i| beta[0] + beta[1] * x[(i, 1)]).collect();
        assert!(sandwich_linear(&y, &x, &beta, None).unwrap().amax() < 1e-15);
    }

    #[test]
    fn two_row_linear_fixture() {
        let x = DMatrix::from_element(2, 1, 1.0);
        let v = sandwich_linear(&[1.0, 3.0], &x, &[2.0], None).unwrap();
        assert!((v[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn custom_constant_moment_singular() {
        let m = FnMoment::new(1, |_, _, _, out| out[0] = 1.0);
        let x = DMatrix::from_element(3, 1, 1.0);
        assert!(matches!(
            sandwich_custom(&m, &[0.0, 1.0, 2.0], &x, &[0.0], None),
            Err(DslError::SingularDesign(_))
        ));
    }

    #[test]
    fn custom_matches_closed_forms() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.2, 1.0, -1.0, 1.0, 0.7, 1.0, 1.5, 1.0, -0.3]);
        let y = [0.0, 1.0, 1.7, -0.2, 1.0];
        let beta = [0.1, 0.4];
        let a = sandwich_logit(&y, &x, &beta, None).unwrap();
        let b = sandwich_custom(&LogitMoment(2), &y, &x, &beta, None).unwrap();
        assert!((a - b).amax() < 1e-6);
        let a = sandwich_linear(&y, &x, &beta, Some(&[1.0, 2.0, 1.0, 0.5, 1.0])).unwrap();
        let b = sandwich_custom(&LinearMoment(2), &y, &x, &beta, Some(&[1.0, 2.0, 1.0, 0.5, 1.0])).unwrap();
        assert!((a - b).amax() < 1e-6);
    }
}
