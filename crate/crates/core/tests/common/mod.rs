//! Oracles for the integration tests, written against plain `Vec`s so they
//! share no linear algebra with the library.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Gaussian elimination with partial pivoting; returns `a^-1`.
pub fn invert(a: &Mat) -> Mat {
    let d = a.len();
    let mut m: Mat = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..d).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..d {
        let p = (c..d).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        let pivot = m[c][c];
        assert!(pivot.abs() > 1e-300, "oracle matrix is singular");
        for v in m[c].iter_mut() {
            *v /= pivot;
        }
        for i in 0..d {
            if i != c {
                let f = m[i][c];
                let pivot_row = m[c].clone();
                for (v, pr) in m[i].iter_mut().zip(pivot_row) {
                    *v -= f * pr;
                }
            }
        }
    }
    m.into_iter().map(|r| r[d..].to_vec()).collect()
}

pub fn mat_vec(a: &Mat, v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (n, m, k) = (a.len(), b[0].len(), b.len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect())
        .collect()
}

/// `sum_i w_i x_i x_i'`
pub fn weighted_cross(x: &Mat, w: &[f64]) -> Mat {
    let d = x[0].len();
    let mut out = vec![vec![0.0; d]; d];
    for (row, wi) in x.iter().zip(w) {
        for a in 0..d {
            for b in 0..d {
                out[a][b] += wi * row[a] * row[b];
            }
        }
    }
    out
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares.
pub fn logit_mle(y: &[f64], x: &Mat) -> Vec<f64> {
    let d = x[0].len();
    let mut beta = vec![0.0; d];
    for _ in 0..200 {
        let p: Vec<f64> = x.iter().map(|r| expit(r.iter().zip(&beta).map(|(a, b)| a * b).sum())).collect();
        let w: Vec<f64> = p.iter().map(|p| p * (1.0 - p)).collect();
        let info = weighted_cross(x, &w);
        let score: Vec<f64> = (0..d)
            .map(|a| x.iter().zip(y).zip(&p).map(|((r, yi), pi)| r[a] * (yi - pi)).sum())
            .collect();
        let step = mat_vec(&invert(&info), &score);
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        if step.iter().all(|s| s.abs() < 1e-15) {
            break;
        }
    }
    beta
}

/// Ordinary least squares through the normal equations.
pub fn ols(y: &[f64], x: &Mat) -> Vec<f64> {
    let d = x[0].len();
    let xty: Vec<f64> = (0..d).map(|a| x.iter().zip(y).map(|(r, yi)| r[a] * yi).sum()).collect();
    mat_vec(&invert(&weighted_cross(x, &vec![1.0; x.len()])), &xty)
}

/// HC0 robust covariance `(X'AX)^-1 X' diag(e^2) X (X'AX)^-1`, where `a` is
/// the derivative weight of each row (1 for least squares, `p(1-p)` for the
/// logit) and `e` the residual.
pub fn hc0(x: &Mat, a: &[f64], e: &[f64]) -> Mat {
    let inv = invert(&weighted_cross(x, a));
    let e2: Vec<f64> = e.iter().map(|v| v * v).collect();
    mat_mul(&mat_mul(&inv, &weighted_cross(x, &e2)), &inv)
}

pub fn hc0_linear(y: &[f64], x: &Mat, beta: &[f64]) -> Mat {
    let e: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(r, yi)| yi - r.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    hc0(x, &vec![1.0; x.len()], &e)
}

pub fn hc0_logit(y: &[f64], x: &Mat, beta: &[f64]) -> Mat {
    let p: Vec<f64> = x.iter().map(|r| expit(r.iter().zip(beta).map(|(a, b)| a * b).sum())).collect();
    let a: Vec<f64> = p.iter().map(|p| p * (1.0 - p)).collect();
    let e: Vec<f64> = y.iter().zip(&p).map(|(y, p)| y - p).collect();
    hc0(x, &a, &e)
}

/// Intercept plus `d - 1` standard-normal-ish columns.
pub fn random_design(n: usize, d: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            std::iter::once(1.0)
                .chain((1..d).map(|_| rng.random::<f64>() * 2.0 - 1.0))
                .collect()
        })
        .collect()
}

pub fn bernoulli_outcomes(x: &Mat, beta: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    x.iter()
        .map(|r| {
            let p = expit(r.iter().zip(beta).map(|(a, b)| a * b).sum());
            (rng.random::<f64>() < p) as u8 as f64
        })
        .collect()
}

pub fn to_dmatrix(x: &Mat) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(x.len(), x[0].len(), |i, j| x[i][j])
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
