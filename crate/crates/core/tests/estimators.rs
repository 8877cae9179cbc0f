mod common;

use std::sync::Arc;

use dsl_core::crossfit::{build_pseudo_outcomes, pseudo_outcome};
use dsl_core::estimators::{
    builtin_moment, fit_custom_design_based, fit_dsl, fit_gso, fit_so, fit_ssl, solve_linear_moment, FitSettings,
    FnMoment, LinearMoment, ModelKind, MomentModel,
};
use dsl_core::inference::sandwich_logit;
use dsl_core::simulation::{generate_corpus, DgpSpec, GoldDesign, SurrogateMechanism};
use dsl_core::{expit, make_folds, LearnerSpec, ObservationTable};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn rows(x: &DMatrix<f64>) -> Mat {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

fn corpus(n: usize, prob: f64, surrogate: SurrogateMechanism, seed: u64) -> dsl_core::simulation::SimulatedCorpus {
    let dgp = DgpSpec {
        n,
        surrogate,
        gold: GoldDesign::Uniform { prob },
        ..DgpSpec::default()
    };
    generate_corpus(&dgp, seed).unwrap()
}

fn logit() -> MomentModel {
    MomentModel::Builtin(ModelKind::Logit)
}

#[test]
fn design_based_moment_is_invariant_to_the_first_stage() {
    // Finite population of covariate cells with known P(Y=1|x) and pi(x).
    // The expected DSL moment, averaged over R and Y, must equal the oracle
    // moment for every beta no matter which prediction function is used.
    let cells = [
        ([1.0, -1.2], 0.15, 0.05),
        ([1.0, -0.3], 0.4, 0.5),
        ([1.0, 0.0], 0.5, 1.0),
        ([1.0, 0.8], 0.7, 0.3),
        ([1.0, 2.0], 0.95, 0.2),
    ];
    let g_flat = |_x: &[f64; 2]| 0.5;
    let g_wild = |x: &[f64; 2]| 3.0 * x[1] - 1.0;
    for beta in [[0.0, 0.0], [0.4, -1.1], [-2.0, 3.0]] {
        let mut oracle = [0.0; 2];
        let mut flat = [0.0; 2];
        let mut wild = [0.0; 2];
        for (x, p, pi) in &cells {
            let fitted = expit(x[0] * beta[0] + x[1] * beta[1]);
            for (y, py) in [(1.0, *p), (0.0, 1.0 - p)] {
                for a in 0..2 {
                    oracle[a] += py * x[a] * (y - fitted);
                }
                for (r, pr) in [(true, *pi), (false, 1.0 - pi)] {
                    if pr == 0.0 {
                        continue;
                    }
                    for (g, acc) in [(g_flat(x), &mut flat), (g_wild(x), &mut wild)] {
                        let yt = pseudo_outcome(g, r, y, *pi).unwrap();
                        for a in 0..2 {
                            acc[a] += py * pr * x[a] * (yt - fitted);
                        }
                    }
                }
            }
        }
        assert!(max_abs_diff(&oracle, &flat) <= 1e-12, "{oracle:?} {flat:?}");
        assert!(max_abs_diff(&oracle, &wild) <= 1e-12, "{oracle:?} {wild:?}");
    }
}

#[test]
fn pseudo_outcomes_leave_the_unit_interval() {
    let c = corpus(400, 0.3, SurrogateMechanism::Nondifferential { accuracy: 0.8 }, 4);
    let folds = make_folds(400, 5, 4).unwrap();
    let p = build_pseudo_outcomes(&c.table, &folds, &LearnerSpec::Constant { value: 0.3 }, 10).unwrap();
    assert!(p.y_tilde.iter().any(|&v| v > 1.0));
    assert!(p.y_tilde.iter().any(|&v| v < 0.0));
    assert_eq!(pseudo_outcome(0.3, true, 1.0, 0.5).unwrap(), 1.7);
}

#[test]
fn fully_gold_corpus_makes_every_estimator_match_the_oracle() {
    let c = corpus(200, 1.0, SurrogateMechanism::Nondifferential { accuracy: 1.0 }, 9);
    let oracle = logit_mle(&c.y_full, &rows(c.table.x()));
    let folds = make_folds(200, 5, 1).unwrap();
    let fs = FitSettings::default();
    let spec = LearnerSpec::IdentitySurrogate { column: 0 };
    let fits = [
        fit_gso(&c.table, &logit(), &fs).unwrap(),
        fit_dsl(&c.table, &logit(), &folds, &spec, &fs).unwrap(),
        fit_so(&c.table, &logit(), &fs).unwrap(),
        fit_ssl(&c.table, &logit(), &folds, &spec, &fs).unwrap(),
    ];
    for f in &fits {
        assert!(max_abs_diff(&f.beta_hat, &oracle) <= 1e-8, "{:?}", f.estimator);
    }
}

#[test]
fn gso_with_constant_probability_is_unweighted_logit_on_gold() {
    let c = corpus(600, 0.5, DgpSpec::default().surrogate, 2);
    let gold = c.table.gold_rows();
    let x = rows(c.table.x());
    let xg: Mat = gold.iter().map(|&i| x[i].clone()).collect();
    let yg: Vec<f64> = gold.iter().map(|&i| c.y_full[i]).collect();
    let fit = fit_gso(&c.table, &logit(), &FitSettings::default()).unwrap();
    assert!(max_abs_diff(&fit.beta_hat, &logit_mle(&yg, &xg)) <= 1e-8);
}

#[test]
fn gso_covariance_weights_bread_once_and_meat_twice() {
    let n = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = corpus(n, 0.5, SurrogateMechanism::Nondifferential { accuracy: 0.8 }, 8);
    let pi: Vec<f64> = (0..n).map(|_| 0.2 + 0.6 * rng.random::<f64>()).collect();
    let r: Vec<f64> = pi.iter().map(|&p| (rng.random::<f64>() < p) as u8 as f64).collect();
    let table = ObservationTable::new(
        base.table.x().clone(),
        base.table.q().clone(),
        None,
        base.y_full.clone(),
        r.clone(),
        pi.clone(),
    )
    .unwrap();
    let fit = fit_gso(&table, &logit(), &FitSettings::default()).unwrap();

    let gold: Vec<usize> = (0..n).filter(|&i| r[i] == 1.0).collect();
    let x = rows(base.table.x());
    let xg: Mat = gold.iter().map(|&i| x[i].clone()).collect();
    let w: Vec<f64> = gold.iter().map(|&i| 1.0 / pi[i]).collect();
    let p: Vec<f64> = xg
        .iter()
        .map(|row| expit(row.iter().zip(&fit.beta_hat).map(|(a, b)| a * b).sum()))
        .collect();
    let a: Vec<f64> = p.iter().zip(&w).map(|(p, w)| w * p * (1.0 - p)).collect();
    let e: Vec<f64> = gold.iter().zip(&p).zip(&w).map(|((&i, p), w)| w * (base.y_full[i] - p)).collect();
    let score: Vec<f64> = (0..3).map(|j| xg.iter().zip(&e).map(|(r, e)| r[j] * e).sum()).collect();
    assert!(score.iter().all(|s| s.abs() < 1e-8), "weighted score {score:?}");
    let oracle = hc0(&xg, &a, &e);
    let lib = fit.vcov_matrix();
    for i in 0..3 {
        for j in 0..3 {
            assert!((lib[(i, j)] - oracle[i][j]).abs() <= 1e-10, "{i},{j}");
        }
    }
}

#[test]
fn surrogate_only_averages_surrogate_columns() {
    let x = DMatrix::from_element(2, 1, 1.0);
    let q = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 1.0]);
    let table = ObservationTable::new(x, q, None, vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
    let fit = fit_so(&table, &MomentModel::Builtin(ModelKind::Mean), &FitSettings::default()).unwrap();
    assert!((fit.beta_hat[0] - 0.75).abs() < 1e-14);
}

#[test]
fn linear_solver_matches_normal_equations() {
    let x = random_design(20, 4, 77);
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let y: Vec<f64> = x.iter().map(|r| r[1] - 2.0 * r[3] + rng.random::<f64>()).collect();
    let s = solve_linear_moment(&y, &to_dmatrix(&x), &[1.0; 20]).unwrap();
    assert!(max_abs_diff(&s.beta, &ols(&y, &x)) <= 1e-10);
}

fn scaled(table: &ObservationTable, column: usize, c: f64) -> ObservationTable {
    let mut x = table.x().clone();
    x.column_mut(column).scale_mut(c);
    ObservationTable::new(x, table.q().clone(), None, table.y_raw().to_vec(), table.r(), table.pi().to_vec()).unwrap()
}

#[test]
fn rescaling_a_covariate_rescales_its_coefficient() {
    let c = corpus(800, 0.3, DgpSpec::default().surrogate, 5);
    let folds = make_folds(800, 5, 5).unwrap();
    let fs = FitSettings::default();
    // Constant learner: the first stage must not see the rescaled column.
    let spec = LearnerSpec::Constant { value: 0.4 };
    let factor = 4.0;
    let big = scaled(&c.table, 2, factor);
    for kind in [ModelKind::Logit, ModelKind::Linear] {
        let model = MomentModel::Builtin(kind);
        let a = fit_dsl(&c.table, &model, &folds, &spec, &fs).unwrap();
        let b = fit_dsl(&big, &model, &folds, &spec, &fs).unwrap();
        for j in 0..3 {
            let k = if j == 2 { factor } else { 1.0 };
            assert!((a.beta_hat[j] - k * b.beta_hat[j]).abs() <= 1e-8, "{kind} beta {j}");
            assert!((a.std_errors[j] - k * b.std_errors[j]).abs() <= 1e-8, "{kind} se {j}");
        }
    }
}

#[test]
fn custom_moments_reproduce_builtin_paths() {
    let c = corpus(500, 0.25, DgpSpec::default().surrogate, 11);
    let folds = make_folds(500, 5, 11).unwrap();
    let fs = FitSettings::default();
    let spec = LearnerSpec::default();

    let linear = fit_dsl(&c.table, &MomentModel::Builtin(ModelKind::Linear), &folds, &spec, &fs).unwrap();
    let custom = fit_custom_design_based(&c.table, Arc::new(LinearMoment(3)), &folds, &spec, &fs).unwrap();
    assert!(max_abs_diff(&linear.beta_hat, &custom.beta_hat) <= 1e-8);
    assert!(max_abs_diff(&linear.std_errors, &custom.std_errors) <= 1e-6);

    let logit_fit = fit_dsl(&c.table, &logit(), &folds, &spec, &fs).unwrap();
    let custom = fit_custom_design_based(&c.table, builtin_moment(ModelKind::Logit, 3), &folds, &spec, &fs).unwrap();
    assert!(max_abs_diff(&logit_fit.beta_hat, &custom.beta_hat) <= 1e-8);
    assert!(max_abs_diff(&logit_fit.std_errors, &custom.std_errors) <= 1e-6);

    // A mean moment written as a closure, on an intercept-only corpus.
    let dgp = DgpSpec {
        n: 500,
        beta_star: vec![-0.8],
        surrogate: SurrogateMechanism::Nondifferential { accuracy: 0.75 },
        gold: GoldDesign::Uniform { prob: 0.25 },
        surrogates: 1,
    };
    let c = generate_corpus(&dgp, 12).unwrap();
    let mean_moment = FnMoment::new(1, |y: f64, _x: &[f64], b: &[f64], out: &mut [f64]| out[0] = y - b[0]);
    let mean = fit_dsl(&c.table, &MomentModel::Builtin(ModelKind::Mean), &folds, &spec, &fs).unwrap();
    let custom = fit_custom_design_based(&c.table, Arc::new(mean_moment), &folds, &spec, &fs).unwrap();
    assert!((mean.beta_hat[0] - custom.beta_hat[0]).abs() <= 1e-10);
    assert!((mean.std_errors[0] - custom.std_errors[0]).abs() <= 1e-6);
}

#[test]
fn zero_residual_outcomes_give_zero_covariance() {
    let x = random_design(30, 2, 3);
    let beta = [0.2, -0.7];
    let y: Vec<f64> = x.iter().map(|r| expit(r[0] * beta[0] + r[1] * beta[1])).collect();
    let v = sandwich_logit(&y, &to_dmatrix(&x), &beta, None).unwrap();
    assert!(v.amax() < 1e-15);
}
