//! Observation data model and fold assignment.
//!
//! An [`ObservationTable`] holds the whole corpus: covariates `x` used in the
//! downstream regression, surrogate labels `q`, optional auxiliary
//! predictors `w`, the gold-standard outcome `y`, the gold indicator `r` and
//! the known labeling probability `pi`. Outcomes of rows without a gold label
//! are stored as `NaN` and never read.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DslError, Result};

/// Name given to the all-ones covariate when an intercept is added.
pub const INTERCEPT: &str = "(Intercept)";

/// Named numeric columns, as produced by a parser. Missing cells are `NaN`.
pub type Columns = BTreeMap<String, Vec<f64>>;

/// Assigns columns to their roles in the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub outcome: String,
    pub gold: String,
    pub probability: String,
    pub surrogates: Vec<String>,
    #[serde(default)]
    pub auxiliary: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Prepend an all-ones column to the covariates.
    #[serde(default = "default_true")]
    pub intercept: bool,
}

fn default_true() -> bool {
    true
}

impl ColumnSchema {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        let names = [&self.outcome, &self.gold, &self.probability]
            .into_iter()
            .chain(&self.surrogates)
            .chain(&self.auxiliary)
            .chain(&self.covariates);
        for name in names {
            if !seen.insert(name.as_str()) {
                return Err(DslError::InvalidSpec(format!(
                    "column `{name}` is assigned more than one role"
                )));
            }
        }
        if self.surrogates.is_empty() {
            return Err(DslError::InvalidSpec(
                "at least one surrogate column is required".into(),
            ));
        }
        if self.covariates.is_empty() && !self.intercept {
            return Err(DslError::InvalidSpec(
                "no covariates and no intercept".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    x: DMatrix<f64>,
    q: DMatrix<f64>,
    w: Option<DMatrix<f64>>,
    y: Vec<f64>,
    r: Vec<bool>,
    pi: Vec<f64>,
    x_names: Vec<String>,
    n_gold: usize,
}

fn check_finite(m: &DMatrix<f64>, role: &str, names: Option<&[String]>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                let column = names
                    .and_then(|n| n.get(j).cloned())
                    .unwrap_or_else(|| format!("{role}[{j}]"));
                return Err(DslError::NonFinite { column, row: i });
            }
        }
    }
    Ok(())
}

impl ObservationTable {
    /// Builds a validated table from dense parts. `r` must hold only 0 and 1;
    /// `y` entries of rows with `r = 0` are replaced by `NaN`.
    pub fn new(
        x: DMatrix<f64>,
        q: DMatrix<f64>,
        w: Option<DMatrix<f64>>,
        y: Vec<f64>,
        r: Vec<f64>,
        pi: Vec<f64>,
    ) -> Result<Self> {
        let x_names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(x, q, w, y, r, pi, x_names)
    }

    pub fn with_names(
        x: DMatrix<f64>,
        q: DMatrix<f64>,
        w: Option<DMatrix<f64>>,
        mut y: Vec<f64>,
        r: Vec<f64>,
        pi: Vec<f64>,
        x_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        let mismatch = |column: &str, found: usize| DslError::LengthMismatch {
            column: column.to_string(),
            expected: n,
            found,
        };
        if x.nrows() != n {
            return Err(mismatch("x", x.nrows()));
        }
        if q.nrows() != n {
            return Err(mismatch("q", q.nrows()));
        }
        if let Some(w) = &w {
            if w.nrows() != n {
                return Err(mismatch("w", w.nrows()));
            }
        }
        if r.len() != n {
            return Err(mismatch("r", r.len()));
        }
        if pi.len() != n {
            return Err(mismatch("pi", pi.len()));
        }
        if x.ncols() == 0 {
            return Err(DslError::InvalidSpec("x has no columns".into()));
        }
        if q.ncols() == 0 {
            return Err(DslError::InvalidSpec("q has no columns".into()));
        }
        if x_names.len() != x.ncols() {
            return Err(DslError::InvalidSpec(format!(
                "{} covariate names for {} columns",
                x_names.len(),
                x.ncols()
            )));
        }
        check_finite(&x, "x", Some(&x_names))?;
        check_finite(&q, "q", None)?;
        if let Some(w) = &w {
            check_finite(w, "w", None)?;
        }
        for (i, &p) in pi.iter().enumerate() {
            if !(p > 0.0 && p <= 1.0) {
                return Err(DslError::Assumption1Violation {
                    column: "pi".into(),
                    row: i,
                    value: p,
                });
            }
        }
        let mut gold = Vec::with_capacity(n);
        for (i, &ri) in r.iter().enumerate() {
            let labeled = if ri == 1.0 {
                true
            } else if ri == 0.0 {
                false
            } else {
                return Err(DslError::InvalidGoldIndicator {
                    column: "r".into(),
                    row: i,
                    value: ri,
                });
            };
            if labeled && !y[i].is_finite() {
                return Err(DslError::MissingOutcome {
                    column: "y".into(),
                    row: i,
                });
            }
            if !labeled {
                y[i] = f64::NAN;
            }
            gold.push(labeled);
        }
        let n_gold = gold.iter().filter(|&&g| g).count();
        Ok(Self {
            x,
            q,
            w,
            y,
            r: gold,
            pi,
            x_names,
            n_gold,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_gold(&self) -> usize {
        self.n_gold
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn w(&self) -> Option<&DMatrix<f64>> {
        self.w.as_ref()
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn is_gold(&self, i: usize) -> bool {
        self.r[i]
    }

    /// Gold indicators as 0/1.
    pub fn r(&self) -> Vec<f64> {
        self.r.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect()
    }

    /// Gold outcome of row `i`, `None` when the row is unlabeled.
    pub fn gold_outcome(&self, i: usize) -> Option<f64> {
        self.r[i].then(|| self.y[i])
    }

    /// Raw outcome column; unlabeled rows hold `NaN`.
    pub fn y_raw(&self) -> &[f64] {
        &self.y
    }

    pub fn gold_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.r[i]).collect()
    }

    /// Row-wise average of the surrogate columns.
    pub fn surrogate_mean(&self) -> Vec<f64> {
        let d = self.q.ncols() as f64;
        (0..self.n())
            .map(|i| self.q.row(i).iter().sum::<f64>() / d)
            .collect()
    }

    /// Learner features: the column concatenation `(Q, W, X)`.
    pub fn learner_features(&self) -> DMatrix<f64> {
        let dw = self.w.as_ref().map_or(0, |w| w.ncols());
        let dq = self.q.ncols();
        let dx = self.x.ncols();
        DMatrix::from_fn(self.n(), dq + dw + dx, |i, j| {
            if j < dq {
                self.q[(i, j)]
            } else if j < dq + dw {
                self.w.as_ref().unwrap()[(i, j - dq)]
            } else {
                self.x[(i, j - dq - dw)]
            }
        })
    }
}

fn column<'a>(columns: &'a Columns, name: &str, n: usize) -> Result<&'a [f64]> {
    let col = columns
        .get(name)
        .ok_or_else(|| DslError::MissingColumn(name.to_string()))?;
    if col.len() != n {
        return Err(DslError::LengthMismatch {
            column: name.to_string(),
            expected: n,
            found: col.len(),
        });
    }
    Ok(col)
}

fn stack(columns: &Columns, names: &[String], n: usize) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(n, names.len());
    for (j, name) in names.iter().enumerate() {
        let col = column(columns, name, n)?;
        for (i, &v) in col.iter().enumerate() {
            if !v.is_finite() {
                return Err(DslError::NonFinite {
                    column: name.clone(),
                    row: i,
                });
            }
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

/// Validates named columns against a schema and assembles the table.
pub fn build_table(columns: &Columns, schema: &ColumnSchema) -> Result<ObservationTable> {
    schema.validate()?;
    let n = columns
        .get(&schema.outcome)
        .ok_or_else(|| DslError::MissingColumn(schema.outcome.clone()))?
        .len();
    let y = column(columns, &schema.outcome, n)?.to_vec();
    let r = column(columns, &schema.gold, n)?.to_vec();
    let pi = column(columns, &schema.probability, n)?.to_vec();

    for (i, &ri) in r.iter().enumerate() {
        if ri != 0.0 && ri != 1.0 {
            return Err(DslError::InvalidGoldIndicator {
                column: schema.gold.clone(),
                row: i,
                value: ri,
            });
        }
        if ri == 1.0 && !y[i].is_finite() {
            return Err(DslError::MissingOutcome {
                column: schema.outcome.clone(),
                row: i,
            });
        }
    }
    for (i, &p) in pi.iter().enumerate() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(DslError::Assumption1Violation {
                column: schema.probability.clone(),
                row: i,
                value: p,
            });
        }
    }

    let q = stack(columns, &schema.surrogates, n)?;
    let w = if schema.auxiliary.is_empty() {
        None
    } else {
        Some(stack(columns, &schema.auxiliary, n)?)
    };
    let covariates = stack(columns, &schema.covariates, n)?;
    let (x, names) = if schema.intercept {
        let mut names = vec![INTERCEPT.to_string()];
        names.extend(schema.covariates.iter().cloned());
        let x = covariates.insert_column(0, 1.0);
        (x, names)
    } else {
        (covariates, schema.covariates.clone())
    };
    ObservationTable::with_names(x, q, w, y, r, pi, names)
}

/// A K-way partition of row indices. Fold ids are `0..k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    k: usize,
    fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn from_labels(k: usize, fold_of: Vec<usize>) -> Result<Self> {
        if k < 2 {
            return Err(DslError::InvalidFolds(format!("k = {k} < 2")));
        }
        if let Some(bad) = fold_of.iter().find(|&&f| f >= k) {
            return Err(DslError::InvalidFolds(format!(
                "fold id {bad} out of range for k = {k}"
            )));
        }
        Ok(Self { k, fold_of })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.fold_of.len()
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Uniform random partition: a seeded shuffle of `0..n` dealt round-robin.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(DslError::InvalidFolds(format!("k = {k} < 2")));
    }
    if k > n {
        return Err(DslError::InvalidFolds(format!("k = {k} exceeds n = {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0; n];
    for (slot, &i) in order.iter().enumerate() {
        fold_of[i] = slot % k;
    }
    Ok(FoldAssignment { k, fold_of })
}
