//! Core domain types: censored datasets, policies, oracle models, and the
//! oracle policy-value metrics used for benchmarking.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvError};

/// Scale on which an oracle's mean outcome is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Time,
    LogTime,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scale::Time => write!(f, "time"),
            Scale::LogTime => write!(f, "log_time"),
        }
    }
}

/// Right-censored observational dataset.
///
/// Invariants enforced on construction:
/// - `y[i]` lies in `[0, tau]`; any `y[i] >= tau` is stored as `tau` with
///   `delta[i] = true` (truncation at the follow-up horizon makes the event
///   time known).
/// - every arm label lies in `[1..m]`;
/// - all covariates are finite.
#[derive(Debug, Clone)]
pub struct CensoredDataset {
    x: Array2<f64>,
    a: Vec<usize>,
    y: Array1<f64>,
    delta: Vec<bool>,
    tau: f64,
    m: usize,
}

impl CensoredDataset {
    /// Validate and construct, applying the truncation rule.
    pub fn new(
        x: Array2<f64>,
        a: Vec<usize>,
        mut y: Array1<f64>,
        mut delta: Vec<bool>,
        tau: f64,
        m: usize,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(SurvError::EmptyDataset);
        }
        if a.len() != n || y.len() != n || delta.len() != n {
            return Err(SurvError::DimensionMismatch(format!(
                "x has {n} rows but a/y/delta have {}/{}/{}",
                a.len(),
                y.len(),
                delta.len()
            )));
        }
        if m < 2 {
            return Err(SurvError::InvalidInput("arm count m must be >= 2".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(SurvError::InvalidInput(format!("tau must be positive and finite, got {tau}")));
        }
        for (row, &label) in a.iter().enumerate() {
            if label < 1 || label > m {
                return Err(SurvError::ArmLabel { row, label: label as i64, m });
            }
        }
        for (row, &v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(SurvError::InvalidInput(format!("non-finite y at row {row}")));
            }
            if v < 0.0 {
                return Err(SurvError::NegativeTime { row, value: v });
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SurvError::InvalidInput("non-finite covariate".into()));
        }
        for i in 0..n {
            if y[i] >= tau {
                y[i] = tau;
                delta[i] = true;
            }
        }
        Ok(Self { x, a, y, delta, tau, m })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    /// Treatment labels, 1-based.
    pub fn a(&self) -> &[usize] {
        &self.a
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }

    pub fn delta(&self) -> &[bool] {
        &self.delta
    }

    /// Row indices carrying arm `a` (1-based label).
    pub fn arm_indices(&self, a: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.a[i] == a).collect()
    }

    /// Fraction of censored observations.
    pub fn censoring_fraction(&self) -> f64 {
        self.delta.iter().filter(|&&d| !d).count() as f64 / self.n() as f64
    }

    /// Check the preconditions shared by the evaluation operations.
    pub fn check_evaluable(&self) -> Result<()> {
        if self.n() < self.m {
            return Err(SurvError::InvalidInput(format!(
                "need n >= m for evaluation, got n = {}, m = {}",
                self.n(),
                self.m
            )));
        }
        Ok(())
    }

    /// Restrict covariates to a 1-based subset of columns (feature selection).
    pub fn select_features(&self, columns: &[usize]) -> Result<Self> {
        if columns.is_empty() {
            return Err(SurvError::InvalidInput("feature subset is empty".into()));
        }
        for &c in columns {
            if c < 1 || c > self.d() {
                return Err(SurvError::InvalidInput(format!(
                    "feature index {c} outside [1..{}]",
                    self.d()
                )));
            }
        }
        let mut x = Array2::zeros((self.n(), columns.len()));
        for (j, &c) in columns.iter().enumerate() {
            x.column_mut(j).assign(&self.x.column(c - 1));
        }
        Ok(Self {
            x,
            a: self.a.clone(),
            y: self.y.clone(),
            delta: self.delta.clone(),
            tau: self.tau,
            m: self.m,
        })
    }
}

/// Ground-truth model attached to a simulated dataset.
#[derive(Clone)]
pub struct OracleModel {
    mu: Arc<dyn Fn(ArrayView1<f64>, usize) -> f64 + Send + Sync>,
    propensity: Arc<dyn Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync>,
    scale: Scale,
    m: usize,
}

impl fmt::Debug for OracleModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OracleModel")
            .field("scale", &self.scale)
            .field("m", &self.m)
            .finish()
    }
}

impl OracleModel {
    pub fn new(
        mu: Arc<dyn Fn(ArrayView1<f64>, usize) -> f64 + Send + Sync>,
        propensity: Arc<dyn Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync>,
        scale: Scale,
        m: usize,
    ) -> Self {
        Self { mu, propensity, scale, m }
    }

    /// True mean outcome for covariates `x` under arm `a` (1-based).
    pub fn mu(&self, x: ArrayView1<f64>, a: usize) -> f64 {
        (self.mu)(x, a)
    }

    /// True treatment-assignment probabilities at `x`.
    pub fn propensity(&self, x: ArrayView1<f64>) -> Array1<f64> {
        (self.propensity)(x)
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Mean-outcome matrix over the rows of `x`, column `a-1` = mu_a.
    pub fn mu_matrix(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let n = x.nrows();
        let mut out = Array2::zeros((n, self.m));
        for i in 0..n {
            for a in 1..=self.m {
                out[[i, a - 1]] = self.mu(x.row(i), a);
            }
        }
        out
    }

    /// Optimal deterministic policy as a one-hot `PolicyMatrix` (ties to the
    /// lowest arm index).
    pub fn optimal_policy(&self, x: ArrayView2<f64>) -> PolicyMatrix {
        let n = x.nrows();
        let mut pi = Array2::zeros((n, self.m));
        for i in 0..n {
            let mut best = 1usize;
            let mut best_val = self.mu(x.row(i), 1);
            for a in 2..=self.m {
                let v = self.mu(x.row(i), a);
                if v > best_val {
                    best_val = v;
                    best = a;
                }
            }
            pi[[i, best - 1]] = 1.0;
        }
        PolicyMatrix::new(pi).expect("one-hot rows are valid")
    }
}

/// Row-stochastic policy matrix: row i is the treatment distribution at X_i.
#[derive(Debug, Clone)]
pub struct PolicyMatrix(Array2<f64>);

impl PolicyMatrix {
    pub fn new(pi: Array2<f64>) -> Result<Self> {
        for (i, row) in pi.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &p in row {
                if !(p >= 0.0) {
                    return Err(SurvError::InvalidInput(format!(
                        "policy row {i} has a negative or NaN entry"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-12 {
                return Err(SurvError::InvalidInput(format!(
                    "policy row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self(pi))
    }

    /// Uniform policy over `m` arms for `n` rows.
    pub fn uniform(n: usize, m: usize) -> Self {
        Self(Array2::from_elem((n, m), 1.0 / m as f64))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn m(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_array(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    /// Probability of arm `a` (1-based) at row `i`.
    pub fn prob(&self, i: usize, a: usize) -> f64 {
        self.0[[i, a - 1]]
    }
}

/// Sample-average policy effect under the oracle mean: (1/n) sum_i sum_a pi_a(X_i) mu_a(X_i).
pub fn sape(policy: &PolicyMatrix, oracle: &OracleModel, x: ArrayView2<f64>) -> Result<f64> {
    if policy.n() != x.nrows() || policy.m() != oracle.m() {
        return Err(SurvError::DimensionMismatch(format!(
            "policy is {}x{}, covariates have {} rows, oracle has {} arms",
            policy.n(),
            policy.m(),
            x.nrows(),
            oracle.m()
        )));
    }
    let n = x.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for a in 1..=oracle.m() {
            let p = policy.prob(i, a);
            if p > 0.0 {
                total += p * oracle.mu(x.row(i), a);
            }
        }
    }
    Ok(total / n as f64)
}

/// Regret of `policy` against the oracle-optimal policy on `x_test`.
pub fn regret(policy: &PolicyMatrix, oracle: &OracleModel, x_test: ArrayView2<f64>) -> Result<f64> {
    if x_test.nrows() == 0 {
        return Err(SurvError::EmptyDataset);
    }
    let star = oracle.optimal_policy(x_test);
    Ok(sape(&star, oracle, x_test)? - sape(policy, oracle, x_test)?)
}

/// Sidecar metadata written next to exported datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub setting: String,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub tau: f64,
    pub seed: Option<u64>,
    pub version: String,
}

/// Load a dataset from CSV with header columns `x1..xd, a, y, delta`.
pub fn load_csv(path: &Path, m: usize, tau: f64) -> Result<CensoredDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    let headers = reader
        .headers()
        .map_err(|e| SurvError::InvalidInput(format!("cannot read CSV header: {e}")))?
        .clone();
    let col_index = |name: &str| headers.iter().position(|h| h == name);
    let mut x_cols = Vec::new();
    while let Some(idx) = col_index(&format!("x{}", x_cols.len() + 1)) {
        x_cols.push(idx);
    }
    if x_cols.is_empty() {
        return Err(SurvError::MissingColumn("x1".into()));
    }
    let a_col = col_index("a").ok_or_else(|| SurvError::MissingColumn("a".into()))?;
    let y_col = col_index("y").ok_or_else(|| SurvError::MissingColumn("y".into()))?;
    let d_col = col_index("delta").ok_or_else(|| SurvError::MissingColumn("delta".into()))?;

    let d = x_cols.len();
    let mut rows_x: Vec<f64> = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    let mut delta = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| SurvError::InvalidInput(format!("row {row}: {e}")))?;
        let cell = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            raw.parse::<f64>().map_err(|_| SurvError::NonNumericCell {
                row,
                column: name.to_string(),
                value: raw.to_string(),
            })
        };
        for (k, &idx) in x_cols.iter().enumerate() {
            rows_x.push(cell(idx, &format!("x{}", k + 1))?);
        }
        let label_f = cell(a_col, "a")?;
        let label = label_f as i64;
        if label_f.fract() != 0.0 || label < 1 || label as usize > m {
            return Err(SurvError::ArmLabel { row, label, m });
        }
        a.push(label as usize);
        let yv = cell(y_col, "y")?;
        if yv < 0.0 {
            return Err(SurvError::NegativeTime { row, value: yv });
        }
        y.push(yv);
        let dv = cell(d_col, "delta")?;
        if dv != 0.0 && dv != 1.0 {
            return Err(SurvError::InvalidInput(format!(
                "delta must be 0 or 1 at row {row}, got {dv}"
            )));
        }
        delta.push(dv == 1.0);
    }
    if a.is_empty() {
        return Err(SurvError::EmptyDataset);
    }
    let n = a.len();
    let x = Array2::from_shape_vec((n, d), rows_x)
        .map_err(|e| SurvError::InvalidInput(format!("ragged CSV rows: {e}")))?;
    CensoredDataset::new(x, a, Array1::from(y), delta, tau, m)
}

/// Write a dataset to CSV (schema `x1..xd, a, y, delta`) plus a JSON sidecar
/// with the generation metadata.
pub fn save_csv(dataset: &CensoredDataset, path: &Path, meta: &DatasetMeta) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (1..=dataset.d()).map(|k| format!("x{k}")).collect();
    header.extend(["a".into(), "y".into(), "delta".into()]);
    writer
        .write_record(&header)
        .map_err(|e| SurvError::InvalidInput(format!("csv write: {e}")))?;
    for i in 0..dataset.n() {
        let mut rec: Vec<String> = dataset.x().row(i).iter().map(|v| format!("{v:.17e}")).collect();
        rec.push(dataset.a()[i].to_string());
        rec.push(format!("{:.17e}", dataset.y()[i]));
        rec.push(if dataset.delta()[i] { "1".into() } else { "0".into() });
        writer
            .write_record(&rec)
            .map_err(|e| SurvError::InvalidInput(format!("csv write: {e}")))?;
    }
    writer.flush()?;
    let meta_path = path.with_extension("meta.json");
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| SurvError::InvalidInput(format!("meta serialization: {e}")))?;
    std::fs::write(meta_path, json)?;
    Ok(())
}
