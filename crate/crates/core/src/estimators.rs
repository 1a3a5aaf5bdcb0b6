//! Policy-value estimators: regression plug-in, weighted, doubly robust, and
//! the inverse-propensity weight constructions (with censoring correction).

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::dataset::{CensoredDataset, PolicyMatrix};
use crate::error::{Result, SurvError};
use crate::propensity::PropensityModel;
use crate::survival::{censoring_survival_at, ConditionalSurvivalModel, SURV_FLOOR};

/// Nonnegative weights normalized to sum to n.
#[derive(Debug, Clone)]
pub struct WeightVector {
    w: Array1<f64>,
}

impl WeightVector {
    /// Accepts weights already summing to n (within 1e-8).
    pub fn new(w: Array1<f64>) -> Result<Self> {
        let n = w.len();
        if n == 0 {
            return Err(SurvError::EmptyDataset);
        }
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(SurvError::InvalidInput("weights must be finite and nonnegative".into()));
        }
        let total: f64 = w.sum();
        if (total - n as f64).abs() > 1e-8 {
            return Err(SurvError::InvalidInput(format!(
                "weights sum to {total}, expected {n}"
            )));
        }
        Ok(Self { w })
    }

    /// Normalizes raw nonnegative weights to sum to n.
    pub fn from_raw(raw: Array1<f64>) -> Result<Self> {
        let n = raw.len();
        if n == 0 {
            return Err(SurvError::EmptyDataset);
        }
        if raw.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(SurvError::InvalidInput("raw weights must be finite and nonnegative".into()));
        }
        let total: f64 = raw.sum();
        if !(total > 0.0) {
            return Err(SurvError::DegenerateWeights);
        }
        let scale = n as f64 / total;
        Ok(Self { w: raw.mapv(|v| v * scale) })
    }

    pub fn w(&self) -> ArrayView1<'_, f64> {
        self.w.view()
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// Which estimator produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Reg,
    Weighted,
    Dr,
    Balanced,
    BalancedDr,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            EstimatorKind::Reg => "reg",
            EstimatorKind::Weighted => "weighted",
            EstimatorKind::Dr => "dr",
            EstimatorKind::Balanced => "balanced",
            EstimatorKind::BalancedDr => "balanced_dr",
        };
        write!(f, "{name}")
    }
}

/// Point estimate with balance diagnostics.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub estimate: f64,
    pub worst_case_bias: f64,
    pub variance_term: f64,
    /// worst_case_bias^2 + variance_term.
    pub objective: f64,
    pub weights: Option<WeightVector>,
    pub estimator_kind: EstimatorKind,
    /// False when the balanced-weights solver hit its iteration cap.
    pub converged: bool,
}

impl EvalReport {
    fn plain(estimate: f64, kind: EstimatorKind, weights: Option<WeightVector>) -> Self {
        Self {
            estimate,
            worst_case_bias: 0.0,
            variance_term: 0.0,
            objective: 0.0,
            weights,
            estimator_kind: kind,
            converged: true,
        }
    }
}

fn check_policy_rows(policy: &PolicyMatrix, n: usize) -> Result<()> {
    if policy.n() != n {
        return Err(SurvError::DimensionMismatch(format!(
            "policy has {} rows, data has {n}",
            policy.n()
        )));
    }
    Ok(())
}

/// Plug-in regression estimate (1/n) sum_i sum_a pi_a(X_i) muhat_a(X_i).
pub fn reg_estimator(policy: &PolicyMatrix, muhat: ArrayView2<f64>) -> Result<EvalReport> {
    let (n, m) = muhat.dim();
    check_policy_rows(policy, n)?;
    if policy.m() != m {
        return Err(SurvError::DimensionMismatch(format!(
            "policy has {} arms, muhat has {m} columns",
            policy.m()
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        for a in 0..m {
            total += policy.as_array()[[i, a]] * muhat[[i, a]];
        }
    }
    Ok(EvalReport::plain(total / n as f64, EstimatorKind::Reg, None))
}

/// Weighted estimate (1/n) sum_i w_i y_i.
pub fn weighted_estimator(weights: &WeightVector, outcomes: ArrayView1<f64>) -> Result<EvalReport> {
    let n = weights.len();
    if outcomes.len() != n {
        return Err(SurvError::DimensionMismatch(format!(
            "{} weights vs {} outcomes",
            n,
            outcomes.len()
        )));
    }
    let estimate = weights.w().dot(&outcomes) / n as f64;
    Ok(EvalReport::plain(estimate, EstimatorKind::Weighted, Some(weights.clone())))
}

/// Doubly robust estimate: regression term plus weighted residual correction.
pub fn dr_estimator(
    policy: &PolicyMatrix,
    weights: &WeightVector,
    muhat: ArrayView2<f64>,
    outcomes: ArrayView1<f64>,
    arms: &[usize],
) -> Result<EvalReport> {
    let n = weights.len();
    if outcomes.len() != n || arms.len() != n || muhat.nrows() != n {
        return Err(SurvError::DimensionMismatch(format!(
            "aligned inputs expected: {} weights, {} outcomes, {} arms, {} muhat rows",
            n,
            outcomes.len(),
            arms.len(),
            muhat.nrows()
        )));
    }
    let reg = reg_estimator(policy, muhat)?;
    let mut correction = 0.0;
    for i in 0..n {
        correction += weights.w()[i] * (outcomes[i] - muhat[[i, arms[i] - 1]]);
    }
    let estimate = reg.estimate + correction / n as f64;
    Ok(EvalReport::plain(estimate, EstimatorKind::Dr, Some(weights.clone())))
}

/// Clipped inverse-propensity weights for a target policy, normalized to sum
/// to n.
pub fn ipw_weights(
    policy: &PolicyMatrix,
    prop: &PropensityModel,
    x: ArrayView2<f64>,
    arms: &[usize],
) -> Result<WeightVector> {
    let n = x.nrows();
    check_policy_rows(policy, n)?;
    if arms.len() != n {
        return Err(SurvError::DimensionMismatch(format!(
            "{} arm labels vs {n} covariate rows",
            arms.len()
        )));
    }
    let phi = prop.predict(x)?;
    let mut raw = Array1::zeros(n);
    for i in 0..n {
        let a = arms[i] - 1;
        raw[i] = policy.as_array()[[i, a]] / prop.clipped(phi[[i, a]]);
    }
    WeightVector::from_raw(raw)
}

/// IPW weights with inverse-probability-of-censoring correction: censored
/// rows get exactly zero raw weight.
pub fn ipw_ipcw_weights(
    policy: &PolicyMatrix,
    prop: &PropensityModel,
    ghat: &ConditionalSurvivalModel,
    dataset: &CensoredDataset,
) -> Result<WeightVector> {
    let n = dataset.n();
    check_policy_rows(policy, n)?;
    let phi = prop.predict(dataset.x())?;
    let g = censoring_survival_at(ghat, dataset)?;
    let mut raw = Array1::zeros(n);
    for i in 0..n {
        if !dataset.delta()[i] {
            continue;
        }
        let a = dataset.a()[i] - 1;
        raw[i] =
            policy.as_array()[[i, a]] / (prop.clipped(phi[[i, a]]) * g[i].max(SURV_FLOOR));
    }
    WeightVector::from_raw(raw)
}
