//! Survival-curve estimation and censored-outcome imputation.
//!
//! Kaplan–Meier and Beran (kernel-conditional Kaplan–Meier) estimators share
//! one weighted product-limit core. Imputation replaces censored outcomes
//! with the restricted conditional mean under the reward transform.

use ndarray::{Array1, Array2, ArrayView1};

use crate::dataset::{CensoredDataset, Scale};
use crate::error::{Result, SurvError};
use crate::linalg;

/// Denominator floor for conditional-mean imputation.
pub const SURV_FLOOR: f64 = 0.05;

/// Reward transform applied inside the restricted-mean integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Log,
}

impl Transform {
    pub fn apply(self, t: f64) -> f64 {
        match self {
            Transform::Identity => t,
            Transform::Log => t.ln(),
        }
    }
}

impl From<Scale> for Transform {
    fn from(scale: Scale) -> Self {
        match scale {
            Scale::Time => Transform::Identity,
            Scale::LogTime => Transform::Log,
        }
    }
}

/// Right-continuous step estimate of a survival function on [0, tau].
#[derive(Debug, Clone)]
pub struct SurvivalCurve {
    times: Vec<f64>,
    surv: Vec<f64>,
    tau: f64,
}

impl SurvivalCurve {
    /// `surv[j]` is the value just after `times[j]`.
    pub fn new(times: Vec<f64>, surv: Vec<f64>, tau: f64) -> Result<Self> {
        if times.len() != surv.len() {
            return Err(SurvError::DimensionMismatch(format!(
                "{} jump times vs {} survival values",
                times.len(),
                surv.len()
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(SurvError::InvalidInput(format!("tau must be positive, got {tau}")));
        }
        let mut prev_t = 0.0;
        let mut prev_s = 1.0 + 1e-12;
        for (j, (&t, &s)) in times.iter().zip(&surv).enumerate() {
            if !(t > prev_t) {
                return Err(SurvError::InvalidInput(format!(
                    "jump times must be strictly increasing and positive, offending index {j}"
                )));
            }
            if t > tau {
                return Err(SurvError::InvalidInput(format!(
                    "jump time {t} exceeds tau = {tau}"
                )));
            }
            if !(0.0..=1.0).contains(&s) || s > prev_s {
                return Err(SurvError::InvalidInput(format!(
                    "survival values must be non-increasing within [0,1], offending index {j}"
                )));
            }
            prev_t = t;
            prev_s = s;
        }
        Ok(Self { times, surv, tau })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn surv(&self) -> &[f64] {
        &self.surv
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// S(t), right-continuous.
    pub fn eval(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&tj| tj <= t);
        if k == 0 {
            1.0
        } else {
            self.surv[k - 1]
        }
    }

    /// S(t-), the left limit.
    pub fn eval_left(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&tj| tj < t);
        if k == 0 {
            1.0
        } else {
            self.surv[k - 1]
        }
    }
}

/// Weighted product-limit over (y, delta, w) triples; ties at one time put
/// events before censorings, so same-time censored units stay at risk.
fn weighted_product_limit(
    y: &[f64],
    delta: &[bool],
    weights: &[f64],
    tau: f64,
) -> Result<SurvivalCurve> {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[a].partial_cmp(&y[b]).expect("finite times"));
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(SurvError::DegenerateWeights);
    }
    let mut at_risk = total;
    let mut s = 1.0;
    let mut times = Vec::new();
    let mut surv = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let t = y[order[k]];
        let mut event_mass = 0.0;
        let mut leaving = 0.0;
        while k < order.len() && y[order[k]] == t {
            let i = order[k];
            if delta[i] {
                event_mass += weights[i];
            }
            leaving += weights[i];
            k += 1;
        }
        if event_mass > 0.0 && at_risk > 0.0 {
            s *= (1.0 - event_mass / at_risk).clamp(0.0, 1.0);
            times.push(t);
            surv.push(s);
        }
        at_risk -= leaving;
    }
    SurvivalCurve::new(times, surv, tau)
}

/// Product-limit (Kaplan–Meier) estimate over distinct event times.
pub fn kaplan_meier(y: ArrayView1<f64>, delta: &[bool], tau: f64) -> Result<SurvivalCurve> {
    let n = y.len();
    if n == 0 {
        return Err(SurvError::EmptyDataset);
    }
    if delta.len() != n {
        return Err(SurvError::DimensionMismatch(format!(
            "{n} times vs {} indicators",
            delta.len()
        )));
    }
    let y: Vec<f64> = y.to_vec();
    weighted_product_limit(&y, delta, &vec![1.0; n], tau)
}

/// What the fitted curves describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurvTarget {
    Event,
    Censoring,
}

/// Beran kernel-conditional Kaplan–Meier model. Fitting stores the training
/// sample; weights are computed per query.
#[derive(Debug, Clone)]
pub struct ConditionalSurvivalModel {
    x: Array2<f64>,
    y: Array1<f64>,
    /// Already flipped when target = censoring.
    delta: Vec<bool>,
    arm_index: Vec<Vec<usize>>,
    /// Column standard deviations used to standardize distances.
    sds: Array1<f64>,
    /// Per-arm bandwidths on the standardized scale.
    bandwidths: Vec<f64>,
    tau: f64,
    target: SurvTarget,
}

/// Rule-of-thumb bandwidth on the standardized scale.
fn rule_of_thumb(n_a: usize, d: usize) -> f64 {
    1.06 * (n_a as f64).powf(-1.0 / (d as f64 + 4.0))
}

/// Fit with the per-arm rule-of-thumb bandwidth h_a = 1.06 n_a^{-1/(d+4)}
/// (computed on standardized covariates).
pub fn fit_beran(dataset: &CensoredDataset, target: SurvTarget) -> Result<ConditionalSurvivalModel> {
    fit_beran_impl(dataset, None, target)
}

/// Fit with one fixed bandwidth shared across arms.
pub fn fit_beran_with_bandwidth(
    dataset: &CensoredDataset,
    h: f64,
    target: SurvTarget,
) -> Result<ConditionalSurvivalModel> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(SurvError::InvalidInput(format!("bandwidth must be positive, got {h}")));
    }
    fit_beran_impl(dataset, Some(h), target)
}

fn fit_beran_impl(
    dataset: &CensoredDataset,
    h: Option<f64>,
    target: SurvTarget,
) -> Result<ConditionalSurvivalModel> {
    let delta = match target {
        SurvTarget::Event => dataset.delta().to_vec(),
        SurvTarget::Censoring => dataset.delta().iter().map(|d| !d).collect(),
    };
    let mut sds = linalg::column_sds(dataset.x());
    sds.mapv_inplace(|s| if s > 0.0 { s } else { 1.0 });
    let arm_index: Vec<Vec<usize>> = (1..=dataset.m()).map(|a| dataset.arm_indices(a)).collect();
    let d = dataset.d();
    let bandwidths = arm_index
        .iter()
        .map(|idx| h.unwrap_or_else(|| rule_of_thumb(idx.len().max(1), d)))
        .collect();
    Ok(ConditionalSurvivalModel {
        x: dataset.x().to_owned(),
        y: dataset.y().to_owned(),
        delta,
        arm_index,
        sds,
        bandwidths,
        tau: dataset.tau(),
        target,
    })
}

impl ConditionalSurvivalModel {
    pub fn target(&self) -> SurvTarget {
        self.target
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// Beran estimate of the conditional survival curve at covariates `x` for
/// arm `a`, using Gaussian weights exp(-||x - X_i||^2 / h^2) on standardized
/// coordinates over the arm-a subsample.
pub fn predict_curve(
    model: &ConditionalSurvivalModel,
    x: ArrayView1<f64>,
    a: usize,
) -> Result<SurvivalCurve> {
    if a < 1 || a > model.arm_index.len() {
        return Err(SurvError::ArmLabel { row: 0, label: a as i64, m: model.arm_index.len() });
    }
    if x.len() != model.x.ncols() {
        return Err(SurvError::DimensionMismatch(format!(
            "query has {} coordinates, model expects {}",
            x.len(),
            model.x.ncols()
        )));
    }
    let idx = &model.arm_index[a - 1];
    if idx.is_empty() {
        return Err(SurvError::EmptyArm(a));
    }
    let h2 = model.bandwidths[a - 1] * model.bandwidths[a - 1];
    let mut sq = Vec::with_capacity(idx.len());
    for &i in idx {
        let mut acc = 0.0;
        for c in 0..x.len() {
            let delta = (x[c] - model.x[[i, c]]) / model.sds[c];
            acc += delta * delta;
        }
        sq.push(acc / h2);
    }
    // Shifting all exponents by the minimum rescales every weight by the same
    // positive factor, which leaves the product-limit unchanged but prevents
    // underflow when the query sits far from the subsample.
    let min_sq = sq.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = sq.iter().map(|&v| (-(v - min_sq)).exp()).collect();
    let y: Vec<f64> = idx.iter().map(|&i| model.y[i]).collect();
    let delta: Vec<bool> = idx.iter().map(|&i| model.delta[i]).collect();
    weighted_product_limit(&y, &delta, &weights, model.tau)
}

/// Restricted mean of g(T) given T > y under the curve, with the τ atom.
pub fn expected_residual(curve: &SurvivalCurve, y: f64, transform: Transform) -> f64 {
    expected_residual_with(curve, y, transform, SURV_FLOOR).0
}

/// As [`expected_residual`], also reporting whether the denominator floor was
/// hit. The result is clamped to the conditional support [g(y), g(τ)].
pub fn expected_residual_with(
    curve: &SurvivalCurve,
    y: f64,
    transform: Transform,
    floor: f64,
) -> (f64, bool) {
    let tau = curve.tau();
    let mut numerator = 0.0;
    let mut prev = 1.0;
    for (&t, &s) in curve.times().iter().zip(curve.surv()) {
        if t > y {
            numerator += transform.apply(t) * (curve.eval_left(t) - s);
        }
        prev = s;
    }
    numerator += transform.apply(tau) * prev;
    let s_y = curve.eval(y);
    let floored = s_y < floor;
    let denom = s_y.max(floor);
    let value = numerator / denom;
    (value.clamp(transform.apply(y), transform.apply(tau)), floored)
}

/// Imputed outcome vector: observed transform values for events, restricted
/// conditional means for censored rows.
#[derive(Debug, Clone)]
pub struct ImputedOutcomes {
    pub yhat: Array1<f64>,
    pub transform: Transform,
    /// Count of censored rows where the survival denominator was clamped.
    pub floor_hits: usize,
    /// Per-row floor flags (false for events).
    pub floor_flags: Vec<bool>,
}

/// Replace censored outcomes with conditional expected (transformed) failure
/// times under the Beran model.
pub fn impute(
    dataset: &CensoredDataset,
    model: &ConditionalSurvivalModel,
    transform: Transform,
) -> Result<ImputedOutcomes> {
    if model.target != SurvTarget::Event {
        return Err(SurvError::InvalidInput(
            "imputation requires an event-target survival model".into(),
        ));
    }
    let n = dataset.n();
    let mut yhat = Array1::zeros(n);
    let mut floor_flags = vec![false; n];
    for i in 0..n {
        let yi = dataset.y()[i];
        if dataset.delta()[i] {
            if transform == Transform::Log && !(yi > 0.0) {
                return Err(SurvError::InvalidInput(format!(
                    "log transform needs positive event times, row {i} has y = {yi}"
                )));
            }
            yhat[i] = transform.apply(yi);
        } else {
            let curve = predict_curve(model, dataset.x().row(i), dataset.a()[i])?;
            let (value, floored) = expected_residual_with(&curve, yi, transform, SURV_FLOOR);
            yhat[i] = value;
            floor_flags[i] = floored;
        }
    }
    let floor_hits = floor_flags.iter().filter(|f| **f).count();
    Ok(ImputedOutcomes { yhat, transform, floor_hits, floor_flags })
}

/// Censoring-survival values Ĝ(Y_i | X_i, A_i) for IPCW weighting.
pub fn censoring_survival_at(
    model: &ConditionalSurvivalModel,
    dataset: &CensoredDataset,
) -> Result<Array1<f64>> {
    if model.target != SurvTarget::Censoring {
        return Err(SurvError::InvalidInput(
            "IPCW lookup requires a censoring-target survival model".into(),
        ));
    }
    let n = dataset.n();
    let mut ghat = Array1::zeros(n);
    for i in 0..n {
        let curve = predict_curve(model, dataset.x().row(i), dataset.a()[i])?;
        ghat[i] = curve.eval(dataset.y()[i]);
    }
    Ok(ghat)
}

/// Write the imputed vector as CSV with columns index, yhat, delta, floor_hit.
pub fn save_imputed_csv(
    path: &std::path::Path,
    dataset: &CensoredDataset,
    imputed: &ImputedOutcomes,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["index", "yhat", "delta", "floor_hit"])?;
    for i in 0..dataset.n() {
        writer.write_record(&[
            i.to_string(),
            format!("{:.17e}", imputed.yhat[i]),
            if dataset.delta()[i] { "1" } else { "0" }.to_string(),
            if imputed.floor_flags[i] { "1" } else { "0" }.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
