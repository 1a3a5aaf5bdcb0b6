//! Gaussian-process marginal likelihood and kernel hyperparameter tuning.
//!
//! Hyperparameters are optimized in log space over (log s, log sigma^2,
//! log metric diagonal), matching the gradient ordering returned by
//! [`gp_log_marginal`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dataset::CensoredDataset;
use crate::error::{Result, SurvError};
use crate::kernel::{KernelConfig, Metric};
use crate::linalg;

/// Result of marginal-likelihood tuning.
#[derive(Debug, Clone)]
pub struct GpFit {
    /// Fitted observation-noise variance.
    pub noise_variance: f64,
    /// Fitted kernel (diagonal metric).
    pub hyperparams: KernelConfig,
    /// Best log marginal likelihood reached.
    pub log_marginal: f64,
    /// True when every ascent start failed and the median-heuristic fallback
    /// was used instead.
    pub fallback: bool,
}

/// Controls for [`tune_hyperparameters_with`].
#[derive(Debug, Clone)]
pub struct TuneOpts {
    pub starts: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Tuning subsamples the data above this size to bound the cubic cost.
    pub subsample_cap: usize,
    pub seed: u64,
}

impl Default for TuneOpts {
    fn default() -> Self {
        Self { starts: 5, max_iter: 200, tol: 1e-6, subsample_cap: 400, seed: 0 }
    }
}

fn diag_entries(cfg: &KernelConfig) -> Result<ArrayView1<'_, f64>> {
    match cfg.metric() {
        Metric::Diagonal(d) => Ok(d.view()),
        Metric::Full { .. } => Err(SurvError::InvalidInput(
            "marginal-likelihood gradients require a diagonal metric".into(),
        )),
    }
}

struct Evidence {
    value: f64,
    grad: Option<Array1<f64>>,
}

/// Shared evidence computation; gradient work is skipped for line-search
/// trial points.
fn evidence(
    x: ArrayView2<f64>,
    cfg: &KernelConfig,
    y: ArrayView1<f64>,
    noise_variance: f64,
    with_grad: bool,
) -> Result<Evidence> {
    let n = x.nrows();
    if y.len() != n {
        return Err(SurvError::DimensionMismatch(format!(
            "outcomes have length {}, covariates have {} rows",
            y.len(),
            n
        )));
    }
    if !(noise_variance > 0.0 && noise_variance.is_finite()) {
        return Err(SurvError::InvalidInput(format!(
            "noise variance must be positive, got {noise_variance}"
        )));
    }
    let diag = diag_entries(cfg)?;
    if x.ncols() != diag.len() {
        return Err(SurvError::DimensionMismatch(format!(
            "covariates have {} columns, metric dimension is {}",
            x.ncols(),
            diag.len()
        )));
    }
    let s2 = cfg.scale() * cfg.scale();
    // Mahalanobis squared distances and the kernel, kept for the gradient.
    let mut dist2 = Array2::zeros((n, n));
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for c in 0..diag.len() {
                let delta = x[[i, c]] - x[[j, c]];
                acc += delta * delta / diag[c];
            }
            dist2[[i, j]] = acc;
            dist2[[j, i]] = acc;
            let v = (-acc / s2).exp();
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    let mut ky = linalg::to_dmatrix(k.view());
    for i in 0..n {
        ky[(i, i)] += noise_variance;
    }
    let (chol, _jitter) = linalg::cholesky_jittered(&ky)?;
    let alpha = chol.solve(&linalg::to_dvector(y));
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let value = -0.5 * linalg::to_dvector(y).dot(&alpha)
        - 0.5 * log_det
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !with_grad {
        return Ok(Evidence { value, grad: None });
    }

    let kinv = chol.inverse();
    // M = alpha alpha' - Ky^-1; each gradient is 0.5 tr(M dKy/dtheta).
    let d = diag.len();
    let mut grad = Array1::zeros(2 + d);
    let mut g_scale = 0.0;
    let mut g_noise = 0.0;
    for i in 0..n {
        for j in 0..n {
            let m_ij = alpha[i] * alpha[j] - kinv[(i, j)];
            g_scale += m_ij * k[[i, j]] * dist2[[i, j]];
            if i == j {
                g_noise += m_ij;
            }
        }
    }
    grad[0] = g_scale / s2;
    grad[1] = 0.5 * noise_variance * g_noise;
    for c in 0..d {
        let mut acc = 0.0;
        for i in 0..n {
            let xic = x[[i, c]];
            for j in 0..n {
                let delta = xic - x[[j, c]];
                let m_ij = alpha[i] * alpha[j] - kinv[(i, j)];
                acc += m_ij * k[[i, j]] * delta * delta;
            }
        }
        grad[2 + c] = 0.5 * acc / (diag[c] * s2);
    }
    Ok(Evidence { value, grad: Some(grad) })
}

/// GP log marginal likelihood and its gradient in
/// (log s, log sigma^2, log metric diagonal).
pub fn gp_log_marginal(
    x: ArrayView2<f64>,
    cfg: &KernelConfig,
    y: ArrayView1<f64>,
    noise_variance: f64,
) -> Result<(f64, Array1<f64>)> {
    let ev = evidence(x, cfg, y, noise_variance, true)?;
    Ok((ev.value, ev.grad.expect("gradient requested")))
}

const LOG_BOUND: f64 = 20.0;

fn theta_to_params(theta: &Array1<f64>, m: usize) -> Result<(KernelConfig, f64)> {
    let scale = theta[0].exp();
    let noise = theta[1].exp();
    let diag = Array1::from_iter(theta.iter().skip(2).map(|v| v.exp()));
    Ok((KernelConfig::diagonal(scale, diag, vec![1.0; m])?, noise))
}

fn eval_theta(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    theta: &Array1<f64>,
    m: usize,
    with_grad: bool,
) -> Result<Evidence> {
    let (cfg, noise) = theta_to_params(theta, m)?;
    evidence(x, &cfg, y, noise, with_grad)
}

/// Median squared Mahalanobis distance under the variance-diagonal metric.
fn median_sq_dist(x: ArrayView2<f64>, diag: ArrayView1<f64>) -> f64 {
    let n = x.nrows();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for c in 0..diag.len() {
                let delta = x[[i, c]] - x[[j, c]];
                acc += delta * delta / diag[c];
            }
            dists.push(acc);
        }
    }
    dists.retain(|v| *v > 0.0);
    if dists.is_empty() {
        1.0
    } else {
        linalg::median(&dists)
    }
}

/// Marginal-likelihood tuning with the default options (5 starts, 200
/// iterations, backtracking line search).
pub fn tune_hyperparameters(dataset: &CensoredDataset, outcomes: ArrayView1<f64>) -> Result<GpFit> {
    tune_hyperparameters_with(dataset, outcomes, &TuneOpts::default())
}

/// Marginal-likelihood tuning over (log s, log sigma^2, log metric diagonal)
/// by multi-start projected gradient ascent with backtracking.
pub fn tune_hyperparameters_with(
    dataset: &CensoredDataset,
    outcomes: ArrayView1<f64>,
    opts: &TuneOpts,
) -> Result<GpFit> {
    let n = dataset.n();
    if outcomes.len() != n {
        return Err(SurvError::DimensionMismatch(format!(
            "outcomes have length {}, dataset has {} rows",
            outcomes.len(),
            n
        )));
    }
    if outcomes.iter().any(|v| !v.is_finite()) {
        return Err(SurvError::InvalidInput("outcomes must be finite (run imputation first)".into()));
    }
    let m = dataset.m();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (x_fit, y_fit) = if n > opts.subsample_cap {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(opts.subsample_cap);
        idx.sort_unstable();
        let mut xs = Array2::zeros((idx.len(), dataset.d()));
        let mut ys = Array1::zeros(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            xs.row_mut(r).assign(&dataset.x().row(i));
            ys[r] = outcomes[i];
        }
        (xs, ys)
    } else {
        (dataset.x().to_owned(), outcomes.to_owned())
    };

    let d = dataset.d();
    let sds = linalg::column_sds(x_fit.view());
    let var_diag = sds.mapv(|s| if s > 0.0 { s * s } else { 1.0 });
    let y_var = {
        let mean = y_fit.mean().unwrap();
        let ss: f64 = y_fit.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (y_fit.len() as f64 - 1.0).max(1.0)).max(1e-8)
    };
    let s0 = median_sq_dist(x_fit.view(), var_diag.view()).sqrt().max(1e-4);

    let mut base = Array1::zeros(2 + d);
    base[0] = s0.ln();
    base[1] = (0.5 * y_var).ln();
    for c in 0..d {
        base[2 + c] = var_diag[c].ln();
    }

    let mut best: Option<(f64, Array1<f64>)> = None;
    for start in 0..opts.starts.max(1) {
        let mut theta = base.clone();
        if start > 0 {
            let mut srng = ChaCha8Rng::seed_from_u64(opts.seed);
            srng.set_stream(start as u64);
            theta[0] += srng.gen_range(-1.5..1.5);
            theta[1] += srng.gen_range(-2.0..1.0);
            for c in 0..d {
                theta[2 + c] += srng.gen_range(-1.0..1.0);
            }
        }
        match ascend(x_fit.view(), y_fit.view(), theta, m, opts) {
            Ok((value, theta)) => {
                if best.as_ref().map_or(true, |(bv, _)| value > *bv) {
                    best = Some((value, theta));
                }
            }
            Err(_) => continue,
        }
    }

    match best {
        Some((value, theta)) => {
            let (cfg, noise) = theta_to_params(&theta, m)?;
            Ok(GpFit { noise_variance: noise, hyperparams: cfg, log_marginal: value, fallback: false })
        }
        None => {
            let cfg = KernelConfig::diagonal(s0, var_diag, vec![1.0; m])?;
            let value = evidence(x_fit.view(), &cfg, y_fit.view(), y_var, false)?.value;
            Ok(GpFit { noise_variance: y_var, hyperparams: cfg, log_marginal: value, fallback: true })
        }
    }
}

/// GP posterior mean fitted on one training set.
#[derive(Debug, Clone)]
pub struct GpRegressor {
    x_train: Array2<f64>,
    alpha: Array1<f64>,
    cfg: KernelConfig,
}

impl GpRegressor {
    pub fn fit(
        x: ArrayView2<f64>,
        y: ArrayView1<f64>,
        cfg: &KernelConfig,
        noise_variance: f64,
    ) -> Result<Self> {
        let n = x.nrows();
        if y.len() != n {
            return Err(SurvError::DimensionMismatch(format!(
                "outcomes have length {}, covariates have {} rows",
                y.len(),
                n
            )));
        }
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(SurvError::InvalidInput(format!(
                "noise variance must be positive, got {noise_variance}"
            )));
        }
        let gram = crate::kernel::gram(x, cfg)?;
        let mut ky = linalg::to_dmatrix(gram.k().view());
        for i in 0..n {
            ky[(i, i)] += noise_variance;
        }
        let (chol, _) = linalg::cholesky_jittered(&ky)?;
        let alpha = chol.solve(&linalg::to_dvector(y));
        Ok(Self {
            x_train: x.to_owned(),
            alpha: linalg::from_dvector(&alpha),
            cfg: cfg.clone(),
        })
    }

    pub fn predict(&self, x_new: ArrayView2<f64>) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(x_new.nrows());
        for (r, row) in x_new.rows().into_iter().enumerate() {
            let mut acc = 0.0;
            for (j, train_row) in self.x_train.rows().into_iter().enumerate() {
                acc += self.alpha[j] * crate::kernel::rbf(row, train_row, &self.cfg)?;
            }
            out[r] = acc;
        }
        Ok(out)
    }
}

/// Per-arm posterior means at every dataset row: column a-1 holds the arm-a
/// regression evaluated everywhere. Hyperparameters are shared across arms.
pub fn posterior_means(
    dataset: &CensoredDataset,
    outcomes: ArrayView1<f64>,
    cfg: &KernelConfig,
    noise_variance: f64,
) -> Result<Array2<f64>> {
    let n = dataset.n();
    if outcomes.len() != n {
        return Err(SurvError::DimensionMismatch(format!(
            "outcomes have length {}, dataset has {} rows",
            outcomes.len(),
            n
        )));
    }
    let mut muhat = Array2::zeros((n, dataset.m()));
    for a in 1..=dataset.m() {
        let idx = dataset.arm_indices(a);
        if idx.is_empty() {
            return Err(SurvError::EmptyArm(a));
        }
        let mut xa = Array2::zeros((idx.len(), dataset.d()));
        let mut ya = Array1::zeros(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            xa.row_mut(r).assign(&dataset.x().row(i));
            ya[r] = outcomes[i];
        }
        let reg = GpRegressor::fit(xa.view(), ya.view(), cfg, noise_variance)?;
        let preds = reg.predict(dataset.x())?;
        muhat.column_mut(a - 1).assign(&preds);
    }
    Ok(muhat)
}

fn ascend(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    mut theta: Array1<f64>,
    m: usize,
    opts: &TuneOpts,
) -> Result<(f64, Array1<f64>)> {
    let ev = eval_theta(x, y, &theta, m, true)?;
    let mut value = ev.value;
    let mut grad = ev.grad.expect("gradient requested");
    let mut step = 0.25;
    for _ in 0..opts.max_iter {
        let gmax = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
        if gmax < 1e-9 {
            break;
        }
        let dir = grad.mapv(|g| g / gmax);
        let mut accepted = None;
        let mut t = step;
        for _ in 0..25 {
            let mut trial = &theta + &(t * &dir);
            trial.mapv_inplace(|v| v.clamp(-LOG_BOUND, LOG_BOUND));
            if let Ok(ev) = eval_theta(x, y, &trial, m, false) {
                if ev.value.is_finite() && ev.value > value {
                    accepted = Some((trial, ev.value, t));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, trial_value, used)) = accepted else {
            break;
        };
        let improvement = trial_value - value;
        theta = trial;
        value = trial_value;
        step = (used * 1.5).min(2.0);
        if improvement < opts.tol * (1.0 + value.abs()) {
            break;
        }
        let ev = eval_theta(x, y, &theta, m, true)?;
        value = ev.value;
        grad = ev.grad.expect("gradient requested");
    }
    Ok((value, theta))
}
