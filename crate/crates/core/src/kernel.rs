//! Mahalanobis RBF kernel and Gram-matrix assembly.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Result, SurvError};
use crate::linalg;

/// Metric of the Mahalanobis form. The diagonal variant is what tuning
/// produces; a full SPD matrix is accepted as a non-tuned preset.
#[derive(Debug, Clone)]
pub enum Metric {
    Diagonal(Array1<f64>),
    Full { matrix: Array2<f64>, inverse: Array2<f64> },
}

/// Kernel hyperparameters: bandwidth `scale`, metric, and per-arm norm
/// weights `gamma`.
#[derive(Debug, Clone)]
pub struct KernelConfig {
    scale: f64,
    metric: Metric,
    gamma: Vec<f64>,
}

impl KernelConfig {
    pub fn new(scale: f64, metric: Metric, gamma: Vec<f64>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(SurvError::InvalidInput(format!("kernel scale must be positive, got {scale}")));
        }
        if gamma.is_empty() || gamma.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(SurvError::InvalidInput("gamma must be nonempty and positive".into()));
        }
        match &metric {
            Metric::Diagonal(d) => {
                if d.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return Err(SurvError::NonPdMetric);
                }
            }
            Metric::Full { matrix, .. } => {
                let d = matrix.nrows();
                if matrix.ncols() != d {
                    return Err(SurvError::DimensionMismatch("metric must be square".into()));
                }
                for i in 0..d {
                    for j in 0..d {
                        if (matrix[[i, j]] - matrix[[j, i]]).abs() > 1e-10 {
                            return Err(SurvError::InvalidInput("metric not symmetric within 1e-10".into()));
                        }
                    }
                }
            }
        }
        Ok(Self { scale, metric, gamma })
    }

    /// Diagonal metric from entries, validating positivity.
    pub fn diagonal(scale: f64, diag: Array1<f64>, gamma: Vec<f64>) -> Result<Self> {
        Self::new(scale, Metric::Diagonal(diag), gamma)
    }

    /// Full SPD metric; the inverse is precomputed through Cholesky.
    pub fn full(scale: f64, matrix: Array2<f64>, gamma: Vec<f64>) -> Result<Self> {
        let dm = linalg::to_dmatrix(matrix.view());
        let ch = nalgebra::Cholesky::new(dm).ok_or(SurvError::NonPdMetric)?;
        let inv = ch.inverse();
        let d = matrix.nrows();
        let inverse = Array2::from_shape_fn((d, d), |(i, j)| inv[(i, j)]);
        Self::new(scale, Metric::Full { matrix, inverse }, gamma)
    }

    /// Default configuration for a dataset: unit scale, metric = diagonal of
    /// sample variances (unit fallback for constant columns), gamma all 1.
    pub fn default_for(x: ArrayView2<f64>, m: usize) -> Self {
        let sds = linalg::column_sds(x);
        let diag = sds.mapv(|s| if s > 0.0 { s * s } else { 1.0 });
        Self { scale: 1.0, metric: Metric::Diagonal(diag), gamma: vec![1.0; m] }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn with_gamma(mut self, gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() || gamma.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(SurvError::InvalidInput("gamma must be nonempty and positive".into()));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        match &self.metric {
            Metric::Diagonal(d) => d.len(),
            Metric::Full { matrix, .. } => matrix.nrows(),
        }
    }

    /// Squared Mahalanobis distance (x - y)' M^-1 (x - y).
    pub fn sq_dist(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
        match &self.metric {
            Metric::Diagonal(diag) => {
                let mut acc = 0.0;
                for k in 0..diag.len() {
                    let delta = x[k] - y[k];
                    acc += delta * delta / diag[k];
                }
                acc
            }
            Metric::Full { inverse, .. } => {
                let d = inverse.nrows();
                let mut acc = 0.0;
                for i in 0..d {
                    let di = x[i] - y[i];
                    for j in 0..d {
                        acc += di * inverse[[i, j]] * (x[j] - y[j]);
                    }
                }
                acc
            }
        }
    }

    /// Short parameter fingerprint recorded on Gram matrices and reports.
    pub fn fingerprint(&self) -> String {
        let metric = match &self.metric {
            Metric::Diagonal(d) => format!(
                "diag[{}]",
                d.iter().map(|v| format!("{v:.6e}")).collect::<Vec<_>>().join(",")
            ),
            Metric::Full { matrix, .. } => format!("full({}x{})", matrix.nrows(), matrix.ncols()),
        };
        format!(
            "s={:.6e};metric={};gamma=[{}]",
            self.scale,
            metric,
            self.gamma.iter().map(|v| format!("{v:.6e}")).collect::<Vec<_>>().join(",")
        )
    }
}

/// Mahalanobis RBF kernel value exp(-(x-y)' M^-1 (x-y) / s^2).
pub fn rbf(x: ArrayView1<f64>, y: ArrayView1<f64>, cfg: &KernelConfig) -> Result<f64> {
    if x.len() != cfg.dim() || y.len() != cfg.dim() {
        return Err(SurvError::DimensionMismatch(format!(
            "rbf inputs of length {}/{} against metric dimension {}",
            x.len(),
            y.len(),
            cfg.dim()
        )));
    }
    Ok((-cfg.sq_dist(x, y) / (cfg.scale * cfg.scale)).exp())
}

/// Kernel Gram matrix over the rows of `x`.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    k: Array2<f64>,
    fingerprint: String,
}

impl GramMatrix {
    pub fn k(&self) -> ArrayView2<'_, f64> {
        self.k.view()
    }

    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Assemble the Gram matrix K_ij = rbf(X_i, X_j).
pub fn gram(x: ArrayView2<f64>, cfg: &KernelConfig) -> Result<GramMatrix> {
    let n = x.nrows();
    if n == 0 {
        return Err(SurvError::EmptyDataset);
    }
    if x.ncols() != cfg.dim() {
        return Err(SurvError::DimensionMismatch(format!(
            "covariates have {} columns, metric dimension is {}",
            x.ncols(),
            cfg.dim()
        )));
    }
    let inv_s2 = 1.0 / (cfg.scale * cfg.scale);
    let mut k = Array2::zeros((n, n));
    let rows: Vec<(usize, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let mut row = vec![0.0; n - i];
            for j in i..n {
                row[j - i] = (-cfg.sq_dist(xi, x.row(j)) * inv_s2).exp();
            }
            (i, row)
        })
        .collect();
    for (i, row) in rows {
        for (offset, v) in row.into_iter().enumerate() {
            let j = i + offset;
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    Ok(GramMatrix { k, fingerprint: cfg.fingerprint() })
}
