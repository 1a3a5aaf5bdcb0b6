//! Small numerical helpers: simplex projection, power iteration, Cholesky with
//! a jitter ladder, and summary statistics.

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Result, SurvError};

/// Euclidean projection of `v` onto the scaled simplex `{w >= 0, sum w = total}`.
///
/// Sort-based algorithm, O(n log n).
pub fn project_simplex(v: ArrayView1<f64>, total: f64) -> Array1<f64> {
    let n = v.len();
    assert!(n > 0 && total > 0.0);
    let mut u: Vec<f64> = v.to_vec();
    u.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = (u[0] - total).max(0.0);
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - total) / (j as f64 + 1.0);
        if uj - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    v.mapv(|x| (x - theta).max(0.0))
}

/// Largest eigenvalue of a symmetric PSD operator given as a matvec closure.
pub fn power_iteration<F>(n: usize, matvec: F, iters: usize) -> f64
where
    F: Fn(&Array1<f64>) -> Array1<f64>,
{
    let mut x = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..iters {
        let y = matvec(&x);
        let norm = y.dot(&y).sqrt();
        if norm <= f64::MIN_POSITIVE {
            return 0.0;
        }
        x = y / norm;
        lambda = norm;
    }
    // One Rayleigh-quotient refinement for accuracy.
    let y = matvec(&x);
    let rq = x.dot(&y);
    if rq.is_finite() && rq > 0.0 {
        rq
    } else {
        lambda
    }
}

/// Cholesky factorization of `m + jitter*I`, escalating jitter through
/// 1e-10, 1e-8, 1e-6 times the mean diagonal before failing.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(Cholesky<f64, nalgebra::Dyn>, f64)> {
    let n = m.nrows();
    let mean_diag = (m.diagonal().sum() / n as f64).max(f64::MIN_POSITIVE);
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok((ch, 0.0));
    }
    for level in [1e-10, 1e-8, 1e-6] {
        let jitter = level * mean_diag;
        let mut mj = m.clone();
        for i in 0..n {
            mj[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(mj) {
            return Ok((ch, jitter));
        }
    }
    Err(SurvError::Linalg(format!(
        "Cholesky failed after jitter escalation up to {:.1e}",
        1e-6 * mean_diag
    )))
}

/// Convert an ndarray 2-D view into a nalgebra matrix.
pub fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Convert an ndarray 1-D view into a nalgebra vector.
pub fn to_dvector(a: ArrayView1<f64>) -> DVector<f64> {
    DVector::from_fn(a.len(), |i, _| a[i])
}

/// Convert a nalgebra vector into an ndarray 1-D array.
pub fn from_dvector(v: &DVector<f64>) -> Array1<f64> {
    Array1::from_iter(v.iter().copied())
}

/// Sample standard deviation of each column (ddof = 1; 0 when n < 2).
pub fn column_sds(x: ArrayView2<f64>) -> Array1<f64> {
    let n = x.nrows();
    let mut out = Array1::zeros(x.ncols());
    if n < 2 {
        return out;
    }
    for (k, col) in x.columns().into_iter().enumerate() {
        let mean = col.mean().unwrap();
        let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
        out[k] = (ss / (n as f64 - 1.0)).sqrt();
    }
    out
}

/// Median of a slice; mean of two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolation quantile (type 7), q in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty() && (0.0..=1.0).contains(&q));
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    }
}

/// Degree-2 polynomial feature expansion: [x, x_k^2, x_j*x_k for j<k].
pub fn quadratic_features(x: ArrayView2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let p = d + d + d * (d - 1) / 2;
    let mut out = Array2::zeros((n, p));
    for i in 0..n {
        let mut c = 0;
        for k in 0..d {
            out[[i, c]] = x[[i, k]];
            c += 1;
        }
        for k in 0..d {
            out[[i, c]] = x[[i, k]] * x[[i, k]];
            c += 1;
        }
        for j in 0..d {
            for k in (j + 1)..d {
                out[[i, c]] = x[[i, j]] * x[[i, k]];
                c += 1;
            }
        }
    }
    out
}
