//! Multinomial softmax-linear propensity model with ridge-penalized maximum
//! likelihood and probability clipping for inverse-propensity weighting.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::dataset::CensoredDataset;
use crate::error::{Result, SurvError};
use crate::linalg;

const RIDGE: f64 = 1e-4;

/// Feature map used by the propensity model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityFeatures {
    /// Intercept plus raw covariates.
    Linear,
    /// Intercept, raw covariates, squares, and pairwise products.
    Quadratic,
}

impl PropensityFeatures {
    fn expand(self, x: ArrayView2<f64>) -> Array2<f64> {
        let base = match self {
            PropensityFeatures::Linear => x.to_owned(),
            PropensityFeatures::Quadratic => linalg::quadratic_features(x),
        };
        let n = base.nrows();
        let mut z = Array2::ones((n, base.ncols() + 1));
        z.slice_mut(ndarray::s![.., 1..]).assign(&base);
        z
    }
}

/// Fitted multinomial propensity model; arm-1 coefficients are pinned to 0.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    /// m x (p+1), intercept first.
    beta: Array2<f64>,
    clip: f64,
    features: PropensityFeatures,
}

impl PropensityModel {
    pub fn from_beta(beta: Array2<f64>, clip: f64, features: PropensityFeatures) -> Result<Self> {
        let m = beta.nrows();
        if m < 2 {
            return Err(SurvError::InvalidInput("propensity model needs m >= 2 arms".into()));
        }
        validate_clip(clip, m)?;
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(SurvError::InvalidInput("non-finite propensity coefficient".into()));
        }
        Ok(Self { beta, clip, features })
    }

    pub fn beta(&self) -> ArrayView2<'_, f64> {
        self.beta.view()
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn features(&self) -> PropensityFeatures {
        self.features
    }

    pub fn m(&self) -> usize {
        self.beta.nrows()
    }

    /// Probability vector at one covariate row.
    pub fn predict_row(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let x2 = x.insert_axis(ndarray::Axis(0));
        let probs = self.predict(x2)?;
        Ok(probs.row(0).to_owned())
    }

    /// n x m matrix of propensities; rows sum to 1.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let z = self.features.expand(x);
        if z.ncols() != self.beta.ncols() {
            return Err(SurvError::DimensionMismatch(format!(
                "feature expansion has {} columns, coefficients expect {}",
                z.ncols(),
                self.beta.ncols()
            )));
        }
        let mut probs = z.dot(&self.beta.t());
        for mut row in probs.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        Ok(probs)
    }

    /// Clipped denominator max(M, phi) for one probability.
    pub fn clipped(&self, phi: f64) -> f64 {
        phi.max(self.clip)
    }
}

fn validate_clip(clip: f64, m: usize) -> Result<()> {
    let hi = 1.0 / m as f64;
    if !(clip > 0.0 && clip <= hi) {
        return Err(SurvError::InvalidInput(format!(
            "clip must lie in (0, {hi}], got {clip}"
        )));
    }
    Ok(())
}

/// Default clipping level, capped by the uniform probability.
pub fn default_clip(m: usize) -> f64 {
    (0.05f64).min(1.0 / m as f64)
}

/// Ridge-penalized multinomial ML fit with linear features and default clip.
pub fn fit_propensity(dataset: &CensoredDataset) -> Result<PropensityModel> {
    fit_propensity_with(dataset, PropensityFeatures::Linear, default_clip(dataset.m()))
}

/// Ridge-penalized multinomial maximum likelihood by Newton iterations with
/// step halving; arm-1 coefficients stay pinned to zero.
pub fn fit_propensity_with(
    dataset: &CensoredDataset,
    features: PropensityFeatures,
    clip: f64,
) -> Result<PropensityModel> {
    let m = dataset.m();
    validate_clip(clip, m)?;
    for a in 1..=m {
        if dataset.arm_indices(a).is_empty() {
            return Err(SurvError::EmptyArm(a));
        }
    }
    let z = features.expand(dataset.x());
    let n = z.nrows();
    let p = z.ncols();
    let free = (m - 1) * p;
    let arms = dataset.a();

    // beta rows 1..m are free; row 0 pinned at zero.
    let mut beta = Array2::zeros((m, p));
    let penalized_ll = |beta: &Array2<f64>| -> f64 {
        let mut ll = 0.0;
        for i in 0..n {
            let logits: Vec<f64> = (0..m).map(|b| z.row(i).dot(&beta.row(b))).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            ll += logits[arms[i] - 1] - lse;
        }
        ll - RIDGE * beta.iter().map(|v| v * v).sum::<f64>()
    };

    let mut ll = penalized_ll(&beta);
    for _ in 0..100 {
        // Probabilities under the current coefficients.
        let mut probs = z.dot(&beta.t());
        for mut row in probs.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        // Gradient over free rows b = 2..m.
        let mut grad = Array1::zeros(free);
        for b in 1..m {
            for k in 0..p {
                let mut g = 0.0;
                for i in 0..n {
                    let ind = if arms[i] - 1 == b { 1.0 } else { 0.0 };
                    g += (ind - probs[[i, b]]) * z[[i, k]];
                }
                grad[(b - 1) * p + k] = g - 2.0 * RIDGE * beta[[b, k]];
            }
        }
        let gmax = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
        if gmax < 1e-8 {
            break;
        }
        // Negative Hessian is PD thanks to the ridge term.
        let mut neg_h = nalgebra::DMatrix::zeros(free, free);
        for i in 0..n {
            for b in 1..m {
                for c in b..m {
                    let w = if b == c {
                        probs[[i, b]] * (1.0 - probs[[i, b]])
                    } else {
                        -probs[[i, b]] * probs[[i, c]]
                    };
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..p {
                        for l in 0..p {
                            let v = w * z[[i, k]] * z[[i, l]];
                            neg_h[((b - 1) * p + k, (c - 1) * p + l)] += v;
                            if b != c {
                                neg_h[((c - 1) * p + l, (b - 1) * p + k)] += v;
                            }
                        }
                    }
                }
            }
        }
        for j in 0..free {
            neg_h[(j, j)] += 2.0 * RIDGE;
        }
        let (chol, _) = linalg::cholesky_jittered(&neg_h)?;
        let gvec = nalgebra::DVector::from_iterator(free, grad.iter().cloned());
        let step = chol.solve(&gvec);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let mut trial = beta.clone();
            for b in 1..m {
                for k in 0..p {
                    trial[[b, k]] += t * step[(b - 1) * p + k];
                }
            }
            let trial_ll = penalized_ll(&trial);
            if trial_ll > ll {
                beta = trial;
                ll = trial_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    PropensityModel::from_beta(beta, clip, features)
}
