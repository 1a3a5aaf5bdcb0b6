//! Synthetic data generators for the two benchmark settings, with attached
//! oracle models on the log-time scale.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{CensoredDataset, OracleModel, Scale};
use crate::error::Result;

// Gauss-Hermite rule for the weight exp(-z^2/2)/sqrt(2*pi), 41 nodes.
pub(crate) const GH_NODES: [f64; 41] = [
    -11.614937254337464,
    -10.647536786319334,
    -9.843433249157995,
    -9.123069907984473,
    -8.45609908326939,
    -7.82688200405387,
    -7.226022663732788,
    -6.647308470747189,
    -6.0863491648784755,
    -5.539884440458124,
    -5.0053966834041255,
    -4.480878331594007,
    -3.9646840280332665,
    -3.4554322177809933,
    -2.9519370163811907,
    -2.453159345907048,
    -1.9581707119772913,
    -1.4661254572959665,
    -0.9762387671800493,
    -0.4877685693194346,
    0.0,
    0.4877685693194346,
    0.9762387671800493,
    1.4661254572959665,
    1.9581707119772913,
    2.453159345907048,
    2.9519370163811907,
    3.4554322177809933,
    3.9646840280332665,
    4.480878331594007,
    5.0053966834041255,
    5.539884440458124,
    6.0863491648784755,
    6.647308470747189,
    7.226022663732788,
    7.82688200405387,
    8.45609908326939,
    9.123069907984473,
    9.843433249157995,
    10.647536786319334,
    11.614937254337464,
];

pub(crate) const GH_WEIGHTS: [f64; 41] = [
    2.2578639565831077e-30,
    8.308558938782659e-26,
    2.7468912285223205e-22,
    2.3263841455871947e-19,
    7.655982291966907e-17,
    1.2203348742027809e-14,
    1.0778183949358929e-12,
    5.7698534280921236e-11,
    1.994794756757345e-09,
    4.66734770810732e-08,
    7.658186077982326e-07,
    9.058608622432971e-06,
    7.89471931950462e-05,
    0.000515801444343186,
    0.002561642428649783,
    0.009777902738208262,
    0.028937211747934403,
    0.06684765935446638,
    0.12114891701151059,
    0.17284953105060138,
    0.19454502775360044,
    0.17284953105060138,
    0.12114891701151059,
    0.06684765935446638,
    0.028937211747934403,
    0.009777902738208262,
    0.002561642428649783,
    0.000515801444343186,
    7.89471931950462e-05,
    9.058608622432971e-06,
    7.658186077982326e-07,
    4.66734770810732e-08,
    1.994794756757345e-09,
    5.7698534280921236e-11,
    1.0778183949358929e-12,
    1.2203348742027809e-14,
    7.655982291966907e-17,
    2.3263841455871947e-19,
    2.7468912285223205e-22,
    8.308558938782659e-26,
    2.2578639565831077e-30,
];

/// E[min(c, Z)] for Z ~ N(mean, 1), by 41-node Gauss-Hermite quadrature.
pub fn truncated_normal_min_mean(mean: f64, c: f64) -> f64 {
    let mut acc = 0.0;
    for (node, w) in GH_NODES.iter().zip(GH_WEIGHTS.iter()) {
        acc += w * (mean + node).min(c);
    }
    acc
}

const RHO: f64 = 0.2;

/// Sample an n x d compound-symmetric standard-normal matrix
/// (unit variances, pairwise correlation RHO).
fn compound_normal(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let shared: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut x = Array2::zeros((n, d));
    let (a, b) = (RHO.sqrt(), (1.0 - RHO).sqrt());
    for i in 0..n {
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            x[[i, j]] = a * shared[i] + b * z;
        }
    }
    x
}

/// Draw an arm from softmax probabilities proportional to
/// exp(-||u - centers[a]||^2 / 2), returning the 1-based label.
fn sample_arm(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (k, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return k + 1;
        }
    }
    probs.len()
}

fn gaussian_mixture_propensity(u: &[f64], centers: &[Vec<f64>]) -> Vec<f64> {
    let logits: Vec<f64> = centers
        .iter()
        .map(|c| {
            let sq: f64 = u.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            -0.5 * sq
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn setting1_centers() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![-1.0, 0.0],
        vec![0.0, -1.0],
    ]
}

fn setting1_chi(a: usize) -> [f64; 2] {
    let theta = 2.0 * std::f64::consts::PI * a as f64 / 5.0;
    [theta.cos() / 2f64.sqrt(), -theta.sin() / 2f64.sqrt()]
}

/// Latent log-normal location for setting 1: e - exp(1 - 1/||(x1,x2) - chi_a||).
fn setting1_latent_mu(u: [f64; 2], a: usize) -> f64 {
    let chi = setting1_chi(a);
    let dist = ((u[0] - chi[0]).powi(2) + (u[1] - chi[1]).powi(2)).sqrt();
    std::f64::consts::E - (1.0 - 1.0 / dist).exp()
}

fn setting1_censor_mu(u: [f64; 2]) -> f64 {
    let s = (u[0] + u[1]).abs();
    2.5 - 0.5 * (1.0 - 1.0 / s).exp()
}

/// Setting-1 generator: 10-d correlated normals, 5 arms assigned by a
/// Gaussian-mixture propensity on the first two coordinates, log-normal
/// failure and censoring times, follow-up horizon tau = 3.5.
pub fn simulate_setting1(n: usize, seed: u64) -> Result<(CensoredDataset, OracleModel)> {
    let (d, m, tau) = (10usize, 5usize, 3.5f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = compound_normal(&mut rng, n, d);
    let centers = setting1_centers();
    let mut a = Vec::with_capacity(n);
    for i in 0..n {
        let probs = gaussian_mixture_propensity(&[x[[i, 0]], x[[i, 1]]], &centers);
        a.push(sample_arm(&mut rng, &probs));
    }
    let mut y = Array1::zeros(n);
    let mut delta = vec![false; n];
    for i in 0..n {
        let u = [x[[i, 0]], x[[i, 1]]];
        let eps_t: f64 = rng.sample(StandardNormal);
        let eps_c: f64 = rng.sample(StandardNormal);
        let t = tau.min((setting1_latent_mu(u, a[i]) + eps_t).exp());
        let c = (setting1_censor_mu(u) + 2f64.sqrt() * eps_c).exp();
        y[i] = t.min(c);
        delta[i] = t <= c;
    }
    let dataset = CensoredDataset::new(x, a, y, delta, tau, m)?;
    let log_tau = tau.ln();
    let mu = Arc::new(move |x: ArrayView1<f64>, a: usize| {
        truncated_normal_min_mean(setting1_latent_mu([x[0], x[1]], a), log_tau)
    });
    let centers = setting1_centers();
    let propensity = Arc::new(move |x: ArrayView1<f64>| {
        Array1::from(gaussian_mixture_propensity(&[x[0], x[1]], &centers))
    });
    Ok((dataset, OracleModel::new(mu, propensity, Scale::LogTime, m)))
}

fn setting2_centers() -> Vec<Vec<f64>> {
    vec![vec![-0.5, -0.5, 0.4], vec![0.0, 0.0, -0.75], vec![0.5, 0.5, 0.4]]
}

/// Latent log-normal location for setting 2 (prognostic + prescriptive parts).
fn setting2_latent_mu(x: ArrayView1<f64>, a: usize) -> f64 {
    let base = 0.2 - 0.6 * x[0] + 0.2 * x[1] + 0.4 * x[2];
    let arm = match a {
        1 => 0.2 * x[0] - 0.3 * x[1],
        2 => 0.1 + 0.1 * x[2],
        _ => -0.1 - 0.2 * x[0] + 0.4 * x[1] - 0.2 * x[2],
    };
    base + arm
}

fn setting2_censor_mu(x: ArrayView1<f64>, a: usize) -> f64 {
    let base = 0.6 - 0.4 * x[0] + 0.3 * x[1] + 0.8 * x[2];
    let arm = match a {
        1 => -0.1 * x[0] - 0.2 * x[1],
        2 => 0.1 * x[1],
        _ => -0.1 + 0.3 * x[1] - 0.4 * x[2],
    };
    base + arm
}

/// Setting-2 generator: uniform(-1,1) covariates with Gaussian-copula
/// dependence, 3 arms, linear log-normal failure and censoring models,
/// follow-up horizon tau = 1.5.
pub fn simulate_setting2(n: usize, seed: u64) -> Result<(CensoredDataset, OracleModel)> {
    let (d, m, tau) = (10usize, 3usize, 1.5f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::standard();
    let mut x = compound_normal(&mut rng, n, d);
    x.mapv_inplace(|v| 2.0 * normal.cdf(v) - 1.0);
    let centers = setting2_centers();
    let mut a = Vec::with_capacity(n);
    for i in 0..n {
        let probs =
            gaussian_mixture_propensity(&[x[[i, 0]], x[[i, 1]], x[[i, 2]]], &centers);
        a.push(sample_arm(&mut rng, &probs));
    }
    let mut y = Array1::zeros(n);
    let mut delta = vec![false; n];
    for i in 0..n {
        let eps_t: f64 = rng.sample(StandardNormal);
        let eps_c: f64 = rng.sample(StandardNormal);
        let t = tau.min((setting2_latent_mu(x.row(i), a[i]) + eps_t).exp());
        let c = (setting2_censor_mu(x.row(i), a[i]) + eps_c).exp();
        y[i] = t.min(c);
        delta[i] = t <= c;
    }
    let dataset = CensoredDataset::new(x, a, y, delta, tau, m)?;
    let log_tau = tau.ln();
    let mu = Arc::new(move |x: ArrayView1<f64>, a: usize| {
        truncated_normal_min_mean(setting2_latent_mu(x, a), log_tau)
    });
    let centers = setting2_centers();
    let propensity = Arc::new(move |x: ArrayView1<f64>| {
        Array1::from(gaussian_mixture_propensity(&[x[0], x[1], x[2]], &centers))
    });
    Ok((dataset, OracleModel::new(mu, propensity, Scale::LogTime, m)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::distribution::Continuous;

    #[test]
    fn gh_rule_matches_closed_form_truncated_mean() {
        // E[min(c, Z)] = m*Phi(c-m) + c*(1-Phi(c-m)) - phi(c-m) for Z ~ N(m, 1).
        let normal = Normal::standard();
        for (m, c) in [(-1.0, 1.2527629684953681), (0.2, 0.3), (1.0, 0.0), (2.7, 1.25)] {
            let a = c - m;
            let closed = m * normal.cdf(a) + c * (1.0 - normal.cdf(a)) - normal.pdf(a);
            let gh = truncated_normal_min_mean(m, c);
            assert_abs_diff_eq!(gh, closed, epsilon = 5e-3);
        }
        // Far below the cap the rule is exact: E[min(c, Z)] = m.
        assert_abs_diff_eq!(truncated_normal_min_mean(0.0, 1e6), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn generators_are_deterministic() {
        let (d1, _) = simulate_setting1(64, 9).unwrap();
        let (d2, _) = simulate_setting1(64, 9).unwrap();
        assert_eq!(d1.x(), d2.x());
        assert_eq!(d1.a(), d2.a());
        assert_eq!(d1.y(), d2.y());
        assert_eq!(d1.delta(), d2.delta());
        let (e1, _) = simulate_setting2(64, 9).unwrap();
        let (e2, _) = simulate_setting2(64, 9).unwrap();
        assert_eq!(e1.x(), e2.x());
        assert_eq!(e1.y(), e2.y());
    }

    #[test]
    fn setting1_shape_and_constants() {
        let (ds, oracle) = simulate_setting1(200, 3).unwrap();
        assert_eq!(ds.d(), 10);
        assert_eq!(ds.m(), 5);
        assert_abs_diff_eq!(ds.tau(), 3.5);
        assert_eq!(oracle.scale(), Scale::LogTime);
        assert!(ds.y().iter().all(|&v| (0.0..=3.5).contains(&v)));
        for i in 0..ds.n() {
            if ds.y()[i] >= 3.5 {
                assert!(ds.delta()[i]);
            }
        }
    }

    #[test]
    fn setting1_latent_mean_attains_e_at_center() {
        for a in 1..=5 {
            let chi = setting1_chi(a);
            assert_abs_diff_eq!(setting1_latent_mu(chi, a), std::f64::consts::E, epsilon = 1e-12);
        }
    }

    #[test]
    fn setting1_compound_symmetry_and_overlap() {
        let (ds, oracle) = simulate_setting1(20000, 17).unwrap();
        let x = ds.x();
        // Pairwise correlation of two coordinates approximately RHO.
        let (c1, c2) = (x.column(3), x.column(7));
        let (m1, m2) = (c1.mean().unwrap(), c2.mean().unwrap());
        let cov: f64 = c1
            .iter()
            .zip(c2.iter())
            .map(|(a, b)| (a - m1) * (b - m2))
            .sum::<f64>()
            / (x.nrows() as f64 - 1.0);
        let sds = crate::linalg::column_sds(x);
        assert_abs_diff_eq!(cov / (sds[3] * sds[7]), RHO, epsilon = 0.03);
        // Strict overlap of the true propensity on the sample.
        let mut min_p = f64::INFINITY;
        for i in 0..200 {
            let p = oracle.propensity(x.row(i));
            assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
            min_p = min_p.min(p.iter().cloned().fold(f64::INFINITY, f64::min));
        }
        assert!(min_p > 1e-6);
    }

    #[test]
    fn setting2_marginals_in_unit_interval_and_argmax_at_origin() {
        let (ds, oracle) = simulate_setting2(5000, 21).unwrap();
        assert_eq!(ds.m(), 3);
        assert_abs_diff_eq!(ds.tau(), 1.5);
        assert!(ds.x().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        // Latent means at x = 0 are (0.2, 0.3, 0.1): arm 2 is oracle-optimal.
        let zero = Array1::zeros(10);
        assert_abs_diff_eq!(setting2_latent_mu(zero.view(), 1), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(setting2_latent_mu(zero.view(), 2), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(setting2_latent_mu(zero.view(), 3), 0.1, epsilon = 1e-15);
        let mu: Vec<f64> = (1..=3).map(|a| oracle.mu(zero.view(), a)).collect();
        assert!(mu[1] > mu[0] && mu[1] > mu[2]);
        let star = oracle.optimal_policy(Array2::zeros((1, 10)).view());
        assert_abs_diff_eq!(star.prob(0, 2), 1.0);
    }

    use ndarray::Array2;
}
