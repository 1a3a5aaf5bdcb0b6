//! Worst-case-CMSE balance objective and the simplex-constrained QP that
//! produces balanced policy-evaluation weights.
//!
//! The objective over weights w in {w >= 0, sum w = n} is
//! bias(w)^2 + (1/n^2) w' Lambda w, with
//! bias(w)^2 = (1/n^2) sum_a gamma_a^2 v_a' K_a v_a and
//! v_{a,i} = w_i 1[A_i = a] - pi_a(X_i). Expanding the quadratic gives
//! n^2 f(w) = w'Qw - 2c'w + const + w'Lambda*w with Q supported on same-arm
//! pairs, which the solver exploits through per-arm Gram blocks.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::dataset::{CensoredDataset, PolicyMatrix};
use crate::error::{Result, SurvError};
use crate::estimators::{
    dr_estimator, weighted_estimator, EstimatorKind, EvalReport, WeightVector,
};
use crate::gp::GpFit;
use crate::kernel::{gram, GramMatrix, KernelConfig};
use crate::linalg;
use crate::survival::ImputedOutcomes;

/// Assembled data for the worst-case CMSE objective.
#[derive(Debug, Clone)]
pub struct BalanceObjective {
    grams: Vec<Arc<GramMatrix>>,
    gamma: Vec<f64>,
    lambda: Array1<f64>,
    policy: PolicyMatrix,
    arms: Vec<usize>,
    arm_idx: Vec<Vec<usize>>,
    /// Per-arm diagonal Gram blocks K_a[idx_a, idx_a].
    blocks: Vec<Array2<f64>>,
    /// c_i = gamma_{A_i}^2 (K_{A_i} pi_{A_i})_i.
    c: Array1<f64>,
    /// sum_a gamma_a^2 pi_a' K_a pi_a.
    const_term: f64,
}

impl BalanceObjective {
    /// One Gram matrix shared by every arm.
    pub fn new(
        gram: GramMatrix,
        gamma: Vec<f64>,
        lambda_diag: Array1<f64>,
        policy: PolicyMatrix,
        arms: Vec<usize>,
    ) -> Result<Self> {
        let shared = Arc::new(gram);
        let m = gamma.len();
        Self::with_per_arm_grams(vec![shared; m], gamma, lambda_diag, policy, arms)
    }

    /// Distinct per-arm Gram matrices (Arc clones may share storage).
    pub fn with_per_arm_grams(
        grams: Vec<Arc<GramMatrix>>,
        gamma: Vec<f64>,
        lambda_diag: Array1<f64>,
        policy: PolicyMatrix,
        arms: Vec<usize>,
    ) -> Result<Self> {
        let n = arms.len();
        let m = gamma.len();
        if n == 0 {
            return Err(SurvError::EmptyDataset);
        }
        if m < 1 || grams.len() != m {
            return Err(SurvError::DimensionMismatch(format!(
                "{} gram matrices for {m} arms",
                grams.len()
            )));
        }
        if policy.n() != n || policy.m() != m {
            return Err(SurvError::DimensionMismatch(format!(
                "policy is {}x{}, expected {n}x{m}",
                policy.n(),
                policy.m()
            )));
        }
        if lambda_diag.len() != n {
            return Err(SurvError::DimensionMismatch(format!(
                "lambda diagonal has {} entries for n = {n}",
                lambda_diag.len()
            )));
        }
        if lambda_diag.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(SurvError::InvalidInput(
                "lambda diagonal must be strictly positive".into(),
            ));
        }
        if gamma.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(SurvError::InvalidInput("gamma entries must be positive".into()));
        }
        for (a, g) in grams.iter().enumerate() {
            if g.k().nrows() != n {
                return Err(SurvError::DimensionMismatch(format!(
                    "gram for arm {} is {}x{}, expected {n}x{n}",
                    a + 1,
                    g.k().nrows(),
                    g.k().ncols()
                )));
            }
        }
        for (row, &label) in arms.iter().enumerate() {
            if label < 1 || label > m {
                return Err(SurvError::ArmLabel { row, label: label as i64, m });
            }
        }

        let mut arm_idx = vec![Vec::new(); m];
        for (i, &a) in arms.iter().enumerate() {
            arm_idx[a - 1].push(i);
        }
        let mut blocks = Vec::with_capacity(m);
        for a in 0..m {
            let idx = &arm_idx[a];
            let k = grams[a].k();
            let mut block = Array2::zeros((idx.len(), idx.len()));
            for (r, &i) in idx.iter().enumerate() {
                for (s, &j) in idx.iter().enumerate() {
                    block[[r, s]] = k[[i, j]];
                }
            }
            blocks.push(block);
        }
        let mut c = Array1::zeros(n);
        let mut const_term = 0.0;
        for a in 0..m {
            let k = grams[a].k();
            let pi_a = policy.as_array().column(a);
            let t = k.dot(&pi_a);
            let g2 = gamma[a] * gamma[a];
            for &i in &arm_idx[a] {
                c[i] = g2 * t[i];
            }
            const_term += g2 * pi_a.dot(&t);
        }
        Ok(Self { grams, gamma, lambda: lambda_diag, policy, arms, arm_idx, blocks, c, const_term })
    }

    pub fn n(&self) -> usize {
        self.arms.len()
    }

    pub fn m(&self) -> usize {
        self.gamma.len()
    }

    pub fn policy(&self) -> &PolicyMatrix {
        &self.policy
    }

    pub fn arms(&self) -> &[usize] {
        &self.arms
    }

    pub fn lambda(&self) -> ArrayView1<'_, f64> {
        self.lambda.view()
    }

    /// (Q + Lambda) w using the per-arm blocks.
    fn h_matvec(&self, w: ArrayView1<f64>) -> Array1<f64> {
        let mut out = &self.lambda * &w;
        for a in 0..self.m() {
            let idx = &self.arm_idx[a];
            if idx.is_empty() {
                continue;
            }
            let wa = Array1::from_iter(idx.iter().map(|&i| w[i]));
            let ua = self.blocks[a].dot(&wa);
            let g2 = self.gamma[a] * self.gamma[a];
            for (r, &i) in idx.iter().enumerate() {
                out[i] += g2 * ua[r];
            }
        }
        out
    }

    /// n^2-scaled quadratic F(w) = w'(Q+Lambda)w - 2c'w.
    fn quad_value(&self, w: ArrayView1<f64>) -> f64 {
        let hw = self.h_matvec(w);
        w.dot(&hw) - 2.0 * self.c.dot(&w)
    }

    /// Gradient of F: 2(Q+Lambda)w - 2c.
    fn quad_grad(&self, w: ArrayView1<f64>) -> Array1<f64> {
        let mut g = self.h_matvec(w);
        g.mapv_inplace(|v| 2.0 * v);
        &g - &(2.0 * &self.c)
    }

    /// CMSE value from the n^2-scaled quadratic.
    fn cmse_from_quad(&self, quad: f64) -> f64 {
        let n2 = (self.n() as f64) * (self.n() as f64);
        (quad + self.const_term) / n2
    }
}

/// Closed-form worst-case bias sqrt(sum_a gamma_a^2 v_a' K_a v_a) / n.
pub fn worst_case_bias(weights: &WeightVector, obj: &BalanceObjective) -> Result<f64> {
    let n = obj.n();
    if weights.len() != n {
        return Err(SurvError::DimensionMismatch(format!(
            "{} weights for n = {n}",
            weights.len()
        )));
    }
    let w = weights.w();
    let mut total = 0.0;
    for a in 0..obj.m() {
        let k = obj.grams[a].k();
        let mut v = Array1::zeros(n);
        for i in 0..n {
            let indicator = if obj.arms[i] == a + 1 { w[i] } else { 0.0 };
            v[i] = indicator - obj.policy.as_array()[[i, a]];
        }
        let kv = k.dot(&v);
        total += obj.gamma[a] * obj.gamma[a] * v.dot(&kv);
    }
    Ok(total.max(0.0).sqrt() / n as f64)
}

/// Objective triple (objective, bias, variance_term) with
/// objective = bias^2 + variance_term.
pub fn cmse_objective(weights: &WeightVector, obj: &BalanceObjective) -> Result<(f64, f64, f64)> {
    let bias = worst_case_bias(weights, obj)?;
    let n2 = (obj.n() as f64) * (obj.n() as f64);
    let variance: f64 = weights
        .w()
        .iter()
        .zip(obj.lambda.iter())
        .map(|(&wi, &li)| li * wi * wi)
        .sum::<f64>()
        / n2;
    Ok((bias * bias + variance, bias, variance))
}

/// Solver controls for [`balanced_weights_with`].
#[derive(Debug, Clone)]
pub struct SolveOpts {
    /// Relative objective-decrease stall tolerance.
    pub tol: f64,
    /// KKT stationarity tolerance on the CMSE-scale gradient.
    pub kkt_tol: f64,
    pub max_iter: usize,
    /// Problem size above which Frank-Wolfe replaces projected gradient.
    pub fw_threshold: usize,
    /// Record the per-iteration CMSE objective.
    pub record_trace: bool,
}

impl Default for SolveOpts {
    fn default() -> Self {
        Self { tol: 1e-8, kkt_tol: 1e-6, max_iter: 50_000, fw_threshold: 5_000, record_trace: false }
    }
}

/// Outcome of the balanced-weights solve.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub weights: WeightVector,
    pub converged: bool,
    pub iterations: usize,
    /// Worst KKT violation at the returned iterate (CMSE gradient scale).
    pub kkt_residual: f64,
    /// CMSE objective at the returned iterate.
    pub objective: f64,
    pub trace: Option<Vec<f64>>,
}

/// Support threshold for the KKT check.
const SUPPORT_EPS: f64 = 1e-10;

fn kkt_residual(obj: &BalanceObjective, w: ArrayView1<f64>) -> f64 {
    let n = obj.n();
    let n2 = (n as f64) * (n as f64);
    let grad = obj.quad_grad(w).mapv(|v| v / n2);
    let support: Vec<usize> = (0..n).filter(|&i| w[i] > SUPPORT_EPS).collect();
    if support.is_empty() {
        return f64::INFINITY;
    }
    let nu = support.iter().map(|&i| grad[i]).sum::<f64>() / support.len() as f64;
    let mut worst = 0.0f64;
    for i in 0..n {
        if w[i] > SUPPORT_EPS {
            worst = worst.max((grad[i] - nu).abs());
        } else {
            worst = worst.max(nu - grad[i]);
        }
    }
    worst
}

/// Minimize the CMSE objective over weights summing to n with the default
/// options (stall tolerance supplied by the caller).
pub fn balanced_weights(obj: &BalanceObjective, tol: f64) -> Result<SolveResult> {
    let opts = SolveOpts { tol, ..SolveOpts::default() };
    balanced_weights_with(obj, &opts, None)
}

/// Full-control solve; `warm` seeds the iteration when provided.
pub fn balanced_weights_with(
    obj: &BalanceObjective,
    opts: &SolveOpts,
    warm: Option<ArrayView1<f64>>,
) -> Result<SolveResult> {
    if !(opts.tol > 0.0) {
        return Err(SurvError::InvalidInput(format!("tol must be positive, got {}", opts.tol)));
    }
    let n = obj.n();
    let total = n as f64;
    let start = match warm {
        Some(w0) => {
            if w0.len() != n {
                return Err(SurvError::DimensionMismatch(format!(
                    "warm start has {} entries for n = {n}",
                    w0.len()
                )));
            }
            linalg::project_simplex(w0, total)
        }
        None => Array1::ones(n),
    };
    if n > opts.fw_threshold {
        solve_frank_wolfe(obj, opts, start)
    } else {
        solve_projected_gradient(obj, opts, start)
    }
}

/// Accelerated projected gradient with a monotone safeguard: the FISTA
/// candidate is kept only when it does not increase the objective, otherwise
/// a plain projected-gradient step from the current iterate is used and the
/// momentum restarts.
fn solve_projected_gradient(
    obj: &BalanceObjective,
    opts: &SolveOpts,
    start: Array1<f64>,
) -> Result<SolveResult> {
    let n = obj.n();
    let total = n as f64;
    let lipschitz = {
        let top = linalg::power_iteration(n, |v| obj.h_matvec(v.view()).mapv(|x| 2.0 * x), 60);
        (top * 1.05).max(f64::MIN_POSITIVE)
    };
    let step = 1.0 / lipschitz;

    let mut w = start;
    let mut f_w = obj.quad_value(w.view());
    let mut w_prev = w.clone();
    let mut t_prev = 1.0f64;
    let mut t = 1.0f64;
    let mut trace = opts.record_trace.then(|| vec![obj.cmse_from_quad(f_w)]);

    let mut best_f = f_w;
    let mut best_w = w.clone();
    let mut iterations = 0;
    let mut converged = false;
    let mut last_kkt = f64::INFINITY;
    // Stall window: no relative improvement across this many iterations ends
    // the loop early (the iterate is already stationary to working precision).
    let mut stall_anchor = f_w;
    let mut stall_iter = 0usize;

    while iterations < opts.max_iter {
        iterations += 1;
        let beta = (t_prev - 1.0) / t;
        let y = &w + &((&w - &w_prev).mapv(|v| beta * v));
        let grad_y = obj.quad_grad(y.view());
        let cand = linalg::project_simplex((&y - &grad_y.mapv(|g| g * step)).view(), total);
        let f_cand = obj.quad_value(cand.view());

        let (w_next, f_next) = if f_cand <= f_w {
            (cand, f_cand)
        } else {
            // Monotone fallback from w itself; restart momentum.
            t_prev = 1.0;
            t = 1.0;
            let grad_w = obj.quad_grad(w.view());
            let fallback =
                linalg::project_simplex((&w - &grad_w.mapv(|g| g * step)).view(), total);
            let f_fb = obj.quad_value(fallback.view());
            if f_fb <= f_w {
                (fallback, f_fb)
            } else {
                (w.clone(), f_w)
            }
        };
        assert!(
            f_next <= f_w + 1e-9 * (1.0 + f_w.abs()),
            "objective must not increase: {f_w} -> {f_next}"
        );

        w_prev = w;
        w = w_next;
        f_w = f_next;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        t_prev = t;
        t = t_next;

        if f_w < best_f {
            best_f = f_w;
            best_w = w.clone();
        }
        if let Some(tr) = trace.as_mut() {
            tr.push(obj.cmse_from_quad(f_w));
        }

        if iterations % 5 == 0 || iterations == opts.max_iter {
            last_kkt = kkt_residual(obj, w.view());
            if last_kkt <= opts.kkt_tol {
                converged = true;
                best_f = f_w;
                best_w = w.clone();
                break;
            }
        }
        if stall_anchor - f_w >= opts.tol * (1.0 + stall_anchor.abs()) {
            stall_anchor = f_w;
            stall_iter = iterations;
        } else if iterations - stall_iter >= 200 {
            break;
        }
    }
    if !converged {
        last_kkt = kkt_residual(obj, best_w.view());
        converged = last_kkt <= opts.kkt_tol;
    }

    Ok(SolveResult {
        weights: WeightVector::new(rescale_sum(best_w, total))?,
        converged,
        iterations,
        kkt_residual: last_kkt,
        objective: obj.cmse_from_quad(best_f),
        trace,
    })
}

/// Frank-Wolfe with exact line search for large n, avoiding the projection's
/// full-vector sort and keeping memory at the per-arm blocks.
fn solve_frank_wolfe(
    obj: &BalanceObjective,
    opts: &SolveOpts,
    start: Array1<f64>,
) -> Result<SolveResult> {
    let n = obj.n();
    let total = n as f64;
    let n2 = total * total;
    let mut w = start;
    let mut f_w = obj.quad_value(w.view());
    let mut trace = opts.record_trace.then(|| vec![obj.cmse_from_quad(f_w)]);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        let grad = obj.quad_grad(w.view());
        let j = grad
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite gradient"))
            .map(|(i, _)| i)
            .expect("nonempty gradient");
        // Direction toward the vertex total * e_j.
        let mut d = w.mapv(|v| -v);
        d[j] += total;
        let gap = -grad.dot(&d);
        if gap / n2 <= opts.kkt_tol {
            converged = true;
            break;
        }
        let hd = obj.h_matvec(d.view());
        let curvature = 2.0 * d.dot(&hd);
        let t_star = if curvature > 0.0 { (gap / curvature).clamp(0.0, 1.0) } else { 1.0 };
        if t_star == 0.0 {
            break;
        }
        w = &w + &d.mapv(|v| t_star * v);
        let f_next = obj.quad_value(w.view());
        assert!(
            f_next <= f_w + 1e-9 * (1.0 + f_w.abs()),
            "objective must not increase: {f_w} -> {f_next}"
        );
        f_w = f_next;
        if let Some(tr) = trace.as_mut() {
            tr.push(obj.cmse_from_quad(f_w));
        }
    }
    let kkt = kkt_residual(obj, w.view());
    Ok(SolveResult {
        weights: WeightVector::new(rescale_sum(w, total))?,
        converged,
        iterations,
        kkt_residual: kkt,
        objective: obj.cmse_from_quad(f_w),
        trace,
    })
}

/// Exact renormalization absorbing projection round-off so the weight-vector
/// invariant (sum = n within 1e-8) always holds.
fn rescale_sum(mut w: Array1<f64>, total: f64) -> Array1<f64> {
    let sum: f64 = w.sum();
    if sum > 0.0 && (sum - total).abs() > 1e-12 {
        let scale = total / sum;
        w.mapv_inplace(|v| v * scale);
    }
    w
}

/// Evaluation mode for [`balanced_estimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    Weighted,
    Dr,
}

/// End-to-end balanced policy evaluation: assemble the objective with
/// Lambda = sigma-hat^2 I, solve for weights, and apply the weighted or
/// doubly robust estimator to the imputed outcomes.
pub fn balanced_estimate(
    dataset: &CensoredDataset,
    policy: &PolicyMatrix,
    imputed: &ImputedOutcomes,
    cfg: &KernelConfig,
    gpfit: &GpFit,
    mode: BalanceMode,
    muhat: Option<ArrayView2<f64>>,
) -> Result<EvalReport> {
    dataset.check_evaluable()?;
    let n = dataset.n();
    if imputed.yhat.len() != n {
        return Err(SurvError::DimensionMismatch(format!(
            "imputed outcomes have {} entries for n = {n}",
            imputed.yhat.len()
        )));
    }
    let gram = gram(dataset.x(), cfg)?;
    let lambda = Array1::from_elem(n, gpfit.noise_variance);
    let obj = BalanceObjective::new(
        gram,
        cfg.gamma().to_vec(),
        lambda,
        policy.clone(),
        dataset.a().to_vec(),
    )?;
    let solve = balanced_weights(&obj, 1e-8)?;
    let (objective, bias, variance) = cmse_objective(&solve.weights, &obj)?;
    let base = match mode {
        BalanceMode::Weighted => weighted_estimator(&solve.weights, imputed.yhat.view())?,
        BalanceMode::Dr => {
            let muhat = muhat.ok_or_else(|| {
                SurvError::InvalidInput("doubly robust mode requires muhat".into())
            })?;
            dr_estimator(policy, &solve.weights, muhat, imputed.yhat.view(), dataset.a())?
        }
    };
    Ok(EvalReport {
        estimate: base.estimate,
        worst_case_bias: bias,
        variance_term: variance,
        objective,
        weights: Some(solve.weights),
        estimator_kind: match mode {
            BalanceMode::Weighted => EstimatorKind::Balanced,
            BalanceMode::Dr => EstimatorKind::BalancedDr,
        },
        converged: solve.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn identity_gram(n: usize) -> GramMatrix {
        GramMatrix::from_raw(Array2::eye(n), "test-identity".into()).unwrap()
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        n: usize,
        m: usize,
    ) -> (BalanceObjective, Array2<f64>) {
        let x = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let cfg = KernelConfig::diagonal(
            rng.gen_range(0.5..2.0),
            array![1.0, 1.0],
            vec![1.0; m],
        )
        .unwrap();
        let k = gram(x.view(), &cfg).unwrap();
        let gamma: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..2.0)).collect();
        let lambda = Array1::from_shape_fn(n, |_| rng.gen_range(0.2..2.0));
        let mut pi = Array2::zeros((n, m));
        for i in 0..n {
            let mut row: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            for a in 0..m {
                pi[[i, a]] = row[a];
            }
        }
        let arms: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=m)).collect();
        let obj = BalanceObjective::new(
            k,
            gamma,
            lambda,
            PolicyMatrix::new(pi.clone()).unwrap(),
            arms,
        )
        .unwrap();
        (obj, pi)
    }

    #[test]
    fn quadratic_decomposition_matches_direct_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.gen_range(3..20);
            let m = rng.gen_range(2..4);
            let (obj, _) = random_instance(&mut rng, n, m);
            let raw = Array1::from_shape_fn(n, |_| rng.gen_range(0.01..1.0));
            let w = WeightVector::from_raw(raw).unwrap();
            let bias = worst_case_bias(&w, &obj).unwrap();
            let quad = obj.quad_value(w.w());
            let n2 = (n * n) as f64;
            let qform_bias2 =
                (quad + obj.const_term - w.w().iter().zip(obj.lambda.iter()).map(|(a, b)| a * a * b).sum::<f64>())
                    / n2;
            assert_abs_diff_eq!(bias * bias, qform_bias2.max(0.0), epsilon = 1e-10);
        }
    }

    #[test]
    fn bias_zero_when_weighted_indicators_match_policy() {
        let pi = PolicyMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let obj = BalanceObjective::new(
            identity_gram(2),
            vec![1.0, 1.0],
            Array1::ones(2),
            pi,
            vec![1, 2],
        )
        .unwrap();
        let w = WeightVector::new(array![1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(worst_case_bias(&w, &obj).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn bias_frozen_single_arm_example() {
        // Both units on arm 1, pi = 1/2 everywhere, K = I, gamma = 1:
        // v_1 = (1, 0), v_2 = (-1/2, -1/2), bias = sqrt(1.5)/2.
        let pi = PolicyMatrix::new(array![[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let obj = BalanceObjective::new(
            identity_gram(2),
            vec![1.0, 1.0],
            Array1::ones(2),
            pi,
            vec![1, 1],
        )
        .unwrap();
        let w = WeightVector::new(array![1.5, 0.5]).unwrap();
        assert_abs_diff_eq!(
            worst_case_bias(&w, &obj).unwrap(),
            0.6123724356957945,
            epsilon = 1e-15
        );
    }

    #[test]
    fn bias_upper_bounds_random_unit_norm_functionals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10;
        let m = 2;
        let x = Array2::from_shape_fn((n, 2), |_| rng.gen_range(-1.0..1.0));
        let cfg = KernelConfig::diagonal(1.0, array![1.0, 1.0], vec![1.3, 0.7]).unwrap();
        let k = gram(x.view(), &cfg).unwrap();
        let kmat = k.k().to_owned();
        let gamma = vec![1.3, 0.7];
        let (obj, pi) = {
            let arms: Vec<usize> = (0..n).map(|i| 1 + i % m).collect();
            let mut pi = Array2::zeros((n, m));
            for i in 0..n {
                let p = rng.gen_range(0.2..0.8);
                pi[[i, 0]] = p;
                pi[[i, 1]] = 1.0 - p;
            }
            (
                BalanceObjective::new(
                    k,
                    gamma.clone(),
                    Array1::ones(n),
                    PolicyMatrix::new(pi.clone()).unwrap(),
                    arms.clone(),
                )
                .unwrap(),
                pi,
            )
        };
        let raw = Array1::from_shape_fn(n, |_| rng.gen_range(0.01..1.0));
        let w = WeightVector::from_raw(raw).unwrap();
        let bound = worst_case_bias(&w, &obj).unwrap();

        for _ in 0..200 {
            // f_a = sum_j alpha_{a,j} K(x_j, .), product norm
            // sqrt(sum_a alpha_a' K alpha_a / gamma_a^2) rescaled to 1.
            let alphas: Vec<Array1<f64>> = (0..m)
                .map(|_| Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0)))
                .collect();
            let mut norm2 = 0.0;
            for a in 0..m {
                let ka = kmat.dot(&alphas[a]);
                norm2 += alphas[a].dot(&ka) / (gamma[a] * gamma[a]);
            }
            let norm = norm2.sqrt();
            // B(W, pi; f) = (1/n) sum_a sum_i v_{a,i} f_a(x_i).
            let mut b = 0.0;
            for a in 0..m {
                let fa = kmat.dot(&alphas[a]);
                for i in 0..n {
                    let v = if obj.arms[i] == a + 1 { w.w()[i] } else { 0.0 } - pi[[i, a]];
                    b += v * fa[i] / norm;
                }
            }
            b /= n as f64;
            assert!(
                b.abs() <= bound + 1e-10,
                "functional bias {} exceeds bound {bound}",
                b.abs()
            );
        }
    }

    #[test]
    fn bias_is_homogeneous_in_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (obj, _) = random_instance(&mut rng, 8, 3);
        let doubled = BalanceObjective::with_per_arm_grams(
            obj.grams.clone(),
            obj.gamma.iter().map(|g| 2.0 * g).collect(),
            obj.lambda.clone(),
            obj.policy.clone(),
            obj.arms.clone(),
        )
        .unwrap();
        let w = WeightVector::from_raw(Array1::from_shape_fn(8, |_| rng.gen_range(0.1..1.0)))
            .unwrap();
        let b1 = worst_case_bias(&w, &obj).unwrap();
        let b2 = worst_case_bias(&w, &doubled).unwrap();
        assert_abs_diff_eq!(b2, 2.0 * b1, epsilon = 1e-12);
    }

    #[test]
    fn cmse_identity_and_uniform_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 9;
        let (mut obj, _) = random_instance(&mut rng, n, 2);
        obj.lambda = Array1::ones(n);
        let w = WeightVector::new(Array1::ones(n)).unwrap();
        let (objective, bias, variance) = cmse_objective(&w, &obj).unwrap();
        assert_abs_diff_eq!(variance, 1.0 / n as f64, epsilon = 1e-15);
        assert_abs_diff_eq!(objective, bias * bias + variance, epsilon = 1e-15);
    }

    #[test]
    fn cmse_three_point_hand_computation() {
        let kmat = array![[1.0, 0.5, 0.2], [0.5, 1.0, 0.3], [0.2, 0.3, 1.0]];
        let k = GramMatrix::from_raw(kmat.clone(), "hand".into()).unwrap();
        let pi = array![[0.7, 0.3], [0.4, 0.6], [0.5, 0.5]];
        let lambda = array![0.1, 0.2, 0.3];
        let gamma = [1.0, 1.5];
        let arms = vec![1usize, 2, 1];
        let obj = BalanceObjective::new(
            k,
            gamma.to_vec(),
            lambda.clone(),
            PolicyMatrix::new(pi.clone()).unwrap(),
            arms.clone(),
        )
        .unwrap();
        let wv = array![1.2, 0.9, 0.9];
        let w = WeightVector::new(wv.clone()).unwrap();

        // Independent route: explicit v vectors and dense quadratic forms.
        let mut bias2 = 0.0;
        for a in 0..2 {
            let mut v = [0.0; 3];
            for i in 0..3 {
                let ind = if arms[i] == a + 1 { wv[i] } else { 0.0 };
                v[i] = ind - pi[[i, a]];
            }
            let mut quad = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    quad += v[i] * kmat[[i, j]] * v[j];
                }
            }
            bias2 += gamma[a] * gamma[a] * quad;
        }
        bias2 /= 9.0;
        let mut variance = 0.0;
        for i in 0..3 {
            variance += lambda[i] * wv[i] * wv[i];
        }
        variance /= 9.0;

        let (objective, bias, var) = cmse_objective(&w, &obj).unwrap();
        assert_abs_diff_eq!(bias * bias, bias2, epsilon = 1e-12);
        assert_abs_diff_eq!(var, variance, epsilon = 1e-15);
        assert_abs_diff_eq!(objective, bias2 + variance, epsilon = 1e-12);
    }

    #[test]
    fn single_observation_weight_is_forced() {
        let pi = PolicyMatrix::new(array![[0.6, 0.4]]).unwrap();
        let obj = BalanceObjective::new(
            identity_gram(1),
            vec![1.0, 1.0],
            Array1::ones(1),
            pi,
            vec![1],
        )
        .unwrap();
        let result = balanced_weights(&obj, 1e-8).unwrap();
        assert_abs_diff_eq!(result.weights.w()[0], 1.0, epsilon = 1e-12);
        assert!(result.converged);
    }

    #[test]
    fn identical_observations_get_equal_weights() {
        let x = Array2::zeros((2, 1));
        let cfg = KernelConfig::diagonal(1.0, array![1.0], vec![1.0, 1.0]).unwrap();
        let k = gram(x.view(), &cfg).unwrap();
        let pi = PolicyMatrix::new(array![[0.3, 0.7], [0.3, 0.7]]).unwrap();
        let obj =
            BalanceObjective::new(k, vec![1.0, 1.0], Array1::ones(2), pi, vec![1, 1]).unwrap();
        let result = balanced_weights(&obj, 1e-8).unwrap();
        assert_abs_diff_eq!(result.weights.w()[0], result.weights.w()[1], epsilon = 1e-6);
    }

    /// Exact minimizer by enumerating supports and solving the
    /// equality-constrained KKT system on each.
    fn enumeration_oracle(obj: &BalanceObjective) -> f64 {
        let n = obj.n();
        let total = n as f64;
        // Dense H = Q + Lambda.
        let mut h = Array2::zeros((n, n));
        for i in 0..n {
            let mut e = Array1::zeros(n);
            e[i] = 1.0;
            let col = obj.h_matvec(e.view());
            for j in 0..n {
                h[[j, i]] = col[j];
            }
        }
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << n) {
            let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let s = support.len();
            let mut sys = nalgebra::DMatrix::zeros(s + 1, s + 1);
            let mut rhs = nalgebra::DVector::zeros(s + 1);
            for (r, &i) in support.iter().enumerate() {
                for (cidx, &j) in support.iter().enumerate() {
                    sys[(r, cidx)] = 2.0 * h[[i, j]];
                }
                sys[(r, s)] = -1.0;
                rhs[r] = 2.0 * obj.c[i];
            }
            for cidx in 0..s {
                sys[(s, cidx)] = 1.0;
            }
            rhs[s] = total;
            let Some(sol) = sys.lu().solve(&rhs) else { continue };
            if (0..s).any(|r| sol[r] < -1e-10) {
                continue;
            }
            let mut w = Array1::zeros(n);
            for (r, &i) in support.iter().enumerate() {
                w[i] = sol[r].max(0.0);
            }
            let sum: f64 = w.sum();
            if (sum - total).abs() > 1e-6 {
                continue;
            }
            let value = obj.cmse_from_quad(obj.quad_value(w.view()));
            if value < best {
                best = value;
            }
        }
        best
    }

    #[test]
    fn solver_matches_enumeration_oracle_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let n = rng.gen_range(2..=8);
            let m = rng.gen_range(2..=3);
            let (obj, _) = random_instance(&mut rng, n, m);
            let result = balanced_weights(&obj, 1e-10).unwrap();
            let oracle = enumeration_oracle(&obj);
            assert!(
                result.objective <= oracle + 1e-5,
                "trial {trial}: solver {} vs oracle {oracle}",
                result.objective
            );
        }
    }

    #[test]
    fn solver_beats_barycentric_grid_on_three_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (obj, _) = random_instance(&mut rng, 3, 2);
        let result = balanced_weights(&obj, 1e-10).unwrap();
        let mut grid_best = f64::INFINITY;
        let steps = 200;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let t1 = i as f64 / steps as f64;
                let t2 = j as f64 / steps as f64;
                let t3 = 1.0 - t1 - t2;
                let w = array![3.0 * t1, 3.0 * t2, 3.0 * t3];
                let value = obj.cmse_from_quad(obj.quad_value(w.view()));
                if value < grid_best {
                    grid_best = value;
                }
            }
        }
        assert!(
            result.objective <= grid_best + 1e-6,
            "solver {} vs grid {grid_best}",
            result.objective
        );
    }

    #[test]
    fn kkt_certificate_holds_at_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (obj, _) = random_instance(&mut rng, 40, 3);
        let result = balanced_weights(&obj, 1e-10).unwrap();
        assert!(result.converged, "kkt residual {}", result.kkt_residual);
        assert!(result.kkt_residual <= 1e-6);
        let sum: f64 = result.weights.w().sum();
        assert_abs_diff_eq!(sum, 40.0, epsilon = 1e-8);
        assert!(result.weights.w().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn objective_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let (obj, _) = random_instance(&mut rng, 30, 2);
        let opts = SolveOpts { record_trace: true, ..SolveOpts::default() };
        let result = balanced_weights_with(&obj, &opts, None).unwrap();
        let trace = result.trace.unwrap();
        for pair in trace.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9 * (1.0 + pair[0].abs()),
                "trace increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn warm_start_resumes_quickly() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let (obj, _) = random_instance(&mut rng, 25, 2);
        let first = balanced_weights(&obj, 1e-10).unwrap();
        let second = balanced_weights_with(
            &obj,
            &SolveOpts::default(),
            Some(first.weights.w()),
        )
        .unwrap();
        assert!(second.iterations <= 10, "warm start took {} iterations", second.iterations);
        assert!(second.objective <= first.objective + 1e-12);
    }

    #[test]
    fn frank_wolfe_path_approaches_projected_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (obj, _) = random_instance(&mut rng, 20, 2);
        let apg = balanced_weights(&obj, 1e-10).unwrap();
        let fw_opts = SolveOpts { fw_threshold: 1, max_iter: 20_000, ..SolveOpts::default() };
        let fw = balanced_weights_with(&obj, &fw_opts, None).unwrap();
        assert!(
            fw.objective <= apg.objective + 5e-3 * (1.0 + apg.objective.abs()),
            "fw {} vs apg {}",
            fw.objective,
            apg.objective
        );
    }

    #[test]
    fn iteration_cap_flags_nonconverged() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let (obj, _) = random_instance(&mut rng, 30, 2);
        let opts = SolveOpts { max_iter: 3, ..SolveOpts::default() };
        let result = balanced_weights_with(&obj, &opts, None).unwrap();
        assert!(!result.converged);
        let sum: f64 = result.weights.w().sum();
        assert_abs_diff_eq!(sum, 30.0, epsilon = 1e-8);
    }

    #[test]
    fn per_arm_grams_differ_from_shared() {
        let n = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.0..1.0));
        let cfg1 = KernelConfig::diagonal(1.0, array![1.0], vec![1.0, 1.0]).unwrap();
        let cfg2 = KernelConfig::diagonal(0.3, array![1.0], vec![1.0, 1.0]).unwrap();
        let k1 = Arc::new(gram(x.view(), &cfg1).unwrap());
        let k2 = Arc::new(gram(x.view(), &cfg2).unwrap());
        let pi = PolicyMatrix::uniform(n, 2);
        let arms: Vec<usize> = (0..n).map(|i| 1 + i % 2).collect();
        let shared = BalanceObjective::new(
            gram(x.view(), &cfg1).unwrap(),
            vec![1.0, 1.0],
            Array1::ones(n),
            pi.clone(),
            arms.clone(),
        )
        .unwrap();
        let mixed = BalanceObjective::with_per_arm_grams(
            vec![k1, k2],
            vec![1.0, 1.0],
            Array1::ones(n),
            pi,
            arms,
        )
        .unwrap();
        let w = WeightVector::new(Array1::ones(n)).unwrap();
        let b_shared = worst_case_bias(&w, &shared).unwrap();
        let b_mixed = worst_case_bias(&w, &mixed).unwrap();
        assert!((b_shared - b_mixed).abs() > 1e-6);
    }

    #[test]
    fn estimate_error_decomposes_into_bias_plus_noise() {
        // psi-hat - SAPE = B(W, pi; mu) + (1/n) sum_i w_i eps_i exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let n = 12;
        let m = 2;
        let (obj, pi) = random_instance(&mut rng, n, m);
        let result = balanced_weights(&obj, 1e-9).unwrap();
        let w = result.weights.w();
        let mu = Array2::from_shape_fn((n, m), |_| rng.gen_range(-1.0..1.0));
        let eps = Array1::from_shape_fn(n, |_| rng.gen_range(-0.3..0.3));
        let y = Array1::from_shape_fn(n, |i| mu[[i, obj.arms[i] - 1]] + eps[i]);

        let psi = w.dot(&y) / n as f64;
        let mut sape = 0.0;
        for i in 0..n {
            for a in 0..m {
                sape += pi[[i, a]] * mu[[i, a]];
            }
        }
        sape /= n as f64;
        let mut b = 0.0;
        for a in 0..m {
            for i in 0..n {
                let v = if obj.arms[i] == a + 1 { w[i] } else { 0.0 } - pi[[i, a]];
                b += v * mu[[i, a]];
            }
        }
        b /= n as f64;
        let noise = w.dot(&eps) / n as f64;
        assert_abs_diff_eq!(psi - sape, b + noise, epsilon = 1e-10);
    }

    #[test]
    fn cmse_identity_monte_carlo() {
        // E[(psi-hat - SAPE)^2] = B~^2 + (1/n^2) w' Sigma w over noise draws.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 10;
        let m = 2;
        let (obj, pi) = random_instance(&mut rng, n, m);
        let w = balanced_weights(&obj, 1e-9).unwrap().weights;
        let mu = Array2::from_shape_fn((n, m), |_| rng.gen_range(-1.0..1.0));
        let sigma2 = Array1::from_shape_fn(n, |_| rng.gen_range(0.1..0.5));

        let mut sape = 0.0;
        for i in 0..n {
            for a in 0..m {
                sape += pi[[i, a]] * mu[[i, a]];
            }
        }
        sape /= n as f64;
        let mut b = 0.0;
        for a in 0..m {
            for i in 0..n {
                let v = if obj.arms[i] == a + 1 { w.w()[i] } else { 0.0 } - pi[[i, a]];
                b += v * mu[[i, a]];
            }
        }
        b /= n as f64;
        let var_term: f64 = (0..n).map(|i| w.w()[i] * w.w()[i] * sigma2[i]).sum::<f64>()
            / ((n * n) as f64);
        let theory = b * b + var_term;

        let reps = 20_000;
        let mut sq = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut psi = 0.0;
            for i in 0..n {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                let y = mu[[i, obj.arms[i] - 1]] + sigma2[i].sqrt() * z;
                psi += w.w()[i] * y;
            }
            psi /= n as f64;
            sq.push((psi - sape) * (psi - sape));
        }
        let mean: f64 = sq.iter().sum::<f64>() / reps as f64;
        let var: f64 =
            sq.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps as f64 - 1.0);
        let se = (var / reps as f64).sqrt();
        assert!(
            (mean - theory).abs() <= 3.0 * se,
            "mc {mean} vs theory {theory} (se {se})"
        );
    }
}
