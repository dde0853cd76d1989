//! Integer aggregation weights for one round.
//!
//! The exact selection problem minimizes the aggregation metric
//! `L(a) = μ²(σ_g²/B)τ·‖a‖²/(1ᵀa)² + QMSE(a)` over non-negative integer `a`
//! subject to a decoding-MSE budget. The main path relaxes it to real `a ≥ 1`,
//! minimizes the mismatch `‖a‖²/(1ᵀa)²` under `aᵀMa ≤ θ/(1 + 2σ_q²)` with
//! `M = (I + SNR·HᵀH)⁻¹`, and rounds. The ratio objective is handled by
//! successive convexification: each step fixes `1ᵀa` at the previous iterate's
//! sum and minimizes `‖a‖²`, a convex QCQP.
//!
//! Starting point: `a⁽⁰⁾ = 1` when it meets the budget. Otherwise the
//! minimizer of `aᵀMa` over `a ≥ 1` is used; if even that point misses the
//! budget the round is flagged infeasible and that point is returned.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelRealization;
use crate::lattice::LatticeSpec;
use crate::linalg::{dmse_matrix, ints_to_dvector, quad_form};
use crate::receiver::quantization_mse;
use crate::{Error, Result};

/// Largest `K` accepted by [`brute_force_oracle`].
pub const ORACLE_MAX_DEVICES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Per-dimension DMSE budget `θ`.
    pub theta: f64,
    /// Target decode-error probability; reported against the measured rate only.
    pub epsilon: f64,
    /// Successive convexification steps `N`.
    pub max_iters: usize,
    pub qp_tolerance: f64,
    /// Largest coordinate enumerated by the oracle.
    pub brute_force_bound: i64,
}

impl SelectionConfig {
    pub fn new(theta: f64) -> Self {
        Self {
            theta,
            epsilon: 0.05,
            max_iters: 5,
            qp_tolerance: 1e-6,
            brute_force_bound: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) || self.theta.is_nan() {
            return Err(Error::config(format!("theta must be positive, got {}", self.theta)));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be at least 1"));
        }
        if !(self.qp_tolerance > 0.0) {
            return Err(Error::config("qp_tolerance must be positive"));
        }
        Ok(())
    }
}

/// `θ = (packing radius)² / 9`: effective noise standard deviation at a third
/// of the packing radius per dimension.
pub fn default_theta(lattice: &LatticeSpec) -> f64 {
    lattice.packing_radius().powi(2) / 9.0
}

/// Learning-side constants entering the aggregation metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningTerms {
    pub lr: f64,
    pub grad_var: f64,
    pub batch: usize,
    pub local_steps: usize,
}

impl LearningTerms {
    /// `μ²(σ_g²/B)τ`.
    pub fn mismatch_weight(&self) -> f64 {
        self.lr * self.lr * self.grad_var / self.batch as f64 * self.local_steps as f64
    }
}

/// Everything besides `a` that the exact metric needs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricInputs {
    pub learning: LearningTerms,
    pub sigmas: Vec<f64>,
    pub second_moment: f64,
    pub s: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    pub a: Vec<i64>,
    /// Aggregation metric `L(a)`.
    pub metric: f64,
    /// `θ/(1 + 2σ_q²) − aᵀMa`; negative when the budget is violated.
    pub dmse_slack: f64,
    /// The relaxation had no point meeting the budget.
    pub infeasible: bool,
}

impl CoefficientVector {
    pub fn sum(&self) -> i64 {
        self.a.iter().sum()
    }

    pub fn mismatch(&self) -> f64 {
        mismatch(&self.a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relaxation {
    pub a: Vec<f64>,
    /// `a⁽⁰⁾, a⁽¹⁾, …, a⁽ᴺ⁾`.
    pub iterates: Vec<Vec<f64>>,
    pub infeasible: bool,
    /// Largest KKT residual over the convex solves.
    pub kkt_residual: f64,
}

/// `‖a‖² / (1ᵀa)²`.
pub fn mismatch(a: &[i64]) -> f64 {
    let sum: f64 = a.iter().map(|&v| v as f64).sum();
    let norm2: f64 = a.iter().map(|&v| (v * v) as f64).sum();
    norm2 / (sum * sum)
}

fn check_valid(a: &[i64]) -> Result<()> {
    if a.iter().any(|&v| v < 0) {
        return Err(Error::InvalidCoefficients("negative coefficient".into()));
    }
    if a.iter().all(|&v| v == 0) {
        return Err(Error::InvalidCoefficients("all-zero coefficient vector".into()));
    }
    Ok(())
}

/// Exact aggregation metric with QMSE at the optimal `η`.
pub fn aggregation_metric(a: &[i64], inputs: &MetricInputs) -> Result<f64> {
    check_valid(a)?;
    let q = quantization_mse(a, &inputs.sigmas, inputs.second_moment, inputs.s)?;
    Ok(inputs.learning.mismatch_weight() * mismatch(a) + q)
}

/// Budget on `aᵀMa`.
pub fn quadratic_budget(theta: f64, second_moment: f64) -> f64 {
    theta / (1.0 + 2.0 * second_moment)
}

pub fn solve_relaxation(
    h: &ChannelRealization,
    snr: f64,
    second_moment: f64,
    cfg: &SelectionConfig,
) -> Result<Relaxation> {
    cfg.validate()?;
    let m = dmse_matrix(&h.h_real, snr)?;
    solve_relaxation_with_matrix(&m, quadratic_budget(cfg.theta, second_moment), cfg)
}

/// Relaxation on a precomputed `M`.
pub fn solve_relaxation_with_matrix(m: &DMatrix<f64>, budget: f64, cfg: &SelectionConfig) -> Result<Relaxation> {
    let k = m.nrows();
    if k == 0 || !m.is_square() {
        return Err(Error::config("DMSE matrix must be square and non-empty"));
    }
    let ones = DVector::from_element(k, 1.0);
    let mut kkt = 0.0f64;
    let start = if quad_form(m, &ones) <= budget {
        ones
    } else {
        let (p, res) = min_quadratic_over_box(m)?;
        kkt = kkt.max(res);
        if quad_form(m, &p) > budget * (1.0 + 1e-12) {
            return Ok(Relaxation {
                a: p.iter().copied().collect(),
                iterates: vec![p.iter().copied().collect()],
                infeasible: true,
                kkt_residual: kkt,
            });
        }
        p
    };
    let mut iterates = vec![start.iter().copied().collect::<Vec<f64>>()];
    let mut current = start;
    for _ in 0..cfg.max_iters {
        let target = current.sum();
        let sol = min_norm_fixed_sum(m, target, budget, cfg.qp_tolerance)?;
        kkt = kkt.max(sol.kkt_residual);
        current = sol.a;
        iterates.push(current.iter().copied().collect());
    }
    Ok(Relaxation {
        a: current.iter().copied().collect(),
        iterates,
        infeasible: false,
        kkt_residual: kkt,
    })
}

/// Round the relaxed solution and score it.
pub fn select_coefficients(
    h: &ChannelRealization,
    snr: f64,
    second_moment: f64,
    cfg: &SelectionConfig,
    inputs: &MetricInputs,
) -> Result<CoefficientVector> {
    cfg.validate()?;
    if inputs.sigmas.len() != h.devices() {
        return Err(Error::dim("sigma vector length", h.devices(), inputs.sigmas.len()));
    }
    let m = dmse_matrix(&h.h_real, snr)?;
    let budget = quadratic_budget(cfg.theta, second_moment);
    let relax = solve_relaxation_with_matrix(&m, budget, cfg)?;
    let a = round_coefficients(&relax.a);
    score(a, &m, budget, relax.infeasible, inputs)
}

/// Nearest-integer rounding, never below 1.
pub fn round_coefficients(a: &[f64]) -> Vec<i64> {
    a.iter().map(|v| (v.round() as i64).max(1)).collect()
}

fn score(
    a: Vec<i64>,
    m: &DMatrix<f64>,
    budget: f64,
    infeasible: bool,
    inputs: &MetricInputs,
) -> Result<CoefficientVector> {
    let metric = aggregation_metric(&a, inputs)?;
    let dmse_slack = budget - quad_form(m, &ints_to_dvector(&a));
    Ok(CoefficientVector {
        a,
        metric,
        dmse_slack,
        infeasible,
    })
}

/// Exhaustive search over `a ∈ {0..bound}ᴷ \ {0}` meeting the DMSE budget,
/// minimizing the exact metric. Ties go to the smallest `1ᵀa`, then the
/// lexicographically smallest vector. `None` when no vector is feasible.
pub fn brute_force_oracle(
    h: &ChannelRealization,
    snr: f64,
    theta: f64,
    inputs: &MetricInputs,
    bound: i64,
) -> Result<Option<CoefficientVector>> {
    let k = h.devices();
    if k > ORACLE_MAX_DEVICES {
        return Err(Error::config(format!(
            "brute-force oracle is limited to K <= {ORACLE_MAX_DEVICES}, got {k}"
        )));
    }
    if bound < 1 {
        return Err(Error::config("oracle bound must be at least 1"));
    }
    if inputs.sigmas.len() != k {
        return Err(Error::dim("sigma vector length", k, inputs.sigmas.len()));
    }
    let m = dmse_matrix(&h.h_real, snr)?;
    let budget = quadratic_budget(theta, inputs.second_moment);
    let mut best: Option<(f64, i64, Vec<i64>)> = None;
    let mut a = vec![0i64; k];
    loop {
        // odometer increment over {0..bound}^K
        let mut i = 0;
        while i < k {
            a[i] += 1;
            if a[i] <= bound {
                break;
            }
            a[i] = 0;
            i += 1;
        }
        if i == k {
            break;
        }
        if quad_form(&m, &ints_to_dvector(&a)) > budget {
            continue;
        }
        let metric = aggregation_metric(&a, inputs)?;
        let sum: i64 = a.iter().sum();
        let better = match &best {
            None => true,
            Some((bm, bs, ba)) => {
                let tol = 1e-12 * bm.abs().max(1e-300);
                if metric < bm - tol {
                    true
                } else if metric <= bm + tol {
                    (sum, &a) < (*bs, ba)
                } else {
                    false
                }
            }
        };
        if better {
            best = Some((metric, sum, a.clone()));
        }
    }
    best.map(|(_, _, a)| score(a, &m, budget, false, inputs)).transpose()
}

/// Solution of one convex step.
#[derive(Debug, Clone)]
pub struct FixedSumSolution {
    pub a: DVector<f64>,
    /// Multiplier of the quadratic constraint.
    pub lambda: f64,
    pub kkt_residual: f64,
}

/// `min ‖a‖²  s.t.  1ᵀa = target, aᵀMa ≤ budget, a ≥ 1`.
///
/// Bisects on the multiplier `λ` of the quadratic constraint; each inner
/// problem `min aᵀ(I + λM)a` over the simplex slice is an active-set QP.
pub fn min_norm_fixed_sum(m: &DMatrix<f64>, target: f64, budget: f64, tol: f64) -> Result<FixedSumSolution> {
    let k = m.nrows();
    if target < k as f64 - 1e-12 {
        return Err(Error::config(format!(
            "sum {target} is below the lower bound {k} implied by a >= 1"
        )));
    }
    let lb = DVector::from_element(k, 1.0);
    let ident = DMatrix::<f64>::identity(k, k);
    let mut warm: Vec<bool> = vec![false; k];
    let inner = |lambda: f64, warm: &mut Vec<bool>| -> Result<QpSolution> {
        let q = (&ident + m * lambda) * 2.0;
        let sol = active_set_qp(&q, &DVector::zeros(k), &lb, Some(target), Some(warm.as_slice()))?;
        *warm = sol.active.clone();
        Ok(sol)
    };

    let sol0 = inner(0.0, &mut warm)?;
    let q0 = quad_form(m, &sol0.x);
    let (x, lambda) = if q0 <= budget {
        (sol0.x, 0.0)
    } else {
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut hi_sol = inner(hi, &mut warm)?;
        while quad_form(m, &hi_sol.x) > budget {
            lo = hi;
            hi *= 4.0;
            if hi > 1e15 {
                return Err(Error::Numerical(format!(
                    "quadratic constraint unsatisfiable at sum {target}"
                )));
            }
            hi_sol = inner(hi, &mut warm)?;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let sol = inner(mid, &mut warm)?;
            if quad_form(m, &sol.x) > budget {
                lo = mid;
            } else {
                hi = mid;
                hi_sol = sol;
            }
            if (hi - lo) <= 1e-14 * hi {
                break;
            }
        }
        (hi_sol.x, hi)
    };
    let kkt_residual = fixed_sum_kkt(m, &x, lambda, target, budget);
    if !(kkt_residual <= tol) {
        return Err(Error::Numerical(format!(
            "convex step KKT residual {kkt_residual:.3e} exceeds tolerance {tol:.1e}"
        )));
    }
    Ok(FixedSumSolution {
        a: x,
        lambda,
        kkt_residual,
    })
}

/// Scaled KKT residual of the fixed-sum step at `(a, λ)`. The equality
/// multiplier and bound multipliers are recovered from stationarity.
pub fn fixed_sum_kkt(m: &DMatrix<f64>, a: &DVector<f64>, lambda: f64, target: f64, budget: f64) -> f64 {
    let k = a.len();
    let grad = (a + m * a * lambda) * 2.0;
    let scale = grad.amax().max(1.0);
    let free: Vec<usize> = (0..k).filter(|&i| a[i] > 1.0 + 1e-9).collect();
    let nu = if free.is_empty() {
        grad.min()
    } else {
        free.iter().map(|&i| grad[i]).sum::<f64>() / free.len() as f64
    };
    let mut r: f64 = 0.0;
    for i in 0..k {
        let g = grad[i] - nu;
        if free.contains(&i) {
            r = r.max(g.abs() / scale);
        } else {
            r = r.max((-g).max(0.0) / scale);
        }
        r = r.max((1.0 - a[i]).max(0.0));
    }
    let q = quad_form(m, a);
    r = r.max((a.sum() - target).abs() / target.max(1.0));
    r = r.max((q - budget).max(0.0) / budget);
    // complementarity relative to the objective scale
    r.max(lambda * (q - budget).abs() / (a.norm_squared().max(1.0)))
}

/// `min aᵀMa  s.t.  a ≥ 1`, the smallest DMSE reachable under the relaxation.
pub fn min_quadratic_over_box(m: &DMatrix<f64>) -> Result<(DVector<f64>, f64)> {
    let k = m.nrows();
    let lb = DVector::from_element(k, 1.0);
    let sol = active_set_qp(&(m * 2.0), &DVector::zeros(k), &lb, None, None)?;
    let grad = m * &sol.x * 2.0;
    let scale = grad.amax().max(1e-300);
    let mut r: f64 = 0.0;
    for i in 0..k {
        if sol.active[i] {
            r = r.max((-grad[i]).max(0.0) / scale);
        } else {
            r = r.max(grad[i].abs() / scale);
        }
    }
    Ok((sol.x, r))
}

#[derive(Debug, Clone)]
struct QpSolution {
    x: DVector<f64>,
    active: Vec<bool>,
}

/// Primal active-set method for
/// `min ½xᵀQx + cᵀx  s.t.  x ≥ lb  [and 1ᵀx = total]` with `Q` positive
/// definite. Starts from a feasible point; `warm` seeds the working set.
fn active_set_qp(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    lb: &DVector<f64>,
    total: Option<f64>,
    warm: Option<&[bool]>,
) -> Result<QpSolution> {
    let k = q.nrows();
    let mut x = lb.clone();
    let mut active = vec![true; k];
    if let Some(t) = total {
        let extra = t - lb.sum();
        match warm {
            Some(w) if w.iter().any(|&v| !v) => {
                let free = w.iter().filter(|&&v| !v).count() as f64;
                for i in 0..k {
                    if !w[i] {
                        x[i] += extra / free;
                    }
                }
                active = w.to_vec();
            }
            _ => {
                x.add_scalar_mut(extra / k as f64);
                active = vec![extra <= 0.0; k];
            }
        }
    }
    let eq = total.is_some();
    let max_iter = 50 * k + 100;
    for _ in 0..max_iter {
        let grad = q * &x + c;
        let free: Vec<usize> = (0..k).filter(|&i| !active[i]).collect();
        let nf = free.len();
        let (p_free, nu) = if nf == 0 {
            (Vec::new(), if eq { grad.min() } else { 0.0 })
        } else {
            let dim = if eq { nf + 1 } else { nf };
            let mut sys = DMatrix::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);
            for (r, &i) in free.iter().enumerate() {
                for (cc, &j) in free.iter().enumerate() {
                    sys[(r, cc)] = q[(i, j)];
                }
                rhs[r] = -grad[i];
                if eq {
                    sys[(r, nf)] = -1.0;
                    sys[(nf, r)] = 1.0;
                }
            }
            let sol = sys
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical("singular KKT system in QP".into()))?;
            let nu = if eq { sol[nf] } else { 0.0 };
            (sol.rows(0, nf).iter().copied().collect::<Vec<_>>(), nu)
        };
        let step_norm = p_free.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if step_norm <= 1e-13 * x.amax().max(1.0) {
            // multipliers of the bounds in the working set
            let mut worst = None;
            let mut worst_mu = -1e-12 * grad.amax().max(1.0);
            for i in 0..k {
                if active[i] {
                    let mu = grad[i] - nu;
                    if mu < worst_mu {
                        worst_mu = mu;
                        worst = Some(i);
                    }
                }
            }
            match worst {
                None => return Ok(QpSolution { x, active }),
                Some(i) => {
                    active[i] = false;
                    continue;
                }
            }
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for (r, &i) in free.iter().enumerate() {
            let p = p_free[r];
            if p < 0.0 {
                let a = (lb[i] - x[i]) / p;
                if a < alpha {
                    alpha = a.max(0.0);
                    blocking = Some(i);
                }
            }
        }
        for (r, &i) in free.iter().enumerate() {
            x[i] += alpha * p_free[r];
        }
        if let Some(i) = blocking {
            x[i] = lb[i];
            active[i] = true;
        }
    }
    Err(Error::Numerical("active-set QP did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(k: usize) -> MetricInputs {
        MetricInputs {
            learning: LearningTerms {
                lr: 0.01,
                grad_var: 1.0,
                batch: 100,
                local_steps: 3,
            },
            sigmas: vec![0.01; k],
            second_moment: 0.07,
            s: 48,
        }
    }

    #[test]
    fn mismatch_examples() {
        assert!((mismatch(&[1, 1, 1, 1]) - 0.25).abs() < 1e-15);
        assert_eq!(mismatch(&[1, 0, 0]), 1.0);
        assert_eq!(mismatch(&[3, 1]), mismatch(&[6, 2]));
    }

    #[test]
    fn metric_equal_sigma_form() {
        let inp = inputs(4);
        let a = [2, 1, 3, 1];
        let got = aggregation_metric(&a, &inp).unwrap();
        let sq = inp.second_moment;
        let want = (inp.learning.mismatch_weight() + inp.s as f64 * 1e-4 * sq / (1.0 + sq)) * mismatch(&a);
        assert!((got - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn rounding_keeps_lower_bound() {
        assert_eq!(round_coefficients(&[1.2, 1.0, 2.7]), vec![1, 1, 3]);
        assert_eq!(round_coefficients(&[0.4, 1.49]), vec![1, 1]);
    }

    #[test]
    fn infinite_theta_gives_all_ones() {
        let m = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.1, 0.4, -0.1, 0.0, -0.1, 0.9]);
        let cfg = SelectionConfig::new(f64::INFINITY);
        let r = solve_relaxation_with_matrix(&m, f64::INFINITY, &cfg).unwrap();
        assert_eq!(r.a, vec![1.0; 3]);
        assert!(!r.infeasible);
    }

    #[test]
    fn single_device_relaxation() {
        let m = DMatrix::from_element(1, 1, 0.2);
        let cfg = SelectionConfig::new(1.0);
        let r = solve_relaxation_with_matrix(&m, 0.2, &cfg).unwrap();
        assert_eq!(r.a, vec![1.0]);
        let r = solve_relaxation_with_matrix(&m, 0.1, &cfg).unwrap();
        assert!(r.infeasible);
        assert_eq!(r.a, vec![1.0]);
    }

    #[test]
    fn box_minimizer_moves_off_ones_for_negative_coupling() {
        // M·1 = (0.1, -0.05): raising a₁ lowers aᵀMa
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -0.9, -0.9, 0.85]);
        let (p, res) = min_quadratic_over_box(&m).unwrap();
        assert!(res < 1e-9);
        assert_eq!(p[0], 1.0);
        assert!((p[1] - 0.9 / 0.85).abs() < 1e-12);
    }

    #[test]
    fn fixed_sum_step_with_active_constraint() {
        let m = DMatrix::from_row_slice(3, 3, &[0.30, -0.05, 0.02, -0.05, 0.10, 0.01, 0.02, 0.01, 0.05]);
        let target = 4.5;
        let ones = DVector::from_element(3, 1.5);
        let unconstrained = quad_form(&m, &ones);
        let budget = 0.8 * unconstrained;
        let sol = min_norm_fixed_sum(&m, target, budget, 1e-6).unwrap();
        assert!(sol.lambda > 0.0);
        assert!((sol.a.sum() - target).abs() < 1e-9);
        assert!(quad_form(&m, &sol.a) <= budget * (1.0 + 1e-9));
        assert!(sol.a.iter().all(|&v| v >= 1.0 - 1e-12));
        assert!(sol.kkt_residual < 1e-6);
    }

    #[test]
    fn oracle_refuses_large_k() {
        let h = ChannelRealization::from_real(DMatrix::from_element(2, 7, 1.0)).unwrap();
        let inp = inputs(7);
        assert!(brute_force_oracle(&h, 10.0, 1.0, &inp, 2).is_err());
    }

    #[test]
    fn oracle_single_device_prefers_smallest() {
        let h = ChannelRealization::from_real(DMatrix::from_column_slice(2, 1, &[1.0, 0.5])).unwrap();
        let best = brute_force_oracle(&h, 10.0, 100.0, &inputs(1), 5).unwrap().unwrap();
        assert_eq!(best.a, vec![1]);
    }
}
