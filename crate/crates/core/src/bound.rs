//! Optimality-gap bound for FedCPU training under smooth, PL objectives.

use serde::{Deserialize, Serialize};

use crate::coeff_select::mismatch;
use crate::receiver::check_coefficients;
use crate::{Error, Result};

/// Analysis constants: smoothness `L`, PL constant `δ`, gradient-variance
/// bound `σ_g²` and the initial gap `F(w₀) − F*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConstants {
    pub smoothness: f64,
    pub pl: f64,
    pub grad_var: f64,
    pub initial_gap: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        Self {
            smoothness: 1.0,
            pl: 0.1,
            grad_var: 1.0,
            initial_gap: 1.0,
        }
    }
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.smoothness.is_finite() && self.smoothness > 0.0) {
            return Err(Error::config("bound.smoothness must be positive"));
        }
        if !(ok(self.pl) && ok(self.grad_var) && ok(self.initial_gap)) {
            return Err(Error::config("bound.pl, grad_var and initial_gap must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundTerms {
    pub c: f64,
    pub b: f64,
    /// Aggregation error term `L_t(a_t)`.
    pub l: f64,
    /// Step-size hypotheses hold.
    pub conditions_hold: bool,
}

/// One round of the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleEntry {
    pub lr: f64,
    pub a: Vec<i64>,
    pub qmse: f64,
}

/// `c_t`, `b_t`, `L_t` for a single round. Violated step-size conditions are
/// flagged, not rejected.
pub fn round_terms(
    lr: f64,
    local_steps: usize,
    constants: &BoundConstants,
    batch: usize,
    a: &[i64],
    qmse: f64,
) -> Result<RoundTerms> {
    check_coefficients(a, a.len())?;
    if batch == 0 || local_steps == 0 {
        return Err(Error::config("batch and local_steps must be at least 1"));
    }
    if !(lr.is_finite() && lr >= 0.0 && qmse.is_finite() && qmse >= 0.0) {
        return Err(Error::NonFinite("bound round inputs"));
    }
    let tau = local_steps as f64;
    let l_smooth = constants.smoothness;
    let noise = constants.grad_var / batch as f64;
    let c = 1.0 - lr * tau * constants.pl;
    let b = l_smooth * l_smooth * lr.powi(3) / 2.0 * (tau * (tau - 1.0) / 2.0) * noise;
    let l = lr * lr * noise * tau * mismatch(a) + qmse;
    let step = 1.0 - l_smooth * l_smooth * lr * lr / 2.0 * tau * (tau - 1.0) - l_smooth * lr * tau;
    Ok(RoundTerms {
        c,
        b,
        l,
        conditions_hold: step >= 0.0 && c >= 0.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapBound {
    pub value: f64,
    /// Bound after each round `t = 1..T`.
    pub trace: Vec<f64>,
    pub conditions_hold: bool,
}

/// `(∏c_t)·F₀ + Σ_t (b_t + (L/2)L_t)·∏_{i>t} c_i`, with the running value
/// after every round.
pub fn optimality_gap_bound(
    constants: &BoundConstants,
    schedule: &[ScheduleEntry],
    local_steps: usize,
    batch: usize,
) -> Result<GapBound> {
    constants.validate()?;
    let mut value = constants.initial_gap;
    let mut trace = Vec::with_capacity(schedule.len());
    let mut conditions_hold = true;
    for entry in schedule {
        let t = round_terms(entry.lr, local_steps, constants, batch, &entry.a, entry.qmse)?;
        conditions_hold &= t.conditions_hold;
        value = t.c * value + t.b + constants.smoothness / 2.0 * t.l;
        trace.push(value);
    }
    Ok(GapBound {
        value,
        trace,
        conditions_hold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts() -> BoundConstants {
        BoundConstants {
            smoothness: 2.0,
            pl: 0.5,
            grad_var: 3.0,
            initial_gap: 4.0,
        }
    }

    #[test]
    fn trivial_terms() {
        let c = consts();
        let t = round_terms(0.1, 1, &c, 10, &[1, 1, 1], 0.0).unwrap();
        assert_eq!(t.b, 0.0);
        assert!((t.l - 0.01 * 0.3 / 3.0).abs() < 1e-15);
        let no_pl = BoundConstants { pl: 0.0, ..c };
        assert_eq!(round_terms(0.1, 4, &no_pl, 10, &[1], 0.0).unwrap().c, 1.0);
    }

    #[test]
    fn single_round() {
        let c = consts();
        let e = ScheduleEntry {
            lr: 0.05,
            a: vec![1, 2],
            qmse: 0.01,
        };
        let t = round_terms(e.lr, 3, &c, 5, &e.a, e.qmse).unwrap();
        let g = optimality_gap_bound(&c, &[e], 3, 5).unwrap();
        assert!((g.value - (t.c * 4.0 + t.b + t.l)).abs() < 1e-15);
    }

    #[test]
    fn collapse_when_c_is_zero() {
        let c = BoundConstants { pl: 10.0, ..consts() };
        let e = ScheduleEntry {
            lr: 0.05,
            a: vec![1, 1],
            qmse: 0.0,
        };
        let t = round_terms(e.lr, 2, &c, 5, &e.a, 0.0).unwrap();
        assert_eq!(t.c, 0.0);
        let g = optimality_gap_bound(&c, &[e], 2, 5).unwrap();
        assert!((g.value - (t.b + t.l)).abs() < 1e-15);
    }

    #[test]
    fn flags_violated_conditions() {
        let t = round_terms(10.0, 3, &consts(), 5, &[1], 0.0).unwrap();
        assert!(!t.conditions_hold);
    }

    #[test]
    fn rejects_bad_coefficients() {
        assert!(round_terms(0.1, 1, &consts(), 1, &[0, 0], 0.0).is_err());
    }
}
