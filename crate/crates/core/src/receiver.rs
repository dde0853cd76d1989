//! Server-side receiver.
//!
//! Layer 1 equalizes the `2M × s` received block with a vector `b`, rescales
//! by `√((1 + 2σ_q²)/P)` and decodes the integer combination `aᵀW̄` blockwise.
//! Layer 2 removes the combined dither `aᵀD`, undoes the normalization with a
//! factor `η` and restores the weighted mean.

use nalgebra::{DMatrix, DVector};

use crate::channel::ChannelRealization;
use crate::lattice::{DitherVector, LatticeSpec};
use crate::linalg::{cholesky, dmse_matrix, ints_to_dvector, quad_form, regularized_gram};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EqualizerWeights {
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedCombination {
    pub point: Vec<f64>,
    pub a: Vec<i64>,
    /// `Some(point != aᵀW̄)` when ground truth was supplied.
    pub decode_error: Option<bool>,
    /// Number of lattice blocks that differ from the ground truth.
    pub block_errors: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalUpdateEstimate {
    pub delta_w_g: Vec<f64>,
    pub eta: f64,
    pub dmse: f64,
    pub qmse: f64,
}

pub(crate) fn check_coefficients(a: &[i64], k: usize) -> Result<()> {
    if a.len() != k {
        return Err(Error::dim("coefficient vector length", k, a.len()));
    }
    if a.iter().all(|&v| v == 0) {
        return Err(Error::InvalidCoefficients("all-zero coefficient vector".into()));
    }
    Ok(())
}

fn check_snr(snr: f64) -> Result<()> {
    if !(snr.is_finite() && snr > 0.0) {
        return Err(Error::config(format!("snr must be positive, got {snr}")));
    }
    Ok(())
}

/// `bᵀ = aᵀHᵀ((1/SNR)·I + HHᵀ)⁻¹`, via a Cholesky solve.
pub fn optimal_equalizer(h: &ChannelRealization, a: &[i64], snr: f64) -> Result<EqualizerWeights> {
    let hr = &h.h_real;
    check_coefficients(a, hr.ncols())?;
    check_snr(snr)?;
    let rows = hr.nrows();
    let system = DMatrix::identity(rows, rows) / snr + hr * hr.transpose();
    let chol = cholesky(system, "(1/SNR)·I + HHᵀ")?;
    let b = chol.solve(&(hr * ints_to_dvector(a)));
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("equalizer solve produced non-finite values".into()));
    }
    Ok(EqualizerWeights {
        b: b.iter().copied().collect(),
    })
}

/// Decoding MSE for an arbitrary equalizer:
/// `s(1 + 2σ_q²)(‖bᵀH − aᵀ‖² + ‖b‖²/SNR)`.
pub fn decoding_mse_with(
    h: &ChannelRealization,
    a: &[i64],
    b: &[f64],
    snr: f64,
    second_moment: f64,
    s: usize,
) -> Result<f64> {
    let hr = &h.h_real;
    check_coefficients(a, hr.ncols())?;
    if b.len() != hr.nrows() {
        return Err(Error::dim("equalizer length", hr.nrows(), b.len()));
    }
    let bv = DVector::from_column_slice(b);
    let resid = hr.transpose() * &bv - ints_to_dvector(a);
    Ok(s as f64 * (1.0 + 2.0 * second_moment) * (resid.norm_squared() + bv.norm_squared() / snr))
}

/// Decoding MSE at the optimal equalizer:
/// `s(1 + 2σ_q²)·aᵀ(I + SNR·HᵀH)⁻¹a`.
pub fn decoding_mse(h: &ChannelRealization, a: &[i64], snr: f64, second_moment: f64, s: usize) -> Result<f64> {
    check_coefficients(a, h.devices())?;
    check_snr(snr)?;
    let m = dmse_matrix(&h.h_real, snr)?;
    Ok(s as f64 * (1.0 + 2.0 * second_moment) * quad_form(&m, &ints_to_dvector(a)))
}

/// Eigenvalues of `(I + SNR·HᵀH)⁻¹`, ascending.
pub fn dmse_matrix_eigenvalues(h: &ChannelRealization, snr: f64) -> Result<Vec<f64>> {
    let g = regularized_gram(&h.h_real, snr);
    let mut ev: Vec<f64> = g.symmetric_eigenvalues().iter().map(|l| 1.0 / l).collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Equalize, rescale and quantize to the nearest lattice point blockwise.
///
/// `true_point` is simulation ground truth (`aᵀW̄`) and only feeds the error
/// flags.
pub fn decode_combination(
    y: &DMatrix<f64>,
    eq: &EqualizerWeights,
    lattice: &LatticeSpec,
    power: f64,
    second_moment: f64,
    a: &[i64],
    true_point: Option<&[f64]>,
) -> Result<DecodedCombination> {
    if eq.b.len() != y.nrows() {
        return Err(Error::dim("equalizer length", y.nrows(), eq.b.len()));
    }
    let s = y.ncols();
    lattice.check_len(s)?;
    let gain = ((1.0 + 2.0 * second_moment) / power).sqrt();
    let bv = DVector::from_column_slice(&eq.b);
    let combined: Vec<f64> = (y.transpose() * bv).iter().map(|v| gain * v).collect();
    let point = lattice.quantize(&combined)?;
    let (decode_error, block_errors) = match true_point {
        Some(t) => {
            if t.len() != s {
                return Err(Error::dim("ground-truth length", s, t.len()));
            }
            let n = lattice.block_dim();
            let tol = 1e-9 * lattice.scale();
            let wrong = point
                .chunks(n)
                .zip(t.chunks(n))
                .filter(|(p, q)| p.iter().zip(q.iter()).any(|(x, y)| (x - y).abs() > tol))
                .count();
            (Some(wrong > 0), Some(wrong))
        }
        None => (None, None),
    };
    Ok(DecodedCombination {
        point,
        a: a.to_vec(),
        decode_error,
        block_errors,
    })
}

fn check_sigmas(a: &[i64], sigmas: &[f64]) -> Result<()> {
    if sigmas.len() != a.len() {
        return Err(Error::dim("sigma vector length", a.len(), sigmas.len()));
    }
    if a.iter().any(|&v| v < 0) {
        return Err(Error::InvalidCoefficients("negative coefficient".into()));
    }
    if a.iter().all(|&v| v == 0) {
        return Err(Error::InvalidCoefficients("all-zero coefficient vector".into()));
    }
    if sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::config("device standard deviations must be positive"));
    }
    Ok(())
}

/// `η = (1 + σ_q²)‖a‖² / (aᵀ diag(σ) a)`.
pub fn optimal_eta(a: &[i64], sigmas: &[f64], second_moment: f64) -> Result<f64> {
    check_sigmas(a, sigmas)?;
    let norm2: f64 = a.iter().map(|&v| (v * v) as f64).sum();
    let weighted: f64 = a.iter().zip(sigmas).map(|(&v, s)| (v * v) as f64 * s).sum();
    Ok((1.0 + second_moment) * norm2 / weighted)
}

/// Quantization MSE at a given `η`:
/// `s/(1ᵀa)² · (‖(I/η − diag(σ))a‖² + ‖a‖²σ_q²/η²)`.
pub fn quantization_mse_at(a: &[i64], sigmas: &[f64], second_moment: f64, s: usize, eta: f64) -> Result<f64> {
    check_sigmas(a, sigmas)?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::config(format!("eta must be positive, got {eta}")));
    }
    let sum: f64 = a.iter().map(|&v| v as f64).sum();
    let mismatch: f64 = a
        .iter()
        .zip(sigmas)
        .map(|(&v, sg)| ((1.0 / eta - sg) * v as f64).powi(2))
        .sum();
    let norm2: f64 = a.iter().map(|&v| (v * v) as f64).sum();
    Ok(s as f64 / (sum * sum) * (mismatch + norm2 * second_moment / (eta * eta)))
}

/// Quantization MSE at the optimal `η`:
/// `s/(1ᵀa)² · (aᵀdiag(σ²)a − (aᵀdiag(σ)a)² / ((1 + σ_q²)‖a‖²))`.
pub fn quantization_mse(a: &[i64], sigmas: &[f64], second_moment: f64, s: usize) -> Result<f64> {
    check_sigmas(a, sigmas)?;
    let sum: f64 = a.iter().map(|&v| v as f64).sum();
    let norm2: f64 = a.iter().map(|&v| (v * v) as f64).sum();
    let w1: f64 = a.iter().zip(sigmas).map(|(&v, sg)| (v * v) as f64 * sg).sum();
    let w2: f64 = a.iter().zip(sigmas).map(|(&v, sg)| (v * v) as f64 * sg * sg).sum();
    let q = s as f64 / (sum * sum) * (w2 - w1 * w1 / ((1.0 + second_moment) * norm2));
    Ok(q.max(0.0))
}

/// Layer-2 estimate
/// `Δw_G = (point − aᵀD)/(η·1ᵀa) + (Σ a_k ϑ_k / 1ᵀa)·1`.
///
/// `dmse` is carried through for reporting; `qmse` is evaluated at `eta`.
pub fn estimate_global_update(
    dc: &DecodedCombination,
    dithers: &[DitherVector],
    means: &[f64],
    sigmas: &[f64],
    eta: f64,
    second_moment: f64,
    dmse: f64,
) -> Result<GlobalUpdateEstimate> {
    let a = &dc.a;
    let k = a.len();
    if dithers.len() != k {
        return Err(Error::dim("number of dithers", k, dithers.len()));
    }
    if means.len() != k {
        return Err(Error::dim("number of means", k, means.len()));
    }
    let sum: i64 = a.iter().sum();
    if sum == 0 {
        return Err(Error::InvalidCoefficients("1ᵀa = 0".into()));
    }
    let s = dc.point.len();
    if let Some(d) = dithers.iter().find(|d| d.len() != s) {
        return Err(Error::dim("dither length", s, d.len()));
    }
    let qmse = quantization_mse_at(a, sigmas, second_moment, s, eta)?;
    let sum = sum as f64;
    let mean_term: f64 = a.iter().zip(means).map(|(&v, m)| v as f64 * m).sum::<f64>() / sum;
    let mut delta = dc.point.clone();
    for (&ak, d) in a.iter().zip(dithers) {
        if ak == 0 {
            continue;
        }
        let ak = ak as f64;
        for (v, dv) in delta.iter_mut().zip(&d.values) {
            *v -= ak * dv;
        }
    }
    let denom = eta * sum;
    for v in delta.iter_mut() {
        *v = *v / denom + mean_term;
    }
    Ok(GlobalUpdateEstimate {
        delta_w_g: delta,
        eta,
        dmse,
        qmse,
    })
}
