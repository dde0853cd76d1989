//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result};

pub fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

/// `(I + snr · HᵀH)`, the K×K matrix whose inverse defines DMSE.
pub fn regularized_gram(h: &DMatrix<f64>, snr: f64) -> DMatrix<f64> {
    let k = h.ncols();
    DMatrix::identity(k, k) + h.transpose() * h * snr
}

/// `M = (I + snr · HᵀH)⁻¹`.
pub fn dmse_matrix(h: &DMatrix<f64>, snr: f64) -> Result<DMatrix<f64>> {
    Ok(cholesky(regularized_gram(h, snr), "I + SNR·HᵀH")?.inverse())
}

pub fn quad_form(m: &DMatrix<f64>, a: &DVector<f64>) -> f64 {
    a.dot(&(m * a))
}

pub fn to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

pub fn ints_to_dvector(v: &[i64]) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().map(|&x| x as f64))
}
