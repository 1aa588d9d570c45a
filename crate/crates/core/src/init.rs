//! Factor initialization from a pre-trained dense matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kron::{materialize_capped, FactorPair, KroneckerSum};
use crate::linalg::DenseMatrix;
use crate::vanloan::kronecker_decompose;

/// Norms of a dense matrix and of its factorized approximation.
///
/// `alpha` is `frob_original / frob_approx` (infinite when the approximation
/// vanishes) and `ratio_percent` is `100 * frob_approx / frob_original`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub frob_original: f64,
    pub frob_approx: f64,
    pub alpha: f64,
    pub l1_original: f64,
    pub l1_approx: f64,
    pub ratio_percent: f64,
}

impl NormReport {
    fn from_norms(frob_original: f64, frob_approx: f64, l1_original: f64, l1_approx: f64) -> Self {
        let alpha = if frob_approx > 0.0 {
            frob_original / frob_approx
        } else {
            f64::INFINITY
        };
        let ratio_percent = if frob_original > 0.0 {
            100.0 * frob_approx / frob_original
        } else {
            f64::NAN
        };
        Self {
            frob_original,
            frob_approx,
            alpha,
            l1_original,
            l1_approx,
            ratio_percent,
        }
    }
}

/// Compares `w` with the materialized `sum`.
pub fn norm_report(w: &DenseMatrix, sum: &KroneckerSum) -> Result<NormReport> {
    if sum.target_shape() != w.shape() {
        return Err(Error::Dimension(format!(
            "weight is {}x{}, Kronecker sum targets {:?}",
            w.rows(),
            w.cols(),
            sum.target_shape()
        )));
    }
    let approx = materialize_capped(sum, usize::MAX)?;
    Ok(NormReport::from_norms(
        w.frobenius_norm(),
        approx.frobenius_norm(),
        w.l1_norm(),
        approx.l1_norm(),
    ))
}

/// Van Loan factors rescaled so the approximation has exactly the Frobenius norm of `w`.
///
/// Every factor scale is set to `alpha = ||W||_F / ||W_hat||_F`.
pub fn normalized_vl_init(
    w: &DenseMatrix,
    m1: usize,
    n1: usize,
    k: usize,
) -> Result<(KroneckerSum, NormReport)> {
    let frob = w.frobenius_norm();
    if frob == 0.0 {
        return Err(Error::Argument(
            "cannot norm-match the zero matrix".into(),
        ));
    }
    let mut sum = kronecker_decompose(w, m1, n1, k)?;
    let approx = materialize_capped(&sum, usize::MAX)?;
    let frob_hat = approx.frobenius_norm();
    if frob_hat == 0.0 {
        return Err(Error::Argument("Kronecker approximation vanished".into()));
    }
    let alpha = frob / frob_hat;
    for f in sum.factors_mut() {
        f.set_scale(alpha);
    }
    let report = NormReport::from_norms(frob, frob_hat, w.l1_norm(), approx.l1_norm());
    Ok((sum, report))
}

/// Row-striding initialization: `W ≈ A ⊗ [1, ε, …, ε]^T`.
///
/// `A` holds rows `0, keep_every, 2*keep_every, …` of `w`. With `epsilon = 0`
/// the materialized sum is exactly `w` with every other row zeroed. No SVD is
/// involved.
pub fn pruning_init(w: &DenseMatrix, keep_every: usize, epsilon: f64) -> Result<KroneckerSum> {
    if keep_every == 0 || !w.rows().is_multiple_of(keep_every) {
        return Err(Error::Argument(format!(
            "keep_every={keep_every} does not divide the row count {}",
            w.rows()
        )));
    }
    if !epsilon.is_finite() {
        return Err(Error::NonFinite("epsilon".into()));
    }
    let kept = w.rows() / keep_every;
    let mut a = DenseMatrix::zeros(kept, w.cols());
    for i in 0..kept {
        a.row_mut(i).copy_from_slice(w.row(i * keep_every));
    }
    let b: Vec<f64> = (0..keep_every).map(|p| if p == 0 { 1.0 } else { epsilon }).collect();
    let b = DenseMatrix::column_vector(&b)?;
    KroneckerSum::new(vec![FactorPair::new(1.0, a, b)?])
}
