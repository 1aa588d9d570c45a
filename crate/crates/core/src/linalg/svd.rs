//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of the working matrix are rotated pairwise until they are mutually
//! orthogonal; their norms are then the singular values. The method has high
//! relative accuracy and is simple enough to audit, which matters more here
//! than raw speed: the matrices decomposed by this crate either are small or
//! have one short side after rearrangement.

use super::{dot, DenseMatrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Top singular triplets of a matrix; `u` is `rows x r`, `v` is `cols x r`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U diag(S) V^T`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        super::matmul_nt(&us, &self.v).expect("svd factors are conformable")
    }
}

/// Top-`k` singular triplets of `a`.
///
/// Singular values are sorted descending. Each singular-vector pair is signed
/// so that the largest-magnitude entry of the `u` column is positive.
pub fn thin_svd(a: &DenseMatrix, k: usize) -> Result<SvdResult> {
    let min_dim = a.rows().min(a.cols());
    if k == 0 || k > min_dim {
        return Err(Error::Argument(format!(
            "svd rank k={k} must lie in 1..={min_dim} for a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    let mut full = if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose());
        SvdResult { u: t.v, s: t.s, v: t.u }
    };
    fix_signs(&mut full);
    if k < min_dim {
        full.u = take_columns(&full.u, k);
        full.v = take_columns(&full.v, k);
        full.s.truncate(k);
    }
    Ok(full)
}

/// Number of singular values above `tol`.
///
/// With `tol = None` the threshold is `max(rows, cols) * sigma_1 * eps`.
pub fn numerical_rank(a: &DenseMatrix, tol: Option<f64>) -> usize {
    let svd = thin_svd(a, a.rows().min(a.cols())).expect("full rank request is always valid");
    let sigma1 = svd.s.first().copied().unwrap_or(0.0);
    let tol = tol.unwrap_or(a.rows().max(a.cols()) as f64 * sigma1 * f64::EPSILON);
    svd.s.iter().filter(|&&s| s > tol).count()
}

/// Full thin SVD of a matrix with `rows >= cols`.
fn jacobi_tall(a: &DenseMatrix) -> SvdResult {
    let (m, n) = a.shape();
    // Column-major working copies: cols[j] is column j of A, vs[j] column j of V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vs: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut norms2: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = norms2[p];
                let beta = norms2[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (cp, cq) = pair_mut(&mut cols, p, q);
                rotate(cp, cq, c, s);
                let (vp, vq) = pair_mut(&mut vs, p, q);
                rotate(vp, vq, c, s);
                norms2[p] = dot(&cols[p], &cols[p]);
                norms2[q] = dot(&cols[q], &cols[q]);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sigma: Vec<f64> = norms2.iter().map(|x| x.sqrt()).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut s_sorted = Vec::with_capacity(n);
    let mut v = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let s = sigma[src];
        s_sorted.push(s);
        let col = if s > 0.0 && s.is_finite() {
            let scaled: Vec<f64> = cols[src].iter().map(|x| x / s).collect();
            scaled.iter().all(|x| x.is_finite()).then_some(scaled)
        } else {
            None
        };
        u_cols.push(col);
        for i in 0..n {
            v[(i, dst)] = vs[src][i];
        }
    }
    let u_cols = complete_orthonormal(u_cols, m);
    let u = DenseMatrix::from_fn(m, n, |i, j| u_cols[j][i]);
    SvdResult { u, s: s_sorted, v }
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

fn pair_mut<T>(v: &mut [T], p: usize, q: usize) -> (&mut T, &mut T) {
    debug_assert!(p < q);
    let (lo, hi) = v.split_at_mut(q);
    (&mut lo[p], &mut hi[0])
}

/// Fills missing columns (zero singular values) with unit vectors orthogonal to the rest.
fn complete_orthonormal(cols: Vec<Option<Vec<f64>>>, m: usize) -> Vec<Vec<f64>> {
    if cols.iter().all(Option::is_some) {
        return cols.into_iter().map(Option::unwrap).collect();
    }
    let mut basis: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut candidate = 0usize;
    let mut out = Vec::with_capacity(cols.len());
    for col in cols {
        match col {
            Some(c) => out.push(c),
            None => {
                let fresh = loop {
                    assert!(candidate < m, "ran out of completion candidates");
                    let mut e = vec![0.0; m];
                    e[candidate] = 1.0;
                    candidate += 1;
                    // Two Gram-Schmidt passes keep the result orthogonal to working precision.
                    for _ in 0..2 {
                        for b in &basis {
                            let proj = dot(&e, b);
                            e.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
                        }
                    }
                    let norm = dot(&e, &e).sqrt();
                    if norm > 1e-8 {
                        e.iter_mut().for_each(|x| *x /= norm);
                        break e;
                    }
                };
                basis.push(fresh.clone());
                out.push(fresh);
            }
        }
    }
    out
}

fn fix_signs(svd: &mut SvdResult) {
    for j in 0..svd.s.len() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..svd.u.rows() {
            let x = svd.u[(i, j)];
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..svd.u.rows() {
                svd.u[(i, j)] = -svd.u[(i, j)];
            }
            for i in 0..svd.v.rows() {
                svd.v[(i, j)] = -svd.v[(i, j)];
            }
        }
    }
}

fn take_columns(a: &DenseMatrix, k: usize) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), k, |i, j| a[(i, j)])
}
