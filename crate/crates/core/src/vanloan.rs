//! Nearest Kronecker product decomposition.
//!
//! `W` (`m1*m2 x n1*n2`) is permuted into `R` (`m1*n1 x m2*n2`) so that every
//! Kronecker term `A ⊗ B` of `W` becomes the rank-one term `vec(A) vec(B)^T`
//! of `R`. The best Frobenius approximation of `W` by `k` Kronecker terms is
//! then read off the top `k` singular triplets of `R`.

use crate::error::{Error, Result};
use crate::kron::{materialize_capped, FactorPair, KroneckerSum};
use crate::linalg::{thin_svd, DenseMatrix};

/// `W` with its entries permuted into `(m1*n1) x (m2*n2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RearrangedMatrix {
    pub matrix: DenseMatrix,
    pub m1: usize,
    pub n1: usize,
    pub m2: usize,
    pub n2: usize,
}

fn split_dims(w: &DenseMatrix, m1: usize, n1: usize) -> Result<(usize, usize)> {
    if m1 == 0 || !w.rows().is_multiple_of(m1) {
        return Err(Error::Argument(format!(
            "m1={m1} does not divide the row count {}",
            w.rows()
        )));
    }
    if n1 == 0 || !w.cols().is_multiple_of(n1) {
        return Err(Error::Argument(format!(
            "n1={n1} does not divide the column count {}",
            w.cols()
        )));
    }
    Ok((w.rows() / m1, w.cols() / n1))
}

/// `R[i*n1 + j, p*n2 + q] = W[i*m2 + p, j*n2 + q]`.
pub fn rearrange(w: &DenseMatrix, m1: usize, n1: usize) -> Result<RearrangedMatrix> {
    let (m2, n2) = split_dims(w, m1, n1)?;
    let mut r = DenseMatrix::zeros(m1 * n1, m2 * n2);
    for i in 0..m1 {
        for p in 0..m2 {
            let wrow = w.row(i * m2 + p);
            for j in 0..n1 {
                let dst = &mut r.row_mut(i * n1 + j)[p * n2..(p + 1) * n2];
                dst.copy_from_slice(&wrow[j * n2..(j + 1) * n2]);
            }
        }
    }
    Ok(RearrangedMatrix {
        matrix: r,
        m1,
        n1,
        m2,
        n2,
    })
}

/// Exact inverse of [`rearrange`].
pub fn inverse_rearrange(r: &RearrangedMatrix) -> Result<DenseMatrix> {
    let RearrangedMatrix { m1, n1, m2, n2, .. } = *r;
    if r.matrix.shape() != (m1 * n1, m2 * n2) {
        return Err(Error::Dimension(format!(
            "rearranged matrix is {:?}, metadata implies {}x{}",
            r.matrix.shape(),
            m1 * n1,
            m2 * n2
        )));
    }
    let mut w = DenseMatrix::zeros(m1 * m2, n1 * n2);
    for i in 0..m1 {
        for p in 0..m2 {
            let wrow = w.row_mut(i * m2 + p);
            for j in 0..n1 {
                let src = &r.matrix.row(i * n1 + j)[p * n2..(p + 1) * n2];
                wrow[j * n2..(j + 1) * n2].copy_from_slice(src);
            }
        }
    }
    Ok(w)
}

/// Best Frobenius approximation of `w` by `k` Kronecker terms with `A_i` of shape `m1 x n1`.
///
/// The singular value of each term is split evenly, `A_i = sqrt(s_i) U_i` and
/// `B_i = sqrt(s_i) V_i`, and every scale is 1.
pub fn kronecker_decompose(w: &DenseMatrix, m1: usize, n1: usize, k: usize) -> Result<KroneckerSum> {
    let r = rearrange(w, m1, n1)?;
    let max_k = (m1 * n1).min(r.m2 * r.n2);
    if k == 0 || k > max_k {
        return Err(Error::Argument(format!(
            "factor count k={k} must lie in 1..={max_k} for this split"
        )));
    }
    let svd = thin_svd(&r.matrix, k)?;
    let factors = (0..k)
        .map(|f| {
            let root = svd.s[f].sqrt();
            let a = DenseMatrix::from_fn(m1, n1, |i, j| svd.u[(i * n1 + j, f)] * root);
            let b = DenseMatrix::from_fn(r.m2, r.n2, |p, q| svd.v[(p * r.n2 + q, f)] * root);
            FactorPair::new(1.0, a, b)
        })
        .collect::<Result<Vec<_>>>()?;
    KroneckerSum::new(factors)
}

/// Singular values of the rearranged matrix; their tail gives the optimal error for each `k`.
pub fn rearranged_singular_values(w: &DenseMatrix, m1: usize, n1: usize) -> Result<Vec<f64>> {
    let r = rearrange(w, m1, n1)?;
    let full = r.matrix.rows().min(r.matrix.cols());
    Ok(thin_svd(&r.matrix, full)?.s)
}

/// `||W - materialize(sum)||_F`.
pub fn reconstruction_error(w: &DenseMatrix, sum: &KroneckerSum) -> Result<f64> {
    if sum.target_shape() != w.shape() {
        return Err(Error::Dimension(format!(
            "weight is {}x{}, Kronecker sum targets {:?}",
            w.rows(),
            w.cols(),
            sum.target_shape()
        )));
    }
    let approx = materialize_capped(sum, usize::MAX)?;
    Ok(w.sub(&approx)?.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kron::{kron, materialize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn exact_kronecker_input_rearranges_to_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 2, 2);
        let b = random(&mut rng, 3, 2);
        let w = kron(&a, &b).unwrap();
        let r = rearrange(&w, 2, 2).unwrap();
        assert_eq!(r.matrix.shape(), (4, 6));
        for row in 0..4 {
            for col in 0..6 {
                let expected = a.as_slice()[row] * b.as_slice()[col];
                assert!((r.matrix[(row, col)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn index_map_by_explicit_loop() {
        let w = DenseMatrix::from_fn(4, 4, |i, j| (10 * i + j) as f64);
        let r = rearrange(&w, 2, 2).unwrap();
        // i=0, p=1, j=1, q=1
        assert_eq!(w[(1, 3)], r.matrix[(1, 3)]);
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        assert_eq!(r.matrix[(i * 2 + j, p * 2 + q)], w[(i * 2 + p, j * 2 + q)]);
                    }
                }
            }
        }
    }

    #[test]
    fn non_divisible_dims_are_named() {
        let w = DenseMatrix::zeros(6, 4);
        let e = rearrange(&w, 4, 2).unwrap_err().to_string();
        assert!(e.contains("m1=4") && e.contains("6"), "{e}");
        let e = rearrange(&w, 2, 3).unwrap_err().to_string();
        assert!(e.contains("n1=3") && e.contains("4"), "{e}");
    }

    #[test]
    fn decompose_exact_kronecker_recovers_factors_up_to_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 3, 2);
        let b = random(&mut rng, 2, 4);
        let w = kron(&a, &b).unwrap();
        let sum = kronecker_decompose(&w, 3, 2, 1).unwrap();
        assert!(reconstruction_error(&w, &sum).unwrap() < 1e-10);
        let f = &sum.factors()[0];
        let c = f.a()[(0, 0)] / a[(0, 0)];
        assert!(f.a().sub(&a.scaled(c)).unwrap().frobenius_norm() < 1e-10);
        assert!(f.b().sub(&b.scaled(1.0 / c)).unwrap().frobenius_norm() < 1e-10);
    }

    #[test]
    fn full_k_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(&mut rng, 6, 6);
        let sum = kronecker_decompose(&w, 3, 3, 4).unwrap();
        assert!(reconstruction_error(&w, &sum).unwrap() < 1e-10);
        assert!(kronecker_decompose(&w, 3, 3, 5).is_err());
        assert!(kronecker_decompose(&w, 3, 3, 0).is_err());
    }

    #[test]
    fn reconstruction_error_of_perturbation_is_perturbation_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sum = KroneckerSum::single(random(&mut rng, 2, 3), random(&mut rng, 3, 2));
        let w = materialize(&sum).unwrap();
        assert!(reconstruction_error(&w, &sum).unwrap() < 1e-14);
        let e = random(&mut rng, 6, 6).scaled(1e-3);
        let err = reconstruction_error(&w.add(&e).unwrap(), &sum).unwrap();
        assert!((err - e.frobenius_norm()).abs() < 1e-14);
        assert!(reconstruction_error(&DenseMatrix::zeros(6, 5), &sum).is_err());
    }

    #[test]
    fn error_is_monotone_in_k_and_matches_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(&mut rng, 8, 6);
        let sigma = rearranged_singular_values(&w, 4, 3).unwrap();
        let mut prev = f64::INFINITY;
        for k in 1..=sigma.len() {
            let err = reconstruction_error(&w, &kronecker_decompose(&w, 4, 3, k).unwrap()).unwrap();
            let tail2: f64 = sigma[k..].iter().map(|s| s * s).sum();
            assert!((err * err - tail2).abs() <= 1e-9 * w.frobenius_norm().powi(2));
            assert!(err <= prev + 1e-12);
            prev = err;
        }
    }

    #[test]
    fn decomposition_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random(&mut rng, 8, 8);
        assert_eq!(kronecker_decompose(&w, 4, 2, 3).unwrap(), kronecker_decompose(&w, 4, 2, 3).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn rearrange_roundtrip_and_norm(seed in 0u64..500, m1 in 1usize..4, n1 in 1usize..4, m2 in 1usize..4, n2 in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random(&mut rng, m1 * m2, n1 * n2);
            let r = rearrange(&w, m1, n1).unwrap();
            proptest::prop_assert!((r.matrix.frobenius_norm() - w.frobenius_norm()).abs() <= 1e-12 * w.frobenius_norm());
            proptest::prop_assert_eq!(inverse_rearrange(&r).unwrap(), w.clone());
            let again = rearrange(&inverse_rearrange(&r).unwrap(), m1, n1).unwrap();
            proptest::prop_assert_eq!(again, r);
        }
    }
}
