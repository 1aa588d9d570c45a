//! Kronecker products and scaled Kronecker sums `W = sum_i s_i (A_i ⊗ B_i)`.
//!
//! Vectors are flattened row-major throughout: index `i*n2 + j` of a vector of
//! length `n1*n2` is entry `[i, j]` of its `n1 x n2` reshaping. Under that
//! convention `(A ⊗ B) vec(X) = vec(A X B^T)`.

use crate::error::{Error, Result};
use crate::linalg::{gemm_view, DenseMatrix, MatView};

/// Default ceiling on the number of entries [`materialize`] will allocate.
pub const DEFAULT_MATERIALIZE_CAP: usize = 16_777_216;

/// One term `scale * (a ⊗ b)` of a Kronecker sum.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    scale: f64,
    a: DenseMatrix,
    b: DenseMatrix,
}

impl FactorPair {
    pub fn new(scale: f64, a: DenseMatrix, b: DenseMatrix) -> Result<Self> {
        if !scale.is_finite() {
            return Err(Error::NonFinite("factor scale".into()));
        }
        Ok(Self { scale, a, b })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn set_scale(&mut self, scale: f64) {
        self.scale = scale;
    }

    pub fn scale_mut(&mut self) -> &mut f64 {
        &mut self.scale
    }

    /// Mutable entries of `A`; the shape is fixed.
    pub fn a_mut(&mut self) -> &mut [f64] {
        self.a.as_mut_slice()
    }

    /// Mutable entries of `B`; the shape is fixed.
    pub fn b_mut(&mut self) -> &mut [f64] {
        self.b.as_mut_slice()
    }
}

/// `W = sum_i s_i (A_i ⊗ B_i)` with all `A_i` sharing one shape and all `B_i` another.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerSum {
    factors: Vec<FactorPair>,
    /// Whether the per-factor scalars are free parameters. Cleared by [`absorb_scalars`].
    learnable_scales: bool,
}

impl KroneckerSum {
    pub fn new(factors: Vec<FactorPair>) -> Result<Self> {
        let first = factors
            .first()
            .ok_or_else(|| Error::Argument("a Kronecker sum needs at least one factor".into()))?;
        let (sa, sb) = (first.a.shape(), first.b.shape());
        for (i, f) in factors.iter().enumerate() {
            if f.a.shape() != sa || f.b.shape() != sb {
                return Err(Error::Dimension(format!(
                    "factor {i} has shapes {:?} ⊗ {:?}, expected {sa:?} ⊗ {sb:?}",
                    f.a.shape(),
                    f.b.shape()
                )));
            }
        }
        let rows = sa.0.checked_mul(sb.0);
        let cols = sa.1.checked_mul(sb.1);
        if rows.is_none() || cols.is_none() {
            return Err(Error::Argument("Kronecker sum target shape overflows".into()));
        }
        Ok(Self {
            factors,
            learnable_scales: true,
        })
    }

    /// `1 * (a ⊗ b)`.
    pub fn single(a: DenseMatrix, b: DenseMatrix) -> Self {
        Self::new(vec![FactorPair::new(1.0, a, b).expect("unit scale is finite")])
            .expect("one factor is always consistent")
    }

    pub fn factors(&self) -> &[FactorPair] {
        &self.factors
    }

    /// Mutable factors. Shapes cannot change through this view.
    pub fn factors_mut(&mut self) -> &mut [FactorPair] {
        &mut self.factors
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    /// `((m1, n1), (m2, n2))`.
    pub fn factor_shapes(&self) -> ((usize, usize), (usize, usize)) {
        (self.factors[0].a.shape(), self.factors[0].b.shape())
    }

    /// `(m1*m2, n1*n2)`.
    pub fn target_shape(&self) -> (usize, usize) {
        let ((m1, n1), (m2, n2)) = self.factor_shapes();
        (m1 * m2, n1 * n2)
    }

    pub fn learnable_scales(&self) -> bool {
        self.learnable_scales
    }

    pub fn set_learnable_scales(&mut self, learnable: bool) {
        self.learnable_scales = learnable;
    }

    /// Stored parameters: factor entries plus one scalar per factor while the
    /// scalars are still learnable.
    pub fn param_count(&self) -> usize {
        let ((m1, n1), (m2, n2)) = self.factor_shapes();
        let k = self.factor_count();
        k * (m1 * n1 + m2 * n2) + if self.learnable_scales { k } else { 0 }
    }

    /// `||W||_F` from factor Gram matrices, without materializing `W`.
    pub fn frobenius_norm(&self) -> f64 {
        // ||sum s_i A_i⊗B_i||^2 = sum_ij s_i s_j <A_i,A_j> <B_i,B_j>
        let mut total = 0.0;
        for fi in &self.factors {
            for fj in &self.factors {
                let ga = crate::linalg::dot(fi.a.as_slice(), fj.a.as_slice());
                let gb = crate::linalg::dot(fi.b.as_slice(), fj.b.as_slice());
                total += fi.scale * fj.scale * ga * gb;
            }
        }
        total.max(0.0).sqrt()
    }
}

/// Dense Kronecker product; entry `[(i*m2 + p), (j*n2 + q)] = a[i,j] * b[p,q]`.
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let (m1, n1) = a.shape();
    let (m2, n2) = b.shape();
    let rows = m1.checked_mul(m2);
    let cols = n1.checked_mul(n2);
    let total = rows.zip(cols).and_then(|(r, c)| r.checked_mul(c));
    let (rows, cols) = match (rows, cols, total) {
        (Some(r), Some(c), Some(_)) => (r, c),
        _ => {
            return Err(Error::Argument(format!(
                "kron of {m1}x{n1} and {m2}x{n2} overflows"
            )))
        }
    };
    let mut out = DenseMatrix::zeros(rows, cols);
    accumulate_kron(&mut out, 1.0, a, b);
    Ok(out)
}

fn accumulate_kron(out: &mut DenseMatrix, scale: f64, a: &DenseMatrix, b: &DenseMatrix) {
    let (m1, n1) = a.shape();
    let (m2, n2) = b.shape();
    let cols = n1 * n2;
    let data = out.as_mut_slice();
    for i in 0..m1 {
        for p in 0..m2 {
            let row = &mut data[(i * m2 + p) * cols..(i * m2 + p + 1) * cols];
            let brow = b.row(p);
            for j in 0..n1 {
                let aij = scale * a[(i, j)];
                for (x, bv) in row[j * n2..(j + 1) * n2].iter_mut().zip(brow) {
                    *x += aij * bv;
                }
            }
        }
    }
}

/// `W x` without forming `W`: each term contributes `s_i vec(A_i X B_i^T)`.
pub fn kron_matvec(sum: &KroneckerSum, x: &[f64]) -> Result<Vec<f64>> {
    let ((m1, n1), (m2, n2)) = sum.factor_shapes();
    if x.len() != n1 * n2 {
        return Err(Error::Dimension(format!(
            "kron_matvec: input has length {}, expected {}",
            x.len(),
            n1 * n2
        )));
    }
    let xm = MatView::row_major(x, n1, n2);
    let mut y = vec![0.0; m1 * m2];
    for f in &sum.factors {
        // Pick the cheaper association of A X B^T.
        if m1 * n1 * n2 + m1 * n2 * m2 <= n1 * n2 * m2 + m1 * n1 * m2 {
            let mut ax = vec![0.0; m1 * n2];
            gemm_view(1.0, f.a.view(), xm, 0.0, &mut ax);
            gemm_view(f.scale, MatView::row_major(&ax, m1, n2), f.b.view_t(), 1.0, &mut y);
        } else {
            let mut xbt = vec![0.0; n1 * m2];
            gemm_view(1.0, xm, f.b.view_t(), 0.0, &mut xbt);
            gemm_view(f.scale, f.a.view(), MatView::row_major(&xbt, n1, m2), 1.0, &mut y);
        }
    }
    Ok(y)
}

/// Row-wise [`kron_matvec`] over a `T x (n1*n2)` batch.
pub fn kron_matmul_batch(sum: &KroneckerSum, xb: &DenseMatrix) -> Result<DenseMatrix> {
    let (rows, cols) = sum.target_shape();
    if xb.cols() != cols {
        return Err(Error::Dimension(format!(
            "kron_matmul_batch: batch has {} columns, expected {cols}",
            xb.cols()
        )));
    }
    let t = xb.rows();
    let ((m1, n1), (_, n2)) = sum.factor_shapes();
    let m2 = rows / m1;
    // Accumulate in (m1, T, m2) order so every factor is two large GEMMs.
    let mut acc = vec![0.0; m1 * t * m2];
    let mut z = vec![0.0; t * n1 * m2];
    let mut zp = vec![0.0; t * n1 * m2];
    for f in &sum.factors {
        // Z[t, j, p] = sum_q X[t, j, q] B[p, q]
        gemm_view(1.0, MatView::row_major(xb.as_slice(), t * n1, n2), f.b.view_t(), 0.0, &mut z);
        swap_outer(&z, &mut zp, t, n1, m2);
        // acc[i, t, p] += s * sum_j A[i, j] Z[t, j, p]
        gemm_view(f.scale, f.a.view(), MatView::row_major(&zp, n1, t * m2), 1.0, &mut acc);
    }
    let mut out = vec![0.0; t * m1 * m2];
    swap_outer(&acc, &mut out, m1, t, m2);
    DenseMatrix::new(t, rows, out)
}

/// Gradients of one factor term with respect to `A`, `B` and the scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrad {
    pub da: DenseMatrix,
    pub db: DenseMatrix,
    pub ds: f64,
}

/// Backward pass of `Y = kron_matmul_batch(sum, X)` for upstream gradient `G = dL/dY`.
///
/// Returns per-factor gradients and `dL/dX`.
pub fn kron_matmul_batch_backward(
    sum: &KroneckerSum,
    xb: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<(Vec<FactorGrad>, DenseMatrix)> {
    let (rows, cols) = sum.target_shape();
    if xb.cols() != cols || upstream.cols() != rows || xb.rows() != upstream.rows() {
        return Err(Error::Dimension(format!(
            "kron backward: input {}x{}, upstream {}x{}, weight {rows}x{cols}",
            xb.rows(),
            xb.cols(),
            upstream.rows(),
            upstream.cols()
        )));
    }
    let t = xb.rows();
    let ((m1, n1), (m2, n2)) = sum.factor_shapes();
    let x = xb.as_slice();
    let g = upstream.as_slice();

    // Layout-shuffled copies shared by every factor.
    let mut gp = vec![0.0; m1 * t * m2]; // G as (m1, T, m2)
    swap_outer(g, &mut gp, t, m1, m2);
    let mut xp = vec![0.0; n1 * t * n2]; // X as (n1, T, n2)
    swap_outer(x, &mut xp, t, n1, n2);

    let mut dx_acc = vec![0.0; n1 * t * n2]; // dX as (n1, T, n2)
    let mut grads = Vec::with_capacity(sum.factor_count());
    let mut z = vec![0.0; t * n1 * m2];
    let mut zp = vec![0.0; n1 * t * m2];
    let mut w = vec![0.0; m1 * t * n2];
    let mut wt = vec![0.0; t * m1 * n2];
    let mut q = vec![0.0; t * m1 * n2];
    let mut qp = vec![0.0; m1 * t * n2];
    for f in &sum.factors {
        let s = f.scale;
        // Z_t = X_t B^T, stored (T, n1, m2) then (n1, T, m2).
        gemm_view(1.0, MatView::row_major(x, t * n1, n2), f.b.view_t(), 0.0, &mut z);
        swap_outer(&z, &mut zp, t, n1, m2);

        // dA = s * sum_t G_t Z_t^T
        let mut da = DenseMatrix::zeros(m1, n1);
        gemm_view(
            s,
            MatView::row_major(&gp, m1, t * m2),
            MatView::row_major(&zp, n1, t * m2).t(),
            0.0,
            da.as_mut_slice(),
        );

        // ds = <G, A X B^T> = <G_perm, A Z_perm>
        let mut y = vec![0.0; m1 * t * m2];
        gemm_view(1.0, f.a.view(), MatView::row_major(&zp, n1, t * m2), 0.0, &mut y);
        let ds = crate::linalg::dot(&gp, &y);

        // W_t = A X_t, stored (m1, T, n2) then (T, m1, n2); dB = s * sum_t G_t^T W_t
        gemm_view(1.0, f.a.view(), MatView::row_major(&xp, n1, t * n2), 0.0, &mut w);
        swap_outer(&w, &mut wt, m1, t, n2);
        let mut db = DenseMatrix::zeros(m2, n2);
        gemm_view(
            s,
            MatView::row_major(g, t * m1, m2).t(),
            MatView::row_major(&wt, t * m1, n2),
            0.0,
            db.as_mut_slice(),
        );

        // dX_t = s * A^T G_t B
        gemm_view(1.0, MatView::row_major(g, t * m1, m2), f.b.view(), 0.0, &mut q);
        swap_outer(&q, &mut qp, t, m1, n2);
        gemm_view(s, f.a.view_t(), MatView::row_major(&qp, m1, t * n2), 1.0, &mut dx_acc);

        grads.push(FactorGrad { da, db, ds });
    }
    let mut dx = vec![0.0; t * n1 * n2];
    swap_outer(&dx_acc, &mut dx, n1, t, n2);
    Ok((grads, DenseMatrix::new(t, cols, dx)?))
}

/// Reorders a `(d0, d1, d2)` row-major block into `(d1, d0, d2)`.
fn swap_outer(src: &[f64], dst: &mut [f64], d0: usize, d1: usize, d2: usize) {
    for a in 0..d0 {
        for b in 0..d1 {
            let s = (a * d1 + b) * d2;
            let d = (b * d0 + a) * d2;
            dst[d..d + d2].copy_from_slice(&src[s..s + d2]);
        }
    }
}

/// Dense `sum_i s_i kron(A_i, B_i)`, refusing targets above [`DEFAULT_MATERIALIZE_CAP`].
pub fn materialize(sum: &KroneckerSum) -> Result<DenseMatrix> {
    materialize_capped(sum, DEFAULT_MATERIALIZE_CAP)
}

/// [`materialize`] with an explicit entry cap; pass `usize::MAX` to disable it.
pub fn materialize_capped(sum: &KroneckerSum, cap: usize) -> Result<DenseMatrix> {
    let (rows, cols) = sum.target_shape();
    let requested = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Argument("materialized size overflows".into()))?;
    if requested > cap {
        return Err(Error::SizeCap { requested, cap });
    }
    let mut out = DenseMatrix::zeros(rows, cols);
    for f in &sum.factors {
        accumulate_kron(&mut out, f.scale, &f.a, &f.b);
    }
    Ok(out)
}

/// Folds every scale into its `A` factor (`A' = s A`, `s' = 1`) and freezes the scales.
pub fn absorb_scalars(sum: &KroneckerSum) -> KroneckerSum {
    let factors = sum
        .factors
        .iter()
        .map(|f| FactorPair {
            scale: 1.0,
            a: if f.scale == 1.0 { f.a.clone() } else { f.a.scaled(f.scale) },
            b: f.b.clone(),
        })
        .collect();
    KroneckerSum {
        factors,
        learnable_scales: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{matmul, numerical_rank};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_sum(rng: &mut ChaCha8Rng, k: usize, sa: (usize, usize), sb: (usize, usize)) -> KroneckerSum {
        let factors = (0..k)
            .map(|_| {
                let s = rng.random_range(-2.0..2.0);
                FactorPair::new(s, random(rng, sa.0, sa.1), random(rng, sb.0, sb.1)).unwrap()
            })
            .collect();
        KroneckerSum::new(factors).unwrap()
    }

    fn dense_matvec(w: &DenseMatrix, x: &[f64]) -> Vec<f64> {
        (0..w.rows())
            .map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn scalar_identity_and_block_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 2, 3);
        let one = DenseMatrix::from_rows(&[[1.0]]).unwrap();
        assert_eq!(kron(&one, &b).unwrap(), b);

        let k = kron(&DenseMatrix::identity(2), &b).unwrap();
        assert_eq!(k.shape(), (4, 6));
        for i in 0..4 {
            for j in 0..6 {
                let same_block = (i / 2) == (j / 3);
                let expected = if same_block { b[(i % 2, j % 3)] } else { 0.0 };
                assert_eq!(k[(i, j)], expected);
            }
        }
    }

    #[test]
    fn halving_split_shape() {
        let a = DenseMatrix::zeros(3072, 384);
        let b = DenseMatrix::zeros(1, 2);
        assert_eq!(kron(&a, &b).unwrap().shape(), (3072, 768));
    }

    #[test]
    fn matvec_identity_and_linearity_in_scale() {
        let sum = KroneckerSum::single(DenseMatrix::identity(2), DenseMatrix::identity(3));
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        assert_eq!(kron_matvec(&sum, &x).unwrap(), x);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sum = KroneckerSum::single(random(&mut rng, 3, 2), random(&mut rng, 2, 4));
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y1 = kron_matvec(&sum, &x).unwrap();
        sum.factors_mut()[0].set_scale(2.0);
        let y2 = kron_matvec(&sum, &x).unwrap();
        for (a, b) in y1.iter().zip(&y2) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn matvec_matches_materialized_two_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sum = random_sum(&mut rng, 2, (4, 2), (3, 3));
        let w = materialize(&sum).unwrap();
        assert_eq!(w.shape(), (12, 6));
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(rel_err(&kron_matvec(&sum, &x).unwrap(), &dense_matvec(&w, &x)) < 1e-12);
        assert!(kron_matvec(&sum, &x[..5]).is_err());
    }

    #[test]
    fn batch_matches_rowwise_and_handles_zero_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sum = random_sum(&mut rng, 3, (5, 3), (2, 4));
        let xb = random(&mut rng, 3, 12);
        let yb = kron_matmul_batch(&sum, &xb).unwrap();
        for t in 0..3 {
            let row = kron_matvec(&sum, xb.row(t)).unwrap();
            assert!(rel_err(yb.row(t), &row) < 1e-12);
        }
        let single = kron_matmul_batch(&sum, &DenseMatrix::new(1, 12, xb.row(0).to_vec()).unwrap()).unwrap();
        assert!(rel_err(single.row(0), &kron_matvec(&sum, xb.row(0)).unwrap()) < 1e-12);
        let zero = kron_matmul_batch(&sum, &DenseMatrix::zeros(4, 12)).unwrap();
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));
        assert!(kron_matmul_batch(&sum, &DenseMatrix::zeros(2, 11)).is_err());
    }

    #[test]
    fn materialize_entrywise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sum = random_sum(&mut rng, 3, (2, 3), (3, 2));
        let w = materialize(&sum).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for p in 0..3 {
                    for q in 0..2 {
                        let expected: f64 = sum
                            .factors()
                            .iter()
                            .map(|f| f.scale() * f.a()[(i, j)] * f.b()[(p, q)])
                            .sum();
                        assert!((w[(i * 3 + p, j * 2 + q)] - expected).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn materialize_linearity_in_duplicate_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random(&mut rng, 3, 2);
        let b = random(&mut rng, 2, 2);
        let half = KroneckerSum::new(vec![
            FactorPair::new(0.5, a.clone(), b.clone()).unwrap(),
            FactorPair::new(0.5, a.clone(), b.clone()).unwrap(),
        ])
        .unwrap();
        let one = KroneckerSum::single(a.clone(), b.clone());
        assert!(materialize(&half).unwrap().max_abs_diff(&materialize(&one).unwrap()).unwrap() < 1e-15);
        assert_eq!(materialize(&one).unwrap(), kron(&a, &b).unwrap());
    }

    #[test]
    fn materialize_cap_is_enforced() {
        let sum = KroneckerSum::single(DenseMatrix::zeros(64, 64), DenseMatrix::zeros(64, 64));
        match materialize_capped(&sum, 1000) {
            Err(Error::SizeCap { requested, cap }) => {
                assert_eq!(requested, 4096 * 4096);
                assert_eq!(cap, 1000);
            }
            other => panic!("expected size error, got {other:?}"),
        }
        let big = KroneckerSum::single(DenseMatrix::zeros(8192, 1), DenseMatrix::zeros(1, 4096));
        assert!(matches!(materialize(&big), Err(Error::SizeCap { .. })));
    }

    #[test]
    fn mismatched_factor_shapes_rejected() {
        let f1 = FactorPair::new(1.0, DenseMatrix::zeros(2, 2), DenseMatrix::zeros(3, 3)).unwrap();
        let f2 = FactorPair::new(1.0, DenseMatrix::zeros(2, 3), DenseMatrix::zeros(3, 3)).unwrap();
        assert!(KroneckerSum::new(vec![f1, f2]).is_err());
        assert!(KroneckerSum::new(vec![]).is_err());
        assert!(FactorPair::new(f64::NAN, DenseMatrix::zeros(1, 1), DenseMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn absorb_folds_scale_into_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 2, 3);
        let b = random(&mut rng, 2, 2);
        let sum = KroneckerSum::new(vec![FactorPair::new(4.0, a.clone(), b.clone()).unwrap()]).unwrap();
        let absorbed = absorb_scalars(&sum);
        let f = &absorbed.factors()[0];
        assert_eq!(f.scale(), 1.0);
        assert_eq!(f.a(), &a.scaled(4.0));
        assert_eq!(f.b(), &b);
        assert_eq!(sum.param_count() - absorbed.param_count(), 1);

        let unit = KroneckerSum::single(a, b);
        let same = absorb_scalars(&unit);
        assert_eq!(same.factors(), unit.factors());
    }

    #[test]
    fn gram_norm_matches_materialized_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sum = random_sum(&mut rng, 4, (3, 4), (2, 5));
        let dense = materialize(&sum).unwrap().frobenius_norm();
        assert!((sum.frobenius_norm() - dense).abs() < 1e-12 * dense);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sum = random_sum(&mut rng, 2, (3, 2), (2, 3));
        let xb = random(&mut rng, 4, 6);
        let g = random(&mut rng, 4, 6);
        let loss = |s: &KroneckerSum, x: &DenseMatrix| kron_matmul_batch(s, x).unwrap().dot(&g).unwrap();
        let (grads, dx) = kron_matmul_batch_backward(&sum, &xb, &g).unwrap();
        let h = 1e-6;
        for (fi, grad) in grads.iter().enumerate() {
            for idx in 0..6 {
                let mut p = sum.clone();
                p.factors_mut()[fi].a_mut()[idx] += h;
                let mut m = sum.clone();
                m.factors_mut()[fi].a_mut()[idx] -= h;
                let fd = (loss(&p, &xb) - loss(&m, &xb)) / (2.0 * h);
                assert!((fd - grad.da.as_slice()[idx]).abs() < 1e-7);

                let mut p = sum.clone();
                p.factors_mut()[fi].b_mut()[idx] += h;
                let mut m = sum.clone();
                m.factors_mut()[fi].b_mut()[idx] -= h;
                let fd = (loss(&p, &xb) - loss(&m, &xb)) / (2.0 * h);
                assert!((fd - grad.db.as_slice()[idx]).abs() < 1e-7);
            }
            let mut p = sum.clone();
            *p.factors_mut()[fi].scale_mut() += h;
            let mut m = sum.clone();
            *m.factors_mut()[fi].scale_mut() -= h;
            let fd = (loss(&p, &xb) - loss(&m, &xb)) / (2.0 * h);
            assert!((fd - grad.ds).abs() < 1e-7);
        }
        for idx in 0..24 {
            let mut p = xb.clone();
            p.as_mut_slice()[idx] += h;
            let mut m = xb.clone();
            m.as_mut_slice()[idx] -= h;
            let fd = (loss(&sum, &p) - loss(&sum, &m)) / (2.0 * h);
            assert!((fd - dx.as_slice()[idx]).abs() < 1e-7);
        }
    }

    proptest::proptest! {
        #[test]
        fn mixed_product_property(seed in 0u64..300, m1 in 1usize..4, n1 in 1usize..4, m2 in 1usize..4, n2 in 1usize..4, p1 in 1usize..4, p2 in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, m1, n1);
            let b = random(&mut rng, m2, n2);
            let c = random(&mut rng, n1, p1);
            let d = random(&mut rng, n2, p2);
            let left = matmul(&kron(&a, &b).unwrap(), &kron(&c, &d).unwrap()).unwrap();
            let right = kron(&matmul(&a, &c).unwrap(), &matmul(&b, &d).unwrap()).unwrap();
            proptest::prop_assert!(left.max_abs_diff(&right).unwrap() < 1e-10);
        }

        #[test]
        fn rank_is_multiplicative(seed in 0u64..200, ra in 1usize..5, rb in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = matmul(&random(&mut rng, 6, ra), &random(&mut rng, ra, 5)).unwrap();
            let b = matmul(&random(&mut rng, 4, rb), &random(&mut rng, rb, 3)).unwrap();
            let k = kron(&a, &b).unwrap();
            proptest::prop_assert_eq!(numerical_rank(&k, None), numerical_rank(&a, None) * numerical_rank(&b, None));
        }

        #[test]
        fn absorb_is_idempotent_and_preserves_materialization(seed in 0u64..300, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sum = random_sum(&mut rng, k, (3, 2), (2, 2));
            let once = absorb_scalars(&sum);
            let twice = absorb_scalars(&once);
            proptest::prop_assert_eq!(&once, &twice);
            let d = materialize(&sum).unwrap().max_abs_diff(&materialize(&once).unwrap()).unwrap();
            proptest::prop_assert!(d <= 1e-15);
        }
    }
}
