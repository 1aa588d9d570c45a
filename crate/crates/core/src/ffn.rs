//! Transformer feed-forward block `GELU(X W_in^T + b_in) W_out^T + b_out`, in
//! dense form and with both weights held as Kronecker sums.
//!
//! Weights follow `y = W x`: `w_in` is `hidden x d`, `w_out` is `d x hidden`,
//! and batches are `T x d` row matrices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{normalized_vl_init, pruning_init};
use crate::kron::{absorb_scalars, kron_matmul_batch, kron_matmul_batch_backward, FactorGrad, KroneckerSum};
use crate::linalg::{gemm, matmul_nt, DenseMatrix};
use crate::vanloan::kronecker_decompose;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// How dense FFN weights are turned into Kronecker sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Plain nearest-Kronecker decomposition.
    Vl,
    /// Decomposition rescaled to the original Frobenius norm.
    NormalizedVl,
    /// Keep every `keep_every`-th row; the others start as `epsilon` times the kept row.
    Prune { keep_every: usize, epsilon: f64 },
}

impl InitStrategy {
    pub const DEFAULT_PRUNE: InitStrategy = InitStrategy::Prune {
        keep_every: 2,
        epsilon: 0.1,
    };
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vl" => Ok(Self::Vl),
            "normalized_vl" | "normalized-vl" => Ok(Self::NormalizedVl),
            "prune" => Ok(Self::DEFAULT_PRUNE),
            other => Err(Error::Argument(format!(
                "unknown strategy `{other}` (expected vl, normalized_vl or prune)"
            ))),
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Vl => write!(f, "vl"),
            Self::NormalizedVl => write!(f, "normalized_vl"),
            Self::Prune { .. } => write!(f, "prune"),
        }
    }
}

fn column_sums(m: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, x) in out.iter_mut().zip(m.row(i)) {
            *o += x;
        }
    }
    out
}

fn add_bias(m: &mut DenseMatrix, bias: &[f64]) {
    for i in 0..m.rows() {
        for (x, b) in m.row_mut(i).iter_mut().zip(bias) {
            *x += b;
        }
    }
}

fn check_input(x: &DenseMatrix, d: usize) -> Result<()> {
    if x.cols() != d {
        return Err(Error::Dimension(format!(
            "FFN input has {} features, expected {d}",
            x.cols()
        )));
    }
    Ok(())
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FfnCache {
    pub input: DenseMatrix,
    pub pre: DenseMatrix,
    pub act: DenseMatrix,
}

fn activate(pre: &DenseMatrix) -> DenseMatrix {
    let mut act = pre.clone();
    act.as_mut_slice().iter_mut().for_each(|x| *x = gelu(*x));
    act
}

fn activation_backward(pre: &DenseMatrix, d_act: &mut DenseMatrix) {
    for (g, x) in d_act.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        *g *= gelu_grad(*x);
    }
}

/// Uncompressed FFN block.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFfn {
    pub w_in: DenseMatrix,
    pub b_in: Vec<f64>,
    pub w_out: DenseMatrix,
    pub b_out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseFfnGrad {
    pub w_in: DenseMatrix,
    pub b_in: Vec<f64>,
    pub w_out: DenseMatrix,
    pub b_out: Vec<f64>,
    pub input: DenseMatrix,
}

impl DenseFfn {
    pub fn new(w_in: DenseMatrix, b_in: Vec<f64>, w_out: DenseMatrix, b_out: Vec<f64>) -> Result<Self> {
        let (h, d) = w_in.shape();
        if w_out.shape() != (d, h) || b_in.len() != h || b_out.len() != d {
            return Err(Error::Dimension(format!(
                "dense FFN: w_in {h}x{d}, w_out {:?}, b_in {}, b_out {}",
                w_out.shape(),
                b_in.len(),
                b_out.len()
            )));
        }
        Ok(Self { w_in, b_in, w_out, b_out })
    }

    pub fn model_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w_in.len() + self.w_out.len() + self.b_in.len() + self.b_out.len()
    }

    pub fn forward(&self, xb: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_cached(xb)?.0)
    }

    pub fn forward_cached(&self, xb: &DenseMatrix) -> Result<(DenseMatrix, FfnCache)> {
        check_input(xb, self.model_dim())?;
        let mut pre = matmul_nt(xb, &self.w_in)?;
        add_bias(&mut pre, &self.b_in);
        let act = activate(&pre);
        let mut out = matmul_nt(&act, &self.w_out)?;
        add_bias(&mut out, &self.b_out);
        Ok((
            out,
            FfnCache {
                input: xb.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward_cached(&self, cache: &FfnCache, upstream: &DenseMatrix) -> Result<DenseFfnGrad> {
        if upstream.shape() != (cache.input.rows(), self.model_dim()) {
            return Err(Error::Dimension("dense FFN upstream gradient shape".into()));
        }
        let mut w_out = DenseMatrix::zeros(self.w_out.rows(), self.w_out.cols());
        gemm(1.0, upstream, true, &cache.act, false, 0.0, &mut w_out)?;
        let mut d_act = DenseMatrix::zeros(upstream.rows(), self.hidden_dim());
        gemm(1.0, upstream, false, &self.w_out, false, 0.0, &mut d_act)?;
        activation_backward(&cache.pre, &mut d_act);
        let mut w_in = DenseMatrix::zeros(self.w_in.rows(), self.w_in.cols());
        gemm(1.0, &d_act, true, &cache.input, false, 0.0, &mut w_in)?;
        let mut input = DenseMatrix::zeros(upstream.rows(), self.model_dim());
        gemm(1.0, &d_act, false, &self.w_in, false, 0.0, &mut input)?;
        Ok(DenseFfnGrad {
            w_in,
            b_in: column_sums(&d_act),
            w_out,
            b_out: column_sums(upstream),
            input,
        })
    }
}

/// FFN block whose two weight matrices are Kronecker sums; biases stay dense.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedFfn {
    pub w_in: KroneckerSum,
    pub b_in: Vec<f64>,
    pub w_out: KroneckerSum,
    pub b_out: Vec<f64>,
}

/// Gradients of a [`FactorizedFfn`], shaped like its parameters, plus `dL/dX`.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub w_in: Vec<FactorGrad>,
    pub b_in: Vec<f64>,
    pub w_out: Vec<FactorGrad>,
    pub b_out: Vec<f64>,
    pub input: DenseMatrix,
}

impl FactorizedFfn {
    pub fn new(w_in: KroneckerSum, b_in: Vec<f64>, w_out: KroneckerSum, b_out: Vec<f64>) -> Result<Self> {
        let (h, d) = w_in.target_shape();
        if w_out.target_shape() != (d, h) || b_in.len() != h || b_out.len() != d {
            return Err(Error::Dimension(format!(
                "factorized FFN: w_in targets {h}x{d}, w_out targets {:?}, b_in {}, b_out {}",
                w_out.target_shape(),
                b_in.len(),
                b_out.len()
            )));
        }
        Ok(Self { w_in, b_in, w_out, b_out })
    }

    pub fn model_dim(&self) -> usize {
        self.w_in.target_shape().1
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.target_shape().0
    }

    /// Factor entries, unabsorbed scalars and both biases.
    pub fn param_count(&self) -> usize {
        self.w_in.param_count() + self.w_out.param_count() + self.b_in.len() + self.b_out.len()
    }

    pub fn forward(&self, xb: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_cached(xb)?.0)
    }

    pub fn forward_cached(&self, xb: &DenseMatrix) -> Result<(DenseMatrix, FfnCache)> {
        check_input(xb, self.model_dim())?;
        let mut pre = kron_matmul_batch(&self.w_in, xb)?;
        add_bias(&mut pre, &self.b_in);
        let act = activate(&pre);
        let mut out = kron_matmul_batch(&self.w_out, &act)?;
        add_bias(&mut out, &self.b_out);
        Ok((
            out,
            FfnCache {
                input: xb.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward_cached(&self, cache: &FfnCache, upstream: &DenseMatrix) -> Result<GradientBundle> {
        if upstream.shape() != (cache.input.rows(), self.model_dim()) {
            return Err(Error::Dimension(format!(
                "FFN upstream gradient is {:?}, expected {:?}",
                upstream.shape(),
                (cache.input.rows(), self.model_dim())
            )));
        }
        let (w_out, mut d_act) = kron_matmul_batch_backward(&self.w_out, &cache.act, upstream)?;
        activation_backward(&cache.pre, &mut d_act);
        let (w_in, input) = kron_matmul_batch_backward(&self.w_in, &cache.input, &d_act)?;
        Ok(GradientBundle {
            w_in,
            b_in: column_sums(&d_act),
            w_out,
            b_out: column_sums(upstream),
            input,
        })
    }

    pub fn backward(&self, xb: &DenseMatrix, upstream: &DenseMatrix) -> Result<GradientBundle> {
        let (_, cache) = self.forward_cached(xb)?;
        self.backward_cached(&cache, upstream)
    }

    /// Same block with every scalar folded into its `A` factor.
    pub fn absorb_scalars(&self) -> Self {
        Self {
            w_in: absorb_scalars(&self.w_in),
            b_in: self.b_in.clone(),
            w_out: absorb_scalars(&self.w_out),
            b_out: self.b_out.clone(),
        }
    }
}

pub fn ffn_forward(ffn: &FactorizedFfn, xb: &DenseMatrix) -> Result<DenseMatrix> {
    ffn.forward(xb)
}

pub fn ffn_backward(ffn: &FactorizedFfn, xb: &DenseMatrix, upstream: &DenseMatrix) -> Result<GradientBundle> {
    ffn.backward(xb, upstream)
}

/// Factorizes a dense block.
///
/// `w_in` (`hidden x d`) is split with `A` of shape `m1 x n1`; `w_out`
/// (`d x hidden`) uses the transposed split, `A` of shape `n1 x m1`. The
/// pruning strategy ignores `(m1, n1, k)` and strides the rows of both
/// matrices. Biases are copied unchanged.
pub fn import_dense(dense: &DenseFfn, strategy: InitStrategy, m1: usize, n1: usize, k: usize) -> Result<FactorizedFfn> {
    let (w_in, w_out) = match strategy {
        InitStrategy::Vl => (
            kronecker_decompose(&dense.w_in, m1, n1, k)?,
            kronecker_decompose(&dense.w_out, n1, m1, k)?,
        ),
        InitStrategy::NormalizedVl => (
            normalized_vl_init(&dense.w_in, m1, n1, k)?.0,
            normalized_vl_init(&dense.w_out, n1, m1, k)?.0,
        ),
        InitStrategy::Prune { keep_every, epsilon } => (
            pruning_init(&dense.w_in, keep_every, epsilon)?,
            pruning_init(&dense.w_out, keep_every, epsilon)?,
        ),
    };
    FactorizedFfn::new(w_in, dense.b_in.clone(), w_out, dense.b_out.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kron::{materialize, FactorPair};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
    }

    fn random_sum(rng: &mut ChaCha8Rng, k: usize, sa: (usize, usize), sb: (usize, usize)) -> KroneckerSum {
        KroneckerSum::new(
            (0..k)
                .map(|_| FactorPair::new(rng.random_range(0.5..1.5), random(rng, sa.0, sa.1), random(rng, sb.0, sb.1)).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-15);
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_input_and_biases_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ffn = FactorizedFfn::new(
            random_sum(&mut rng, 2, (4, 2), (4, 2)),
            vec![0.0; 16],
            random_sum(&mut rng, 2, (2, 4), (2, 4)),
            vec![0.0; 4],
        )
        .unwrap();
        let out = ffn.forward(&DenseMatrix::zeros(3, 4)).unwrap();
        assert!(out.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_factors_apply_gelu() {
        let id = || KroneckerSum::single(DenseMatrix::identity(4), DenseMatrix::identity(2));
        let ffn = FactorizedFfn::new(id(), vec![0.0; 8], id(), vec![0.0; 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 5, 8);
        let out = ffn.forward(&x).unwrap();
        for (o, xi) in out.as_slice().iter().zip(x.as_slice()) {
            assert!((o - gelu(*xi)).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_errors() {
        let id = || KroneckerSum::single(DenseMatrix::identity(4), DenseMatrix::identity(2));
        assert!(FactorizedFfn::new(id(), vec![0.0; 7], id(), vec![0.0; 8]).is_err());
        let ffn = FactorizedFfn::new(id(), vec![0.0; 8], id(), vec![0.0; 8]).unwrap();
        assert!(ffn.forward(&DenseMatrix::zeros(2, 7)).is_err());
        assert!(ffn.backward(&DenseMatrix::zeros(2, 8), &DenseMatrix::zeros(3, 8)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ffn = FactorizedFfn::new(
            random_sum(&mut rng, 2, (3, 2), (4, 3)),
            random_vec(&mut rng, 12),
            random_sum(&mut rng, 2, (2, 3), (3, 4)),
            random_vec(&mut rng, 6),
        )
        .unwrap();
        let x = random(&mut rng, 4, 6);
        let g = ffn.backward(&x, &DenseMatrix::zeros(4, 6)).unwrap();
        let all_zero = g.w_in.iter().chain(&g.w_out).all(|f| {
            f.ds == 0.0 && f.da.as_slice().iter().all(|&v| v == 0.0) && f.db.as_slice().iter().all(|&v| v == 0.0)
        });
        assert!(all_zero);
        assert!(g.b_in.iter().chain(&g.b_out).all(|&v| v == 0.0));
        assert!(g.input.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_and_factorized_agree_after_materialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ffn = FactorizedFfn::new(
            random_sum(&mut rng, 3, (4, 2), (3, 3)),
            random_vec(&mut rng, 12),
            random_sum(&mut rng, 3, (2, 4), (3, 3)),
            random_vec(&mut rng, 6),
        )
        .unwrap();
        let dense = DenseFfn::new(
            materialize(&ffn.w_in).unwrap(),
            ffn.b_in.clone(),
            materialize(&ffn.w_out).unwrap(),
            ffn.b_out.clone(),
        )
        .unwrap();
        let x = random(&mut rng, 7, 6);
        let diff = ffn.forward(&x).unwrap().max_abs_diff(&dense.forward(&x).unwrap()).unwrap();
        assert!(diff < 1e-10, "{diff}");

        let g = random(&mut rng, 7, 6);
        let fg = ffn.backward(&x, &g).unwrap();
        let (_, cache) = dense.forward_cached(&x).unwrap();
        let dg = dense.backward_cached(&cache, &g).unwrap();
        assert!(fg.input.max_abs_diff(&dg.input).unwrap() < 1e-10);
        for (a, b) in fg.b_in.iter().zip(&dg.b_in) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dense_ffn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dense = DenseFfn::new(random(&mut rng, 8, 4), random_vec(&mut rng, 8), random(&mut rng, 4, 8), random_vec(&mut rng, 4)).unwrap();
        let x = random(&mut rng, 3, 4);
        let up = random(&mut rng, 3, 4);
        let loss = |f: &DenseFfn| f.forward(&x).unwrap().dot(&up).unwrap();
        let (_, cache) = dense.forward_cached(&x).unwrap();
        let g = dense.backward_cached(&cache, &up).unwrap();
        let h = 1e-6;
        for idx in 0..32 {
            let mut p = dense.clone();
            p.w_in.as_mut_slice()[idx] += h;
            let mut m = dense.clone();
            m.w_in.as_mut_slice()[idx] -= h;
            assert!(((loss(&p) - loss(&m)) / (2.0 * h) - g.w_in.as_slice()[idx]).abs() < 1e-7);
            let mut p = dense.clone();
            p.w_out.as_mut_slice()[idx] += h;
            let mut m = dense.clone();
            m.w_out.as_mut_slice()[idx] -= h;
            assert!(((loss(&p) - loss(&m)) / (2.0 * h) - g.w_out.as_slice()[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("vl".parse::<InitStrategy>().unwrap(), InitStrategy::Vl);
        assert_eq!("normalized_vl".parse::<InitStrategy>().unwrap(), InitStrategy::NormalizedVl);
        assert_eq!("prune".parse::<InitStrategy>().unwrap(), InitStrategy::DEFAULT_PRUNE);
        assert!("svd".parse::<InitStrategy>().is_err());
    }
}
