//! Tiny GPT-style character model with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use kronykit_core::ffn::{import_dense, DenseFfn, FactorizedFfn, FfnCache, InitStrategy};
use kronykit_core::linalg::{matmul, matmul_nt, matmul_tn};
use kronykit_core::kron::FactorGrad;
use kronykit_core::{DenseMatrix, Error, KroneckerSum, Result};

use crate::config::ToyModelConfig;
use crate::data::Batch;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// How the optimizer treats a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Decay,
    NoDecay,
    Frozen,
}

fn add_bias(m: &mut DenseMatrix, bias: &[f64]) {
    for r in 0..m.rows() {
        m.row_mut(r).iter_mut().zip(bias).for_each(|(x, b)| *x += b);
    }
}

fn column_sums(m: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        out.iter_mut().zip(m.row(r)).for_each(|(o, x)| *o += x);
    }
    out
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> DenseMatrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    DenseMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: DenseMatrix,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn forward(&self, x: &DenseMatrix) -> (DenseMatrix, LnCache) {
        let d = x.cols() as f64;
        let mut xhat = x.clone();
        let mut rstd = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let s = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            rstd.push(s);
        }
        let mut y = xhat.clone();
        for r in 0..y.rows() {
            for ((v, g), b) in y.row_mut(r).iter_mut().zip(&self.gain).zip(&self.bias) {
                *v = *v * g + b;
            }
        }
        (y, LnCache { xhat, rstd })
    }

    fn backward(&self, cache: &LnCache, dy: &DenseMatrix) -> (DenseMatrix, Vec<f64>, Vec<f64>) {
        let d = dy.cols();
        let mut dgain = vec![0.0; d];
        let mut dbias = vec![0.0; d];
        let mut dx = DenseMatrix::zeros(dy.rows(), d);
        let mut dxhat = vec![0.0; d];
        for r in 0..dy.rows() {
            let (g, xh) = (dy.row(r), cache.xhat.row(r));
            for j in 0..d {
                dxhat[j] = g[j] * self.gain[j];
                dgain[j] += g[j] * xh[j];
                dbias[j] += g[j];
            }
            let m1 = dxhat.iter().sum::<f64>() / d as f64;
            let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let s = cache.rstd[r];
            for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
                *out = s * (dxhat[j] - m1 - xh[j] * m2);
            }
        }
        (dx, dgain, dbias)
    }
}

/// Causal multi-head self-attention with a fused QKV projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    /// `3d x d`, rows ordered Q, K, V.
    pub w_qkv: DenseMatrix,
    pub b_qkv: Vec<f64>,
    pub w_proj: DenseMatrix,
    pub b_proj: Vec<f64>,
}

#[derive(Debug, Clone)]
struct AttnCache {
    input: DenseMatrix,
    qkv: DenseMatrix,
    probs: Vec<DenseMatrix>,
    y: DenseMatrix,
}

fn head_block(m: &DenseMatrix, seq: usize, len: usize, col: usize, width: usize) -> DenseMatrix {
    DenseMatrix::from_fn(len, width, |t, i| m[(seq * len + t, col + i)])
}

fn scatter_head(dst: &mut DenseMatrix, src: &DenseMatrix, seq: usize, len: usize, col: usize) {
    for t in 0..len {
        dst.row_mut(seq * len + t)[col..col + src.cols()].copy_from_slice(src.row(t));
    }
}

impl Attention {
    fn forward(&self, x: &DenseMatrix, seqs: usize, len: usize, heads: usize) -> Result<(DenseMatrix, AttnCache)> {
        let d = x.cols();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut qkv = matmul_nt(x, &self.w_qkv)?;
        add_bias(&mut qkv, &self.b_qkv);
        let mut y = DenseMatrix::zeros(x.rows(), d);
        let mut probs = Vec::with_capacity(seqs * heads);
        for b in 0..seqs {
            for h in 0..heads {
                let q = head_block(&qkv, b, len, h * hd, hd);
                let k = head_block(&qkv, b, len, d + h * hd, hd);
                let v = head_block(&qkv, b, len, 2 * d + h * hd, hd);
                let mut p = matmul_nt(&q, &k)?;
                for i in 0..len {
                    let row = p.row_mut(i);
                    let max = row[..=i].iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
                    let mut total = 0.0;
                    for s in row[..=i].iter_mut() {
                        *s = (*s * scale - max).exp();
                        total += *s;
                    }
                    row[..=i].iter_mut().for_each(|s| *s /= total);
                    row[i + 1..].iter_mut().for_each(|s| *s = 0.0);
                }
                scatter_head(&mut y, &matmul(&p, &v)?, b, len, h * hd);
                probs.push(p);
            }
        }
        let mut out = matmul_nt(&y, &self.w_proj)?;
        add_bias(&mut out, &self.b_proj);
        Ok((
            out,
            AttnCache {
                input: x.clone(),
                qkv,
                probs,
                y,
            },
        ))
    }

    /// Returns `dX` and gradients in parameter order.
    fn backward(
        &self,
        c: &AttnCache,
        dout: &DenseMatrix,
        seqs: usize,
        len: usize,
        heads: usize,
    ) -> Result<(DenseMatrix, [Vec<f64>; 4])> {
        let d = dout.cols();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let dw_proj = matmul_tn(dout, &c.y)?;
        let db_proj = column_sums(dout);
        let dy = matmul(dout, &self.w_proj)?;
        let mut dqkv = DenseMatrix::zeros(dout.rows(), 3 * d);
        for b in 0..seqs {
            for h in 0..heads {
                let p = &c.probs[b * heads + h];
                let q = head_block(&c.qkv, b, len, h * hd, hd);
                let k = head_block(&c.qkv, b, len, d + h * hd, hd);
                let v = head_block(&c.qkv, b, len, 2 * d + h * hd, hd);
                let dyh = head_block(&dy, b, len, h * hd, hd);
                let mut ds = matmul_nt(&dyh, &v)?;
                let dv = matmul_tn(p, &dyh)?;
                for i in 0..len {
                    let (prow, drow) = (p.row(i), ds.row_mut(i));
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    drow.iter_mut().zip(prow).for_each(|(g, pi)| *g = pi * (*g - dot) * scale);
                }
                scatter_head(&mut dqkv, &matmul(&ds, &k)?, b, len, h * hd);
                scatter_head(&mut dqkv, &matmul_tn(&ds, &q)?, b, len, d + h * hd);
                scatter_head(&mut dqkv, &dv, b, len, 2 * d + h * hd);
            }
        }
        let dw_qkv = matmul_tn(&dqkv, &c.input)?;
        let db_qkv = column_sums(&dqkv);
        let dx = matmul(&dqkv, &self.w_qkv)?;
        Ok((dx, [dw_qkv.into_vec(), db_qkv, dw_proj.into_vec(), db_proj]))
    }
}

fn visit_sum(sum: &mut KroneckerSum, f: &mut dyn FnMut(ParamKind, &mut [f64])) {
    let scale_kind = if sum.learnable_scales() {
        ParamKind::NoDecay
    } else {
        ParamKind::Frozen
    };
    for fp in sum.factors_mut() {
        f(ParamKind::Decay, fp.a_mut());
        f(ParamKind::Decay, fp.b_mut());
        f(scale_kind, std::slice::from_mut(fp.scale_mut()));
    }
}

/// Feed-forward block, dense or Kronecker-factorized.
#[derive(Debug, Clone, PartialEq)]
pub enum Ffn {
    Dense(DenseFfn),
    Factorized(FactorizedFfn),
}

impl Ffn {
    fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, FfnCache)> {
        match self {
            Ffn::Dense(f) => f.forward_cached(x),
            Ffn::Factorized(f) => f.forward_cached(x),
        }
    }

    fn backward(&self, cache: &FfnCache, dy: &DenseMatrix) -> Result<(DenseMatrix, Vec<Vec<f64>>)> {
        match self {
            Ffn::Dense(f) => {
                let g = f.backward_cached(cache, dy)?;
                Ok((g.input, vec![g.w_in.into_vec(), g.b_in, g.w_out.into_vec(), g.b_out]))
            }
            Ffn::Factorized(f) => {
                let g = f.backward_cached(cache, dy)?;
                let mut out = Vec::new();
                let push_sum = |out: &mut Vec<Vec<f64>>, grads: Vec<FactorGrad>| {
                    for fg in grads {
                        out.push(fg.da.into_vec());
                        out.push(fg.db.into_vec());
                        out.push(vec![fg.ds]);
                    }
                };
                push_sum(&mut out, g.w_in);
                out.push(g.b_in);
                push_sum(&mut out, g.w_out);
                out.push(g.b_out);
                Ok((g.input, out))
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut [f64])) {
        match self {
            Ffn::Dense(d) => {
                f(ParamKind::Decay, d.w_in.as_mut_slice());
                f(ParamKind::NoDecay, &mut d.b_in);
                f(ParamKind::Decay, d.w_out.as_mut_slice());
                f(ParamKind::NoDecay, &mut d.b_out);
            }
            Ffn::Factorized(k) => {
                visit_sum(&mut k.w_in, f);
                f(ParamKind::NoDecay, &mut k.b_in);
                visit_sum(&mut k.w_out, f);
                f(ParamKind::NoDecay, &mut k.b_out);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Ffn::Dense(d) => d.param_count(),
            Ffn::Factorized(k) => k.param_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    ffn: FfnCache,
}

impl Block {
    fn forward(&self, x: &DenseMatrix, seqs: usize, len: usize, heads: usize) -> Result<(DenseMatrix, BlockCache)> {
        let (h1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&h1, seqs, len, heads)?;
        let mid = x.add(&a)?;
        let (h2, ln2) = self.ln2.forward(&mid);
        let (f, ffn) = self.ffn.forward(&h2)?;
        Ok((mid.add(&f)?, BlockCache { ln1, attn, ln2, ffn }))
    }

    fn backward(
        &self,
        c: &BlockCache,
        dout: &DenseMatrix,
        seqs: usize,
        len: usize,
        heads: usize,
    ) -> Result<(DenseMatrix, Vec<Vec<f64>>)> {
        let (dh2, ffn_grads) = self.ffn.backward(&c.ffn, dout)?;
        let (dmid_ln, g2, b2) = self.ln2.backward(&c.ln2, &dh2);
        let dmid = dout.add(&dmid_ln)?;
        let (dh1, attn_grads) = self.attn.backward(&c.attn, &dmid, seqs, len, heads)?;
        let (dx_ln, g1, b1) = self.ln1.backward(&c.ln1, &dh1);
        let dx = dmid.add(&dx_ln)?;
        let mut grads = vec![g1, b1];
        grads.extend(attn_grads);
        grads.push(g2);
        grads.push(b2);
        grads.extend(ffn_grads);
        Ok((dx, grads))
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut [f64])) {
        f(ParamKind::NoDecay, &mut self.ln1.gain);
        f(ParamKind::NoDecay, &mut self.ln1.bias);
        f(ParamKind::Decay, self.attn.w_qkv.as_mut_slice());
        f(ParamKind::NoDecay, &mut self.attn.b_qkv);
        f(ParamKind::Decay, self.attn.w_proj.as_mut_slice());
        f(ParamKind::NoDecay, &mut self.attn.b_proj);
        f(ParamKind::NoDecay, &mut self.ln2.gain);
        f(ParamKind::NoDecay, &mut self.ln2.bias);
        self.ffn.visit_mut(f);
    }
}

/// Gradients in the order of [`Model::visit_params_mut`].
pub type Gradients = Vec<Vec<f64>>;

/// Decoder-only transformer with tied input/output embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ToyModelConfig,
    /// `vocab x d`; also the output projection.
    pub wte: DenseMatrix,
    /// `context x d`.
    pub wpe: DenseMatrix,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl Model {
    /// GPT-2 style initialization: N(0, 0.02), residual projections scaled by `1/sqrt(2L)`.
    pub fn new(config: ToyModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let resid_std = INIT_STD / (2.0 * config.layers as f64).sqrt();
        let wte = normal_matrix(config.vocab, d, INIT_STD, rng);
        let wpe = normal_matrix(config.context, d, INIT_STD, rng);
        let blocks = (0..config.layers)
            .map(|_| {
                let attn = Attention {
                    w_qkv: normal_matrix(3 * d, d, INIT_STD, rng),
                    b_qkv: vec![0.0; 3 * d],
                    w_proj: normal_matrix(d, d, resid_std, rng),
                    b_proj: vec![0.0; d],
                };
                let ffn = DenseFfn::new(
                    normal_matrix(config.ffn_dim, d, INIT_STD, rng),
                    vec![0.0; config.ffn_dim],
                    normal_matrix(d, config.ffn_dim, resid_std, rng),
                    vec![0.0; d],
                )?;
                Ok(Block {
                    ln1: LayerNorm::new(d),
                    attn,
                    ln2: LayerNorm::new(d),
                    ffn: Ffn::Dense(ffn),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            wte,
            wpe,
            blocks,
            ln_f: LayerNorm::new(d),
        })
    }

    pub fn is_factorized(&self) -> bool {
        self.blocks.iter().any(|b| matches!(b.ffn, Ffn::Factorized(_)))
    }

    /// Trainable entries, counting the tied embedding once.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.clone().visit_params_mut(&mut |kind, p| {
            if kind != ParamKind::Frozen {
                n += p.len()
            }
        });
        n
    }

    /// Visits every parameter tensor in a fixed order.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKind, &mut [f64])) {
        f(ParamKind::Decay, self.wte.as_mut_slice());
        f(ParamKind::NoDecay, self.wpe.as_mut_slice());
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        f(ParamKind::NoDecay, &mut self.ln_f.gain);
        f(ParamKind::NoDecay, &mut self.ln_f.bias);
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.len == 0 || batch.len > self.config.context {
            return Err(Error::Argument(format!(
                "sequence length {} outside 1..={}",
                batch.len, self.config.context
            )));
        }
        if batch.inputs.len() != batch.tokens() || batch.targets.len() != batch.tokens() {
            return Err(Error::Dimension("batch token count mismatch".into()));
        }
        let v = self.config.vocab as u32;
        if batch.inputs.iter().chain(&batch.targets).any(|&t| t >= v) {
            return Err(Error::Data(format!("token id outside vocabulary of {v}")));
        }
        Ok(())
    }

    fn embed(&self, batch: &Batch) -> DenseMatrix {
        let d = self.config.d_model;
        let mut x = DenseMatrix::zeros(batch.tokens(), d);
        for (r, &tok) in batch.inputs.iter().enumerate() {
            let pos = r % batch.len;
            for ((o, e), p) in x.row_mut(r).iter_mut().zip(self.wte.row(tok as usize)).zip(self.wpe.row(pos)) {
                *o = e + p;
            }
        }
        x
    }

    /// Summed next-token NLL over the batch.
    pub fn batch_nll_sum(&self, batch: &Batch) -> Result<f64> {
        self.check_batch(batch)?;
        let mut x = self.embed(batch);
        for b in &self.blocks {
            x = b.forward(&x, batch.sequences, batch.len, self.config.heads)?.0;
        }
        let (h, _) = self.ln_f.forward(&x);
        let logits = matmul_nt(&h, &self.wte)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[batch.targets[r] as usize]
            })
            .sum())
    }

    /// Mean next-token NLL.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        Ok(self.batch_nll_sum(batch)? / batch.tokens() as f64)
    }

    /// Mean NLL and its gradient for every parameter.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, Gradients)> {
        self.check_batch(batch)?;
        let (seqs, len, heads) = (batch.sequences, batch.len, self.config.heads);
        let n = batch.tokens();
        let mut x = self.embed(batch);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, seqs, len, heads)?;
            caches.push(c);
            x = y;
        }
        let (h, lnf_cache) = self.ln_f.forward(&x);
        let mut dlogits = matmul_nt(&h, &self.wte)?;
        let mut loss = 0.0;
        let inv_n = 1.0 / n as f64;
        for r in 0..n {
            let row = dlogits.row_mut(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            let target = batch.targets[r] as usize;
            loss -= (row[target] / total).ln();
            row.iter_mut().for_each(|v| *v *= inv_n / total);
            row[target] -= inv_n;
        }
        loss *= inv_n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {loss}")));
        }

        let mut dwte = matmul_tn(&dlogits, &h)?;
        let dh = matmul(&dlogits, &self.wte)?;
        let (mut dx, dgain_f, dbias_f) = self.ln_f.backward(&lnf_cache, &dh);
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (b, c) in self.blocks.iter().zip(&caches).rev() {
            let (dprev, g) = b.backward(c, &dx, seqs, len, heads)?;
            block_grads.push(g);
            dx = dprev;
        }
        let mut dwpe = DenseMatrix::zeros(self.config.context, self.config.d_model);
        for (r, &tok) in batch.inputs.iter().enumerate() {
            let g = dx.row(r);
            dwte.row_mut(tok as usize).iter_mut().zip(g).for_each(|(o, v)| *o += v);
            dwpe.row_mut(r % len).iter_mut().zip(g).for_each(|(o, v)| *o += v);
        }
        let mut grads = vec![dwte.into_vec(), dwpe.into_vec()];
        grads.extend(block_grads.into_iter().rev().flatten());
        grads.push(dgain_f);
        grads.push(dbias_f);
        Ok((loss, grads))
    }

    /// Replaces every FFN by its Kronecker factorization; all other parameters are copied.
    pub fn compress(&self, strategy: InitStrategy, m1: usize, n1: usize, k: usize) -> Result<Self> {
        let mut out = self.clone();
        for b in &mut out.blocks {
            let Ffn::Dense(dense) = &b.ffn else {
                return Err(Error::Argument("model FFNs are already factorized".into()));
            };
            b.ffn = Ffn::Factorized(import_dense(dense, strategy, m1, n1, k)?);
        }
        Ok(out)
    }

    /// Folds every Kronecker scalar into its `A` factor.
    pub fn absorb_scalars(&self) -> Self {
        let mut out = self.clone();
        for b in &mut out.blocks {
            if let Ffn::Factorized(f) = &b.ffn {
                b.ffn = Ffn::Factorized(f.absorb_scalars());
            }
        }
        out
    }
}
