//! Dense pre-training, compression, fine-tuning and evaluation of the toy model.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use kronykit_core::{Error, InitStrategy, Result};

use crate::checkpoint::Checkpoint;
use crate::config::{ToyModelConfig, TrainConfig};
use crate::data::{eval_batches, Batch, Corpus};
use crate::model::Model;
use crate::optim::{grad_norm, AdamW};
use crate::schedule::learning_rate;

const EVAL_BATCH_SEQUENCES: usize = 8;

/// One optimizer step; `val_nll` is set on evaluation steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
}

/// Validation NLL against progress through the training data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch_fraction: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub records: Vec<LogRecord>,
    /// Starts with the untrained model at epoch fraction 0.
    pub curve: Vec<CurvePoint>,
}

impl TrainLog {
    pub fn initial_val_nll(&self) -> Option<f64> {
        self.curve.first().map(|p| p.val_nll)
    }

    pub fn final_val_nll(&self) -> Option<f64> {
        self.curve.last().map(|p| p.val_nll)
    }

    /// `step,lr,train_nll,val_nll`, with an empty `val_nll` on non-evaluation steps.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "step,lr,train_nll,val_nll")?;
        for r in &self.records {
            let val = r.val_nll.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", r.step, r.lr, r.train_nll, val)?;
        }
        Ok(())
    }

    pub fn write_curve_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "step,epoch_fraction,val_nll")?;
        for p in &self.curve {
            writeln!(w, "{},{},{}", p.step, p.epoch_fraction, p.val_nll)?;
        }
        Ok(())
    }
}

/// Mean next-token NLL over up to `max_windows` context windows of `tokens`.
pub fn mean_nll(model: &Model, tokens: &[u32], max_windows: usize) -> Result<f64> {
    let batches = eval_batches(tokens, model.config.context, max_windows, EVAL_BATCH_SEQUENCES);
    if batches.is_empty() {
        return Err(Error::Data("need at least two tokens to evaluate".into()));
    }
    let mut total = 0.0;
    let mut count = 0;
    for b in &batches {
        total += model.batch_nll_sum(b)?;
        count += b.tokens();
    }
    Ok(total / count as f64)
}

fn steps_per_epoch(corpus: &Corpus, context: usize, tcfg: &TrainConfig) -> usize {
    (corpus.train.len() / (tcfg.effective_batch() * context)).max(1)
}

/// Trains in place, calling `observe` after every step.
pub fn train_with(
    model: &mut Model,
    corpus: &Corpus,
    tcfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    observe: &mut dyn FnMut(&LogRecord),
) -> Result<TrainLog> {
    tcfg.validate()?;
    let context = model.config.context;
    if corpus.vocab.len() != model.config.vocab {
        return Err(Error::Data("corpus vocabulary does not match the model".into()));
    }
    let spe = steps_per_epoch(corpus, context, tcfg);
    let total = tcfg.max_steps.map_or(spe * tcfg.epochs, |cap| cap.min(spe * tcfg.epochs));
    let mut log = TrainLog {
        steps_per_epoch: spe,
        total_steps: total,
        ..TrainLog::default()
    };
    log.curve.push(CurvePoint {
        step: 0,
        epoch_fraction: 0.0,
        val_nll: mean_nll(model, &corpus.val, tcfg.eval_windows)?,
    });
    let mut opt = AdamW::new(tcfg);
    let scale = 1.0 / tcfg.grad_accum_steps as f64;
    for t in 0..total {
        let lr = learning_rate(t, tcfg.peak_lr, tcfg.floor_lr, tcfg.warmup_steps, total);
        let mut grads: Option<Vec<Vec<f64>>> = None;
        let mut train_nll = 0.0;
        for _ in 0..tcfg.grad_accum_steps {
            let batch = Batch::sample(&corpus.train, tcfg.batch_sequences, context, rng);
            let (loss, g) = model
                .loss_and_grads(&batch)
                .map_err(|e| Error::NonFinite(format!("step {t} (lr {lr}): {e}")))?;
            train_nll += loss * scale;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => acc
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
            }
        }
        let mut grads = grads.expect("at least one micro-batch");
        if tcfg.grad_accum_steps > 1 {
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
        }
        let norm = grad_norm(model, &grads);
        if !norm.is_finite() || !train_nll.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {t} (lr {lr}): train NLL {train_nll}, gradient norm {norm}; aborting"
            )));
        }
        if let Some(clip) = tcfg.grad_clip {
            if norm > clip {
                let s = clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        opt.update(model, &grads, lr);

        let evaluate = (t + 1) % tcfg.eval_interval == 0 || t + 1 == total;
        let val_nll = if evaluate {
            let v = mean_nll(model, &corpus.val, tcfg.eval_windows)?;
            log.curve.push(CurvePoint {
                step: t + 1,
                epoch_fraction: (t + 1) as f64 / spe as f64,
                val_nll: v,
            });
            Some(v)
        } else {
            None
        };
        let record = LogRecord {
            step: t,
            lr,
            train_nll,
            val_nll,
        };
        observe(&record);
        log.records.push(record);
    }
    Ok(log)
}

/// Trains a fresh dense model on `text`. The seed drives initialization and sampling.
pub fn train_dense(text: &str, cfg: ToyModelConfig, tcfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    train_dense_with(text, cfg, tcfg, &mut |_| {})
}

pub fn train_dense_with(
    text: &str,
    cfg: ToyModelConfig,
    tcfg: &TrainConfig,
    observe: &mut dyn FnMut(&LogRecord),
) -> Result<(Checkpoint, TrainLog)> {
    let corpus = Corpus::new(text, cfg.context)?;
    let cfg = ToyModelConfig {
        vocab: corpus.vocab.len(),
        ..cfg
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut model = Model::new(cfg, &mut rng)?;
    let log = train_with(&mut model, &corpus, tcfg, &mut rng, observe)?;
    Ok((
        Checkpoint {
            model,
            vocab: corpus.vocab,
        },
        log,
    ))
}

/// Factorizes every FFN; embeddings, attention and norms are copied verbatim.
pub fn compress_checkpoint(ckpt: &Checkpoint, strategy: InitStrategy, m1: usize, n1: usize, k: usize) -> Result<Checkpoint> {
    Ok(Checkpoint {
        model: ckpt.model.compress(strategy, m1, n1, k)?,
        vocab: ckpt.vocab.clone(),
    })
}

/// Continues training on `text`, which must only use the checkpoint's characters.
pub fn finetune(ckpt: &Checkpoint, text: &str, tcfg: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    finetune_with(ckpt, text, tcfg, &mut |_| {})
}

pub fn finetune_with(
    ckpt: &Checkpoint,
    text: &str,
    tcfg: &TrainConfig,
    observe: &mut dyn FnMut(&LogRecord),
) -> Result<(Checkpoint, TrainLog)> {
    let corpus = Corpus::with_vocab(text, ckpt.vocab.clone(), ckpt.model.config.context)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut model = ckpt.model.clone();
    let log = train_with(&mut model, &corpus, tcfg, &mut rng, observe)?;
    Ok((
        Checkpoint {
            model,
            vocab: ckpt.vocab.clone(),
        },
        log,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub nll: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Per-token NLL and perplexity over all of `text`.
pub fn eval_nll(ckpt: &Checkpoint, text: &str) -> Result<EvalReport> {
    if text.chars().nth(1).is_none() {
        return Err(Error::Data("held-out text needs at least two characters".into()));
    }
    let tokens = ckpt.vocab.encode(text)?;
    let nll = mean_nll(&ckpt.model, &tokens, usize::MAX)?;
    Ok(EvalReport {
        nll,
        perplexity: nll.exp(),
        tokens: tokens.len() - 1,
    })
}
