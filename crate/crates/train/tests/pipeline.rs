use kronykit_core::io::Container;
use kronykit_core::{materialize, InitStrategy};
use kronykit_train::model::ParamKind;
use kronykit_train::trainer::{compress_checkpoint, eval_nll, finetune, train_dense};
use kronykit_train::{learning_rate, Batch, Checkpoint, Ffn, Model, ToyModelConfig, TrainConfig, Vocab, SAMPLE_CORPUS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(vocab: usize) -> ToyModelConfig {
    ToyModelConfig {
        layers: 2,
        d_model: 8,
        ffn_dim: 32,
        heads: 2,
        context: 6,
        vocab,
    }
}

fn perturb(model: &Model, tensor: usize, index: usize, delta: f64) -> Model {
    let mut m = model.clone();
    let mut i = 0;
    m.visit_params_mut(&mut |_, p| {
        if i == tensor {
            p[index] += delta;
        }
        i += 1;
    });
    m
}

fn check_gradients(model: &Model, batch: &Batch) {
    let (_, grads) = model.loss_and_grads(batch).unwrap();
    let h = 1e-5;
    for (t, g) in grads.iter().enumerate() {
        let fd: Vec<f64> = (0..g.len())
            .map(|j| {
                let up = perturb(model, t, j, h).loss(batch).unwrap();
                let down = perturb(model, t, j, -h).loss(batch).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect();
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let err = g.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
        assert!(err < 1e-5, "tensor {t}: relative error {err}");
    }
}

fn random_batch(rng: &mut ChaCha8Rng, vocab: u32) -> Batch {
    let tokens: Vec<u32> = (0..60).map(|_| rng.random_range(0..vocab)).collect();
    Batch::sample(&tokens, 3, 6, rng)
}

#[test]
fn dense_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut model = Model::new(tiny(7), &mut rng).unwrap();
    // Larger weights exercise the nonlinearities.
    model.visit_params_mut(&mut |_, p| p.iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3)));
    let batch = random_batch(&mut rng, 7);
    check_gradients(&model, &batch);
}

#[test]
fn factorized_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut dense = Model::new(tiny(7), &mut rng).unwrap();
    dense.visit_params_mut(&mut |_, p| p.iter_mut().for_each(|x| *x += rng.random_range(-0.3..0.3)));
    let model = dense.compress(InitStrategy::NormalizedVl, 8, 4, 2).unwrap();
    let batch = random_batch(&mut rng, 7);
    check_gradients(&model, &batch);
}

#[test]
fn absorbed_scalars_are_frozen() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dense = Model::new(tiny(7), &mut rng).unwrap();
    let c = dense.compress(InitStrategy::Vl, 8, 4, 2).unwrap();
    let a = c.absorb_scalars();
    let (mut frozen_c, mut frozen_a) = (0, 0);
    c.clone().visit_params_mut(&mut |k, _| frozen_c += (k == ParamKind::Frozen) as usize);
    a.clone().visit_params_mut(&mut |k, _| frozen_a += (k == ParamKind::Frozen) as usize);
    assert_eq!(frozen_c, 0);
    assert_eq!(frozen_a, 2 * 2 * 2);
    assert_eq!(c.param_count() - a.param_count(), 2 * 2 * 2);
    let batch = random_batch(&mut rng, 7);
    assert!((c.loss(&batch).unwrap() - a.loss(&batch).unwrap()).abs() < 1e-12);
}

#[test]
fn pruning_with_zero_epsilon_matches_masked_dense_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let dense = Model::new(tiny(7), &mut rng).unwrap();
    let pruned = dense
        .compress(InitStrategy::Prune { keep_every: 2, epsilon: 0.0 }, 0, 0, 1)
        .unwrap();
    let mut masked = dense.clone();
    for b in &mut masked.blocks {
        let Ffn::Dense(f) = &mut b.ffn else { unreachable!() };
        for r in (1..f.w_in.rows()).step_by(2) {
            f.w_in.row_mut(r).fill(0.0);
        }
        for r in (1..f.w_out.rows()).step_by(2) {
            f.w_out.row_mut(r).fill(0.0);
        }
    }
    for b in pruned.blocks.iter().zip(&masked.blocks) {
        let (Ffn::Factorized(p), Ffn::Dense(m)) = (&b.0.ffn, &b.1.ffn) else { unreachable!() };
        assert_eq!(materialize(&p.w_in).unwrap(), m.w_in);
        assert_eq!(materialize(&p.w_out).unwrap(), m.w_out);
    }
    for _ in 0..5 {
        let batch = random_batch(&mut rng, 7);
        let (lp, lm) = (pruned.loss(&batch).unwrap(), masked.loss(&batch).unwrap());
        assert!((lp - lm).abs() <= 1e-12 * lm.abs(), "{lp} vs {lm}");
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        batch_sequences: 4,
        epochs: 1,
        max_steps: Some(30),
        warmup_steps: 5,
        eval_interval: 10,
        eval_windows: 8,
        ..TrainConfig::default()
    }
}

fn small_model() -> ToyModelConfig {
    ToyModelConfig {
        layers: 1,
        d_model: 16,
        ffn_dim: 64,
        heads: 2,
        context: 32,
        vocab: 0,
    }
}

#[test]
fn dense_training_lowers_validation_loss() {
    let (_, log) = train_dense(SAMPLE_CORPUS, small_model(), &small_train()).unwrap();
    assert!(log.final_val_nll().unwrap() < log.initial_val_nll().unwrap());
    for (t, r) in log.records.iter().enumerate() {
        let expected = learning_rate(t, 3e-3, 3e-4, 5, 30);
        assert!((r.lr - expected).abs() <= 1e-12);
    }
    assert_eq!(log.records[5].lr, 3e-3);
}

#[test]
fn compression_keeps_non_ffn_tensors_byte_identical() {
    let (ck, _) = train_dense(SAMPLE_CORPUS, small_model(), &TrainConfig { max_steps: Some(3), ..small_train() }).unwrap();
    let c = compress_checkpoint(&ck, InitStrategy::NormalizedVl, 32, 8, 1).unwrap();
    let before = ck.to_container().unwrap();
    let after = c.to_container().unwrap();
    for t in before.tensors() {
        if t.name.contains(".ffn.w_") {
            continue;
        }
        let u = after.get(&t.name).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&t.data), bits(&u.data), "{}", t.name);
    }
    for b in &c.model.blocks {
        let Ffn::Factorized(f) = &b.ffn else { panic!() };
        assert_eq!(f.w_in.factor_shapes(), ((32, 8), (2, 2)));
    }
    for (b, d) in c.model.blocks.iter().zip(&ck.model.blocks) {
        let (Ffn::Factorized(f), Ffn::Dense(g)) = (&b.ffn, &d.ffn) else { panic!() };
        let rel = (materialize(&f.w_in).unwrap().frobenius_norm() - g.w_in.frobenius_norm()).abs() / g.w_in.frobenius_norm();
        assert!(rel < 1e-10);
        let rel = (materialize(&f.w_out).unwrap().frobenius_norm() - g.w_out.frobenius_norm()).abs() / g.w_out.frobenius_norm();
        assert!(rel < 1e-10);
    }
    assert!(compress_checkpoint(&ck, InitStrategy::Vl, 30, 8, 1).is_err());
}

#[test]
fn checkpoint_files_round_trip_and_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, _) = train_dense(SAMPLE_CORPUS, small_model(), &TrainConfig { max_steps: Some(3), ..small_train() }).unwrap();
    let c = compress_checkpoint(&ck, InitStrategy::Vl, 32, 8, 2).unwrap();
    let path = dir.path().join("c.kpt");
    c.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, c);
    let tune = TrainConfig {
        warmup_steps: 0,
        peak_lr: 1e-3,
        floor_lr: 1e-3,
        max_steps: Some(4),
        ..small_train()
    };
    let (tuned, log) = finetune(&back, SAMPLE_CORPUS, &tune).unwrap();
    assert!(log.records.iter().all(|r| r.lr == 1e-3));
    assert!(tuned.model.is_factorized());
    assert!(Container::load(&path).unwrap().kron_groups().len() == 2);
}

#[test]
fn untrained_model_perplexity_is_near_vocab_size() {
    let vocab = Vocab::from_text(SAMPLE_CORPUS);
    let cfg = ToyModelConfig {
        vocab: vocab.len(),
        ..small_model()
    };
    let model = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let ck = Checkpoint { model, vocab };
    let r = eval_nll(&ck, &SAMPLE_CORPUS[..2000]).unwrap();
    let v = ck.vocab.len() as f64;
    assert!((r.perplexity - v).abs() / v < 0.02, "{} vs {v}", r.perplexity);
    assert!((r.perplexity - r.nll.exp()).abs() <= 1e-12 * r.perplexity);
}
