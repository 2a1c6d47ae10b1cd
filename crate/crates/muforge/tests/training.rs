//! End-to-end training behavior: determinism, checkpoint persistence, and
//! resume equivalence.

use muforge::checkpoint::Checkpoint;
use muforge::corpus::{build_vocab, synthetic};
use muforge::model::{CellKind, ModelConfig, ZInjection};
use muforge::objectives::RegularizerConfig;
use muforge::trainer::{train, Seeds, TrainContext, TrainerConfig};

fn small_setup() -> (Vec<Vec<String>>, Vec<Vec<String>>, muforge::corpus::Vocabulary, ModelConfig) {
    let corpus = synthetic::generate(220, 5);
    let (train_set, valid, _) = synthetic::split(&corpus);
    let vocab = build_vocab(&train_set, 1, 500).unwrap();
    let model = ModelConfig {
        vocab_size: vocab.size(),
        embed_dim: 8,
        enc_hidden: 10,
        dec_hidden: 10,
        latent_dim: 4,
        layer_norm: false,
        cell: CellKind::Lstm,
        z_injection: ZInjection::PerStepAndInit,
        bow_hidden: None,
    };
    (train_set, valid, vocab, model)
}

fn small_trainer(steps: u64) -> TrainerConfig {
    TrainerConfig {
        lr: 0.002,
        batch_size: 16,
        steps,
        clip: 5.0,
        eval_every: 10,
        eval_mc_samples: 1,
    }
}

#[test]
fn same_seeds_give_bit_identical_runs() {
    let (train_set, valid, vocab, model) = small_setup();
    let reg = RegularizerConfig { mu_beta: 1.0, ..RegularizerConfig::default() };
    let trainer = small_trainer(25);
    let seeds = Seeds { init: 1, data: 2, sample: 3 };
    let ctx = TrainContext {
        model: &model,
        reg: &reg,
        trainer: &trainer,
        seeds,
        vocab: &vocab,
        train: &train_set,
        valid: &valid,
        max_len: 12,
        out_dir: None,
    };
    let a = train::<f64>(&ctx, None).unwrap();
    let b = train::<f64>(&ctx, None).unwrap();
    assert_eq!(a.checkpoint.params, b.checkpoint.params);
    assert_eq!(a.checkpoint.optim.m, b.checkpoint.optim.m);
    for (ra, rb) in a.records.iter().zip(&b.records) {
        assert_eq!(ra.loss, rb.loss);
        assert_eq!(ra.grad_norm_pre.to_bits(), rb.grad_norm_pre.to_bits());
    }
    assert_eq!(a.evals, b.evals);

    let other = TrainContext { seeds: Seeds { init: 9, data: 2, sample: 3 }, ..ctx };
    let c = train::<f64>(&other, None).unwrap();
    assert_ne!(a.checkpoint.params, c.checkpoint.params);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (train_set, valid, vocab, model) = small_setup();
    let reg = RegularizerConfig::default();
    let trainer = small_trainer(12);
    let ctx = TrainContext {
        model: &model,
        reg: &reg,
        trainer: &trainer,
        seeds: Seeds { init: 4, data: 5, sample: 6 },
        vocab: &vocab,
        train: &train_set,
        valid: &valid,
        max_len: 12,
        out_dir: None,
    };
    let out = train::<f64>(&ctx, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::<f64>::load(&path, Some(&vocab)).unwrap();
    assert_eq!(out.checkpoint, loaded);
}

#[test]
fn checkpoint_rejects_wrong_vocab_and_precision() {
    let (train_set, valid, vocab, model) = small_setup();
    let reg = RegularizerConfig::default();
    let trainer = small_trainer(3);
    let ctx = TrainContext {
        model: &model,
        reg: &reg,
        trainer: &trainer,
        seeds: Seeds { init: 4, data: 5, sample: 6 },
        vocab: &vocab,
        train: &train_set,
        valid: &valid,
        max_len: 12,
        out_dir: None,
    };
    let out = train::<f64>(&ctx, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    out.checkpoint.save(&path).unwrap();

    let other_vocab = build_vocab(&[vec!["zzz".to_string()]], 1, 100).unwrap();
    let err = Checkpoint::<f64>::load(&path, Some(&other_vocab)).unwrap_err();
    assert!(err.to_string().contains("vocabulary hash"), "{err}");

    let err = Checkpoint::<f32>::load(&path, None).unwrap_err();
    assert!(err.to_string().contains("precision"), "{err}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (train_set, valid, vocab, model) = small_setup();
    let reg = RegularizerConfig { mu_beta: 2.0, kl_anneal_steps: 20, ..RegularizerConfig::default() };
    let seeds = Seeds { init: 7, data: 8, sample: 9 };
    let full_cfg = small_trainer(30);
    let ctx_full = TrainContext {
        model: &model,
        reg: &reg,
        trainer: &full_cfg,
        seeds,
        vocab: &vocab,
        train: &train_set,
        valid: &valid,
        max_len: 12,
        out_dir: None,
    };
    let full = train::<f64>(&ctx_full, None).unwrap();

    let half_cfg = small_trainer(15);
    let ctx_half = TrainContext { trainer: &half_cfg, ..ctx_full };
    let half = train::<f64>(&ctx_half, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.bin");
    half.checkpoint.save(&path).unwrap();
    let restored = Checkpoint::<f64>::load(&path, Some(&vocab)).unwrap();

    let ctx_rest = TrainContext { trainer: &full_cfg, ..ctx_full };
    let resumed = train::<f64>(&ctx_rest, Some(restored)).unwrap();

    assert_eq!(full.checkpoint.params, resumed.checkpoint.params);
    assert_eq!(full.checkpoint.optim.m, resumed.checkpoint.optim.m);
    assert_eq!(full.checkpoint.optim.v, resumed.checkpoint.optim.v);
    assert_eq!(full.checkpoint.noise_rng, resumed.checkpoint.noise_rng);
    // second half of the records must line up step for step
    let tail = &full.records[15..];
    for (ra, rb) in tail.iter().zip(&resumed.records) {
        assert_eq!(ra.step, rb.step);
        assert_eq!(ra.loss, rb.loss);
    }
}

#[test]
fn f32_training_runs_and_checkpoints() {
    let (train_set, valid, vocab, model) = small_setup();
    let reg = RegularizerConfig::default();
    let trainer = small_trainer(5);
    let ctx = TrainContext {
        model: &model,
        reg: &reg,
        trainer: &trainer,
        seeds: Seeds { init: 1, data: 1, sample: 1 },
        vocab: &vocab,
        train: &train_set,
        valid: &valid,
        max_len: 12,
        out_dir: None,
    };
    let out = train::<f32>(&ctx, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt32.bin");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path, Some(&vocab)).unwrap();
    assert_eq!(out.checkpoint.params, loaded.params);
}
