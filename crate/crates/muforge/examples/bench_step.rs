use muforge::corpus::{build_vocab, synthetic};
use muforge::model::{CellKind, ModelConfig, ZInjection};
use muforge::objectives::{AnnealShape, KlReduction, RegularizerConfig};
use muforge::trainer::{train, Seeds, TrainContext, TrainerConfig};
use std::time::Instant;

fn main() {
    let corpus = synthetic::generate(2600, 11);
    let (train_set, valid, _test) = synthetic::split(&corpus);
    let vocab = build_vocab(&train_set, 1, 500).unwrap();
    let model = ModelConfig {
        vocab_size: vocab.size(),
        embed_dim: 24,
        enc_hidden: 48,
        dec_hidden: 48,
        latent_dim: 16,
        layer_norm: false,
        cell: CellKind::Lstm,
        z_injection: ZInjection::PerStepAndInit,
        bow_hidden: None,
    };
    let trainer = TrainerConfig { lr: 0.001, batch_size: 32, steps: 3000, clip: 5.0, eval_every: 500, eval_mc_samples: 1 };

    let variants: Vec<(&str, RegularizerConfig)> = vec![
        ("vanilla       ", RegularizerConfig::default()),
        ("vanilla+KLA   ", RegularizerConfig { kl_anneal_steps: 500, ..RegularizerConfig::default() }),
        ("muF b=1 +KLA  ", RegularizerConfig { mu_beta: 1.0, kl_anneal_steps: 500, ..RegularizerConfig::default() }),
        ("muF b=2 +KLA  ", RegularizerConfig { mu_beta: 2.0, kl_anneal_steps: 500, ..RegularizerConfig::default() }),
        ("muF b=3 +KLA  ", RegularizerConfig { mu_beta: 3.0, kl_anneal_steps: 500, ..RegularizerConfig::default() }),
        ("muF b=2 noKLA ", RegularizerConfig { mu_beta: 2.0, ..RegularizerConfig::default() }),
    ];
    for (name, reg) in &variants {
        let t0 = Instant::now();
        let ctx = TrainContext {
            model: &model, reg, trainer: &trainer,
            seeds: Seeds { init: 1, data: 2, sample: 3 },
            vocab: &vocab, train: &train_set, valid: &valid, max_len: 12, out_dir: None,
        };
        let out = train::<f64>(&ctx, None).unwrap();
        let last = out.evals.last().unwrap();
        let first = &out.records[0];
        let lastr = out.records.last().unwrap();
        println!(
            "{name} | held-out KL {:>7.3}  rec/tok {:.3}  rec/sent {:>7.2} | train: var_term {:.3} kl {:.3} | {:.0}s",
            last.kl, last.recon_per_token, last.recon_sum, lastr.loss.mu_var_term, lastr.loss.kl, t0.elapsed().as_secs_f64()
        );
        let _ = (first, AnnealShape::Linear, KlReduction::Mean);
    }
}
