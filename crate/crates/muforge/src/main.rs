use clap::{Parser, Subcommand};
use muforge::checkpoint::Checkpoint;
use muforge::config::{parse_config, CorpusSplits, Precision, RunConfig};
use muforge::corpus::{build_vocab, make_batches, save_corpus, synthetic, BatchMode, Vocabulary};
use muforge::error::{Error, Result};
use muforge::eval::bleu::{bleu, self_bleu};
use muforge::eval::{held_out_metrics, mu_histogram, sample_from_prior, EvalReport};
use muforge::latent::{attribute_transfer, encode_to_latent, interpolate};
use muforge::model::GenerateMode;
use muforge::rng::SeededRng;
use muforge::scalar::Scalar;
use muforge::trainer::{train, TrainContext};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "muforge",
    version,
    about = "Variational recurrent autoencoder toolkit: margin-regularized training, KL-collapse countermeasures, and latent-space tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as described by a run config
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written by an identical config
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Held-out metrics, BLEU/Self-BLEU of prior samples, and the
    /// posterior-mean histogram for a checkpoint
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config's output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode sentences from prior samples
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 300)]
        count: usize,
        /// Defaults to the config's sample seed
        #[arg(long)]
        seed: Option<u64>,
        /// Softmax temperature; omit for greedy decoding
        #[arg(long)]
        temperature: Option<f64>,
        /// Output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Homotopy between two sentences' latent codes
    Interpolate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sentence text, or a path to a file whose first line is used
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attribute-vector transfer: decode a + (q - p)
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        p: String,
        #[arg(long)]
        q: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per margin value; writes one run directory
    /// per value plus a merged comparison CSV
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated margin values, e.g. 1.5,2,2.5,3
        #[arg(long, value_delimiter = ',', required = true)]
        beta: Vec<f64>,
    },
    /// Write a synthetic review corpus (train/valid/test files)
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2600)]
        count: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("MUFORGE_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("muforge: ignoring invalid MUFORGE_THREADS={threads}");
            }
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("muforge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

macro_rules! with_precision {
    ($precision:expr, $fn:ident ( $($args:expr),* $(,)? )) => {
        match $precision {
            Precision::F64 => $fn::<f64>($($args),*),
            Precision::F32 => $fn::<f32>($($args),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let (cfg, splits, vocab) = load_session(&config)?;
            with_precision!(cfg.model.precision, cmd_train(&cfg, &splits, &vocab, resume.as_deref()))
        }
        Command::Eval { config, checkpoint, out } => {
            let (cfg, splits, vocab) = load_session(&config)?;
            with_precision!(
                cfg.model.precision,
                cmd_eval(&cfg, &splits, &vocab, &checkpoint, out.as_deref())
            )
        }
        Command::Sample { config, checkpoint, count, seed, temperature, out } => {
            let (cfg, _, vocab) = load_session(&config)?;
            with_precision!(
                cfg.model.precision,
                cmd_sample(&cfg, &vocab, &checkpoint, count, seed, temperature, out.as_deref())
            )
        }
        Command::Interpolate { config, checkpoint, a, b, steps, out } => {
            let (cfg, _, vocab) = load_session(&config)?;
            with_precision!(
                cfg.model.precision,
                cmd_interpolate(&cfg, &vocab, &checkpoint, &a, &b, steps, out.as_deref())
            )
        }
        Command::Transfer { config, checkpoint, a, p, q, out } => {
            let (cfg, _, vocab) = load_session(&config)?;
            with_precision!(
                cfg.model.precision,
                cmd_transfer(&cfg, &vocab, &checkpoint, &a, &p, &q, out.as_deref())
            )
        }
        Command::Sweep { config, beta } => {
            let (cfg, splits, vocab) = load_session(&config)?;
            with_precision!(cfg.model.precision, cmd_sweep(&cfg, &splits, &vocab, &beta))
        }
        Command::GenCorpus { out, count, seed } => cmd_gen_corpus(&out, count, seed),
    }
}

fn load_session(config_path: &Path) -> Result<(RunConfig, CorpusSplits, Vocabulary)> {
    let cfg = parse_config(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let splits = cfg.load_corpora(&base)?;
    if splits.train.is_empty() {
        return Err(Error::Corpus("training corpus is empty".into()));
    }
    let vocab = build_vocab(&splits.train, cfg.corpus.min_freq, cfg.corpus.max_vocab)?;
    Ok((cfg, splits, vocab))
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn emit(path: Option<&Path>, body: &str) -> Result<()> {
    match path {
        Some(p) => write_text(p, body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn cmd_train<S: Scalar>(
    cfg: &RunConfig,
    splits: &CorpusSplits,
    vocab: &Vocabulary,
    resume: Option<&Path>,
) -> Result<()> {
    let out_dir = cfg.output.dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    write_text(&out_dir.join("config_resolved.toml"), &cfg.to_toml())?;
    vocab.save(&out_dir.join("vocab.txt"))?;

    let model = cfg.model_config(vocab.size());
    let reg = cfg.regularizer()?;
    let trainer_cfg = cfg.trainer();
    let resume_ckpt = match resume {
        Some(p) => Some(Checkpoint::<S>::load(p, Some(vocab))?),
        None => None,
    };
    let ctx = TrainContext {
        model: &model,
        reg: &reg,
        trainer: &trainer_cfg,
        seeds: cfg.seeds(),
        vocab,
        train: &splits.train,
        valid: &splits.valid,
        max_len: cfg.corpus.max_len,
        out_dir: Some(&out_dir),
    };
    let outcome = train::<S>(&ctx, resume_ckpt)?;
    let step = outcome.checkpoint.step;
    match outcome.evals.last() {
        Some(e) => println!(
            "trained {step} steps | held-out recon/sentence {:.3}, recon/token {:.3}, kl {:.3}",
            e.recon_sum, e.recon_per_token, e.kl
        ),
        None => println!("trained {step} steps (no held-out set configured)"),
    }
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn load_model_checkpoint<S: Scalar>(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<Checkpoint<S>> {
    let ckpt = Checkpoint::<S>::load(path, Some(vocab))?;
    let expected = cfg.model_config(vocab.size());
    if ckpt.model != expected {
        return Err(Error::Checkpoint(
            "checkpoint model architecture does not match the config".into(),
        ));
    }
    Ok(ckpt)
}

fn run_eval_report<S: Scalar>(
    cfg: &RunConfig,
    splits: &CorpusSplits,
    vocab: &Vocabulary,
    ckpt: &Checkpoint<S>,
) -> Result<(EvalReport, String)> {
    let eval_set: &[Vec<String>] = if !splits.test.is_empty() {
        &splits.test
    } else if !splits.valid.is_empty() {
        &splits.valid
    } else {
        return Err(Error::Eval("no test or valid split to evaluate on".into()));
    };
    let batches = make_batches(
        eval_set,
        vocab,
        cfg.trainer.batch_size,
        cfg.corpus.max_len,
        cfg.seeds.data,
        BatchMode::Eval,
    )?;
    let metrics = held_out_metrics(
        &ckpt.params,
        &ckpt.model,
        &batches,
        cfg.trainer.eval_mc_samples,
        cfg.seeds.sample,
    )?;

    let samples = sample_from_prior(
        &ckpt.params,
        &ckpt.model,
        vocab,
        cfg.eval.sample_count,
        cfg.corpus.max_len,
        GenerateMode::Greedy,
        cfg.seeds.sample,
    )?;
    let mut refs: Vec<Vec<String>> = eval_set.to_vec();
    let mut rng = SeededRng::derive(cfg.seeds.sample, 0xB1E0);
    rng.shuffle(&mut refs);
    refs.truncate(cfg.eval.bleu_reference_count.max(1));

    let mut bleu_scores = Vec::new();
    let mut sleu_scores = Vec::new();
    for n in [4usize, 5] {
        bleu_scores.push((n, bleu(&samples, &refs, n)?));
        sleu_scores.push((n, self_bleu(&samples, n)?));
    }
    let report = EvalReport {
        recon_sum: metrics.recon_sum,
        recon_per_token: metrics.recon_per_token,
        kl: metrics.kl,
        bleu: bleu_scores,
        self_bleu: sleu_scores,
        sample_count: cfg.eval.sample_count,
        seed: cfg.seeds.sample,
    };
    let histogram = mu_histogram(&ckpt.params, &ckpt.model, &batches, cfg.eval.histogram_bins)?;
    Ok((report, histogram.to_csv()))
}

fn cmd_eval<S: Scalar>(
    cfg: &RunConfig,
    splits: &CorpusSplits,
    vocab: &Vocabulary,
    checkpoint: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = load_model_checkpoint::<S>(cfg, vocab, checkpoint)?;
    let (report, histogram_csv) = run_eval_report(cfg, splits, vocab, &ckpt)?;
    let dir = out.unwrap_or(&cfg.output.dir).to_path_buf();
    write_text(&dir.join("eval_report.json"), &(report.to_json_line() + "\n"))?;
    write_text(
        &dir.join("eval_report.csv"),
        &format!("{}\n{}\n", report.csv_header(), report.csv_row()),
    )?;
    write_text(&dir.join("mu_histogram.csv"), &histogram_csv)?;
    println!("{}", report.to_json_line());
    Ok(())
}

fn cmd_sample<S: Scalar>(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    checkpoint: &Path,
    count: usize,
    seed: Option<u64>,
    temperature: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = load_model_checkpoint::<S>(cfg, vocab, checkpoint)?;
    let mode = match temperature {
        Some(tau) => GenerateMode::Temperature(tau),
        None => GenerateMode::Greedy,
    };
    let sentences = sample_from_prior(
        &ckpt.params,
        &ckpt.model,
        vocab,
        count,
        cfg.corpus.max_len,
        mode,
        seed.unwrap_or(cfg.seeds.sample),
    )?;
    let mut body = String::new();
    for s in &sentences {
        body.push_str(&s.join(" "));
        body.push('\n');
    }
    emit(out, &body)
}

fn sentence_arg(raw: &str) -> Result<String> {
    let candidate = Path::new(raw);
    if candidate.is_file() {
        let text = fs::read_to_string(candidate).map_err(|e| Error::io(candidate, e))?;
        return text
            .lines()
            .find(|l| !l.trim().is_empty())
            .map(str::to_string)
            .ok_or_else(|| Error::Config(format!("{raw}: file has no sentence")));
    }
    Ok(raw.to_string())
}

fn cmd_interpolate<S: Scalar>(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    checkpoint: &Path,
    a: &str,
    b: &str,
    steps: usize,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = load_model_checkpoint::<S>(cfg, vocab, checkpoint)?;
    let max_len = cfg.corpus.max_len;
    let a = sentence_arg(a)?;
    let b = sentence_arg(b)?;
    let za = encode_to_latent(&ckpt.params, &ckpt.model, vocab, &a, max_len)?;
    let zb = encode_to_latent(&ckpt.params, &ckpt.model, vocab, &b, max_len)?;
    // z_t = z_a * t + z_b * (1 - t): t = 1 decodes the --a sentence's code
    let path = interpolate(&ckpt.params, &ckpt.model, vocab, &za, &zb, steps, max_len)?;
    let mut body = String::new();
    for point in &path {
        body.push_str(&format!("{:.4}\t{}\n", point.t, point.sentence.join(" ")));
    }
    emit(out, &body)
}

fn cmd_transfer<S: Scalar>(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    checkpoint: &Path,
    a: &str,
    p: &str,
    q: &str,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = load_model_checkpoint::<S>(cfg, vocab, checkpoint)?;
    let max_len = cfg.corpus.max_len;
    let a = sentence_arg(a)?;
    let p = sentence_arg(p)?;
    let q = sentence_arg(q)?;
    let za = encode_to_latent(&ckpt.params, &ckpt.model, vocab, &a, max_len)?;
    let zp = encode_to_latent(&ckpt.params, &ckpt.model, vocab, &p, max_len)?;
    let zq = encode_to_latent(&ckpt.params, &ckpt.model, vocab, &q, max_len)?;
    let (_, sentence) =
        attribute_transfer(&ckpt.params, &ckpt.model, vocab, &za, &zp, &zq, max_len)?;
    emit(out, &format!("{a}\t{}\n", sentence.join(" ")))
}

fn format_beta(beta: f64) -> String {
    let s = format!("{beta}");
    s.replace('.', "_")
}

fn cmd_sweep<S: Scalar>(
    cfg: &RunConfig,
    splits: &CorpusSplits,
    vocab: &Vocabulary,
    betas: &[f64],
) -> Result<()> {
    let base_dir = cfg.output.dir.clone();
    fs::create_dir_all(&base_dir).map_err(|e| Error::io(&base_dir, e))?;
    let mut summary = String::from("beta,rec,kl,bleu4,bleu5,sleu4,sleu5\n");
    for &beta in betas {
        if beta < 0.0 {
            return Err(Error::Config(format!("sweep margin {beta} must be >= 0")));
        }
        let mut run_cfg = cfg.clone();
        run_cfg.regularizer.mu_beta = beta;
        run_cfg.output.dir = base_dir.join(format!("sweep_beta_{}", format_beta(beta)));
        let run_dir = run_cfg.output.dir.clone();
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        write_text(&run_dir.join("config_resolved.toml"), &run_cfg.to_toml())?;
        vocab.save(&run_dir.join("vocab.txt"))?;

        let model = run_cfg.model_config(vocab.size());
        let reg = run_cfg.regularizer()?;
        let trainer_cfg = run_cfg.trainer();
        let ctx = TrainContext {
            model: &model,
            reg: &reg,
            trainer: &trainer_cfg,
            seeds: run_cfg.seeds(),
            vocab,
            train: &splits.train,
            valid: &splits.valid,
            max_len: run_cfg.corpus.max_len,
            out_dir: Some(&run_dir),
        };
        let outcome = train::<S>(&ctx, None)?;
        let (report, histogram_csv) = run_eval_report(&run_cfg, splits, vocab, &outcome.checkpoint)?;
        write_text(&run_dir.join("eval_report.json"), &(report.to_json_line() + "\n"))?;
        write_text(
            &run_dir.join("eval_report.csv"),
            &format!("{}\n{}\n", report.csv_header(), report.csv_row()),
        )?;
        write_text(&run_dir.join("mu_histogram.csv"), &histogram_csv)?;
        summary.push_str(&format!(
            "{beta},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            report.recon_sum,
            report.kl,
            report.bleu[0].1,
            report.bleu[1].1,
            report.self_bleu[0].1,
            report.self_bleu[1].1
        ));
        println!(
            "beta {beta}: rec {:.3} kl {:.3} bleu4 {:.2} sleu4 {:.2}",
            report.recon_sum, report.kl, report.bleu[0].1, report.self_bleu[0].1
        );
    }
    write_text(&base_dir.join("sweep_summary.csv"), &summary)?;
    println!("sweep summary in {}", base_dir.join("sweep_summary.csv").display());
    Ok(())
}

fn cmd_gen_corpus(out: &Path, count: usize, seed: u64) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("gen-corpus count must be >= 1".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let corpus = synthetic::generate(count, seed);
    let (train, valid, test) = synthetic::split(&corpus);
    save_corpus(&out.join("train.txt"), &train)?;
    save_corpus(&out.join("valid.txt"), &valid)?;
    save_corpus(&out.join("test.txt"), &test)?;
    println!(
        "wrote {} train / {} valid / {} test sentences to {}",
        train.len(),
        valid.len(),
        test.len(),
        out.display()
    );
    Ok(())
}
