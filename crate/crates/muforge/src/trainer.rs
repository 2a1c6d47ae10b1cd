//! Adam training loop with element-wise gradient clipping, deterministic
//! seeding, periodic held-out evaluation, and checkpointing.

use crate::checkpoint::Checkpoint;
use crate::corpus::{make_batches, Batch, BatchMode, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::held_out_metrics;
use crate::model::{
    bow_logits_graph, decode_teacher_forced, encode_graph, init_params, reparameterize_graph,
    standard_normal_mat, ModelConfig, Params,
};
use crate::objectives::{total_graph, LossBreakdown, RegularizerConfig};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tape::{Mat, Tape};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

const NOISE_SALT: u64 = 0x4E015E;
const EVAL_SALT: u64 = 0xE7A1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment accumulators, aligned with
/// `Params::entries` order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<S: Scalar> {
    pub m: Vec<Mat<S>>,
    pub v: Vec<Mat<S>>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(params: &Params<S>, hyper: AdamHyper) -> Self {
        let zeros: Vec<Mat<S>> = params
            .entries()
            .iter()
            .map(|(_, a)| Mat::zeros(a.dim()))
            .collect();
        OptimState { m: zeros.clone(), v: zeros, t: 0, hyper }
    }

    pub fn from_parts(
        m: Vec<Mat<S>>,
        v: Vec<Mat<S>>,
        t: u64,
        hyper: AdamHyper,
        params: &Params<S>,
    ) -> Result<Self> {
        let entries = params.entries();
        if m.len() != entries.len() || v.len() != entries.len() {
            return Err(Error::Checkpoint("optimizer moment tables misaligned".into()));
        }
        for ((_, p), (mm, vv)) in entries.iter().zip(m.iter().zip(v.iter())) {
            if mm.dim() != p.dim() || vv.dim() != p.dim() {
                return Err(Error::Checkpoint("optimizer moment shape mismatch".into()));
            }
        }
        Ok(OptimState { m, v, t, hyper })
    }
}

/// Clamp every gradient element to [-threshold, threshold].
pub fn clip_gradients<S: Scalar>(grads: &mut [Mat<S>], threshold: f64) -> Result<()> {
    if threshold <= 0.0 {
        return Err(Error::Config(format!("clip threshold {threshold} must be > 0")));
    }
    let hi = S::from_f64(threshold);
    let lo = S::from_f64(-threshold);
    for g in grads {
        g.mapv_inplace(|v| {
            if v > hi {
                hi
            } else if v < lo {
                lo
            } else {
                v
            }
        });
    }
    Ok(())
}

pub fn global_grad_norm<S: Scalar>(grads: &[Mat<S>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// One Adam update with bias-corrected moments. Rejects non-finite
/// gradients before mutating anything, naming the offending parameter.
pub fn adam_step<S: Scalar>(
    params: &mut Params<S>,
    grads: &[Mat<S>],
    state: &mut OptimState<S>,
) -> Result<()> {
    let names: Vec<&'static str> = params.entries().iter().map(|(n, _)| *n).collect();
    if grads.len() != names.len() {
        return Err(Error::Tape(format!(
            "adam: {} gradients for {} parameters",
            grads.len(),
            names.len()
        )));
    }
    for (name, g) in names.iter().zip(grads) {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure(format!(
                "non-finite gradient for parameter {name}; step aborted"
            )));
        }
    }
    state.t += 1;
    let h = state.hyper;
    let b1 = S::from_f64(h.beta1);
    let b2 = S::from_f64(h.beta2);
    let one_m_b1 = S::from_f64(1.0 - h.beta1);
    let one_m_b2 = S::from_f64(1.0 - h.beta2);
    let corr1 = S::from_f64(1.0 - h.beta1.powi(state.t as i32));
    let corr2 = S::from_f64(1.0 - h.beta2.powi(state.t as i32));
    let lr = S::from_f64(h.lr);
    let eps = S::from_f64(h.eps);

    let mut slots = params.arrays_mut();
    for (((p, g), m), v) in slots
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        ndarray::Zip::from(&mut **p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub clip: f64,
    pub eval_every: u64,
    pub eval_mc_samples: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            lr: 0.001,
            batch_size: 64,
            steps: 3000,
            clip: 5.0,
            eval_every: 200,
            eval_mc_samples: 1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.clip <= 0.0 {
            return Err(Error::Config(format!("clip {} must be > 0", self.clip)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.eval_mc_samples == 0 {
            return Err(Error::Config("eval_mc_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub sample: u64,
}

/// One record per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
    pub wall_ms: f64,
}

pub const TRAIN_LOG_HEADER: &str =
    "step,recon,recon_per_token,kl,mu_reg,bow,kl_weight,grad_norm,mu_var_term,ms";

impl TrainLogRecord {
    /// CSV row matching [`TRAIN_LOG_HEADER`]. `grad_norm` is the pre-clip
    /// global norm; every column except `ms` is deterministic in
    /// (config, seeds, corpus).
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.step,
            self.loss.recon,
            self.loss.recon_per_token,
            self.loss.kl,
            self.loss.mu_reg,
            self.loss.bow,
            self.loss.kl_weight,
            self.grad_norm_pre,
            self.loss.mu_var_term,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldOutRecord {
    pub step: u64,
    pub recon_sum: f64,
    pub recon_per_token: f64,
    pub kl: f64,
    /// recon_sum + kl; the model-selection metric.
    pub total: f64,
}

pub const EVAL_LOG_HEADER: &str = "step,recon_sum,recon_per_token,kl,total";

impl HeldOutRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.recon_sum, self.recon_per_token, self.kl, self.total
        )
    }
}

pub struct TrainContext<'a> {
    pub model: &'a ModelConfig,
    pub reg: &'a RegularizerConfig,
    pub trainer: &'a TrainerConfig,
    pub seeds: Seeds,
    pub vocab: &'a Vocabulary,
    pub train: &'a [Vec<String>],
    pub valid: &'a [Vec<String>],
    pub max_len: usize,
    /// When set, logs and checkpoints stream to this directory.
    pub out_dir: Option<&'a Path>,
}

pub struct TrainOutcome<S: Scalar> {
    pub checkpoint: Checkpoint<S>,
    pub records: Vec<TrainLogRecord>,
    pub evals: Vec<HeldOutRecord>,
    /// Checkpoint with the best held-out total, if any evaluation ran.
    pub best: Option<Checkpoint<S>>,
}

fn epoch_seed(data_seed: u64, epoch: u64) -> u64 {
    data_seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct LogSink {
    train: Option<fs::File>,
    eval: Option<fs::File>,
    dir: Option<PathBuf>,
}

impl LogSink {
    fn create(dir: Option<&Path>, fresh: bool) -> Result<LogSink> {
        let Some(dir) = dir else {
            return Ok(LogSink { train: None, eval: None, dir: None });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<fs::File> {
            let path = dir.join(name);
            let mut f = if fresh {
                let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "{header}").map_err(|e| Error::io(&path, e))?;
                f
            } else {
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?
            };
            f.flush().map_err(|e| Error::io(&path, e))?;
            Ok(f)
        };
        Ok(LogSink {
            train: Some(open("train_log.csv", TRAIN_LOG_HEADER)?),
            eval: Some(open("eval_log.csv", EVAL_LOG_HEADER)?),
            dir: Some(dir.to_path_buf()),
        })
    }

    fn train_row(&mut self, row: &str) -> Result<()> {
        if let Some(f) = &mut self.train {
            writeln!(f, "{row}").map_err(|e| Error::io("train_log.csv", e))?;
        }
        Ok(())
    }

    fn eval_row(&mut self, row: &str) -> Result<()> {
        if let Some(f) = &mut self.eval {
            writeln!(f, "{row}").map_err(|e| Error::io("eval_log.csv", e))?;
        }
        Ok(())
    }

    fn save(&self, name: &str, ckpt: &Checkpoint<impl Scalar>) -> Result<()> {
        if let Some(dir) = &self.dir {
            ckpt.save(&dir.join(name))?;
        }
        Ok(())
    }
}

/// Run the optimization loop: batch -> encode -> reparameterize -> decode
/// -> total loss -> backward -> clip -> Adam, with periodic held-out
/// evaluation and checkpointing. Fully deterministic given (config, seeds,
/// corpus); wall-clock milliseconds in the log are the only nondeterministic
/// output. A non-finite loss or gradient saves an emergency checkpoint and
/// halts with a numeric-failure error.
pub fn train<S: Scalar>(
    ctx: &TrainContext<'_>,
    resume: Option<Checkpoint<S>>,
) -> Result<TrainOutcome<S>> {
    ctx.model.validate()?;
    ctx.reg.validate()?;
    ctx.trainer.validate()?;
    if ctx.train.is_empty() {
        return Err(Error::Corpus("training corpus is empty".into()));
    }
    if ctx.model.vocab_size != ctx.vocab.size() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match vocabulary size {}",
            ctx.model.vocab_size,
            ctx.vocab.size()
        )));
    }
    if ctx.reg.bow_weight > 0.0 && ctx.model.bow_hidden.is_none() {
        return Err(Error::Config("bow_weight > 0 requires model.bow_hidden".into()));
    }
    let vocab_hash = ctx.vocab.hash();

    let (mut params, mut optim, mut step, mut epoch, mut batch_idx, mut noise_rng, mut best_metric) =
        match resume {
            Some(ckpt) => {
                if ckpt.model != *ctx.model || ckpt.reg != *ctx.reg {
                    return Err(Error::Checkpoint(
                        "checkpoint config does not match the run config".into(),
                    ));
                }
                if ckpt.vocab_hash != vocab_hash {
                    return Err(Error::Checkpoint(
                        "vocabulary hash mismatch: checkpoint was trained with a different vocabulary"
                            .into(),
                    ));
                }
                (
                    ckpt.params,
                    ckpt.optim,
                    ckpt.step,
                    ckpt.epoch,
                    ckpt.batch_idx,
                    SeededRng::restore(ckpt.noise_rng),
                    ckpt.best_metric,
                )
            }
            None => {
                let params = init_params::<S>(ctx.model, ctx.seeds.init)?;
                let optim = OptimState::new(&params, AdamHyper { lr: ctx.trainer.lr, ..AdamHyper::default() });
                let noise = SeededRng::derive(ctx.seeds.data, NOISE_SALT);
                (params, optim, 0, 0, 0, noise, None)
            }
        };

    let fresh = step == 0;
    let mut sink = LogSink::create(ctx.out_dir, fresh)?;

    let make_epoch = |epoch: u64| -> Result<Vec<Batch>> {
        let batches = make_batches(
            ctx.train,
            ctx.vocab,
            ctx.trainer.batch_size,
            ctx.max_len,
            epoch_seed(ctx.seeds.data, epoch),
            BatchMode::Train,
        )?;
        if batches.is_empty() {
            return Err(Error::Corpus(format!(
                "training corpus of {} sentences yields no full batches of {}",
                ctx.train.len(),
                ctx.trainer.batch_size
            )));
        }
        Ok(batches)
    };
    let mut batches = make_epoch(epoch)?;

    let valid_batches = if ctx.valid.is_empty() {
        Vec::new()
    } else {
        make_batches(
            ctx.valid,
            ctx.vocab,
            ctx.trainer.batch_size,
            ctx.max_len,
            epoch_seed(ctx.seeds.data, u64::MAX),
            BatchMode::Eval,
        )?
    };

    let make_ckpt = |params: &Params<S>,
                     optim: &OptimState<S>,
                     step: u64,
                     epoch: u64,
                     batch_idx: u64,
                     noise_rng: &SeededRng,
                     best_metric: Option<f64>| Checkpoint {
        model: ctx.model.clone(),
        reg: ctx.reg.clone(),
        params: params.clone(),
        optim: optim.clone(),
        step,
        epoch,
        batch_idx,
        data_seed: ctx.seeds.data,
        sample_seed: ctx.seeds.sample,
        noise_rng: noise_rng.state(),
        vocab_hash,
        best_metric,
    };

    let mut records = Vec::new();
    let mut evals = Vec::new();
    let mut best: Option<Checkpoint<S>> = None;

    while step < ctx.trainer.steps {
        if batch_idx as usize >= batches.len() {
            epoch += 1;
            batch_idx = 0;
            batches = make_epoch(epoch)?;
        }
        let batch = &batches[batch_idx as usize];
        let t0 = Instant::now();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let graph_result = (|| {
            let post = encode_graph(&mut tape, &bound, ctx.model, batch)?;
            let eps = standard_normal_mat::<S>(&mut noise_rng, batch.rows, ctx.model.latent_dim);
            let z = reparameterize_graph(&mut tape, post, eps)?;
            let logits = decode_teacher_forced(
                &mut tape,
                &bound,
                ctx.model,
                z,
                batch,
                ctx.reg.word_dropout,
                &mut noise_rng,
            )?;
            let bow_logits = if ctx.reg.bow_weight > 0.0 {
                Some(bow_logits_graph(&mut tape, &bound, z)?)
            } else {
                None
            };
            let graph = total_graph(&mut tape, post, &logits, bow_logits, batch, ctx.reg, step)?;
            tape.forward()?;
            Ok(graph)
        })();
        let graph = match graph_result {
            Ok(g) => g,
            Err(e @ (Error::NonFinite { .. } | Error::NumericFailure(_))) => {
                let ckpt = make_ckpt(&params, &optim, step, epoch, batch_idx, &noise_rng, best_metric);
                sink.save("ckpt_emergency.bin", &ckpt)?;
                return Err(Error::NumericFailure(format!(
                    "non-finite loss at step {step}: {e}; emergency checkpoint saved"
                )));
            }
            Err(e) => return Err(e),
        };
        let breakdown = graph.breakdown(&tape)?;
        tape.backward(graph.total)?;

        let mut grads: Vec<Mat<S>> = bound
            .ordered
            .iter()
            .map(|&id| {
                tape.take_grad(id)
                    .unwrap_or_else(|| Mat::zeros(tape.shape(id)))
            })
            .collect();
        let grad_norm_pre = global_grad_norm(&grads);
        clip_gradients(&mut grads, ctx.trainer.clip)?;
        let grad_norm_post = global_grad_norm(&grads);

        if let Err(e) = adam_step(&mut params, &grads, &mut optim) {
            let ckpt = make_ckpt(&params, &optim, step, epoch, batch_idx, &noise_rng, best_metric);
            sink.save("ckpt_emergency.bin", &ckpt)?;
            return Err(e);
        }
        step += 1;
        batch_idx += 1;

        let record = TrainLogRecord {
            step,
            loss: breakdown,
            grad_norm_pre,
            grad_norm_post,
            wall_ms: t0.elapsed().as_secs_f64() * 1000.0,
        };
        sink.train_row(&record.csv_row())?;
        records.push(record);

        if (step % ctx.trainer.eval_every == 0 || step == ctx.trainer.steps)
            && !valid_batches.is_empty()
        {
            let metrics = held_out_metrics(
                &params,
                ctx.model,
                &valid_batches,
                ctx.trainer.eval_mc_samples,
                ctx.seeds.sample ^ EVAL_SALT ^ step,
            )?;
            let record = HeldOutRecord {
                step,
                recon_sum: metrics.recon_sum,
                recon_per_token: metrics.recon_per_token,
                kl: metrics.kl,
                total: metrics.recon_sum + metrics.kl,
            };
            sink.eval_row(&record.csv_row())?;
            evals.push(record);

            let ckpt = make_ckpt(&params, &optim, step, epoch, batch_idx, &noise_rng, best_metric);
            sink.save("ckpt_latest.bin", &ckpt)?;
            if best_metric.is_none_or(|b| record.total < b) {
                best_metric = Some(record.total);
                let best_ckpt =
                    make_ckpt(&params, &optim, step, epoch, batch_idx, &noise_rng, best_metric);
                sink.save("ckpt_best.bin", &best_ckpt)?;
                best = Some(best_ckpt);
            }
        }
    }

    let checkpoint = make_ckpt(&params, &optim, step, epoch, batch_idx, &noise_rng, best_metric);
    sink.save("ckpt_latest.bin", &checkpoint)?;
    Ok(TrainOutcome { checkpoint, records, evals, best })
}
