//! Held-out metrics, generation-quality scoring, and posterior-mean
//! diagnostics.

pub mod bleu;

use crate::corpus::{decode, Batch, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{
    encode_graph, encode_values, generate, reparameterize_graph, standard_normal_mat,
    decode_teacher_forced, GenerateMode, ModelConfig, Params,
};
use crate::objectives::{kl_graph, recon_graph};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tape::Tape;

/// Reconstruction and KL on a held-out set. `recon_sum` is the batch-size
/// weighted mean of per-sentence reconstruction sums; `recon_per_token`
/// divides by the unmasked target count instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldOutMetrics {
    pub recon_sum: f64,
    pub recon_per_token: f64,
    pub kl: f64,
    pub examples: usize,
}

fn batch_content_salt(batch: &Batch) -> u64 {
    // FNV-1a over the padded id matrix, so identical content draws
    // identical evaluation noise wherever it appears in the dataset.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for r in 0..batch.rows {
        for &id in batch.row_ids(r) {
            h = (h ^ id as u64).wrapping_mul(0x1000_0000_01b3);
        }
        h = (h ^ 0xff).wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Teacher-forced reconstruction (no word dropout) averaged over
/// `mc_samples` posterior draws, plus the closed-form KL. Runs the same
/// loss graphs training uses. Monte Carlo noise is derived from `seed` and
/// the batch content, so metrics are a pure function of (params, data,
/// mc_samples, seed) and duplicated examples evaluate identically.
pub fn held_out_metrics<S: Scalar>(
    params: &Params<S>,
    cfg: &ModelConfig,
    batches: &[Batch],
    mc_samples: usize,
    seed: u64,
) -> Result<HeldOutMetrics> {
    if batches.is_empty() {
        return Err(Error::Eval("held-out evaluation on an empty set".into()));
    }
    if mc_samples == 0 {
        return Err(Error::Eval("mc_samples must be >= 1".into()));
    }
    let mut recon_total = 0.0;
    let mut kl_total = 0.0;
    let mut rows_total = 0usize;
    let mut tokens_total = 0usize;
    let mut dropout_rng = SeededRng::new(0);

    for batch in batches {
        let mut rng = SeededRng::derive(seed, batch_content_salt(batch));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let post = encode_graph(&mut tape, &bound, cfg, batch)?;
        let kl = kl_graph(&mut tape, post)?;
        let mut sample_sums = Vec::with_capacity(mc_samples);
        for _ in 0..mc_samples {
            let eps = standard_normal_mat::<S>(&mut rng, batch.rows, cfg.latent_dim);
            let z = reparameterize_graph(&mut tape, post, eps)?;
            let logits =
                decode_teacher_forced(&mut tape, &bound, cfg, z, batch, 0.0, &mut dropout_rng)?;
            let (sum, _) = recon_graph(&mut tape, &logits, batch)?;
            sample_sums.push(sum);
        }
        tape.forward()?;
        let mean_recon = sample_sums
            .iter()
            .map(|&id| tape.scalar_value(id).map(|v| v.as_f64()))
            .sum::<Result<f64>>()?
            / mc_samples as f64;
        recon_total += mean_recon;
        kl_total += tape.scalar_value(kl.mean)?.as_f64() * batch.rows as f64;
        rows_total += batch.rows;
        tokens_total += batch.target_token_count();
    }
    Ok(HeldOutMetrics {
        recon_sum: recon_total / rows_total as f64,
        recon_per_token: recon_total / tokens_total as f64,
        kl: kl_total / rows_total as f64,
        examples: rows_total,
    })
}

/// Sample sentences from the standard-normal prior. Deterministic per seed;
/// returned sentences are surface-token lists.
pub fn sample_from_prior<S: Scalar>(
    params: &Params<S>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    count: usize,
    max_len: usize,
    mode: GenerateMode,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    if count == 0 {
        return Err(Error::Eval("sample count must be >= 1".into()));
    }
    let mut rng = SeededRng::derive(seed, 0x5A11);
    let z = standard_normal_mat::<S>(&mut rng, count, cfg.latent_dim);
    let ids = generate(params, cfg, &z, max_len, mode, &mut rng)?;
    Ok(ids.iter().map(|row| decode(row, vocab)).collect())
}

/// Fixed-width histogram over every posterior-mean entry of a dataset,
/// with per-dimension first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MuHistogram {
    /// bins + 1 edges over the observed range.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub per_dim_mean: Vec<f64>,
    pub per_dim_var: Vec<f64>,
    pub examples: usize,
}

impl MuHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, &c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:.6},{:.6},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }

    /// Fraction of entries with |mu| below the threshold.
    pub fn mass_within(&self, threshold: f64) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let mut inside = 0u64;
        for (i, &c) in self.counts.iter().enumerate() {
            // count a bin if it lies entirely within [-threshold, threshold]
            if self.edges[i] >= -threshold && self.edges[i + 1] <= threshold {
                inside += c;
            }
        }
        inside as f64 / total as f64
    }
}

pub fn mu_histogram<S: Scalar>(
    params: &Params<S>,
    cfg: &ModelConfig,
    batches: &[Batch],
    bins: usize,
) -> Result<MuHistogram> {
    if bins < 10 {
        return Err(Error::Eval("histogram needs at least 10 bins".into()));
    }
    if batches.is_empty() {
        return Err(Error::Eval("histogram over an empty dataset".into()));
    }
    let k = cfg.latent_dim;
    let mut values: Vec<f64> = Vec::new();
    let mut dim_sum = vec![0.0f64; k];
    let mut dim_sumsq = vec![0.0f64; k];
    let mut examples = 0usize;
    for batch in batches {
        let post = encode_values(params, cfg, batch)?;
        for row in post.mu.outer_iter() {
            for (j, v) in row.iter().enumerate() {
                let v = v.as_f64();
                values.push(v);
                dim_sum[j] += v;
                dim_sumsq[j] += v * v;
            }
            examples += 1;
        }
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for &v in &values {
        let mut idx = ((v - lo) / width) as usize;
        if idx >= bins {
            idx = bins - 1;
        }
        counts[idx] += 1;
    }
    let n = examples as f64;
    let per_dim_mean: Vec<f64> = dim_sum.iter().map(|s| s / n).collect();
    let per_dim_var: Vec<f64> = dim_sumsq
        .iter()
        .zip(&per_dim_mean)
        .map(|(sq, m)| (sq / n - m * m).max(0.0))
        .collect();
    Ok(MuHistogram { edges, counts, per_dim_mean, per_dim_var, examples })
}

/// Test-set evaluation summary. `bleu` and `self_bleu` map n-gram order to
/// a 0-100 score, matching the reported protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub recon_sum: f64,
    pub recon_per_token: f64,
    pub kl: f64,
    pub bleu: Vec<(usize, f64)>,
    pub self_bleu: Vec<(usize, f64)>,
    pub sample_count: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json_line(&self) -> String {
        let fmt_map = |m: &[(usize, f64)]| {
            m.iter()
                .map(|(n, s)| format!("\"{n}\": {s:.6}"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        format!(
            "{{\"recon_sum\": {:.6}, \"recon_per_token\": {:.6}, \"kl\": {:.6}, \"bleu\": {{{}}}, \"self_bleu\": {{{}}}, \"sample_count\": {}, \"seed\": {}}}",
            self.recon_sum,
            self.recon_per_token,
            self.kl,
            fmt_map(&self.bleu),
            fmt_map(&self.self_bleu),
            self.sample_count,
            self.seed
        )
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["recon_sum".into(), "recon_per_token".into(), "kl".into()];
        cols.extend(self.bleu.iter().map(|(n, _)| format!("bleu{n}")));
        cols.extend(self.self_bleu.iter().map(|(n, _)| format!("sleu{n}")));
        cols.push("sample_count".into());
        cols.push("seed".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            format!("{:.6}", self.recon_sum),
            format!("{:.6}", self.recon_per_token),
            format!("{:.6}", self.kl),
        ];
        cols.extend(self.bleu.iter().map(|(_, s)| format!("{s:.6}")));
        cols.extend(self.self_bleu.iter().map(|(_, s)| format!("{s:.6}")));
        cols.push(self.sample_count.to_string());
        cols.push(self.seed.to_string());
        cols.join(",")
    }
}
