//! Run configuration: a flat TOML file of `[section]` headers and
//! `key = value` pairs. Unknown keys are rejected, defaults are applied at
//! parse time, and the resolved config echoes back to TOML such that
//! re-parsing the echo reproduces the same `RunConfig`.

use crate::corpus::{load_corpus, synthetic};
use crate::error::{Error, Result};
use crate::model::{CellKind, ModelConfig, ZInjection};
use crate::objectives::{AnnealShape, KlReduction, RegularizerConfig};
use crate::scalar::Dtype;
use crate::trainer::{Seeds, TrainerConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// One sentence per line, UTF-8. Required unless `synthetic = true`.
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Use the bundled template-grammar generator instead of files.
    pub synthetic: bool,
    pub synthetic_count: usize,
    pub synthetic_seed: u64,
    pub min_freq: usize,
    pub max_vocab: usize,
    /// Encoded row length cap, BOS/EOS included.
    pub max_len: usize,
    /// Drop sentences with more content tokens than this (0 = off);
    /// BOS/EOS are not counted.
    pub filter_max_tokens: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            train: None,
            valid: None,
            test: None,
            synthetic: false,
            synthetic_count: 2600,
            synthetic_seed: 11,
            min_freq: 1,
            max_vocab: 10_000,
            max_len: 20,
            filter_max_tokens: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub latent_dim: usize,
    pub layer_norm: bool,
    pub cell: CellKind,
    pub z_injection: ZInjection,
    pub precision: Precision,
    /// Hidden width of the bag-of-words head (used when bow_weight > 0).
    pub bow_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 64,
            enc_hidden: 128,
            dec_hidden: 128,
            latent_dim: 16,
            layer_norm: false,
            cell: CellKind::Lstm,
            z_injection: ZInjection::PerStepAndInit,
            precision: Precision::F64,
            bow_hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerSection {
    pub mu_beta: f64,
    pub kl_anneal_steps: u64,
    pub anneal_shape: AnnealShape,
    /// Reserved KL per latent dimension, in nats (0 = off).
    pub fb_per_dim: f64,
    /// Reserved total KL, in bits (0 = off); converted to nats internally.
    pub fb_total_bits: f64,
    pub kl_lambda: f64,
    pub bow_weight: f64,
    pub word_dropout: f64,
    pub kl_reduction: KlReduction,
}

impl Default for RegularizerSection {
    fn default() -> Self {
        RegularizerSection {
            mu_beta: 2.0,
            kl_anneal_steps: 0,
            anneal_shape: AnnealShape::Linear,
            fb_per_dim: 0.0,
            fb_total_bits: 0.0,
            kl_lambda: 1.0,
            bow_weight: 0.0,
            word_dropout: 0.0,
            kl_reduction: KlReduction::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub clip: f64,
    pub eval_every: u64,
    pub eval_mc_samples: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainerConfig::default();
        TrainerSection {
            lr: t.lr,
            batch_size: t.batch_size,
            steps: t.steps,
            clip: t.clip,
            eval_every: t.eval_every,
            eval_mc_samples: t.eval_mc_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Prior samples drawn for generation metrics.
    pub sample_count: usize,
    /// Test sentences used as BLEU references.
    pub bleu_reference_count: usize,
    pub histogram_bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { sample_count: 300, bleu_reference_count: 300, histogram_bins: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedsSection {
    pub init: u64,
    pub data: u64,
    pub sample: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection { init: 1, data: 2, sample: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub regularizer: RegularizerSection,
    pub trainer: TrainerSection,
    pub eval: EvalSection,
    pub seeds: SeedsSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate_values()?;
        Ok(cfg)
    }

    /// Serialize the fully resolved config; parsing the echo yields an
    /// identical `RunConfig`.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn validate_values(&self) -> Result<()> {
        if self.corpus.max_len < 3 {
            return Err(Error::Config("corpus.max_len must be >= 3".into()));
        }
        if self.corpus.min_freq < 1 {
            return Err(Error::Config("corpus.min_freq must be >= 1".into()));
        }
        if self.corpus.max_vocab < 4 {
            return Err(Error::Config("corpus.max_vocab must be >= 4".into()));
        }
        if !self.corpus.synthetic && self.corpus.train.is_none() {
            return Err(Error::Config(
                "corpus.train is required unless corpus.synthetic = true".into(),
            ));
        }
        if self.corpus.synthetic && self.corpus.synthetic_count == 0 {
            return Err(Error::Config("corpus.synthetic_count must be >= 1".into()));
        }
        if self.eval.sample_count == 0 || self.eval.bleu_reference_count == 0 {
            return Err(Error::Config("eval sample counts must be >= 1".into()));
        }
        if self.eval.histogram_bins < 10 {
            return Err(Error::Config("eval.histogram_bins must be >= 10".into()));
        }
        // surface invariant violations at parse time
        self.regularizer()?.validate()?;
        self.trainer().validate()?;
        let probe = self.model_config(self.model.latent_dim.max(4) + 4);
        probe.validate()?;
        Ok(())
    }

    fn check_paths(&self, base: &Path) -> Result<()> {
        if self.corpus.synthetic {
            return Ok(());
        }
        for (name, p) in [
            ("corpus.train", &self.corpus.train),
            ("corpus.valid", &self.corpus.valid),
            ("corpus.test", &self.corpus.test),
        ] {
            if let Some(p) = p {
                let resolved = base.join(p);
                if !resolved.exists() {
                    return Err(Error::Config(format!(
                        "{name} path {} does not exist",
                        resolved.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.model.embed_dim,
            enc_hidden: self.model.enc_hidden,
            dec_hidden: self.model.dec_hidden,
            latent_dim: self.model.latent_dim,
            layer_norm: self.model.layer_norm,
            cell: self.model.cell,
            z_injection: self.model.z_injection,
            bow_hidden: (self.regularizer.bow_weight > 0.0).then_some(self.model.bow_hidden),
        }
    }

    /// Internal regularizer config; bits-denominated file values convert
    /// to nats here, exactly once.
    pub fn regularizer(&self) -> Result<RegularizerConfig> {
        let r = &self.regularizer;
        if r.fb_per_dim < 0.0 || r.fb_total_bits < 0.0 {
            return Err(Error::Config("free bits reserves must be >= 0".into()));
        }
        let reg = RegularizerConfig {
            mu_beta: r.mu_beta,
            kl_anneal_steps: r.kl_anneal_steps,
            anneal_shape: r.anneal_shape,
            fb_per_dim: (r.fb_per_dim > 0.0).then_some(r.fb_per_dim),
            fb_total: (r.fb_total_bits > 0.0).then_some(r.fb_total_bits * std::f64::consts::LN_2),
            kl_lambda: r.kl_lambda,
            bow_weight: r.bow_weight,
            word_dropout: r.word_dropout,
            kl_reduction: r.kl_reduction,
        };
        reg.validate()?;
        Ok(reg)
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            lr: self.trainer.lr,
            batch_size: self.trainer.batch_size,
            steps: self.trainer.steps,
            clip: self.trainer.clip,
            eval_every: self.trainer.eval_every,
            eval_mc_samples: self.trainer.eval_mc_samples,
        }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds { init: self.seeds.init, data: self.seeds.data, sample: self.seeds.sample }
    }

    /// Load (or synthesize) the train/valid/test sentence sets.
    pub fn load_corpora(&self, base: &Path) -> Result<CorpusSplits> {
        let cap = (self.corpus.filter_max_tokens > 0).then_some(self.corpus.filter_max_tokens);
        if self.corpus.synthetic {
            let corpus = synthetic::generate(self.corpus.synthetic_count, self.corpus.synthetic_seed);
            let (train, valid, test) = synthetic::split(&corpus);
            return Ok(CorpusSplits { train, valid, test });
        }
        let load = |p: &Option<PathBuf>| -> Result<Vec<Vec<String>>> {
            match p {
                Some(p) => load_corpus(&base.join(p), cap),
                None => Ok(Vec::new()),
            }
        };
        Ok(CorpusSplits {
            train: load(&self.corpus.train)?,
            valid: load(&self.corpus.valid)?,
            test: load(&self.corpus.test)?,
        })
    }
}

pub struct CorpusSplits {
    pub train: Vec<Vec<String>>,
    pub valid: Vec<Vec<String>>,
    pub test: Vec<Vec<String>>,
}

/// Parse and validate a config file. Referenced corpus paths must exist,
/// resolved relative to the config file's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = RunConfig::from_toml(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.check_paths(base)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_applies_defaults() {
        let cfg = RunConfig::from_toml("[corpus]\nsynthetic = true\n").unwrap();
        assert_eq!(cfg.model.embed_dim, 64);
        assert_eq!(cfg.model.latent_dim, 16);
        assert_eq!(cfg.trainer.batch_size, 64);
        assert_eq!(cfg.trainer.clip, 5.0);
        assert_eq!(cfg.trainer.lr, 0.001);
        assert_eq!(cfg.regularizer.mu_beta, 2.0);
        assert_eq!(cfg.eval.sample_count, 300);
    }

    #[test]
    fn negative_beta_is_rejected() {
        let err = RunConfig::from_toml("[corpus]\nsynthetic = true\n[regularizer]\nmu_beta = -1.0\n")
            .unwrap_err();
        assert!(err.to_string().contains("mu_beta"), "{err}");
    }

    #[test]
    fn fb_total_bits_converts_to_nats_once() {
        let cfg = RunConfig::from_toml(
            "[corpus]\nsynthetic = true\n[regularizer]\nfb_total_bits = 0.2\n",
        )
        .unwrap();
        let reg = cfg.regularizer().unwrap();
        let expected = 0.2 * std::f64::consts::LN_2;
        assert!((reg.fb_total.unwrap() - expected).abs() < 1e-15);
        // the echoed file still carries the raw bits value
        assert!(cfg.to_toml().contains("fb_total_bits = 0.2"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[corpus]\nsynthetic = true\ntypo_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("typo_key"), "{err}");
        let err = RunConfig::from_toml("[nonexistent_section]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("nonexistent_section"), "{err}");
    }

    #[test]
    fn missing_corpus_source_is_an_error() {
        let err = RunConfig::from_toml("[model]\nembed_dim = 8\n").unwrap_err();
        assert!(err.to_string().contains("corpus.train"), "{err}");
    }

    #[test]
    fn echo_round_trips_identically() {
        let cfg = RunConfig::from_toml(
            "[corpus]\nsynthetic = true\nsynthetic_count = 500\n[model]\nembed_dim = 24\ncell = \"gru\"\n[regularizer]\nmu_beta = 1.5\nfb_total_bits = 0.2\n[seeds]\ninit = 42\n",
        )
        .unwrap();
        let echo = cfg.to_toml();
        let reparsed = RunConfig::from_toml(&echo).unwrap();
        assert_eq!(cfg, reparsed);
    }

    #[test]
    fn both_free_bits_modes_rejected_at_parse() {
        let err = RunConfig::from_toml(
            "[corpus]\nsynthetic = true\n[regularizer]\nfb_per_dim = 0.1\nfb_total_bits = 0.2\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("free bits"), "{err}");
    }

    #[test]
    fn nonexistent_paths_fail_at_parse_time() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[corpus]\ntrain = \"missing.txt\"\n").unwrap();
        let err = parse_config(&path).unwrap_err();
        assert!(err.to_string().contains("does not exist"), "{err}");
    }

    #[test]
    fn synthetic_corpus_loads_and_splits() {
        let cfg = RunConfig::from_toml("[corpus]\nsynthetic = true\nsynthetic_count = 1000\n").unwrap();
        let splits = cfg.load_corpora(Path::new(".")).unwrap();
        assert_eq!(splits.train.len(), 850);
        assert_eq!(splits.valid.len(), 50);
        assert_eq!(splits.test.len(), 100);
    }
}
