//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic, format version, precision tag, SHA-256 digest of the
//! embedded config JSON, the config JSON itself, vocabulary hash, training
//! counters, RNG stream states, then named parameter and optimizer-moment
//! tables. Values are stored as f64 little-endian words, which is lossless
//! for both supported precisions, so save -> load round-trips bit-exactly.

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use crate::objectives::RegularizerConfig;
use crate::rng::RngState;
use crate::scalar::{Dtype, Scalar};
use crate::tape::Mat;
use crate::trainer::{AdamHyper, OptimState};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MUFG";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ConfigBlock {
    model: ModelConfig,
    reg: RegularizerConfig,
}

/// Full training state: everything needed to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub model: ModelConfig,
    pub reg: RegularizerConfig,
    pub params: Params<S>,
    pub optim: OptimState<S>,
    pub step: u64,
    pub epoch: u64,
    pub batch_idx: u64,
    pub data_seed: u64,
    pub sample_seed: u64,
    pub noise_rng: RngState,
    pub vocab_hash: [u8; 32],
    pub best_metric: Option<f64>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    fn str16(&mut self, v: &str) {
        let b = v.as_bytes();
        self.buf.extend_from_slice(&(b.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(b);
    }

    fn mat<S: Scalar>(&mut self, m: &Mat<S>) {
        self.u32(m.nrows() as u32);
        self.u32(m.ncols() as u32);
        for v in m.iter() {
            self.f64(v.as_f64());
        }
    }

    fn table<S: Scalar>(&mut self, entries: &[(&str, &Mat<S>)]) {
        self.u32(entries.len() as u32);
        for (name, m) in entries {
            self.str16(name);
            self.mat(m);
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str16(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 in name".into()))
    }

    fn mat<S: Scalar>(&mut self) -> Result<Mat<S>> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(S::from_f64(self.f64()?));
        }
        Mat::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(format!("bad matrix shape: {e}")))
    }

    fn table<S: Scalar>(&mut self) -> Result<Vec<(String, Mat<S>)>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let name = self.str16()?;
            let m = self.mat()?;
            out.push((name, m));
        }
        Ok(out)
    }
}

impl<S: Scalar> Checkpoint<S> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let config_json = serde_json::to_vec(&ConfigBlock {
            model: self.model.clone(),
            reg: self.reg.clone(),
        })
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        let digest: [u8; 32] = Sha256::digest(&config_json).into();

        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u8(S::DTYPE.tag());
        w.bytes(&digest);
        w.u32(config_json.len() as u32);
        w.bytes(&config_json);
        w.bytes(&self.vocab_hash);
        w.u64(self.step);
        w.u64(self.epoch);
        w.u64(self.batch_idx);
        w.u64(self.data_seed);
        w.u64(self.sample_seed);
        w.u64(self.noise_rng.seed);
        w.u128(self.noise_rng.word_pos);
        match self.best_metric {
            Some(v) => {
                w.u8(1);
                w.f64(v);
            }
            None => {
                w.u8(0);
                w.f64(0.0);
            }
        }
        w.table(&self.params.entries());
        w.u64(self.optim.t);
        w.f64(self.optim.hyper.lr);
        w.f64(self.optim.hyper.beta1);
        w.f64(self.optim.hyper.beta2);
        w.f64(self.optim.hyper.eps);
        let names: Vec<&'static str> = self.params.entries().iter().map(|(n, _)| *n).collect();
        let m_entries: Vec<(&str, &Mat<S>)> =
            names.iter().copied().zip(self.optim.m.iter()).collect();
        w.table(&m_entries);
        let v_entries: Vec<(&str, &Mat<S>)> =
            names.iter().copied().zip(self.optim.v.iter()).collect();
        w.table(&v_entries);

        fs::write(path, w.buf).map_err(|e| Error::io(path, e))
    }

    /// Load a checkpoint, verifying magic, version, precision, config
    /// digest, and (when provided) the vocabulary hash.
    pub fn load(path: &Path, expected_vocab: Option<&Vocabulary>) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(&data);
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let tag = r.u8()?;
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown precision tag {tag}")))?;
        if dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint precision {dtype:?} does not match requested {:?}",
                S::DTYPE
            )));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let json_len = r.u32()? as usize;
        let config_json = r.take(json_len)?;
        let recomputed: [u8; 32] = Sha256::digest(config_json).into();
        if recomputed != digest {
            return Err(Error::Checkpoint("config digest mismatch".into()));
        }
        let block: ConfigBlock = serde_json::from_slice(config_json)
            .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;

        let vocab_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        if let Some(vocab) = expected_vocab {
            if vocab.hash() != vocab_hash {
                return Err(Error::Checkpoint(
                    "vocabulary hash mismatch: checkpoint was trained with a different vocabulary"
                        .into(),
                ));
            }
        }
        let step = r.u64()?;
        let epoch = r.u64()?;
        let batch_idx = r.u64()?;
        let data_seed = r.u64()?;
        let sample_seed = r.u64()?;
        let noise_rng = RngState { seed: r.u64()?, word_pos: r.u128()? };
        let best_flag = r.u8()?;
        let best_value = r.f64()?;
        let best_metric = (best_flag == 1).then_some(best_value);

        let params = Params::from_named(&block.model, r.table()?)?;
        let t = r.u64()?;
        let hyper = AdamHyper {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let m: Vec<Mat<S>> = r.table()?.into_iter().map(|(_, m)| m).collect();
        let v: Vec<Mat<S>> = r.table()?.into_iter().map(|(_, m)| m).collect();
        let optim = OptimState::from_parts(m, v, t, hyper, &params)?;

        Ok(Checkpoint {
            model: block.model,
            reg: block.reg,
            params,
            optim,
            step,
            epoch,
            batch_idx,
            data_seed,
            sample_seed,
            noise_rng,
            vocab_hash,
            best_metric,
        })
    }
}

pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint<S: Scalar>(
    path: &Path,
    expected_vocab: Option<&Vocabulary>,
) -> Result<Checkpoint<S>> {
    Checkpoint::load(path, expected_vocab)
}

/// Read only the precision tag, so callers can dispatch generics.
pub fn peek_precision(path: &Path) -> Result<Dtype> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&data);
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let _version = r.u32()?;
    let tag = r.u8()?;
    Dtype::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown precision tag {tag}")))
}
