//! Variational recurrent autoencoder: embedding, bidirectional recurrent
//! encoder, Gaussian latent head, reparameterization, and an autoregressive
//! recurrent decoder with teacher forcing, word dropout, and batched
//! free-running generation.

use crate::corpus::{Batch, BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tape::{Mat, NodeId, Tape};
use serde::{Deserialize, Serialize};

const LOGVAR_CLAMP: f64 = 8.0;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

/// How the latent vector conditions the decoder. The default wires z both
/// into the initial state and into every input step, which makes "the
/// decoder ignores z" a measurable training outcome rather than a
/// structural one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZInjection {
    PerStepAndInit,
    InitOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub latent_dim: usize,
    pub layer_norm: bool,
    pub cell: CellKind,
    pub z_injection: ZInjection,
    /// Hidden width of the bag-of-words head; `None` omits the head.
    pub bow_hidden: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.embed_dim,
            self.enc_hidden,
            self.dec_hidden,
            self.latent_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.latent_dim > 2 * self.enc_hidden {
            return Err(Error::Config(format!(
                "latent_dim {} exceeds 2 * enc_hidden {}",
                self.latent_dim,
                2 * self.enc_hidden
            )));
        }
        if self.bow_hidden == Some(0) {
            return Err(Error::Config("bow_hidden must be positive when set".into()));
        }
        Ok(())
    }

    fn gates(&self) -> usize {
        match self.cell {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    fn dec_input_dim(&self) -> usize {
        match self.z_injection {
            ZInjection::PerStepAndInit => self.embed_dim + self.latent_dim,
            ZInjection::InitOnly => self.embed_dim,
        }
    }

    fn dec_init_dim(&self) -> usize {
        match self.cell {
            CellKind::Lstm => 2 * self.dec_hidden,
            CellKind::Gru => self.dec_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellParams<S: Scalar> {
    pub w_x: Mat<S>,
    pub w_h: Mat<S>,
    pub b: Mat<S>,
    pub ln_gain: Option<Mat<S>>,
    pub ln_bias: Option<Mat<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BowParams<S: Scalar> {
    pub w1: Mat<S>,
    pub b1: Mat<S>,
    pub w2: Mat<S>,
    pub b2: Mat<S>,
}

/// All trainable arrays. `entries` fixes the canonical (name, array) order
/// used by the optimizer, gradient extraction, and the checkpoint table.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S: Scalar> {
    pub embedding: Mat<S>,
    pub enc_fwd: CellParams<S>,
    pub enc_bwd: CellParams<S>,
    pub w_mu: Mat<S>,
    pub b_mu: Mat<S>,
    pub w_logvar: Mat<S>,
    pub b_logvar: Mat<S>,
    pub w_init: Mat<S>,
    pub b_init: Mat<S>,
    pub dec: CellParams<S>,
    pub w_out: Mat<S>,
    pub b_out: Mat<S>,
    pub bow: Option<BowParams<S>>,
}

macro_rules! for_each_param {
    ($self:expr, $f:expr) => {{
        let f = &mut $f;
        f("embedding", &$self.embedding);
        f("enc_fwd.w_x", &$self.enc_fwd.w_x);
        f("enc_fwd.w_h", &$self.enc_fwd.w_h);
        f("enc_fwd.b", &$self.enc_fwd.b);
        if let Some(g) = &$self.enc_fwd.ln_gain {
            f("enc_fwd.ln_gain", g);
        }
        if let Some(b) = &$self.enc_fwd.ln_bias {
            f("enc_fwd.ln_bias", b);
        }
        f("enc_bwd.w_x", &$self.enc_bwd.w_x);
        f("enc_bwd.w_h", &$self.enc_bwd.w_h);
        f("enc_bwd.b", &$self.enc_bwd.b);
        if let Some(g) = &$self.enc_bwd.ln_gain {
            f("enc_bwd.ln_gain", g);
        }
        if let Some(b) = &$self.enc_bwd.ln_bias {
            f("enc_bwd.ln_bias", b);
        }
        f("w_mu", &$self.w_mu);
        f("b_mu", &$self.b_mu);
        f("w_logvar", &$self.w_logvar);
        f("b_logvar", &$self.b_logvar);
        f("w_init", &$self.w_init);
        f("b_init", &$self.b_init);
        f("dec.w_x", &$self.dec.w_x);
        f("dec.w_h", &$self.dec.w_h);
        f("dec.b", &$self.dec.b);
        if let Some(g) = &$self.dec.ln_gain {
            f("dec.ln_gain", g);
        }
        if let Some(b) = &$self.dec.ln_bias {
            f("dec.ln_bias", b);
        }
        f("w_out", &$self.w_out);
        f("b_out", &$self.b_out);
        if let Some(bow) = &$self.bow {
            f("bow.w1", &bow.w1);
            f("bow.b1", &bow.b1);
            f("bow.w2", &bow.w2);
            f("bow.b2", &bow.b2);
        }
    }};
}

impl<S: Scalar> Params<S> {
    /// Canonical (name, array) view in fixed order.
    pub fn entries(&self) -> Vec<(&'static str, &Mat<S>)> {
        let mut out = Vec::new();
        for_each_param!(self, |name, arr| out.push((name, arr)));
        out
    }

    /// Mutable arrays in the same order as [`Params::entries`].
    pub fn arrays_mut(&mut self) -> Vec<&mut Mat<S>> {
        let mut out: Vec<&mut Mat<S>> = Vec::new();
        out.push(&mut self.embedding);
        out.push(&mut self.enc_fwd.w_x);
        out.push(&mut self.enc_fwd.w_h);
        out.push(&mut self.enc_fwd.b);
        if let Some(g) = &mut self.enc_fwd.ln_gain {
            out.push(g);
        }
        if let Some(b) = &mut self.enc_fwd.ln_bias {
            out.push(b);
        }
        out.push(&mut self.enc_bwd.w_x);
        out.push(&mut self.enc_bwd.w_h);
        out.push(&mut self.enc_bwd.b);
        if let Some(g) = &mut self.enc_bwd.ln_gain {
            out.push(g);
        }
        if let Some(b) = &mut self.enc_bwd.ln_bias {
            out.push(b);
        }
        out.push(&mut self.w_mu);
        out.push(&mut self.b_mu);
        out.push(&mut self.w_logvar);
        out.push(&mut self.b_logvar);
        out.push(&mut self.w_init);
        out.push(&mut self.b_init);
        out.push(&mut self.dec.w_x);
        out.push(&mut self.dec.w_h);
        out.push(&mut self.dec.b);
        if let Some(g) = &mut self.dec.ln_gain {
            out.push(g);
        }
        if let Some(b) = &mut self.dec.ln_bias {
            out.push(b);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        if let Some(bow) = &mut self.bow {
            out.push(&mut bow.w1);
            out.push(&mut bow.b1);
            out.push(&mut bow.w2);
            out.push(&mut bow.b2);
        }
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.entries().iter().map(|(_, a)| a.len()).sum()
    }

    /// Rebuild a parameter set from a named table (checkpoint loading).
    /// The table must carry exactly the canonical entries for `cfg`, with
    /// matching shapes.
    pub fn from_named(cfg: &ModelConfig, table: Vec<(String, Mat<S>)>) -> Result<Params<S>> {
        let mut params = init_params::<S>(cfg, 0)?;
        let expected: Vec<&'static str> = params.entries().iter().map(|(n, _)| *n).collect();
        if table.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "parameter table has {} entries, expected {}",
                table.len(),
                expected.len()
            )));
        }
        let mut slots = params.arrays_mut();
        for ((name, arr), (expect, slot)) in table.into_iter().zip(expected.iter().zip(&mut slots)) {
            if name != *expect {
                return Err(Error::Checkpoint(format!(
                    "parameter table entry {name:?} does not match expected {expect:?}"
                )));
            }
            if arr.dim() != slot.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    arr.dim(),
                    slot.dim()
                )));
            }
            **slot = arr;
        }
        drop(slots);
        Ok(params)
    }

    /// Bind every parameter to the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Result<BoundParams> {
        let mut ordered = Vec::new();
        let mut bind = |arr: &Mat<S>| -> Result<NodeId> {
            let id = tape.leaf(arr.clone())?;
            ordered.push(id);
            Ok(id)
        };
        let bind_cell = |cell: &CellParams<S>,
                         bind: &mut dyn FnMut(&Mat<S>) -> Result<NodeId>|
         -> Result<BoundCell> {
            Ok(BoundCell {
                w_x: bind(&cell.w_x)?,
                w_h: bind(&cell.w_h)?,
                b: bind(&cell.b)?,
                ln_gain: cell.ln_gain.as_ref().map(&mut *bind).transpose()?,
                ln_bias: cell.ln_bias.as_ref().map(&mut *bind).transpose()?,
            })
        };

        let embedding = bind(&self.embedding)?;
        let enc_fwd = bind_cell(&self.enc_fwd, &mut bind)?;
        let enc_bwd = bind_cell(&self.enc_bwd, &mut bind)?;
        let w_mu = bind(&self.w_mu)?;
        let b_mu = bind(&self.b_mu)?;
        let w_logvar = bind(&self.w_logvar)?;
        let b_logvar = bind(&self.b_logvar)?;
        let w_init = bind(&self.w_init)?;
        let b_init = bind(&self.b_init)?;
        let dec = bind_cell(&self.dec, &mut bind)?;
        let w_out = bind(&self.w_out)?;
        let b_out = bind(&self.b_out)?;
        let bow = match &self.bow {
            Some(bow) => Some(BoundBow {
                w1: bind(&bow.w1)?,
                b1: bind(&bow.b1)?,
                w2: bind(&bow.w2)?,
                b2: bind(&bow.b2)?,
            }),
            None => None,
        };
        Ok(BoundParams {
            embedding,
            enc_fwd,
            enc_bwd,
            w_mu,
            b_mu,
            w_logvar,
            b_logvar,
            w_init,
            b_init,
            dec,
            w_out,
            b_out,
            bow,
            ordered,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundCell {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub b: NodeId,
    pub ln_gain: Option<NodeId>,
    pub ln_bias: Option<NodeId>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBow {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Tape handles to bound parameters. `ordered` matches
/// [`Params::entries`] index for index.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub embedding: NodeId,
    pub enc_fwd: BoundCell,
    pub enc_bwd: BoundCell,
    pub w_mu: NodeId,
    pub b_mu: NodeId,
    pub w_logvar: NodeId,
    pub b_logvar: NodeId,
    pub w_init: NodeId,
    pub b_init: NodeId,
    pub dec: BoundCell,
    pub w_out: NodeId,
    pub b_out: NodeId,
    pub bow: Option<BoundBow>,
    pub ordered: Vec<NodeId>,
}

/// Per-example posterior parameters as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior<S: Scalar> {
    /// N x K means.
    pub mu: Mat<S>,
    /// N x K log-variances, clamped to [-8, 8].
    pub logvar: Mat<S>,
}

/// Tape handles to the posterior heads of a live graph.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorNodes {
    pub mu: NodeId,
    pub logvar: NodeId,
}

fn xavier<S: Scalar>(rng: &mut SeededRng, rows: usize, cols: usize, gain: f64) -> Mat<S> {
    let a = gain * (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<S> = (0..rows * cols)
        .map(|_| S::from_f64(rng.uniform_in(-a, a)))
        .collect();
    Mat::from_shape_vec((rows, cols), data).expect("xavier shape")
}

fn init_cell<S: Scalar>(
    rng: &mut SeededRng,
    input: usize,
    hidden: usize,
    gates: usize,
    layer_norm: bool,
) -> CellParams<S> {
    let g = gates * hidden;
    CellParams {
        w_x: xavier(rng, input, g, 1.0),
        w_h: xavier(rng, hidden, g, 1.0),
        b: Mat::zeros((1, g)),
        ln_gain: layer_norm.then(|| Mat::from_elem((1, g), S::one())),
        ln_bias: layer_norm.then(|| Mat::zeros((1, g))),
    }
}

/// Deterministic initialization: weights uniform in (-a, a) with
/// `a = sqrt(6 / (fan_in + fan_out))`, biases zero. The logvar projection
/// is scaled down so the initial posterior log-variance sits near zero.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Params<S>> {
    cfg.validate()?;
    let mut rng = SeededRng::derive(seed, 0x1A17);
    let e = cfg.embed_dim;
    let he = cfg.enc_hidden;
    let hd = cfg.dec_hidden;
    let k = cfg.latent_dim;
    let v = cfg.vocab_size;
    let gates = cfg.gates();

    Ok(Params {
        embedding: xavier(&mut rng, v, e, 1.0),
        enc_fwd: init_cell(&mut rng, e, he, gates, cfg.layer_norm),
        enc_bwd: init_cell(&mut rng, e, he, gates, cfg.layer_norm),
        w_mu: xavier(&mut rng, 2 * he, k, 1.0),
        b_mu: Mat::zeros((1, k)),
        w_logvar: xavier(&mut rng, 2 * he, k, 0.1),
        b_logvar: Mat::zeros((1, k)),
        w_init: xavier(&mut rng, k, cfg.dec_init_dim(), 1.0),
        b_init: Mat::zeros((1, cfg.dec_init_dim())),
        dec: init_cell(&mut rng, cfg.dec_input_dim(), hd, gates, cfg.layer_norm),
        w_out: xavier(&mut rng, hd, v, 1.0),
        b_out: Mat::zeros((1, v)),
        bow: match cfg.bow_hidden {
            Some(hb) => Some(BowParams {
                w1: xavier(&mut rng, k, hb, 1.0),
                b1: Mat::zeros((1, hb)),
                w2: xavier(&mut rng, hb, v, 1.0),
                b2: Mat::zeros((1, v)),
            }),
            None => None,
        },
    })
}

fn layer_norm<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
) -> Result<NodeId> {
    let (n, d) = tape.shape(x);
    let mean = tape.mean_cols(x);
    let mean_b = tape.broadcast_cols(mean, d)?;
    let centered = tape.sub(x, mean_b)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_cols(sq);
    let var_eps = tape.add_scalar(var, S::from_f64(LN_EPS));
    let ln_v = tape.log(var_eps);
    let half_neg = tape.scale(ln_v, S::from_f64(-0.5));
    let rstd = tape.exp(half_neg);
    let rstd_b = tape.broadcast_cols(rstd, d)?;
    let normed = tape.mul(centered, rstd_b)?;
    let g_b = tape.broadcast_rows(gain, n)?;
    let b_b = tape.broadcast_rows(bias, n)?;
    let scaled = tape.mul(normed, g_b)?;
    tape.add(scaled, b_b)
}

#[derive(Debug, Clone, Copy)]
struct CellState {
    h: NodeId,
    /// LSTM cell state; unused for GRU.
    c: Option<NodeId>,
}

fn cell_step<S: Scalar>(
    tape: &mut Tape<S>,
    cell: &BoundCell,
    kind: CellKind,
    hidden: usize,
    x: NodeId,
    state: CellState,
) -> Result<CellState> {
    let (n, _) = tape.shape(x);
    match kind {
        CellKind::Lstm => {
            let xw = tape.matmul(x, cell.w_x)?;
            let hw = tape.matmul(state.h, cell.w_h)?;
            let mut pre = tape.add(xw, hw)?;
            if let (Some(g), Some(b)) = (cell.ln_gain, cell.ln_bias) {
                pre = layer_norm(tape, pre, g, b)?;
            }
            let bias = tape.broadcast_rows(cell.b, n)?;
            let pre = tape.add(pre, bias)?;

            let i_pre = tape.slice_cols(pre, 0, hidden)?;
            let f_pre = tape.slice_cols(pre, hidden, 2 * hidden)?;
            let g_pre = tape.slice_cols(pre, 2 * hidden, 3 * hidden)?;
            let o_pre = tape.slice_cols(pre, 3 * hidden, 4 * hidden)?;
            let i = tape.sigmoid(i_pre);
            let f = tape.sigmoid(f_pre);
            let g = tape.tanh(g_pre);
            let o = tape.sigmoid(o_pre);

            let c_prev = state.c.expect("lstm state has c");
            let fc = tape.mul(f, c_prev)?;
            let ig = tape.mul(i, g)?;
            let c_new = tape.add(fc, ig)?;
            let c_tanh = tape.tanh(c_new);
            let h_new = tape.mul(o, c_tanh)?;
            Ok(CellState { h: h_new, c: Some(c_new) })
        }
        CellKind::Gru => {
            let xw = tape.matmul(x, cell.w_x)?;
            let w_h_ru = tape.slice_cols(cell.w_h, 0, 2 * hidden)?;
            let hw_ru = tape.matmul(state.h, w_h_ru)?;
            let xw_ru = tape.slice_cols(xw, 0, 2 * hidden)?;
            let mut pre_ru = tape.add(xw_ru, hw_ru)?;
            if let (Some(g), Some(b)) = (cell.ln_gain, cell.ln_bias) {
                let g_ru = tape.slice_cols(g, 0, 2 * hidden)?;
                let b_ru = tape.slice_cols(b, 0, 2 * hidden)?;
                pre_ru = layer_norm(tape, pre_ru, g_ru, b_ru)?;
            }
            let b_ru = tape.slice_cols(cell.b, 0, 2 * hidden)?;
            let b_ru = tape.broadcast_rows(b_ru, n)?;
            let pre_ru = tape.add(pre_ru, b_ru)?;

            let r_pre = tape.slice_cols(pre_ru, 0, hidden)?;
            let u_pre = tape.slice_cols(pre_ru, hidden, 2 * hidden)?;
            let r = tape.sigmoid(r_pre);
            let u = tape.sigmoid(u_pre);

            let rh = tape.mul(r, state.h)?;
            let w_h_c = tape.slice_cols(cell.w_h, 2 * hidden, 3 * hidden)?;
            let hw_c = tape.matmul(rh, w_h_c)?;
            let xw_c = tape.slice_cols(xw, 2 * hidden, 3 * hidden)?;
            let mut pre_c = tape.add(xw_c, hw_c)?;
            if let (Some(g), Some(b)) = (cell.ln_gain, cell.ln_bias) {
                let g_c = tape.slice_cols(g, 2 * hidden, 3 * hidden)?;
                let b_c = tape.slice_cols(b, 2 * hidden, 3 * hidden)?;
                pre_c = layer_norm(tape, pre_c, g_c, b_c)?;
            }
            let b_c = tape.slice_cols(cell.b, 2 * hidden, 3 * hidden)?;
            let b_c = tape.broadcast_rows(b_c, n)?;
            let pre_c = tape.add(pre_c, b_c)?;
            let cand = tape.tanh(pre_c);

            // h' = (1 - u) * h + u * cand
            let uh = tape.mul(u, cand)?;
            let u_prev = tape.mul(u, state.h)?;
            let keep = tape.sub(state.h, u_prev)?;
            let h_new = tape.add(keep, uh)?;
            Ok(CellState { h: h_new, c: None })
        }
    }
}

fn mask_columns<S: Scalar>(batch: &Batch, t: usize) -> (Mat<S>, Mat<S>) {
    let mut keep = Mat::zeros((batch.rows, 1));
    let mut carry = Mat::zeros((batch.rows, 1));
    for r in 0..batch.rows {
        if batch.mask(r, t) {
            keep[[r, 0]] = S::one();
        } else {
            carry[[r, 0]] = S::one();
        }
    }
    (keep, carry)
}

/// new * mask + prev * (1 - mask), with column vectors broadcast across
/// the hidden dimension. Keeps padded positions from touching the state.
fn masked_carry<S: Scalar>(
    tape: &mut Tape<S>,
    new: NodeId,
    prev: NodeId,
    keep: NodeId,
    carry: NodeId,
) -> Result<NodeId> {
    let (_, d) = tape.shape(new);
    let keep_b = tape.broadcast_cols(keep, d)?;
    let carry_b = tape.broadcast_cols(carry, d)?;
    let a = tape.mul(new, keep_b)?;
    let b = tape.mul(prev, carry_b)?;
    tape.add(a, b)
}

fn run_encoder_direction<S: Scalar>(
    tape: &mut Tape<S>,
    cell: &BoundCell,
    cfg: &ModelConfig,
    embedding: NodeId,
    batch: &Batch,
    reverse: bool,
) -> Result<NodeId> {
    let n = batch.rows;
    let h0 = tape.constant(Mat::zeros((n, cfg.enc_hidden)))?;
    let mut state = CellState {
        h: h0,
        c: match cfg.cell {
            CellKind::Lstm => Some(tape.constant(Mat::zeros((n, cfg.enc_hidden)))?),
            CellKind::Gru => None,
        },
    };
    let steps: Vec<usize> = if reverse {
        (0..batch.max_t).rev().collect()
    } else {
        (0..batch.max_t).collect()
    };
    for t in steps {
        let ids: Vec<usize> = batch.column(t).iter().map(|&id| id as usize).collect();
        let x = tape.gather_rows(embedding, ids)?;
        let next = cell_step(tape, cell, cfg.cell, cfg.enc_hidden, x, state)?;
        let (keep, carry) = mask_columns::<S>(batch, t);
        let keep = tape.constant(keep)?;
        let carry = tape.constant(carry)?;
        let h = masked_carry(tape, next.h, state.h, keep, carry)?;
        let c = match (next.c, state.c) {
            (Some(nc), Some(pc)) => Some(masked_carry(tape, nc, pc, keep, carry)?),
            _ => None,
        };
        state = CellState { h, c };
    }
    Ok(state.h)
}

/// Bidirectional encode to posterior mean and clamped log-variance.
/// Masked positions carry the previous state, so padding cannot influence
/// the final states.
pub fn encode_graph<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<PosteriorNodes> {
    let n = batch.rows;
    let h_fwd = run_encoder_direction(tape, &bound.enc_fwd, cfg, bound.embedding, batch, false)?;
    let h_bwd = run_encoder_direction(tape, &bound.enc_bwd, cfg, bound.embedding, batch, true)?;
    let hcat = tape.concat(h_fwd, h_bwd)?;

    let mu_lin = tape.matmul(hcat, bound.w_mu)?;
    let b_mu = tape.broadcast_rows(bound.b_mu, n)?;
    let mu = tape.add(mu_lin, b_mu)?;

    let lv_lin = tape.matmul(hcat, bound.w_logvar)?;
    let b_lv = tape.broadcast_rows(bound.b_logvar, n)?;
    let lv_raw = tape.add(lv_lin, b_lv)?;
    let logvar = tape.clamp(lv_raw, S::from_f64(-LOGVAR_CLAMP), S::from_f64(LOGVAR_CLAMP));

    Ok(PosteriorNodes { mu, logvar })
}

/// Draw a standard-normal noise matrix from a seeded stream, row-major.
pub fn standard_normal_mat<S: Scalar>(rng: &mut SeededRng, n: usize, k: usize) -> Mat<S> {
    let data: Vec<S> = (0..n * k).map(|_| S::from_f64(rng.standard_normal())).collect();
    Mat::from_shape_vec((n, k), data).expect("noise shape")
}

/// z = mu + exp(logvar / 2) * eps. The noise enters as a constant, so
/// gradients flow to mu and logvar only.
pub fn reparameterize_graph<S: Scalar>(
    tape: &mut Tape<S>,
    post: PosteriorNodes,
    eps: Mat<S>,
) -> Result<NodeId> {
    if tape.shape(post.mu) != (eps.nrows(), eps.ncols()) {
        return Err(Error::Shape {
            op: "reparameterize",
            detail: format!("noise {:?} vs mu {:?}", (eps.nrows(), eps.ncols()), tape.shape(post.mu)),
        });
    }
    let eps = tape.constant(eps)?;
    let half = tape.scale(post.logvar, S::from_f64(0.5));
    let sigma = tape.exp(half);
    let noise = tape.mul(sigma, eps)?;
    tape.add(post.mu, noise)
}

fn dec_init_state<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    z: NodeId,
) -> Result<CellState> {
    let (n, _) = tape.shape(z);
    let lin = tape.matmul(z, bound.w_init)?;
    let b = tape.broadcast_rows(bound.b_init, n)?;
    let pre = tape.add(lin, b)?;
    match cfg.cell {
        CellKind::Lstm => {
            let h_pre = tape.slice_cols(pre, 0, cfg.dec_hidden)?;
            let c_pre = tape.slice_cols(pre, cfg.dec_hidden, 2 * cfg.dec_hidden)?;
            let h = tape.tanh(h_pre);
            let c = tape.tanh(c_pre);
            Ok(CellState { h, c: Some(c) })
        }
        CellKind::Gru => {
            let h = tape.tanh(pre);
            Ok(CellState { h, c: None })
        }
    }
}

fn dec_input<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    ids: Vec<usize>,
    z: NodeId,
) -> Result<NodeId> {
    let x = tape.gather_rows(bound.embedding, ids)?;
    match cfg.z_injection {
        ZInjection::PerStepAndInit => tape.concat(x, z),
        ZInjection::InitOnly => Ok(x),
    }
}

fn output_logits<S: Scalar>(tape: &mut Tape<S>, bound: &BoundParams, h: NodeId) -> Result<NodeId> {
    let (n, _) = tape.shape(h);
    let lin = tape.matmul(h, bound.w_out)?;
    let b = tape.broadcast_rows(bound.b_out, n)?;
    tape.add(lin, b)
}

/// Teacher-forced decode. Step s consumes ground-truth token s (replaced by
/// UNK with probability `word_dropout`) and produces logits for token s+1.
/// Exactly rows * (max_t - 1) dropout draws are consumed regardless of
/// padding, so the stream position is a pure function of batch shape.
pub fn decode_teacher_forced<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    z: NodeId,
    batch: &Batch,
    word_dropout: f64,
    rng: &mut SeededRng,
) -> Result<Vec<NodeId>> {
    let (zn, _) = tape.shape(z);
    if zn != batch.rows {
        return Err(Error::Shape {
            op: "decode-teacher-forced",
            detail: format!("z rows {zn} vs batch rows {}", batch.rows),
        });
    }
    if !(0.0..=1.0).contains(&word_dropout) {
        return Err(Error::Config(format!("word_dropout {word_dropout} outside [0, 1]")));
    }
    let mut state = dec_init_state(tape, bound, cfg, z)?;
    let mut logits = Vec::with_capacity(batch.max_t.saturating_sub(1));
    for s in 0..batch.max_t - 1 {
        let ids: Vec<usize> = batch
            .column(s)
            .iter()
            .map(|&id| {
                if rng.bernoulli(word_dropout) {
                    UNK as usize
                } else {
                    id as usize
                }
            })
            .collect();
        let x = dec_input(tape, bound, cfg, ids, z)?;
        state = cell_step(tape, &bound.dec, cfg.cell, cfg.dec_hidden, x, state)?;
        logits.push(output_logits(tape, bound, state.h)?);
    }
    Ok(logits)
}

/// Bag-of-words head: one hidden tanh layer from z to vocabulary logits.
pub fn bow_logits_graph<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    z: NodeId,
) -> Result<NodeId> {
    let bow = bound
        .bow
        .ok_or_else(|| Error::Config("bag-of-words head not initialized".into()))?;
    let (n, _) = tape.shape(z);
    let lin = tape.matmul(z, bow.w1)?;
    let b1 = tape.broadcast_rows(bow.b1, n)?;
    let pre = tape.add(lin, b1)?;
    let h = tape.tanh(pre);
    let out = tape.matmul(h, bow.w2)?;
    let b2 = tape.broadcast_rows(bow.b2, n)?;
    tape.add(out, b2)
}

/// Evaluate the posterior for a batch (no gradients).
pub fn encode_values<S: Scalar>(
    params: &Params<S>,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<GaussianPosterior<S>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let post = encode_graph(&mut tape, &bound, cfg, batch)?;
    tape.forward()?;
    Ok(GaussianPosterior {
        mu: tape.value(post.mu)?.clone(),
        logvar: tape.value(post.logvar)?.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GenerateMode {
    /// Argmax with lowest-id tie-break.
    Greedy,
    /// Sample from softmax(logits / tau).
    Temperature(f64),
}

/// Free-running batched decode from latent rows. Each row starts at BOS and
/// stops at EOS or after `max_len` generated tokens; returned ids exclude
/// BOS/EOS. Greedy mode is deterministic in (params, z); temperature mode
/// consumes one draw per unfinished row per step from `rng`.
pub fn generate<S: Scalar>(
    params: &Params<S>,
    cfg: &ModelConfig,
    z: &Mat<S>,
    max_len: usize,
    mode: GenerateMode,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<u32>>> {
    if max_len < 2 {
        return Err(Error::Config("generate max_len must be >= 2".into()));
    }
    if let GenerateMode::Temperature(tau) = mode {
        if tau <= 0.0 {
            return Err(Error::Config(format!("temperature {tau} must be > 0")));
        }
    }
    let n = z.nrows();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let z_node = tape.constant(z.clone())?;
    let mut state = dec_init_state(&mut tape, &bound, cfg, z_node)?;

    let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut prev: Vec<usize> = vec![BOS as usize; n];

    for _ in 0..max_len {
        let inputs: Vec<usize> = (0..n)
            .map(|r| if done[r] { PAD as usize } else { prev[r] })
            .collect();
        let x = dec_input(&mut tape, &bound, cfg, inputs, z_node)?;
        state = cell_step(&mut tape, &bound.dec, cfg.cell, cfg.dec_hidden, x, state)?;
        let logits = output_logits(&mut tape, &bound, state.h)?;
        tape.forward()?;
        let logits = tape.value(logits)?;

        for r in 0..n {
            if done[r] {
                continue;
            }
            let row = logits.row(r);
            let next = match mode {
                GenerateMode::Greedy => argmax_lowest_id(row.iter().map(|v| v.as_f64())),
                GenerateMode::Temperature(tau) => {
                    let u = rng.uniform();
                    sample_softmax(row.iter().map(|v| v.as_f64()), tau, u)
                }
            } as u32;
            if next == EOS {
                done[r] = true;
            } else {
                outputs[r].push(next);
                prev[r] = next as usize;
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(outputs)
}

fn argmax_lowest_id(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn sample_softmax(values: impl Iterator<Item = f64> + Clone, tau: f64, u: f64) -> usize {
    let scaled: Vec<f64> = values.map(|v| v / tau).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w / total;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Batch;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            embed_dim: 6,
            enc_hidden: 8,
            dec_hidden: 8,
            latent_dim: 4,
            layer_norm: false,
            cell: CellKind::Lstm,
            z_injection: ZInjection::PerStepAndInit,
            bow_hidden: None,
        }
    }

    fn toy_batch() -> Batch {
        Batch::from_rows(&[
            vec![BOS, 4, 5, 6, EOS],
            vec![BOS, 7, EOS],
            vec![BOS, 4, 5, 6, EOS],
        ])
        .unwrap()
    }

    fn posterior_for(cfg: &ModelConfig, params: &Params<f64>, batch: &Batch) -> GaussianPosterior<f64> {
        encode_values(params, cfg, batch).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = toy_config();
        let a = init_params::<f64>(&cfg, 3).unwrap();
        let b = init_params::<f64>(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = init_params::<f64>(&cfg, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn xavier_bound_for_square_matrix() {
        let mut rng = SeededRng::new(1);
        let m = xavier::<f64>(&mut rng, 4, 4, 1.0);
        let bound = (6.0f64 / 8.0).sqrt();
        assert!((bound - 0.866).abs() < 1e-3);
        assert!(m.iter().all(|v| v.abs() <= bound));
        assert!(m.iter().any(|v| v.abs() > bound / 2.0));
    }

    #[test]
    fn initial_posterior_is_tight() {
        let cfg = toy_config();
        let params = init_params::<f64>(&cfg, 5).unwrap();
        assert!(params.b_mu.iter().all(|&v| v == 0.0));
        let post = posterior_for(&cfg, &params, &toy_batch());
        // zero bias and small weights keep initial mu near the origin
        let mean = post.mu.sum() / post.mu.len() as f64;
        let var = post.mu.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / post.mu.len() as f64;
        assert!(var < 1.0, "initial mu variance {var}");
        assert!(post.logvar.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn identical_sentences_get_identical_posteriors() {
        let cfg = toy_config();
        let params = init_params::<f64>(&cfg, 7).unwrap();
        let post = posterior_for(&cfg, &params, &toy_batch());
        assert_eq!(post.mu.row(0), post.mu.row(2));
        assert_eq!(post.logvar.row(0), post.logvar.row(2));
    }

    #[test]
    fn encode_is_row_permutation_equivariant() {
        let cfg = toy_config();
        let params = init_params::<f64>(&cfg, 7).unwrap();
        let batch = toy_batch();
        let perm = [2usize, 0, 1];
        let post = posterior_for(&cfg, &params, &batch);
        let post_p = posterior_for(&cfg, &params, &batch.permuted(&perm));
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(post_p.mu.row(i), post.mu.row(src));
        }
    }

    #[test]
    fn padding_does_not_change_the_posterior() {
        for cell in [CellKind::Lstm, CellKind::Gru] {
            let cfg = ModelConfig { cell, ..toy_config() };
            let params = init_params::<f64>(&cfg, 9).unwrap();
            let batch = toy_batch();
            let post = posterior_for(&cfg, &params, &batch);
            let post_padded = posterior_for(&cfg, &params, &batch.with_extra_padding(3));
            for (a, b) in post.mu.iter().zip(post_padded.mu.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in post.logvar.iter().zip(post_padded.logvar.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reparameterize_zero_noise_returns_mu() {
        let cfg = toy_config();
        let params = init_params::<f64>(&cfg, 2).unwrap();
        let batch = toy_batch();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape).unwrap();
        let post = encode_graph(&mut tape, &bound, &cfg, &batch).unwrap();
        let z = reparameterize_graph(&mut tape, post, Mat::zeros((batch.rows, cfg.latent_dim))).unwrap();
        tape.forward().unwrap();
        assert_eq!(tape.value(z).unwrap(), tape.value(post.mu).unwrap());
    }

    #[test]
    fn reparameterize_tiny_variance_stays_close_to_mu() {
        let k = 4;
        let mut tape = Tape::<f64>::new();
        let mu = tape.leaf(Mat::zeros((2, k))).unwrap();
        let logvar_raw = tape.leaf(Mat::from_elem((2, k), -100.0)).unwrap();
        let logvar = tape.clamp(logvar_raw, -8.0, 8.0);
        let eps = standard_normal_mat::<f64>(&mut SeededRng::new(3), 2, k);
        let z = reparameterize_graph(&mut tape, PosteriorNodes { mu, logvar }, eps.clone()).unwrap();
        tape.forward().unwrap();
        let zv = tape.value(z).unwrap();
        for (zi, ei) in zv.iter().zip(eps.iter()) {
            assert!(zi.abs() <= 2e-2 * ei.abs() + 1e-12);
        }
    }

    #[test]
    fn reparameterize_sample_mean_approaches_mu() {
        let draws = 100_000;
        let k = 3;
        let mut rng = SeededRng::new(11);
        let mu_row = [0.7, -1.2, 0.4];
        let logvar_row = [0.3, -0.5, 0.0];
        let mu = Mat::from_shape_fn((draws, k), |(_, j)| mu_row[j]);
        let logvar = Mat::from_shape_fn((draws, k), |(_, j)| logvar_row[j]);
        let mut tape = Tape::new();
        let mu_n = tape.constant(mu).unwrap();
        let lv_n = tape.constant(logvar).unwrap();
        let eps = standard_normal_mat::<f64>(&mut rng, draws, k);
        let z = reparameterize_graph(&mut tape, PosteriorNodes { mu: mu_n, logvar: lv_n }, eps).unwrap();
        tape.forward().unwrap();
        let zv = tape.value(z).unwrap();
        for j in 0..k {
            let mean = zv.column(j).sum() / draws as f64;
            let sigma = (logvar_row[j] as f64 / 2.0).exp();
            let tol = 3.0 * sigma / (draws as f64).sqrt();
            assert!((mean - mu_row[j]).abs() < tol, "dim {j}: {mean} vs {}", mu_row[j]);
        }
    }

    fn forced_logits(
        cfg: &ModelConfig,
        params: &Params<f64>,
        batch: &Batch,
        z: &Mat<f64>,
        word_dropout: f64,
        seed: u64,
    ) -> Vec<Mat<f64>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape).unwrap();
        let z_node = tape.constant(z.clone()).unwrap();
        let mut rng = SeededRng::new(seed);
        let ids =
            decode_teacher_forced(&mut tape, &bound, cfg, z_node, batch, word_dropout, &mut rng)
                .unwrap();
        tape.forward().unwrap();
        ids.iter().map(|&id| tape.value(id).unwrap().clone()).collect()
    }

    #[test]
    fn teacher_forcing_without_dropout_is_deterministic() {
        let cfg = toy_config();
        let params = init_params::<f64>(&cfg, 13).unwrap();
        let batch = toy_batch();
        let z = Mat::from_elem((batch.rows, cfg.latent_dim), 0.25);
        let a = forced_logits(&cfg, &params, &batch, &z, 0.0, 1);
        let b = forced_logits(&cfg, &params, &batch, &z, 0.0, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn full_word_dropout_hides_all_conditioning_tokens() {
        let cfg = toy_config();
        let params = init_params::<f64>(&cfg, 13).unwrap();
        // Same lengths, different content: with every conditioning token
        // replaced by UNK the logits cannot depend on content.
        let a = Batch::from_rows(&[vec![BOS, 4, 5, 6, EOS], vec![BOS, 7, EOS]]).unwrap();
        let b = Batch::from_rows(&[vec![BOS, 9, 10, 11, EOS], vec![BOS, 8, EOS]]).unwrap();
        let z = Mat::from_elem((2, cfg.latent_dim), -0.4);
        let la = forced_logits(&cfg, &params, &a, &z, 1.0, 5);
        let lb = forced_logits(&cfg, &params, &b, &z, 1.0, 99);
        assert_eq!(la, lb);
        let la0 = forced_logits(&cfg, &params, &a, &z, 0.0, 5);
        assert_ne!(la, la0);
    }

    #[test]
    fn logits_respond_to_z() {
        let cfg = toy_config();
        let params = init_params::<f64>(&cfg, 17).unwrap();
        let batch = toy_batch();
        let z0 = Mat::zeros((batch.rows, cfg.latent_dim));
        let mut z1 = z0.clone();
        z1[[0, 2]] = 0.5;
        let l0 = forced_logits(&cfg, &params, &batch, &z0, 0.0, 1);
        let l1 = forced_logits(&cfg, &params, &batch, &z1, 0.0, 1);
        let delta: f64 = l0
            .iter()
            .zip(&l1)
            .map(|(a, b)| (a - b).iter().map(|d| d.abs()).sum::<f64>())
            .sum();
        assert!(delta > 1e-8, "logits ignored z (delta {delta})");
    }

    #[test]
    fn teacher_forced_logits_ignore_extra_padding() {
        let cfg = toy_config();
        let params = init_params::<f64>(&cfg, 19).unwrap();
        let batch = toy_batch();
        let z = Mat::from_elem((batch.rows, cfg.latent_dim), 0.1);
        let plain = forced_logits(&cfg, &params, &batch, &z, 0.0, 1);
        let padded = forced_logits(&cfg, &params, &batch.with_extra_padding(2), &z, 0.0, 1);
        for r in 0..batch.rows {
            for s in 0..batch.lengths[r] - 1 {
                let a = plain[s].row(r);
                let b = padded[s].row(r);
                for (x, y) in a.iter().zip(b.iter()) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn greedy_generation_is_repeatable_and_terminates() {
        for cell in [CellKind::Lstm, CellKind::Gru] {
            let cfg = ModelConfig { cell, ..toy_config() };
            let params = init_params::<f64>(&cfg, 23).unwrap();
            let z = standard_normal_mat::<f64>(&mut SeededRng::new(4), 3, cfg.latent_dim);
            let a = generate(&params, &cfg, &z, 10, GenerateMode::Greedy, &mut SeededRng::new(1)).unwrap();
            let b = generate(&params, &cfg, &z, 10, GenerateMode::Greedy, &mut SeededRng::new(2)).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|s| s.len() <= 10));
        }
    }

    #[test]
    fn near_zero_temperature_matches_greedy() {
        let cfg = toy_config();
        let params = init_params::<f64>(&cfg, 29).unwrap();
        let z = standard_normal_mat::<f64>(&mut SeededRng::new(6), 4, cfg.latent_dim);
        let greedy = generate(&params, &cfg, &z, 12, GenerateMode::Greedy, &mut SeededRng::new(1)).unwrap();
        let cold = generate(
            &params,
            &cfg,
            &z,
            12,
            GenerateMode::Temperature(1e-8),
            &mut SeededRng::new(1),
        )
        .unwrap();
        assert_eq!(greedy, cold);
    }

    #[test]
    fn temperature_must_be_positive() {
        let cfg = toy_config();
        let params = init_params::<f64>(&cfg, 1).unwrap();
        let z = Mat::zeros((1, cfg.latent_dim));
        let err = generate(&params, &cfg, &z, 5, GenerateMode::Temperature(0.0), &mut SeededRng::new(1));
        assert!(err.is_err());
    }

    #[test]
    fn bound_ordered_matches_entries() {
        for bow in [None, Some(5)] {
            let cfg = ModelConfig { bow_hidden: bow, layer_norm: bow.is_some(), ..toy_config() };
            let params = init_params::<f64>(&cfg, 31).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape).unwrap();
            let entries = params.entries();
            assert_eq!(entries.len(), bound.ordered.len());
            for ((_, arr), &id) in entries.iter().zip(&bound.ordered) {
                assert_eq!((arr.nrows(), arr.ncols()), tape.shape(id));
            }
        }
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut cfg = toy_config();
        cfg.latent_dim = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config();
        cfg.embed_dim = 0;
        assert!(cfg.validate().is_err());
    }
}
