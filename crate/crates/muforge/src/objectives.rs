//! Loss terms and regularizer strategies.
//!
//! Every term is built as a tape graph, so training differentiates through
//! exactly the code that evaluation reports. The value-level wrappers
//! (`kl_loss`, `mu_forcing_loss`, ...) run the same graph on a throwaway
//! tape.
//!
//! The closed-form Gaussian KL against a standard-normal prior is
//! `0.5 * sum_k (exp(logvar_k) + mu_k^2 - 1 - logvar_k)` per example. This
//! is the form whose unique global minimum is 0 at mu = 0, logvar = 0, and
//! the Monte Carlo estimator in the test suite pins the sign of the
//! log-determinant term.

use crate::corpus::Batch;
use crate::error::{Error, Result};
use crate::model::{GaussianPosterior, PosteriorNodes};
use crate::scalar::Scalar;
use crate::tape::{ClassWeights, Mat, NodeId, Tape};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealShape {
    Linear,
    Sigmoid,
}

/// Reduction of the KL term across the batch inside the total loss.
/// `Mean` keeps the margin-vs-KL balance independent of batch size and is
/// the documented default; `Sum` weights KL by batch size instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlReduction {
    Mean,
    Sum,
}

/// Independently togglable countermeasure set. All magnitudes are in nats;
/// the config layer converts any bits-denominated file values before
/// constructing this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    /// Margin on the batch sample variance of mu; 0 disables the hinge.
    pub mu_beta: f64,
    /// Steps to ramp the KL weight from 0 to 1; 0 means constant 1.
    pub kl_anneal_steps: u64,
    pub anneal_shape: AnnealShape,
    /// Reserved KL per latent dimension (nats).
    pub fb_per_dim: Option<f64>,
    /// Reserved KL for the whole latent vector (nats).
    pub fb_total: Option<f64>,
    /// Constant KL penalty weight in (0, 1].
    pub kl_lambda: f64,
    /// Weight of the bag-of-words auxiliary loss; 0 disables it.
    pub bow_weight: f64,
    pub word_dropout: f64,
    pub kl_reduction: KlReduction,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            mu_beta: 0.0,
            kl_anneal_steps: 0,
            anneal_shape: AnnealShape::Linear,
            fb_per_dim: None,
            fb_total: None,
            kl_lambda: 1.0,
            bow_weight: 0.0,
            word_dropout: 0.0,
            kl_reduction: KlReduction::Mean,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mu_beta < 0.0 {
            return Err(Error::Config(format!("mu_beta {} must be >= 0", self.mu_beta)));
        }
        if !(self.kl_lambda > 0.0 && self.kl_lambda <= 1.0) {
            return Err(Error::Config(format!("kl_lambda {} outside (0, 1]", self.kl_lambda)));
        }
        if self.fb_per_dim.is_some() && self.fb_total.is_some() {
            return Err(Error::Config(
                "free bits per-dimension and free bits total cannot both be enabled".into(),
            ));
        }
        if let Some(r) = self.fb_per_dim.or(self.fb_total) {
            if r < 0.0 {
                return Err(Error::Config(format!("free bits reserve {r} must be >= 0")));
            }
        }
        if self.bow_weight < 0.0 {
            return Err(Error::Config(format!("bow_weight {} must be >= 0", self.bow_weight)));
        }
        if !(0.0..=1.0).contains(&self.word_dropout) {
            return Err(Error::Config(format!(
                "word_dropout {} outside [0, 1]",
                self.word_dropout
            )));
        }
        Ok(())
    }
}

/// KL weight schedule. Linear: min(1, step / anneal_steps). The sigmoid
/// variant is rescaled so it still starts at exactly 0 and ends at exactly
/// 1. `anneal_steps = 0` means no annealing (constant 1).
pub fn kl_anneal_weight(step: u64, anneal_steps: u64, shape: AnnealShape) -> f64 {
    if anneal_steps == 0 {
        return 1.0;
    }
    let x = step as f64 / anneal_steps as f64;
    if x >= 1.0 {
        return 1.0;
    }
    match shape {
        AnnealShape::Linear => x,
        AnnealShape::Sigmoid => {
            let s = |t: f64| 1.0 / (1.0 + (-12.0 * (t - 0.5)).exp());
            let (lo, hi) = (s(0.0), s(1.0));
            (s(x) - lo) / (hi - lo)
        }
    }
}

/// Handles to the KL subgraph: per-dimension matrix (kept for free bits),
/// per-example column, and batch mean.
#[derive(Debug, Clone, Copy)]
pub struct KlNodes {
    pub per_dim: NodeId,
    pub per_example: NodeId,
    pub mean: NodeId,
}

/// Closed-form KL(q || N(0, I)) for a diagonal Gaussian posterior.
pub fn kl_graph<S: Scalar>(tape: &mut Tape<S>, post: PosteriorNodes) -> Result<KlNodes> {
    let ex = tape.exp(post.logvar);
    let musq = tape.mul(post.mu, post.mu)?;
    let s1 = tape.add(ex, musq)?;
    let s2 = tape.add_scalar(s1, S::from_f64(-1.0));
    let s3 = tape.sub(s2, post.logvar)?;
    let per_dim = tape.scale(s3, S::from_f64(0.5));
    let per_example = tape.sum_cols(per_dim);
    let mean = tape.mean_all(per_example);
    Ok(KlNodes { per_dim, per_example, mean })
}

/// Value-level KL: per-example nats, batch mean, and the per-dimension
/// matrix. Same graph as training.
pub struct KlValues<S: Scalar> {
    pub per_dim: Mat<S>,
    pub per_example: Vec<f64>,
    pub mean: f64,
}

pub fn kl_loss<S: Scalar>(post: &GaussianPosterior<S>) -> Result<KlValues<S>> {
    let mut tape = Tape::new();
    let mu = tape.constant(post.mu.clone())?;
    let logvar = tape.constant(post.logvar.clone())?;
    let nodes = kl_graph(&mut tape, PosteriorNodes { mu, logvar })?;
    tape.forward()?;
    Ok(KlValues {
        per_dim: tape.value(nodes.per_dim)?.clone(),
        per_example: tape
            .value(nodes.per_example)?
            .iter()
            .map(|v| v.as_f64())
            .collect(),
        mean: tape.scalar_value(nodes.mean)?.as_f64(),
    })
}

/// Handles to the margin regularizer subgraph.
#[derive(Debug, Clone, Copy)]
pub struct MuForcingNodes {
    /// (1 / 2N) * sum_n ||mu_n - mu_bar||^2, the batch variance term.
    pub variance_term: NodeId,
    /// max(0, beta - variance_term).
    pub loss: NodeId,
}

/// Margin cost on the batch sample variance of the posterior means.
/// Gradient flows through the batch mean (no stop-gradient).
pub fn mu_forcing_graph<S: Scalar>(
    tape: &mut Tape<S>,
    mu: NodeId,
    beta: f64,
) -> Result<MuForcingNodes> {
    let (n, _) = tape.shape(mu);
    if n < 2 {
        return Err(Error::Config(format!(
            "mu-forcing needs a batch of at least 2 examples, got {n}"
        )));
    }
    let mu_bar = tape.mean_rows(mu);
    let mu_bar_b = tape.broadcast_rows(mu_bar, n)?;
    let dev = tape.sub(mu, mu_bar_b)?;
    let sq = tape.mul(dev, dev)?;
    let total = tape.sum_all(sq);
    let variance_term = tape.scale(total, S::from_f64(1.0 / (2.0 * n as f64)));
    let neg = tape.scale(variance_term, S::from_f64(-1.0));
    let shifted = tape.add_scalar(neg, S::from_f64(beta));
    let loss = tape.hinge(shifted);
    Ok(MuForcingNodes { variance_term, loss })
}

pub struct MuForcingValue {
    pub loss: f64,
    pub variance_term: f64,
}

pub fn mu_forcing_loss<S: Scalar>(mu: &Mat<S>, beta: f64) -> Result<MuForcingValue> {
    let mut tape = Tape::new();
    let mu = tape.constant(mu.clone())?;
    let nodes = mu_forcing_graph(&mut tape, mu, beta)?;
    tape.forward()?;
    Ok(MuForcingValue {
        loss: tape.scalar_value(nodes.loss)?.as_f64(),
        variance_term: tape.scalar_value(nodes.variance_term)?.as_f64(),
    })
}

/// Signed distance of the batch from the hinge kink (positive: hinge
/// active). Gradient checks use this to stay away from the
/// non-differentiable point.
pub fn mu_forcing_margin<S: Scalar>(mu: &Mat<S>, beta: f64) -> Result<f64> {
    let v = mu_forcing_loss(mu, beta)?;
    Ok(beta - v.variance_term)
}

/// max(reserve, x) elementwise, as reserve + hinge(x - reserve).
fn clamp_floor<S: Scalar>(tape: &mut Tape<S>, x: NodeId, reserve: f64) -> NodeId {
    let shifted = tape.add_scalar(x, S::from_f64(-reserve));
    let hinged = tape.hinge(shifted);
    tape.add_scalar(hinged, S::from_f64(reserve))
}

/// Effective KL after free-bits clamping, on batch-mean statistics.
/// Per-dimension mode: `sum_k max(reserve, mean_n kl[n, k])`. Total mode:
/// `max(reserve, mean_n sum_k kl[n, k])`. With neither enabled this is the
/// plain batch-mean KL.
pub fn free_bits_graph<S: Scalar>(
    tape: &mut Tape<S>,
    kl: &KlNodes,
    fb_per_dim: Option<f64>,
    fb_total: Option<f64>,
) -> Result<NodeId> {
    match (fb_per_dim, fb_total) {
        (Some(_), Some(_)) => Err(Error::Config(
            "free bits per-dimension and free bits total cannot both be enabled".into(),
        )),
        (Some(reserve), None) => {
            let dim_means = tape.mean_rows(kl.per_dim);
            let clamped = clamp_floor(tape, dim_means, reserve);
            Ok(tape.sum_all(clamped))
        }
        (None, Some(reserve)) => Ok(clamp_floor(tape, kl.mean, reserve)),
        (None, None) => Ok(kl.mean),
    }
}

/// Value-level free-bits clamp over a per-dimension KL matrix.
pub fn apply_free_bits<S: Scalar>(
    per_dim_kl: &Mat<S>,
    fb_per_dim: Option<f64>,
    fb_total: Option<f64>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let per_dim = tape.constant(per_dim_kl.clone())?;
    let per_example = tape.sum_cols(per_dim);
    let mean = tape.mean_all(per_example);
    let kl = KlNodes { per_dim, per_example, mean };
    let eff = free_bits_graph(&mut tape, &kl, fb_per_dim, fb_total)?;
    tape.forward()?;
    Ok(tape.scalar_value(eff)?.as_f64())
}

/// Masked reconstruction loss summed over steps. `logits[s]` predicts
/// token s+1; padded positions carry zero weight. Returns the sum node and
/// the unmasked target count.
pub fn recon_graph<S: Scalar>(
    tape: &mut Tape<S>,
    logits: &[NodeId],
    batch: &Batch,
) -> Result<(NodeId, usize)> {
    if logits.len() != batch.max_t - 1 {
        return Err(Error::Shape {
            op: "recon-loss",
            detail: format!("{} logit steps for max_t {}", logits.len(), batch.max_t),
        });
    }
    let mut total: Option<NodeId> = None;
    for (s, &step_logits) in logits.iter().enumerate() {
        let rows: Vec<Vec<(usize, S)>> = (0..batch.rows)
            .map(|r| {
                if batch.mask(r, s + 1) {
                    vec![(batch.id(r, s + 1) as usize, S::one())]
                } else {
                    Vec::new()
                }
            })
            .collect();
        let step_loss = tape.softmax_xent(step_logits, ClassWeights { rows })?;
        total = Some(match total {
            None => step_loss,
            Some(t) => tape.add(t, step_loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Shape {
        op: "recon-loss",
        detail: "batch has no prediction steps".into(),
    })?;
    Ok((total, batch.target_token_count()))
}

/// Bag-of-words loss: every content-token occurrence (positions between
/// BOS and EOS) contributes cross-entropy against the z-predicted unigram
/// logits. Returns the batch sum.
pub fn bow_graph<S: Scalar>(
    tape: &mut Tape<S>,
    bow_logits: NodeId,
    batch: &Batch,
) -> Result<NodeId> {
    let rows: Vec<Vec<(usize, S)>> = (0..batch.rows)
        .map(|r| {
            let ids = batch.row_ids(r);
            let mut counts: Vec<(usize, S)> = Vec::new();
            for &id in &ids[1..ids.len() - 1] {
                match counts.iter_mut().find(|(c, _)| *c == id as usize) {
                    Some((_, w)) => *w = *w + S::one(),
                    None => counts.push((id as usize, S::one())),
                }
            }
            counts
        })
        .collect();
    tape.softmax_xent(bow_logits, ClassWeights { rows })
}

/// Handles into a composed total-loss graph plus the fixed scalars needed
/// to report a [`LossBreakdown`].
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: NodeId,
    pub recon_sum: NodeId,
    pub kl: KlNodes,
    /// KL node actually weighted into the total (after free bits and
    /// reduction scaling).
    pub kl_effective: NodeId,
    pub mu: Option<MuForcingNodes>,
    pub bow_sum: Option<NodeId>,
    pub kl_weight: f64,
    pub token_count: usize,
    pub rows: usize,
}

/// Compose recon + weighted KL + margin cost + weighted BOW on the tape.
///
/// Reconstruction and BOW enter as batch means of per-sentence sums, KL as
/// a batch mean (or sum, per `kl_reduction`), so the composition is
/// independent of batch size under the default reduction. The KL weight is
/// `kl_lambda * anneal(step)`; an annealed weight of zero still reports the
/// raw KL in the breakdown.
#[allow(clippy::too_many_arguments)]
pub fn total_graph<S: Scalar>(
    tape: &mut Tape<S>,
    post: PosteriorNodes,
    logits: &[NodeId],
    bow_logits: Option<NodeId>,
    batch: &Batch,
    reg: &RegularizerConfig,
    step: u64,
) -> Result<LossGraph> {
    reg.validate()?;
    let n = batch.rows;
    let inv_n = S::from_f64(1.0 / n as f64);

    let (recon_sum, token_count) = recon_graph(tape, logits, batch)?;
    let recon_mean = tape.scale(recon_sum, inv_n);

    let kl = kl_graph(tape, post)?;
    let mut kl_effective = free_bits_graph(tape, &kl, reg.fb_per_dim, reg.fb_total)?;
    if reg.kl_reduction == KlReduction::Sum {
        kl_effective = tape.scale(kl_effective, S::from_f64(n as f64));
    }
    let kl_weight = reg.kl_lambda * kl_anneal_weight(step, reg.kl_anneal_steps, reg.anneal_shape);
    let kl_term = tape.scale(kl_effective, S::from_f64(kl_weight));

    let mut total = tape.add(recon_mean, kl_term)?;

    let mu = if reg.mu_beta > 0.0 {
        let nodes = mu_forcing_graph(tape, post.mu, reg.mu_beta)?;
        total = tape.add(total, nodes.loss)?;
        Some(nodes)
    } else {
        None
    };

    let bow_sum = match bow_logits {
        Some(logits) if reg.bow_weight > 0.0 => {
            let sum = bow_graph(tape, logits, batch)?;
            let mean = tape.scale(sum, inv_n);
            let weighted = tape.scale(mean, S::from_f64(reg.bow_weight));
            total = tape.add(total, weighted)?;
            Some(sum)
        }
        Some(_) | None if reg.bow_weight > 0.0 => {
            return Err(Error::Config(
                "bow_weight > 0 requires the bag-of-words head".into(),
            ));
        }
        _ => None,
    };

    Ok(LossGraph {
        total,
        recon_sum,
        kl,
        kl_effective,
        mu,
        bow_sum,
        kl_weight,
        token_count,
        rows: n,
    })
}

/// Loss components at one step, all in nats (f64 regardless of compute
/// precision).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Batch mean of per-sentence reconstruction sums.
    pub recon: f64,
    /// Batch sum over all unmasked targets.
    pub recon_sum: f64,
    pub recon_per_token: f64,
    /// Raw batch-mean KL.
    pub kl: f64,
    /// KL after free-bits clamping and reduction; this is what kl_weight
    /// multiplies.
    pub kl_effective: f64,
    pub mu_reg: f64,
    /// Batch variance term inside the margin cost.
    pub mu_var_term: f64,
    /// Batch mean of per-sentence bag-of-words sums (0 when disabled).
    pub bow: f64,
    pub kl_weight: f64,
    pub total: f64,
}

impl LossGraph {
    pub fn breakdown<S: Scalar>(&self, tape: &Tape<S>) -> Result<LossBreakdown> {
        let recon_sum = tape.scalar_value(self.recon_sum)?.as_f64();
        let bow_sum = match self.bow_sum {
            Some(id) => tape.scalar_value(id)?.as_f64(),
            None => 0.0,
        };
        Ok(LossBreakdown {
            recon: recon_sum / self.rows as f64,
            recon_sum,
            recon_per_token: recon_sum / self.token_count.max(1) as f64,
            kl: tape.scalar_value(self.kl.mean)?.as_f64(),
            kl_effective: tape.scalar_value(self.kl_effective)?.as_f64(),
            mu_reg: match self.mu {
                Some(m) => tape.scalar_value(m.loss)?.as_f64(),
                None => 0.0,
            },
            mu_var_term: match self.mu {
                Some(m) => tape.scalar_value(m.variance_term)?.as_f64(),
                None => 0.0,
            },
            bow: bow_sum / self.rows as f64,
            kl_weight: self.kl_weight,
            total: tape.scalar_value(self.total)?.as_f64(),
        })
    }
}
