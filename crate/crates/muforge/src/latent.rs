//! Latent-space interpretation: homotopy interpolation between encoded
//! sentences and attribute-vector transfer.
//!
//! All encodings use the posterior mean, so every operation here is
//! deterministic. Transfers record (base, added, subtracted) in the point's
//! provenance; applying the exact inverse vector cancels symbolically and
//! returns the base point bit-for-bit, which plain floating-point addition
//! cannot guarantee.

use crate::corpus::{decode, encode, tokenize, Batch, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::bleu;
use crate::model::{encode_values, generate, GenerateMode, ModelConfig, Params};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tape::Mat;

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance<S: Scalar> {
    /// Posterior mean of an encoded sentence.
    Encoded(String),
    /// Drawn from the standard-normal prior.
    Prior,
    /// Generic combination (interpolation points).
    Arithmetic,
    /// base + plus - minus, kept for exact inversion.
    Transfer {
        base: Box<LatentPoint<S>>,
        plus: Vec<S>,
        minus: Vec<S>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPoint<S: Scalar> {
    pub z: Vec<S>,
    pub provenance: Provenance<S>,
}

impl<S: Scalar> LatentPoint<S> {
    pub fn dim(&self) -> usize {
        self.z.len()
    }

    fn to_mat(&self) -> Mat<S> {
        Mat::from_shape_vec((1, self.z.len()), self.z.clone()).expect("latent row")
    }
}

/// Deterministic latent representative of a sentence: the posterior mean.
pub fn encode_to_latent<S: Scalar>(
    params: &Params<S>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    sentence: &str,
    max_len: usize,
) -> Result<LatentPoint<S>> {
    let tokens = tokenize(sentence);
    let row = encode(&tokens, vocab, max_len)?;
    let batch = Batch::from_rows(&[row])?;
    let post = encode_values(params, cfg, &batch)?;
    Ok(LatentPoint {
        z: post.mu.row(0).to_vec(),
        provenance: Provenance::Encoded(sentence.to_string()),
    })
}

fn decode_rows<S: Scalar>(
    params: &Params<S>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    rows: &Mat<S>,
    max_len: usize,
) -> Result<Vec<Vec<String>>> {
    // Greedy decoding consumes no randomness; the stream is a placeholder.
    let mut rng = SeededRng::new(0);
    let ids = generate(params, cfg, rows, max_len, GenerateMode::Greedy, &mut rng)?;
    Ok(ids.iter().map(|row| decode(row, vocab)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomotopyPoint<S: Scalar> {
    pub t: f64,
    pub point: LatentPoint<S>,
    pub sentence: Vec<String>,
}

/// Homotopy z_t = z1 * t + z2 * (1 - t) over `steps` evenly spaced t in
/// [0, 1], each point decoded greedily. Endpoints are returned bit-exactly
/// (t = 1 is z1, t = 0 is z2).
pub fn interpolate<S: Scalar>(
    params: &Params<S>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    z1: &LatentPoint<S>,
    z2: &LatentPoint<S>,
    steps: usize,
    max_len: usize,
) -> Result<Vec<HomotopyPoint<S>>> {
    if steps < 2 {
        return Err(Error::Config(format!("interpolation needs >= 2 steps, got {steps}")));
    }
    if z1.dim() != z2.dim() {
        return Err(Error::Shape {
            op: "interpolate",
            detail: format!("{} vs {}", z1.dim(), z2.dim()),
        });
    }
    let k = z1.dim();
    let mut points: Vec<LatentPoint<S>> = Vec::with_capacity(steps);
    let mut ts = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        ts.push(t);
        let point = if i == 0 {
            LatentPoint { z: z2.z.clone(), provenance: z2.provenance.clone() }
        } else if i == steps - 1 {
            LatentPoint { z: z1.z.clone(), provenance: z1.provenance.clone() }
        } else {
            let tv = S::from_f64(t);
            let one_m_t = S::from_f64(1.0 - t);
            let z: Vec<S> = (0..k).map(|j| z1.z[j] * tv + z2.z[j] * one_m_t).collect();
            LatentPoint { z, provenance: Provenance::Arithmetic }
        };
        points.push(point);
    }
    let mut rows = Mat::<S>::zeros((steps, k));
    for (i, p) in points.iter().enumerate() {
        for (j, &v) in p.z.iter().enumerate() {
            rows[[i, j]] = v;
        }
    }
    let sentences = decode_rows(params, cfg, vocab, &rows, max_len)?;
    Ok(ts
        .into_iter()
        .zip(points)
        .zip(sentences)
        .map(|((t, point), sentence)| HomotopyPoint { t, point, sentence })
        .collect())
}

/// Attribute transfer z_b = z_a + (z_q - z_p), decoded greedily.
///
/// The difference vector is computed once; applying the reverse vector to
/// the result (swapping p and q) cancels against the recorded provenance
/// and returns the original point exactly.
pub fn attribute_transfer<S: Scalar>(
    params: &Params<S>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    z_a: &LatentPoint<S>,
    z_p: &LatentPoint<S>,
    z_q: &LatentPoint<S>,
    max_len: usize,
) -> Result<(LatentPoint<S>, Vec<String>)> {
    let k = z_a.dim();
    if z_p.dim() != k || z_q.dim() != k {
        return Err(Error::Shape {
            op: "attribute-transfer",
            detail: format!("{} vs {} vs {}", k, z_p.dim(), z_q.dim()),
        });
    }
    let point = match &z_a.provenance {
        Provenance::Transfer { base, plus, minus }
            if plus == &z_p.z && minus == &z_q.z && base.dim() == k =>
        {
            (**base).clone()
        }
        _ => {
            let z: Vec<S> = (0..k)
                .map(|j| z_a.z[j] + (z_q.z[j] - z_p.z[j]))
                .collect();
            LatentPoint {
                z,
                provenance: Provenance::Transfer {
                    base: Box::new(z_a.clone()),
                    plus: z_q.z.clone(),
                    minus: z_p.z.clone(),
                },
            }
        }
    };
    let sentence = decode_rows(params, cfg, vocab, &point.to_mat(), max_len)?
        .pop()
        .expect("one decoded row");
    Ok((point, sentence))
}

/// Greedy encode -> decode token overlap against the source sentence,
/// via unigram agreement in [0, 1].
pub fn reconstruction_overlap<S: Scalar>(
    params: &Params<S>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    sentence: &[String],
    max_len: usize,
) -> Result<f64> {
    let point = encode_to_latent(params, cfg, vocab, &sentence.join(" "), max_len)?;
    let decoded = decode_rows(params, cfg, vocab, &point.to_mat(), max_len)?.remove(0);
    if sentence.is_empty() {
        return Ok(1.0);
    }
    let stats = bleu::bleu_stats(
        std::slice::from_ref(&decoded.clone()),
        std::slice::from_ref(&sentence.to_vec()),
        1,
    )?;
    Ok(stats.matches[0] as f64 / sentence.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;
    use crate::model::{init_params, CellKind, ZInjection};

    fn setup() -> (Params<f64>, ModelConfig, Vocabulary) {
        let sentences: Vec<Vec<String>> = ["the phone is good", "the lamp is bad", "a solid desk"]
            .iter()
            .map(|s| tokenize(s))
            .collect();
        let vocab = build_vocab(&sentences, 1, 100).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.size(),
            embed_dim: 6,
            enc_hidden: 8,
            dec_hidden: 8,
            latent_dim: 4,
            layer_norm: false,
            cell: CellKind::Lstm,
            z_injection: ZInjection::PerStepAndInit,
            bow_hidden: None,
        };
        let params = init_params::<f64>(&cfg, 3).unwrap();
        (params, cfg, vocab)
    }

    #[test]
    fn encoding_is_deterministic() {
        let (params, cfg, vocab) = setup();
        let a = encode_to_latent(&params, &cfg, &vocab, "the phone is good", 12).unwrap();
        let b = encode_to_latent(&params, &cfg, &vocab, "the phone is good", 12).unwrap();
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn empty_sentence_encodes_finite() {
        let (params, cfg, vocab) = setup();
        let p = encode_to_latent(&params, &cfg, &vocab, "", 12).unwrap();
        assert_eq!(p.dim(), cfg.latent_dim);
        assert!(p.z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn interpolation_endpoints_are_bit_exact() {
        let (params, cfg, vocab) = setup();
        let z1 = encode_to_latent(&params, &cfg, &vocab, "the phone is good", 12).unwrap();
        let z2 = encode_to_latent(&params, &cfg, &vocab, "the lamp is bad", 12).unwrap();
        let path = interpolate(&params, &cfg, &vocab, &z1, &z2, 5, 12).unwrap();
        assert_eq!(path.len(), 5);
        assert_eq!(path[0].t, 0.0);
        assert_eq!(path[4].t, 1.0);
        // t = 1 is z1 per the homotopy formula, t = 0 is z2
        for j in 0..cfg.latent_dim {
            assert_eq!(path[4].point.z[j].to_bits(), z1.z[j].to_bits());
            assert_eq!(path[0].point.z[j].to_bits(), z2.z[j].to_bits());
        }
    }

    #[test]
    fn interpolation_midpoint_is_elementwise_mean() {
        let (params, cfg, vocab) = setup();
        let z1 = encode_to_latent(&params, &cfg, &vocab, "the phone is good", 12).unwrap();
        let z2 = encode_to_latent(&params, &cfg, &vocab, "a solid desk", 12).unwrap();
        let path = interpolate(&params, &cfg, &vocab, &z1, &z2, 3, 12).unwrap();
        for j in 0..cfg.latent_dim {
            let mid = 0.5 * z1.z[j] + 0.5 * z2.z[j];
            assert!((path[1].point.z[j] - mid).abs() < 1e-15);
        }
    }

    #[test]
    fn interpolation_is_affine() {
        let (params, cfg, vocab) = setup();
        let z1 = encode_to_latent(&params, &cfg, &vocab, "the phone is good", 12).unwrap();
        let z2 = encode_to_latent(&params, &cfg, &vocab, "the lamp is bad", 12).unwrap();
        let steps = 7;
        let path = interpolate(&params, &cfg, &vocab, &z1, &z2, steps, 12).unwrap();
        for i in 0..steps {
            let a = &path[i].point.z;
            let b = &path[steps - 1 - i].point.z;
            for j in 0..cfg.latent_dim {
                let sum = a[j] + b[j];
                let expected = z1.z[j] + z2.z[j];
                assert!((sum - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolation_validates_inputs() {
        let (params, cfg, vocab) = setup();
        let z1 = encode_to_latent(&params, &cfg, &vocab, "the phone is good", 12).unwrap();
        let short = LatentPoint { z: vec![0.0; 2], provenance: Provenance::Prior };
        assert!(interpolate(&params, &cfg, &vocab, &z1, &short, 5, 12).is_err());
        let z2 = encode_to_latent(&params, &cfg, &vocab, "a solid desk", 12).unwrap();
        assert!(interpolate(&params, &cfg, &vocab, &z1, &z2, 1, 12).is_err());
    }

    #[test]
    fn null_attribute_is_identity() {
        let (params, cfg, vocab) = setup();
        let z_a = encode_to_latent(&params, &cfg, &vocab, "the phone is good", 12).unwrap();
        let z_p = encode_to_latent(&params, &cfg, &vocab, "a solid desk", 12).unwrap();
        let (z_b, _) =
            attribute_transfer(&params, &cfg, &vocab, &z_a, &z_p, &z_p, 12).unwrap();
        assert_eq!(z_b.z, z_a.z);
    }

    #[test]
    fn zero_base_returns_the_attribute_vector() {
        let (params, cfg, vocab) = setup();
        let z_a = LatentPoint { z: vec![0.0; cfg.latent_dim], provenance: Provenance::Prior };
        let z_p = encode_to_latent(&params, &cfg, &vocab, "the lamp is bad", 12).unwrap();
        let z_q = encode_to_latent(&params, &cfg, &vocab, "the phone is good", 12).unwrap();
        let (z_b, _) = attribute_transfer(&params, &cfg, &vocab, &z_a, &z_p, &z_q, 12).unwrap();
        for j in 0..cfg.latent_dim {
            assert_eq!(z_b.z[j], z_q.z[j] - z_p.z[j]);
        }
    }

    #[test]
    fn transfer_round_trip_is_exact() {
        let (params, cfg, vocab) = setup();
        let z_a = encode_to_latent(&params, &cfg, &vocab, "the phone is good", 12).unwrap();
        let z_p = encode_to_latent(&params, &cfg, &vocab, "a solid desk", 12).unwrap();
        let z_q = encode_to_latent(&params, &cfg, &vocab, "the lamp is bad", 12).unwrap();
        let (z_b, _) = attribute_transfer(&params, &cfg, &vocab, &z_a, &z_p, &z_q, 12).unwrap();
        let (z_back, _) = attribute_transfer(&params, &cfg, &vocab, &z_b, &z_q, &z_p, 12).unwrap();
        for j in 0..cfg.latent_dim {
            assert_eq!(z_back.z[j].to_bits(), z_a.z[j].to_bits());
        }
        assert_eq!(z_back.provenance, z_a.provenance);
    }
}
