//! Corpus-level BLEU and Self-BLEU on the 0-100 scale.
//!
//! Modified n-gram precision with clipping against the shared reference
//! set, uniform weights over 1..=max_n, and a brevity penalty from
//! closest-reference lengths (ties broken toward the shorter reference).
//! Smoothing: when any order's precision is zero, orders n >= 2 add one to
//! numerator and denominator; a zero unigram precision pins the score to 0.

use crate::error::{Error, Result};
use rayon::prelude::*;
use std::collections::HashMap;

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut counts = Counts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn max_reference_counts<'a>(references: &'a [Vec<String>], n: usize) -> Counts<'a> {
    let mut max: Counts<'a> = Counts::new();
    for r in references {
        for (gram, count) in ngram_counts(r, n) {
            let slot = max.entry(gram).or_insert(0);
            if count > *slot {
                *slot = count;
            }
        }
    }
    max
}

fn closest_reference_length(candidate_len: usize, references: &[Vec<String>]) -> usize {
    let mut best = references[0].len();
    for r in references {
        let len = r.len();
        let d = len.abs_diff(candidate_len);
        let best_d = best.abs_diff(candidate_len);
        if d < best_d || (d == best_d && len < best) {
            best = len;
        }
    }
    best
}

/// Clipped match and total n-gram counts per order, plus candidate and
/// effective reference lengths. Exposed so oracles can compare raw
/// numerators, not just final scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

pub fn bleu_stats(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    max_n: usize,
) -> Result<BleuStats> {
    if candidates.is_empty() {
        return Err(Error::Eval("bleu: empty candidate set".into()));
    }
    if references.is_empty() {
        return Err(Error::Eval("bleu: empty reference set".into()));
    }
    if max_n == 0 {
        return Err(Error::Eval("bleu: max_n must be >= 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    for (n_idx, slot) in matches.iter_mut().enumerate() {
        let n = n_idx + 1;
        let ref_max = max_reference_counts(references, n);
        for c in candidates {
            for (gram, count) in ngram_counts(c, n) {
                let clip = ref_max.get(gram).copied().unwrap_or(0);
                *slot += count.min(clip);
            }
            totals[n_idx] += c.len().saturating_sub(n - 1);
        }
    }
    let candidate_len = candidates.iter().map(|c| c.len()).sum();
    let reference_len = candidates
        .iter()
        .map(|c| closest_reference_length(c.len(), references))
        .sum();
    Ok(BleuStats { matches, totals, candidate_len, reference_len })
}

pub fn score_from_stats(stats: &BleuStats) -> f64 {
    let max_n = stats.matches.len();
    let raw = |i: usize| -> f64 {
        if stats.totals[i] == 0 {
            0.0
        } else {
            stats.matches[i] as f64 / stats.totals[i] as f64
        }
    };
    let needs_smoothing = (0..max_n).any(|i| raw(i) == 0.0);
    let precision = |i: usize| -> f64 {
        if i == 0 || !needs_smoothing {
            raw(i)
        } else {
            (stats.matches[i] + 1) as f64 / (stats.totals[i] + 1) as f64
        }
    };
    if precision(0) == 0.0 {
        return 0.0;
    }
    let mean_log = (0..max_n).map(|i| precision(i).ln()).sum::<f64>() / max_n as f64;
    let bp = if stats.candidate_len < stats.reference_len {
        (1.0 - stats.reference_len as f64 / stats.candidate_len.max(1) as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * mean_log.exp()
}

/// Corpus BLEU of `candidates` against a shared reference set.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    Ok(score_from_stats(&bleu_stats(candidates, references, max_n)?))
}

/// Mean over candidates of BLEU(candidate, all other candidates).
/// High values mean low diversity. Aggregation order is fixed, so the
/// result is independent of worker count.
pub fn self_bleu(candidates: &[Vec<String>], max_n: usize) -> Result<f64> {
    if candidates.len() < 2 {
        return Err(Error::Eval("self-bleu needs at least 2 candidates".into()));
    }
    let scores: Vec<f64> = (0..candidates.len())
        .into_par_iter()
        .map(|i| {
            let cand = std::slice::from_ref(&candidates[i]);
            let others: Vec<Vec<String>> = candidates
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, c)| c.clone())
                .collect();
            bleu(cand, &others, max_n)
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
