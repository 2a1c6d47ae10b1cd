//! Text ingestion, vocabulary construction, and deterministic batching.

pub mod synthetic;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: usize = 4;

const RESERVED_SURFACE: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token/id bijection with reserved PAD/BOS/EOS/UNK ids 0..=3.
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let mut id_to_token: Vec<String> =
            RESERVED_SURFACE.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(RESERVED)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { token_to_id, id_to_token }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token_of(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    /// Content tokens (ids 4..), in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.id_to_token[RESERVED..]
    }

    /// SHA-256 over the content token list; checkpoints embed this to
    /// reject mismatched vocabularies.
    pub fn hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for t in self.content_tokens() {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().into()
    }

    /// One token per line, line number == id - 4; reserved ids implicit.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in self.content_tokens() {
            body.push_str(t);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        Ok(Self::from_tokens(tokens))
    }
}

/// Lowercase, split on whitespace, and detach leading/trailing ASCII
/// punctuation as separate tokens ("(good)." -> "(", "good", ")", ".").
/// Interior punctuation (don't, well-made) stays attached.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let lower = sentence.to_lowercase();
    let mut out = Vec::new();
    for chunk in lower.split_whitespace() {
        let mut rest = chunk;
        let mut head = Vec::new();
        let mut tail = Vec::new();
        loop {
            let mut chars = rest.chars();
            match chars.next() {
                Some(c) if c.is_ascii_punctuation() && rest.len() > 1 => {
                    head.push(c.to_string());
                    rest = &rest[c.len_utf8()..];
                }
                _ => break,
            }
        }
        loop {
            let mut chars = rest.chars();
            match chars.next_back() {
                Some(c) if c.is_ascii_punctuation() && rest.len() > 1 => {
                    tail.push(c.to_string());
                    rest = &rest[..rest.len() - c.len_utf8()];
                }
                _ => break,
            }
        }
        out.extend(head);
        if !rest.is_empty() {
            out.push(rest.to_string());
        }
        out.extend(tail.into_iter().rev());
    }
    out
}

/// Build a vocabulary from tokenized sentences.
///
/// Tokens are ranked by (frequency desc, token lexicographic) and cut at
/// `max_size` (which counts the 4 reserved ids); tokens below `min_freq`
/// map to UNK.
pub fn build_vocab(sentences: &[Vec<String>], min_freq: usize, max_size: usize) -> Result<Vocabulary> {
    if sentences.is_empty() {
        return Err(Error::Corpus("empty corpus".into()));
    }
    if min_freq < 1 {
        return Err(Error::Corpus("min_freq must be >= 1".into()));
    }
    if max_size < RESERVED {
        return Err(Error::Corpus(format!("max_size must be >= {RESERVED}")));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in sentences {
        for t in s {
            *freq.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> =
        freq.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED);
    Ok(Vocabulary::from_tokens(
        ranked.into_iter().map(|(t, _)| t.to_string()).collect(),
    ))
}

/// BOS + ids (content truncated to max_len - 2) + EOS; OOV becomes UNK.
pub fn encode(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Result<Vec<u32>> {
    if max_len < 3 {
        return Err(Error::Corpus("max_len must be >= 3".into()));
    }
    let keep = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(BOS);
    ids.extend(tokens[..keep].iter().map(|t| vocab.id_of(t)));
    ids.push(EOS);
    Ok(ids)
}

/// Surface form of an id row, reserved ids other than UNK skipped.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .filter(|&&id| id != PAD && id != BOS && id != EOS)
        .map(|&id| vocab.token_of(id).to_string())
        .collect()
}

/// PAD-padded id matrix with per-row lengths and a {0,1} mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Row-major `[rows * max_t]`; each row starts with BOS, ends its
    /// meaningful span with EOS, PAD after.
    ids: Vec<u32>,
    pub rows: usize,
    pub max_t: usize,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Batch> {
        if rows.is_empty() {
            return Err(Error::Corpus("batch with no rows".into()));
        }
        let max_t = rows.iter().map(|r| r.len()).max().unwrap();
        let mut ids = vec![PAD; rows.len() * max_t];
        let mut lengths = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() < 2 || row[0] != BOS || row[row.len() - 1] != EOS {
                return Err(Error::Corpus(format!("row {i} is not BOS .. EOS framed")));
            }
            ids[i * max_t..i * max_t + row.len()].copy_from_slice(row);
            lengths.push(row.len());
        }
        Ok(Batch { ids, rows: rows.len(), max_t, lengths })
    }

    pub fn id(&self, row: usize, t: usize) -> u32 {
        self.ids[row * self.max_t + t]
    }

    pub fn mask(&self, row: usize, t: usize) -> bool {
        t < self.lengths[row]
    }

    /// Token ids at time step `t` for every row (PAD where exhausted).
    pub fn column(&self, t: usize) -> Vec<u32> {
        (0..self.rows).map(|r| self.id(r, t)).collect()
    }

    pub fn row_ids(&self, row: usize) -> &[u32] {
        &self.ids[row * self.max_t..row * self.max_t + self.lengths[row]]
    }

    /// Count of prediction targets (positions 1..len per row).
    pub fn target_token_count(&self) -> usize {
        self.lengths.iter().map(|l| l - 1).sum()
    }

    /// A copy with `extra` PAD columns appended (mask-invariance probes).
    pub fn with_extra_padding(&self, extra: usize) -> Batch {
        let max_t = self.max_t + extra;
        let mut ids = vec![PAD; self.rows * max_t];
        for r in 0..self.rows {
            ids[r * max_t..r * max_t + self.lengths[r]].copy_from_slice(self.row_ids(r));
        }
        Batch { ids, rows: self.rows, max_t, lengths: self.lengths.clone() }
    }

    /// A copy with rows reordered by `perm` (equivariance probes).
    pub fn permuted(&self, perm: &[usize]) -> Batch {
        let rows: Vec<Vec<u32>> = perm.iter().map(|&r| self.row_ids(r).to_vec()).collect();
        Batch::from_rows(&rows).expect("permuted batch")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Drop the final partial batch.
    Train,
    /// Keep the final partial batch.
    Eval,
}

/// Deterministically shuffle sentences by `seed`, encode, and group into
/// batches. The batch-variance regularizer needs at least two examples per
/// batch, so `batch_size >= 2` is a hard precondition.
pub fn make_batches(
    sentences: &[Vec<String>],
    vocab: &Vocabulary,
    batch_size: usize,
    max_len: usize,
    seed: u64,
    mode: BatchMode,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Corpus("batch_size must be >= 2".into()));
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut order);

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < batch_size && mode == BatchMode::Train {
            continue;
        }
        let rows: Vec<Vec<u32>> = chunk
            .iter()
            .map(|&i| encode(&sentences[i], vocab, max_len))
            .collect::<Result<_>>()?;
        batches.push(Batch::from_rows(&rows)?);
    }
    Ok(batches)
}

/// Load a one-sentence-per-line UTF-8 file and tokenize. Blank lines are
/// skipped; `filter_max_tokens`, when set, drops sentences with more
/// content tokens than the bound (BOS/EOS not counted).
pub fn load_corpus(path: &Path, filter_max_tokens: Option<usize>) -> Result<Vec<Vec<String>>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(tokenize_lines(&body, filter_max_tokens))
}

pub fn tokenize_lines(body: &str, filter_max_tokens: Option<usize>) -> Vec<Vec<String>> {
    body.lines()
        .map(tokenize)
        .filter(|toks| !toks.is_empty())
        .filter(|toks| filter_max_tokens.is_none_or(|cap| toks.len() <= cap))
        .collect()
}

pub fn save_corpus(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    let mut body = String::new();
    for s in sentences {
        body.push_str(&s.join(" "));
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| tokenize(l)).collect()
    }

    #[test]
    fn vocab_keeps_all_above_threshold() {
        let v = build_vocab(&toks(&["a a b"]), 1, 100).unwrap();
        assert_eq!(v.size(), RESERVED + 2);
        assert!(v.contains("a"));
        assert!(v.contains("b"));
    }

    #[test]
    fn vocab_min_freq_drops_rare_tokens() {
        let v = build_vocab(&toks(&["a a b"]), 2, 100).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id_of("b"), UNK);
    }

    #[test]
    fn vocab_tie_break_is_lexicographic() {
        let v = build_vocab(&toks(&["y x y x y x"]), 1, 5).unwrap();
        assert_eq!(v.size(), 5);
        assert!(v.contains("x"));
        assert!(!v.contains("y"));
    }

    #[test]
    fn vocab_orders_by_frequency_then_token() {
        let v = build_vocab(&toks(&["b b b a a c"]), 1, 100).unwrap();
        assert_eq!(v.id_of("b"), 4);
        assert_eq!(v.id_of("a"), 5);
        assert_eq!(v.id_of("c"), 6);
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        assert!(build_vocab(&[], 1, 100).is_err());
    }

    #[test]
    fn encode_empty_sentence() {
        let v = build_vocab(&toks(&["a"]), 1, 100).unwrap();
        assert_eq!(encode(&[], &v, 10).unwrap(), vec![BOS, EOS]);
    }

    #[test]
    fn encode_known_tokens() {
        let v = build_vocab(&toks(&["a b"]), 1, 100).unwrap();
        let ids = encode(&tokenize("a b"), &v, 10).unwrap();
        assert_eq!(ids, vec![BOS, v.id_of("a"), v.id_of("b"), EOS]);
    }

    #[test]
    fn encode_oov_becomes_unk() {
        let v = build_vocab(&toks(&["a b"]), 1, 100).unwrap();
        let ids = encode(&tokenize("a z"), &v, 10).unwrap();
        assert_eq!(ids, vec![BOS, v.id_of("a"), UNK, EOS]);
    }

    #[test]
    fn encode_truncates_to_max_len() {
        let v = build_vocab(&toks(&["a b c d"]), 1, 100).unwrap();
        let ids = encode(&tokenize("a b c d"), &v, 4).unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], BOS);
        assert_eq!(ids[3], EOS);
    }

    #[test]
    fn round_trip_with_unk_surface() {
        let v = build_vocab(&toks(&["the cat sat"]), 1, 100).unwrap();
        let sent = tokenize("the dog sat");
        let ids = encode(&sent, &v, 16).unwrap();
        let back = decode(&ids, &v);
        assert_eq!(back, vec!["the", "<unk>", "sat"]);
    }

    #[test]
    fn batches_train_mode_drops_partial() {
        let sents = toks(&["a"; 10]);
        let v = build_vocab(&sents, 1, 100).unwrap();
        let b = make_batches(&sents, &v, 4, 8, 1, BatchMode::Train).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.rows == 4));
    }

    #[test]
    fn batches_eval_mode_keeps_partial() {
        let sents = toks(&["a"; 10]);
        let v = build_vocab(&sents, 1, 100).unwrap();
        let b = make_batches(&sents, &v, 4, 8, 1, BatchMode::Eval).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.last().unwrap().rows, 2);
    }

    #[test]
    fn batches_same_seed_identical() {
        let sents: Vec<Vec<String>> = (0..23).map(|i| tokenize(&format!("tok{i} x"))).collect();
        let v = build_vocab(&sents, 1, 100).unwrap();
        let a = make_batches(&sents, &v, 4, 8, 9, BatchMode::Train).unwrap();
        let b = make_batches(&sents, &v, 4, 8, 9, BatchMode::Train).unwrap();
        assert_eq!(a, b);
        let c = make_batches(&sents, &v, 4, 8, 10, BatchMode::Train).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn batches_reject_batch_size_below_two() {
        let sents = toks(&["a"]);
        let v = build_vocab(&sents, 1, 100).unwrap();
        assert!(make_batches(&sents, &v, 1, 8, 0, BatchMode::Train).is_err());
    }

    #[test]
    fn batching_partitions_the_corpus() {
        let sents: Vec<Vec<String>> = (0..17).map(|i| vec![format!("w{i}")]).collect();
        let v = build_vocab(&sents, 1, 100).unwrap();
        for (mode, expect_total) in [(BatchMode::Train, 16), (BatchMode::Eval, 17)] {
            let batches = make_batches(&sents, &v, 4, 8, 3, mode).unwrap();
            let mut seen: Vec<u32> = batches
                .iter()
                .flat_map(|b| (0..b.rows).map(|r| b.id(r, 1)))
                .collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), expect_total);
        }
    }

    #[test]
    fn tokenizer_detaches_punctuation() {
        assert_eq!(tokenize("Great phone!"), vec!["great", "phone", "!"]);
        assert_eq!(tokenize("(good)."), vec!["(", "good", ")", "."]);
        assert_eq!(tokenize("don't stop"), vec!["don't", "stop"]);
    }

    #[test]
    fn batch_mask_matches_lengths() {
        let rows = vec![vec![BOS, 5, EOS], vec![BOS, EOS]];
        let b = Batch::from_rows(&rows).unwrap();
        assert_eq!(b.max_t, 3);
        assert!(b.mask(0, 2));
        assert!(b.mask(1, 1));
        assert!(!b.mask(1, 2));
        assert_eq!(b.id(1, 2), PAD);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = build_vocab(&toks(&["c a b a b b"]), 1, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(v.hash(), loaded.hash());
    }
}
