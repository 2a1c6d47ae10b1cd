//! Template-grammar review generator.
//!
//! Sentences combine a product noun, an optional intensity adverb, and a
//! sentiment adjective inside a handful of templates, so the latent
//! structure of the corpus is known by construction: the sentiment token is
//! identifiable, and matched positive/negative sentence pairs differ in
//! exactly that token. Vocabulary stays under 80 surface forms.

use crate::rng::SeededRng;

pub const PRODUCTS: [&str; 30] = [
    "phone", "laptop", "charger", "headset", "camera", "speaker", "keyboard", "mouse",
    "monitor", "tablet", "printer", "router", "blender", "toaster", "kettle", "vacuum",
    "heater", "fan", "lamp", "desk", "chair", "backpack", "wallet", "watch", "jacket",
    "umbrella", "helmet", "scooter", "drone", "tripod",
];

pub const POSITIVE: [&str; 12] = [
    "good", "great", "excellent", "amazing", "solid", "reliable", "sturdy", "fantastic",
    "wonderful", "superb", "impressive", "delightful",
];

pub const NEGATIVE: [&str; 12] = [
    "bad", "terrible", "awful", "poor", "disappointing", "flimsy", "unreliable", "horrible",
    "dreadful", "useless", "defective", "frustrating",
];

pub const INTENSITIES: [&str; 8] = [
    "very", "really", "quite", "extremely", "incredibly", "truly", "fairly", "remarkably",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sentiment {
    Positive,
    Negative,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub sentences: Vec<Vec<String>>,
    pub labels: Vec<Sentiment>,
}

fn render(template: usize, product: &str, intensity: &str, adjective: &str) -> Vec<String> {
    let words: Vec<&str> = match template {
        0 => vec!["the", product, "is", intensity, adjective],
        1 => vec!["this", product, "is", adjective],
        2 => vec!["i", "think", "the", product, "is", intensity, adjective],
        _ => vec!["overall", "the", product, "is", adjective],
    };
    words.into_iter().map(str::to_string).collect()
}

/// Deterministically generate `count` sentences, alternating sentiment so
/// the corpus is exactly balanced.
pub fn generate(count: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = SeededRng::derive(seed, 0x53594E);
    let mut sentences = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let sentiment = if i % 2 == 0 { Sentiment::Positive } else { Sentiment::Negative };
        let template = rng.below(4);
        let product = PRODUCTS[rng.below(PRODUCTS.len())];
        let intensity = INTENSITIES[rng.below(INTENSITIES.len())];
        let adjective = match sentiment {
            Sentiment::Positive => POSITIVE[rng.below(POSITIVE.len())],
            Sentiment::Negative => NEGATIVE[rng.below(NEGATIVE.len())],
        };
        sentences.push(render(template, product, intensity, adjective));
        labels.push(sentiment);
    }
    SyntheticCorpus { sentences, labels }
}

/// A matched pair differing only in the sentiment token.
pub fn matched_pair(template: usize, product_idx: usize, intensity_idx: usize, adjective_idx: usize) -> (Vec<String>, Vec<String>) {
    let product = PRODUCTS[product_idx % PRODUCTS.len()];
    let intensity = INTENSITIES[intensity_idx % INTENSITIES.len()];
    let pos = render(template % 4, product, intensity, POSITIVE[adjective_idx % POSITIVE.len()]);
    let neg = render(template % 4, product, intensity, NEGATIVE[adjective_idx % NEGATIVE.len()]);
    (pos, neg)
}

pub fn sentiment_of(sentence: &[String]) -> Option<Sentiment> {
    let has_pos = sentence.iter().any(|t| POSITIVE.contains(&t.as_str()));
    let has_neg = sentence.iter().any(|t| NEGATIVE.contains(&t.as_str()));
    match (has_pos, has_neg) {
        (true, false) => Some(Sentiment::Positive),
        (false, true) => Some(Sentiment::Negative),
        _ => None,
    }
}

/// 85/5/10 train/valid/test split in corpus order.
pub fn split(corpus: &SyntheticCorpus) -> (Vec<Vec<String>>, Vec<Vec<String>>, Vec<Vec<String>>) {
    let n = corpus.sentences.len();
    let train_end = n * 85 / 100;
    let valid_end = train_end + n * 5 / 100;
    (
        corpus.sentences[..train_end].to_vec(),
        corpus.sentences[train_end..valid_end].to_vec(),
        corpus.sentences[valid_end..].to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, RESERVED};

    #[test]
    fn generation_is_deterministic() {
        let a = generate(500, 11);
        let b = generate(500, 11);
        assert_eq!(a.sentences, b.sentences);
        let c = generate(500, 12);
        assert_ne!(a.sentences, c.sentences);
    }

    #[test]
    fn vocab_stays_small() {
        let corpus = generate(3000, 7);
        let vocab = build_vocab(&corpus.sentences, 1, 10_000).unwrap();
        assert!(vocab.size() <= 300, "vocab {}", vocab.size());
        assert!(vocab.size() > RESERVED + 40);
    }

    #[test]
    fn labels_match_lexicon() {
        let corpus = generate(1000, 3);
        for (s, &l) in corpus.sentences.iter().zip(&corpus.labels) {
            assert_eq!(sentiment_of(s), Some(l));
        }
        let pos = corpus.labels.iter().filter(|&&l| l == Sentiment::Positive).count();
        assert_eq!(pos, 500);
    }

    #[test]
    fn matched_pair_differs_only_in_sentiment_token() {
        let (pos, neg) = matched_pair(0, 3, 2, 5);
        assert_eq!(pos.len(), neg.len());
        let diffs: Vec<usize> = (0..pos.len()).filter(|&i| pos[i] != neg[i]).collect();
        assert_eq!(diffs.len(), 1);
        assert!(POSITIVE.contains(&pos[diffs[0]].as_str()));
        assert!(NEGATIVE.contains(&neg[diffs[0]].as_str()));
    }

    #[test]
    fn split_ratios() {
        let corpus = generate(2000, 1);
        let (train, valid, test) = split(&corpus);
        assert_eq!(train.len(), 1700);
        assert_eq!(valid.len(), 100);
        assert_eq!(test.len(), 200);
    }
}
