//! Synthetic corpora with known structure for smoke runs and tests.

use std::collections::BTreeSet;

use crate::corpus::{build_vocab, tokenize_corpus, Document, RawText, StopwordList, Vocabulary};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::eval::Qrels;
use crate::retrieval::{lexical_negatives, triples_from_qrels, TextTable, TrainingTriple};
use crate::rng::Rng;

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const FILLER: [&str; 16] = [
    "the", "of", "and", "a", "to", "in", "is", "was", "it", "for", "on", "with", "as", "by", "at", "from",
];

/// Draws `count` distinct pseudo-words of three syllables, never clashing
/// with `taken`.
pub fn pseudo_words(rng: &mut Rng, count: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w: String = (0..3)
            .map(|_| format!("{}{}", ONSETS[rng.below_usize(ONSETS.len())], VOWELS[rng.below_usize(VOWELS.len())]))
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn text(rng: &mut Rng, len: usize, topic: &[String], shared: &[String], topic_share: f64) -> String {
    let mut words = Vec::with_capacity(len);
    for _ in 0..len {
        let w: &str = if rng.uniform_f64() < topic_share {
            &topic[rng.below_usize(topic.len())]
        } else if rng.below(2) == 0 {
            &shared[rng.below_usize(shared.len())]
        } else {
            FILLER[rng.below_usize(FILLER.len())]
        };
        words.push(w);
    }
    words.join(" ")
}

fn shared_words(rng: &mut Rng, taken: &mut BTreeSet<String>) -> Vec<String> {
    pseudo_words(rng, 24, taken)
}

/// Documents that each own a private vocabulary of 12 words (60% of
/// tokens), mixed with shared words and stopwords; 40 to 90 tokens.
pub fn pretrain_corpus(seed: u64, docs: usize) -> Vec<RawText> {
    let mut rng = Rng::for_purpose(seed, "synth/pretrain");
    let mut taken = BTreeSet::new();
    let shared = shared_words(&mut rng, &mut taken);
    (0..docs)
        .map(|d| {
            let topic = pseudo_words(&mut rng, 12, &mut taken);
            let len = 40 + rng.below_usize(51);
            RawText { id: format!("doc{d:03}"), text: text(&mut rng, len, &topic, &shared, 0.6) }
        })
        .collect()
}

/// Topic-clustered documents with train and held-out queries.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalToy {
    pub docs: Vec<RawText>,
    pub train_queries: Vec<RawText>,
    pub test_queries: Vec<RawText>,
    /// Every document of a topic is relevant to every query of that topic.
    pub qrels: Qrels,
}

/// `topics * docs_per_topic` documents of 30 to 60 tokens (half of them
/// from a 10-word topic vocabulary), and one train plus one held-out
/// query of 3 to 5 topic words per topic.
pub fn retrieval_corpus(seed: u64, topics: usize, docs_per_topic: usize) -> RetrievalToy {
    let mut rng = Rng::for_purpose(seed, "synth/retrieval");
    let mut taken = BTreeSet::new();
    let shared = shared_words(&mut rng, &mut taken);
    let mut docs = Vec::new();
    let mut train_queries = Vec::new();
    let mut test_queries = Vec::new();
    let mut qrels = Qrels::default();
    for t in 0..topics {
        let vocab = pseudo_words(&mut rng, 10, &mut taken);
        let ids: Vec<String> = (0..docs_per_topic).map(|k| format!("t{t:02}d{k}")).collect();
        for id in &ids {
            let len = 30 + rng.below_usize(31);
            docs.push(RawText { id: id.clone(), text: text(&mut rng, len, &vocab, &shared, 0.5) });
        }
        for (split, out) in [("train", &mut train_queries), ("test", &mut test_queries)] {
            let qid = format!("{split}{t:02}");
            let len = 3 + rng.below_usize(3);
            let words: Vec<&str> = (0..len).map(|_| vocab[rng.below_usize(vocab.len())].as_str()).collect();
            out.push(RawText { id: qid.clone(), text: words.join(" ") });
            for id in &ids {
                qrels.insert(&qid, id, 1).expect("fresh pair");
            }
        }
    }
    RetrievalToy { docs, train_queries, test_queries, qrels }
}

/// Encoder used for toy runs.
pub fn toy_encoder(vocab_size: usize) -> EncoderConfig {
    EncoderConfig { layers: 2, heads: 2, hidden: 32, ffn: 64, vocab_size, max_len: 128, ..Default::default() }
}

/// The retrieval toy, tokenized with a vocabulary built from its documents.
#[derive(Debug, Clone)]
pub struct ToyData {
    pub vocab: Vocabulary,
    pub docs: Vec<Document>,
    pub train_queries: Vec<Document>,
    pub test_queries: Vec<Document>,
    pub qrels: Qrels,
    pub stopwords: Vec<bool>,
}

impl ToyData {
    pub fn new(toy: &RetrievalToy, max_len: usize) -> Result<Self> {
        let vocab = build_vocab(toy.docs.iter().map(|r| r.text.as_str()), 1)?;
        let docs = tokenize_corpus(&toy.docs, &vocab, max_len);
        let train_queries = tokenize_corpus(&toy.train_queries, &vocab, max_len);
        let test_queries = tokenize_corpus(&toy.test_queries, &vocab, max_len);
        let stopwords = StopwordList::default().mask_for(&vocab);
        Ok(Self { vocab, docs, train_queries, test_queries, qrels: toy.qrels.clone(), stopwords })
    }

    pub fn table(&self) -> TextTable {
        let queries: Vec<Document> = self.train_queries.iter().chain(&self.test_queries).cloned().collect();
        TextTable::new(&queries, &self.docs)
    }

    /// Training triples for the train queries with lexical negatives.
    pub fn triples(&self, negatives: usize, k: usize, seed: u64) -> Result<Vec<TrainingTriple>> {
        let ids: Vec<String> = self.train_queries.iter().map(|d| d.id.clone()).collect();
        let seeds = triples_from_qrels(&self.qrels, &ids);
        let mut rng = Rng::for_purpose(seed, "negatives");
        lexical_negatives(&seeds, &self.table(), &self.docs, &self.qrels, k, negatives, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::normalize;

    #[test]
    fn pretrain_corpus_shape() {
        let c = pretrain_corpus(0, 64);
        assert_eq!(c.len(), 64);
        for d in &c {
            let n = normalize(&d.text).len();
            assert!((40..=90).contains(&n), "{n}");
        }
        assert_eq!(c, pretrain_corpus(0, 64));
        assert_ne!(c, pretrain_corpus(1, 64));
    }

    #[test]
    fn retrieval_corpus_shape() {
        let t = retrieval_corpus(0, 20, 5);
        assert_eq!(t.docs.len(), 100);
        assert_eq!(t.train_queries.len(), 20);
        assert_eq!(t.test_queries.len(), 20);
        assert_eq!(t.qrels.relevant("test07").len(), 5);
        assert!(t.qrels.relevant("test07").iter().all(|d| d.starts_with("t07")));
    }
}
