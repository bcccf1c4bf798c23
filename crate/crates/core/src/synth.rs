//! Seeded synthetic corpora.
//!
//! Two generators: a planted-topic bilingual corpus where each document
//! draws from one of a few disjoint word sets (and the target topic is a
//! fixed permutation of the source topic), and a document-translation
//! corpus with a deterministic source-to-target token mapping plus an
//! injected rare word that recurs in the following sentence. Both are fully
//! determined by their config and seed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Corpus, Document, SentencePair};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad generator config: {0}")]
    BadConfig(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

fn check_range(name: &str, range: (usize, usize)) -> Result<()> {
    if range.0 == 0 || range.0 > range.1 {
        return Err(SynthError::BadConfig(format!(
            "{name} range ({}, {}) must satisfy 0 < lo <= hi",
            range.0, range.1
        )));
    }
    Ok(())
}

fn pick(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.gen_range(range.0..=range.1)
}

// ---------------------------------------------------------------------------
// Planted-topic corpus

#[derive(Debug, Clone)]
pub struct PlantedTopicConfig {
    pub documents: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub sentences_per_doc: (usize, usize),
    pub sentence_len: (usize, usize),
    /// Planted source-to-target topic permutation; `None` means rotation by
    /// one.
    pub permutation: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for PlantedTopicConfig {
    fn default() -> Self {
        PlantedTopicConfig {
            documents: 400,
            topics: 4,
            words_per_topic: 100,
            sentences_per_doc: (3, 6),
            sentence_len: (4, 9),
            permutation: None,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedTopicCorpus {
    pub corpus: Corpus,
    /// Planted source topic per document.
    pub doc_topics: Vec<usize>,
    /// The planted source-to-target permutation actually used.
    pub permutation: Vec<usize>,
}

/// Every source sentence of document `d` draws uniformly from source topic
/// set `doc_topics[d]`; every target sentence from target topic set
/// `permutation[doc_topics[d]]`. Word sets are disjoint across topics, so
/// a topic model has an unambiguous partition to recover.
pub fn planted_topic_corpus(cfg: &PlantedTopicConfig) -> Result<PlantedTopicCorpus> {
    if cfg.documents == 0 || cfg.topics == 0 || cfg.words_per_topic == 0 {
        return Err(SynthError::BadConfig(
            "documents, topics, and words_per_topic must be nonzero".into(),
        ));
    }
    check_range("sentences_per_doc", cfg.sentences_per_doc)?;
    check_range("sentence_len", cfg.sentence_len)?;
    let permutation = match &cfg.permutation {
        Some(p) => {
            let mut seen = vec![false; cfg.topics];
            if p.len() != cfg.topics || p.iter().any(|&t| t >= cfg.topics || std::mem::replace(&mut seen[t], true)) {
                return Err(SynthError::BadConfig(format!(
                    "permutation {p:?} is not a permutation of 0..{}",
                    cfg.topics
                )));
            }
            p.clone()
        }
        None => (0..cfg.topics).map(|z| (z + 1) % cfg.topics).collect(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut documents = Vec::with_capacity(cfg.documents);
    let mut doc_topics = Vec::with_capacity(cfg.documents);
    for d in 0..cfg.documents {
        let z = d % cfg.topics;
        let zt = permutation[z];
        let n_sents = pick(&mut rng, cfg.sentences_per_doc);
        let mut pairs = Vec::with_capacity(n_sents);
        for _ in 0..n_sents {
            let src: Vec<String> = (0..pick(&mut rng, cfg.sentence_len))
                .map(|_| format!("s{z}w{}", rng.gen_range(0..cfg.words_per_topic)))
                .collect();
            let tgt: Vec<String> = (0..pick(&mut rng, cfg.sentence_len))
                .map(|_| format!("t{zt}w{}", rng.gen_range(0..cfg.words_per_topic)))
                .collect();
            pairs.push(SentencePair {
                source: src,
                target: tgt,
            });
        }
        documents.push(Document {
            id: format!("pt{d}"),
            pairs,
        });
        doc_topics.push(z);
    }
    Ok(PlantedTopicCorpus {
        corpus: Corpus { documents },
        doc_topics,
        permutation,
    })
}

// ---------------------------------------------------------------------------
// Document-translation corpus

#[derive(Debug, Clone)]
pub struct TranslationCorpusConfig {
    pub documents: usize,
    pub topics: usize,
    /// Content words per topic.
    pub topic_words: usize,
    /// Topic-neutral words shared by all documents.
    pub common_words: usize,
    /// Rare-word pool size; document `d` uses word `d % rare_words`.
    pub rare_words: usize,
    pub sentences_per_doc: (usize, usize),
    pub sentence_len: (usize, usize),
    /// Probability a position holds a topic word instead of a common word.
    pub topic_word_prob: f64,
    pub seed: u64,
}

impl Default for TranslationCorpusConfig {
    fn default() -> Self {
        TranslationCorpusConfig {
            documents: 2000,
            topics: 4,
            topic_words: 50,
            common_words: 40,
            rare_words: 100,
            sentences_per_doc: (3, 6),
            sentence_len: (4, 8),
            topic_word_prob: 0.5,
            seed: 1,
        }
    }
}

/// A later occurrence of a document's rare word; the word already appeared
/// in the immediately preceding sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recurrence {
    pub doc: usize,
    /// Sentence index of the repeat.
    pub sent: usize,
    /// Token position of the repeat inside that sentence (same on both
    /// sides: the token mapping is positionwise).
    pub pos: usize,
    pub source_token: String,
    pub target_token: String,
}

#[derive(Debug, Clone)]
pub struct TranslationCorpus {
    pub corpus: Corpus,
    pub doc_topics: Vec<usize>,
    /// One entry per document: where its rare word recurs.
    pub recurrences: Vec<Recurrence>,
}

/// Map a synthetic source token to its target token.
pub fn map_token(src: &str) -> String {
    debug_assert!(src.starts_with('s'));
    format!("t{}", &src[1..])
}

/// Word-for-word translatable documents: the target sentence is the source
/// sentence pushed through `map_token` position by position. Each document
/// mixes common words with words from its topic, and carries one rare word
/// placed in some sentence and repeated in the next — the repeat is what a
/// recency cache can exploit and is reported in `recurrences`.
pub fn translation_corpus(cfg: &TranslationCorpusConfig) -> Result<TranslationCorpus> {
    if cfg.documents == 0 || cfg.topics == 0 || cfg.topic_words == 0 {
        return Err(SynthError::BadConfig(
            "documents, topics, and topic_words must be nonzero".into(),
        ));
    }
    if cfg.common_words == 0 || cfg.rare_words == 0 {
        return Err(SynthError::BadConfig(
            "common_words and rare_words must be nonzero".into(),
        ));
    }
    check_range("sentences_per_doc", cfg.sentences_per_doc)?;
    check_range("sentence_len", cfg.sentence_len)?;
    if cfg.sentences_per_doc.0 < 2 {
        return Err(SynthError::BadConfig(
            "documents need at least 2 sentences for a recurrence".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.topic_word_prob) {
        return Err(SynthError::BadConfig(
            "topic_word_prob must lie in [0, 1]".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut documents = Vec::with_capacity(cfg.documents);
    let mut doc_topics = Vec::with_capacity(cfg.documents);
    let mut recurrences = Vec::with_capacity(cfg.documents);
    for d in 0..cfg.documents {
        let z = d % cfg.topics;
        let n_sents = pick(&mut rng, cfg.sentences_per_doc);
        let mut sources = Vec::with_capacity(n_sents);
        for _ in 0..n_sents {
            let sent: Vec<String> = (0..pick(&mut rng, cfg.sentence_len))
                .map(|_| {
                    if rng.gen::<f64>() < cfg.topic_word_prob {
                        format!("s{z}x{}", rng.gen_range(0..cfg.topic_words))
                    } else {
                        format!("scm{}", rng.gen_range(0..cfg.common_words))
                    }
                })
                .collect();
            sources.push(sent);
        }

        // Rare word: once in a sentence, again in the next.
        let rare = format!("srr{}", d % cfg.rare_words);
        let first = rng.gen_range(0..n_sents - 1);
        let fpos = rng.gen_range(0..=sources[first].len());
        sources[first].insert(fpos, rare.clone());
        let rpos = rng.gen_range(0..=sources[first + 1].len());
        sources[first + 1].insert(rpos, rare.clone());
        recurrences.push(Recurrence {
            doc: d,
            sent: first + 1,
            pos: rpos,
            source_token: rare.clone(),
            target_token: map_token(&rare),
        });

        let pairs = sources
            .into_iter()
            .map(|src| {
                let tgt = src.iter().map(|w| map_token(w)).collect();
                SentencePair {
                    source: src,
                    target: tgt,
                }
            })
            .collect();
        documents.push(Document {
            id: format!("dt{d}"),
            pairs,
        });
        doc_topics.push(z);
    }
    Ok(TranslationCorpus {
        corpus: Corpus { documents },
        doc_topics,
        recurrences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_corpus_is_deterministic_and_pure() {
        let cfg = PlantedTopicConfig {
            documents: 40,
            words_per_topic: 10,
            ..PlantedTopicConfig::default()
        };
        let a = planted_topic_corpus(&cfg).unwrap();
        let b = planted_topic_corpus(&cfg).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.doc_topics, b.doc_topics);
        assert_eq!(a.permutation, vec![1, 2, 3, 0]);

        for (doc, &z) in a.corpus.documents.iter().zip(&a.doc_topics) {
            let zt = a.permutation[z];
            for pair in &doc.pairs {
                assert!(pair.source.iter().all(|w| w.starts_with(&format!("s{z}w"))));
                assert!(pair.target.iter().all(|w| w.starts_with(&format!("t{zt}w"))));
            }
        }

        let c = planted_topic_corpus(&PlantedTopicConfig {
            seed: 2,
            ..cfg
        })
        .unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn planted_corpus_respects_custom_permutation() {
        let cfg = PlantedTopicConfig {
            documents: 8,
            topics: 4,
            words_per_topic: 5,
            permutation: Some(vec![2, 0, 3, 1]),
            ..PlantedTopicConfig::default()
        };
        let out = planted_topic_corpus(&cfg).unwrap();
        assert_eq!(out.permutation, vec![2, 0, 3, 1]);
        // Document 1 has topic 1, so targets come from topic 0.
        assert!(out.corpus.documents[1].pairs[0]
            .target
            .iter()
            .all(|w| w.starts_with("t0w")));
    }

    #[test]
    fn bad_permutation_rejected() {
        let cfg = PlantedTopicConfig {
            permutation: Some(vec![0, 0, 1, 2]),
            ..PlantedTopicConfig::default()
        };
        assert!(planted_topic_corpus(&cfg).is_err());
        let cfg = PlantedTopicConfig {
            permutation: Some(vec![0, 1]),
            ..PlantedTopicConfig::default()
        };
        assert!(planted_topic_corpus(&cfg).is_err());
    }

    #[test]
    fn translation_corpus_maps_tokens_positionwise() {
        let cfg = TranslationCorpusConfig {
            documents: 30,
            ..TranslationCorpusConfig::default()
        };
        let out = translation_corpus(&cfg).unwrap();
        assert_eq!(out.corpus.documents.len(), 30);
        for doc in &out.corpus.documents {
            for pair in &doc.pairs {
                assert_eq!(pair.source.len(), pair.target.len());
                for (s, t) in pair.source.iter().zip(&pair.target) {
                    assert_eq!(&map_token(s), t);
                }
            }
        }
    }

    #[test]
    fn recurrences_point_at_a_repeat_of_the_previous_sentence() {
        let out = translation_corpus(&TranslationCorpusConfig {
            documents: 50,
            ..TranslationCorpusConfig::default()
        })
        .unwrap();
        assert_eq!(out.recurrences.len(), 50);
        for rec in &out.recurrences {
            let doc = &out.corpus.documents[rec.doc];
            assert!(rec.sent >= 1);
            assert_eq!(doc.pairs[rec.sent].source[rec.pos], rec.source_token);
            assert_eq!(doc.pairs[rec.sent].target[rec.pos], rec.target_token);
            // The earlier occurrence sits in the sentence right before.
            assert!(doc.pairs[rec.sent - 1].source.contains(&rec.source_token));
            assert!(rec.source_token.starts_with("srr"));
            assert_eq!(rec.target_token, map_token(&rec.source_token));
        }
    }

    #[test]
    fn translation_corpus_is_deterministic_per_seed() {
        let cfg = TranslationCorpusConfig {
            documents: 20,
            ..TranslationCorpusConfig::default()
        };
        let a = translation_corpus(&cfg).unwrap();
        let b = translation_corpus(&cfg).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.recurrences, b.recurrences);
        let c = translation_corpus(&TranslationCorpusConfig {
            seed: 9,
            ..cfg
        })
        .unwrap();
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn sentence_length_bounds_hold() {
        let cfg = TranslationCorpusConfig {
            documents: 25,
            sentences_per_doc: (2, 4),
            sentence_len: (3, 5),
            ..TranslationCorpusConfig::default()
        };
        let out = translation_corpus(&cfg).unwrap();
        for doc in &out.corpus.documents {
            assert!((2..=4).contains(&doc.pairs.len()));
            for pair in &doc.pairs {
                // Rare-word insertion can lengthen two sentences by one.
                assert!((3..=6).contains(&pair.source.len()));
            }
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        assert!(translation_corpus(&TranslationCorpusConfig {
            documents: 0,
            ..TranslationCorpusConfig::default()
        })
        .is_err());
        assert!(translation_corpus(&TranslationCorpusConfig {
            sentences_per_doc: (1, 1),
            ..TranslationCorpusConfig::default()
        })
        .is_err());
        assert!(translation_corpus(&TranslationCorpusConfig {
            sentence_len: (0, 3),
            ..TranslationCorpusConfig::default()
        })
        .is_err());
        assert!(planted_topic_corpus(&PlantedTopicConfig {
            documents: 0,
            ..PlantedTopicConfig::default()
        })
        .is_err());
    }
}
