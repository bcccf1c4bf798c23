//! Evaluation: corpus BLEU, embedding-based coherence, and cache-overlap
//! statistics.
//!
//! Coherence follows the mean-word-vector recipe: a sentence is the mean of
//! its word vectors, a document's coherence is the cosine similarity of
//! adjacent sentence vectors. Embeddings come from a small skip-gram
//! negative-sampling trainer run on the local corpus rather than an
//! external word2vec model, so absolute coherence numbers are only
//! comparable within one embedding table.

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Corpus, Side, StopWordIds};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hypothesis and reference counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("empty evaluation set")]
    Empty,
    #[error("bad evaluation config: {0}")]
    BadConfig(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ---------------------------------------------------------------------------
// BLEU

#[derive(Debug, Clone)]
pub struct BleuScore {
    pub score: f64,
    /// Modified n-gram precisions for n = 1..=max_n.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Corpus-level BLEU against a single reference per sentence: geometric
/// mean of modified n-gram precisions times the brevity penalty. Any
/// all-zero precision zeroes the score (strict geometric mean, no
/// smoothing).
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<BleuScore> {
    if hypotheses.is_empty() {
        return Err(EvalError::Empty);
    }
    if hypotheses.len() != references.len() {
        return Err(EvalError::CountMismatch(hypotheses.len(), references.len()));
    }
    if max_n == 0 {
        return Err(EvalError::BadConfig("max_n must be nonzero".into()));
    }

    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, rf) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += rf.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(rf, n);
            let hyp_counts = ngram_counts(hyp, n);
            for (gram, count) in &hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += (*count).min(clip);
                total[n - 1] += count;
            }
        }
    }

    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if total[i] == 0 {
                0.0
            } else {
                matched[i] as f64 / total[i] as f64
            }
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.iter().any(|&p| p == 0.0) || hyp_len == 0 {
        0.0
    } else {
        let mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        brevity_penalty * mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Word embeddings (skip-gram with negative sampling)

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub window: usize,
    pub negative: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 32,
            window: 4,
            negative: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 1,
        }
    }
}

/// Dense word vectors with a word-keyed lookup. Words absent from the
/// training corpus are simply not covered.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    words: IndexMap<String, usize>,
    vectors: Vec<f64>,
}

impl EmbeddingTable {
    /// Build a table from explicit vectors (e.g. externally trained ones).
    /// Every vector must have the same length; duplicate words are
    /// rejected.
    pub fn from_vectors(entries: Vec<(String, Vec<f64>)>) -> Result<EmbeddingTable> {
        let dim = entries.first().map_or(0, |(_, v)| v.len());
        if dim == 0 {
            return Err(EvalError::BadConfig("need at least one nonempty vector".into()));
        }
        let mut words = IndexMap::new();
        let mut vectors = Vec::with_capacity(entries.len() * dim);
        for (word, vec) in entries {
            if vec.len() != dim {
                return Err(EvalError::BadConfig(format!(
                    "vector for {word:?} has length {}, expected {dim}",
                    vec.len()
                )));
            }
            let next = words.len();
            if words.insert(word.clone(), next).is_some() {
                return Err(EvalError::BadConfig(format!("duplicate word {word:?}")));
            }
            vectors.extend(vec);
        }
        Ok(EmbeddingTable { dim, words, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.words
            .get(word)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.keys().map(|w| w.as_str())
    }
}

/// Train skip-gram embeddings with negative sampling on one side of a
/// corpus. Deterministic given the seed: single-threaded, fixed window,
/// fixed learning rate, negatives drawn from the unigram distribution
/// raised to 3/4.
pub fn train_embeddings(corpus: &Corpus, side: Side, cfg: &EmbeddingConfig) -> Result<EmbeddingTable> {
    if cfg.dim == 0 {
        return Err(EvalError::BadConfig("embedding dim must be nonzero".into()));
    }
    if cfg.window == 0 {
        return Err(EvalError::BadConfig("window must be nonzero".into()));
    }

    // Vocabulary in first-appearance order with counts.
    let mut words: IndexMap<String, usize> = IndexMap::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut sentences: Vec<Vec<usize>> = Vec::new();
    for doc in &corpus.documents {
        for pair in &doc.pairs {
            let tokens = match side {
                Side::Source => &pair.source,
                Side::Target => &pair.target,
            };
            let mut ids = Vec::with_capacity(tokens.len());
            for tok in tokens {
                let next = words.len();
                let id = *words.entry(tok.clone()).or_insert(next);
                if id == counts.len() {
                    counts.push(0);
                }
                counts[id] += 1;
                ids.push(id);
            }
            sentences.push(ids);
        }
    }
    if words.is_empty() {
        return Err(EvalError::Empty);
    }

    let v = words.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input: Vec<f64> = (0..v * cfg.dim)
        .map(|_| (rng.gen::<f64>() - 0.5) / cfg.dim as f64)
        .collect();
    let mut output = vec![0.0f64; v * cfg.dim];

    // Cumulative table for count^0.75 negative sampling.
    let mut cumulative = Vec::with_capacity(v);
    let mut acc = 0.0f64;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        cumulative.push(acc);
    }
    let sample_negative = |rng: &mut ChaCha8Rng| -> usize {
        let r = rng.gen::<f64>() * acc;
        cumulative.partition_point(|&x| x <= r).min(v - 1)
    };

    let lr = cfg.learning_rate;
    let dim = cfg.dim;
    for _ in 0..cfg.epochs {
        for sent in &sentences {
            for (i, &center) in sent.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(sent.len());
                for j in lo..hi {
                    if j == i {
                        continue;
                    }
                    let ctx = sent[j];
                    let mut accum = vec![0.0f64; dim];
                    // One positive then the negatives; label 1 then 0.
                    for k in 0..=cfg.negative {
                        let (target, label) = if k == 0 {
                            (ctx, 1.0)
                        } else {
                            let neg = sample_negative(&mut rng);
                            if neg == ctx {
                                continue;
                            }
                            (neg, 0.0)
                        };
                        let vi = &input[center * dim..(center + 1) * dim];
                        let uo = &output[target * dim..(target + 1) * dim];
                        let dot: f64 = vi.iter().zip(uo).map(|(a, b)| a * b).sum();
                        let grad = (sigmoid(dot) - label) * lr;
                        for d in 0..dim {
                            accum[d] += grad * uo[d];
                        }
                        let uo = &mut output[target * dim..(target + 1) * dim];
                        for d in 0..dim {
                            uo[d] -= grad * input[center * dim + d];
                        }
                    }
                    let vi = &mut input[center * dim..(center + 1) * dim];
                    for d in 0..dim {
                        vi[d] -= accum[d];
                    }
                }
            }
        }
    }

    Ok(EmbeddingTable {
        dim,
        words,
        vectors: input,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Coherence

/// Mean of the vectors of covered words; the zero vector when nothing is
/// covered.
pub fn sentence_vector(sentence: &[String], table: &EmbeddingTable) -> Vec<f64> {
    let mut sum = vec![0.0f64; table.dim()];
    let mut covered = 0usize;
    for word in sentence {
        if let Some(vec) = table.get(word) {
            for (s, v) in sum.iter_mut().zip(vec) {
                *s += v;
            }
            covered += 1;
        }
    }
    if covered > 0 {
        for s in &mut sum {
            *s /= covered as f64;
        }
    }
    sum
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone)]
pub struct DocumentCoherence {
    pub doc_id: String,
    /// Cosine similarities of adjacent usable sentence pairs.
    pub similarities: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone)]
pub struct CoherenceReport {
    pub documents: Vec<DocumentCoherence>,
    /// Mean over every adjacent pair in the corpus.
    pub mean: f64,
    /// Documents dropped for having fewer than two usable sentences.
    pub skipped_documents: usize,
}

/// Coherence of translated documents: cosine similarity between mean word
/// vectors of adjacent sentences. Sentences with no covered words are
/// unusable; pairs touching them are dropped, and documents with fewer than
/// two usable sentences are skipped.
pub fn coherence(docs: &[(String, Vec<Vec<String>>)], table: &EmbeddingTable) -> CoherenceReport {
    let mut documents = Vec::new();
    let mut skipped_documents = 0usize;
    let mut all = Vec::new();
    for (doc_id, sentences) in docs {
        let vectors: Vec<Option<Vec<f64>>> = sentences
            .iter()
            .map(|s| {
                let v = sentence_vector(s, table);
                if v.iter().all(|&x| x == 0.0) {
                    None
                } else {
                    Some(v)
                }
            })
            .collect();
        if vectors.iter().flatten().count() < 2 {
            skipped_documents += 1;
            continue;
        }
        let mut sims = Vec::new();
        for pair in vectors.windows(2) {
            if let (Some(a), Some(b)) = (&pair[0], &pair[1]) {
                sims.push(cosine(a, b));
            }
        }
        if sims.is_empty() {
            // Usable sentences exist but never adjacently.
            skipped_documents += 1;
            continue;
        }
        let mean = sims.iter().sum::<f64>() / sims.len() as f64;
        all.extend_from_slice(&sims);
        documents.push(DocumentCoherence {
            doc_id: doc_id.clone(),
            similarities: sims,
            mean,
        });
    }
    let mean = if all.is_empty() {
        0.0
    } else {
        all.iter().sum::<f64>() / all.len() as f64
    };
    CoherenceReport {
        documents,
        mean,
        skipped_documents,
    }
}

// ---------------------------------------------------------------------------
// Cache overlap

/// One document's translated sentences (as target ids) and the cache word
/// set to intersect them with.
pub struct OverlapInput<'a> {
    pub sentences: &'a [Vec<u32>],
    pub cache: &'a HashSet<u32>,
}

#[derive(Debug, Clone)]
pub struct OverlapStats {
    pub documents: usize,
    pub sentences: usize,
    /// Distinct overlapping types per document.
    pub per_document: Vec<usize>,
    pub per_document_avg: f64,
    pub per_sentence_avg: f64,
}

/// Count words shared between translations and a cache set, with stop
/// words (which include UNK) removed. Set semantics: distinct types per
/// sentence and per document.
pub fn cache_overlap_stats(docs: &[OverlapInput<'_>], stop: &StopWordIds) -> OverlapStats {
    let mut per_document = Vec::with_capacity(docs.len());
    let mut sentence_total = 0usize;
    let mut sentences = 0usize;
    for doc in docs {
        let mut doc_types: HashSet<u32> = HashSet::new();
        for sent in doc.sentences {
            let types: HashSet<u32> = sent
                .iter()
                .copied()
                .filter(|&id| !stop.contains(id) && doc.cache.contains(&id))
                .collect();
            sentence_total += types.len();
            sentences += 1;
            doc_types.extend(types);
        }
        per_document.push(doc_types.len());
    }
    let per_document_avg = if docs.is_empty() {
        0.0
    } else {
        per_document.iter().sum::<usize>() as f64 / docs.len() as f64
    };
    let per_sentence_avg = if sentences == 0 {
        0.0
    } else {
        sentence_total as f64 / sentences as f64
    };
    OverlapStats {
        documents: docs.len(),
        sentences,
        per_document,
        per_document_avg,
        per_sentence_avg,
    }
}

// ---------------------------------------------------------------------------
// Report rendering

/// Everything the evaluate step produces, ready for rendering.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub bleu: Option<BleuScore>,
    pub coherence: Option<CoherenceReport>,
    pub topic_overlap: Option<OverlapStats>,
    pub union_overlap: Option<OverlapStats>,
}

#[derive(Debug, Serialize)]
struct Summary {
    #[serde(skip_serializing_if = "Option::is_none")]
    bleu: Option<BleuSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    coherence: Option<CoherenceSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    topic_overlap: Option<OverlapSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    union_overlap: Option<OverlapSummary>,
}

#[derive(Debug, Serialize)]
struct BleuSummary {
    score: f64,
    precisions: Vec<f64>,
    brevity_penalty: f64,
    hyp_len: usize,
    ref_len: usize,
}

#[derive(Debug, Serialize)]
struct CoherenceSummary {
    mean: f64,
    documents: usize,
    skipped_documents: usize,
}

#[derive(Debug, Serialize)]
struct OverlapSummary {
    per_document_avg: f64,
    per_sentence_avg: f64,
    documents: usize,
    sentences: usize,
}

impl EvalReport {
    /// Tab-separated per-document table: one row per document with its
    /// coherence mean and overlap counts where available.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("doc\tcoherence\ttopic_overlap\tunion_overlap\n");
        let docs = self.coherence.as_ref().map_or(0, |c| c.documents.len());
        let rows = docs
            .max(self.topic_overlap.as_ref().map_or(0, |o| o.per_document.len()))
            .max(self.union_overlap.as_ref().map_or(0, |o| o.per_document.len()));
        for i in 0..rows {
            let id = self
                .coherence
                .as_ref()
                .and_then(|c| c.documents.get(i))
                .map_or_else(|| i.to_string(), |d| d.doc_id.clone());
            let coh = self
                .coherence
                .as_ref()
                .and_then(|c| c.documents.get(i))
                .map_or_else(|| "-".into(), |d| format!("{:.6}", d.mean));
            let topic = self
                .topic_overlap
                .as_ref()
                .and_then(|o| o.per_document.get(i))
                .map_or_else(|| "-".into(), |n| n.to_string());
            let union = self
                .union_overlap
                .as_ref()
                .and_then(|o| o.per_document.get(i))
                .map_or_else(|| "-".into(), |n| n.to_string());
            out.push_str(&format!("{id}\t{coh}\t{topic}\t{union}\n"));
        }
        out
    }

    /// Machine-readable summary (TOML).
    pub fn to_summary(&self) -> String {
        let summary = Summary {
            bleu: self.bleu.as_ref().map(|b| BleuSummary {
                score: b.score,
                precisions: b.precisions.clone(),
                brevity_penalty: b.brevity_penalty,
                hyp_len: b.hyp_len,
                ref_len: b.ref_len,
            }),
            coherence: self.coherence.as_ref().map(|c| CoherenceSummary {
                mean: c.mean,
                documents: c.documents.len(),
                skipped_documents: c.skipped_documents,
            }),
            topic_overlap: self.topic_overlap.as_ref().map(overlap_summary),
            union_overlap: self.union_overlap.as_ref().map(overlap_summary),
        };
        toml::to_string(&summary).expect("summary serializes")
    }
}

fn overlap_summary(o: &OverlapStats) -> OverlapSummary {
    OverlapSummary {
        per_document_avg: o.per_document_avg,
        per_sentence_avg: o.per_sentence_avg,
        documents: o.documents,
        sentences: o.sentences,
    }
}
