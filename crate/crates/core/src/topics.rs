//! Monolingual LDA topic models learned by collapsed Gibbs sampling, plus
//! the source-to-target topic projection estimated from aligned documents.
//!
//! Training is single-threaded and seeded so models are bit-reproducible.
//! Document topic distributions for unseen text come from fold-in sampling
//! with the per-topic word distributions held fixed.

use crate::binfile;
use crate::corpus::{Corpus, Side, StopWordList};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const TOPIC_MAGIC: &[u8; 4] = b"DNTM";
const PROJ_MAGIC: &[u8; 4] = b"DNTP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TopicsError {
    #[error("topic models need at least 2 topics, got {0}")]
    BadTopicCount(usize),
    #[error("cannot fit a topic model on an empty corpus")]
    EmptyCorpus,
    #[error("document {0} has no tokens")]
    EmptyDocument(usize),
    #[error("topic {topic} out of range for {k} topics")]
    TopicOutOfRange { topic: usize, k: usize },
    #[error("projection estimation needs at least one aligned document pair")]
    NoAlignedPairs,
    #[error("topic model file error: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TopicsError>;

#[derive(Debug, Clone, Copy)]
pub struct LdaConfig {
    pub topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub sweeps: usize,
    pub infer_sweeps: usize,
    pub seed: u64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig {
            topics: 8,
            alpha: 0.5,
            beta: 0.1,
            sweeps: 200,
            infer_sweeps: 20,
            seed: 1,
        }
    }
}

/// Topic distribution for one document.
#[derive(Debug, Clone)]
pub struct TopicDistribution {
    pub probs: Vec<f64>,
    /// True when the document had no in-vocabulary words and the uniform
    /// fallback was used.
    pub fallback_uniform: bool,
}

impl TopicDistribution {
    /// Highest-probability topic, ties broken by lowest topic id.
    pub fn dominant(&self) -> usize {
        dominant_topic(&self.probs)
    }
}

/// Argmax with ties to the lowest index.
pub fn dominant_topic(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best
}

/// LDA model state: count tables from collapsed Gibbs sampling and the
/// hyperparameters needed to smooth them into distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    k: usize,
    alpha: f64,
    beta: f64,
    vocab: Vec<String>,
    word_index: HashMap<String, usize>,
    /// `[word][topic]` counts.
    word_topic: Vec<Vec<u32>>,
    /// `[topic]` totals; always the column sums of `word_topic`.
    topic_totals: Vec<u32>,
    /// `[doc][topic]` counts for the training documents.
    doc_topic: Vec<Vec<u32>>,
}

impl TopicModel {
    /// Collapsed Gibbs sampling over bag-of-words documents.
    pub fn fit(docs: &[Vec<String>], cfg: &LdaConfig) -> Result<TopicModel> {
        if cfg.topics < 2 {
            return Err(TopicsError::BadTopicCount(cfg.topics));
        }
        if docs.is_empty() {
            return Err(TopicsError::EmptyCorpus);
        }
        for (i, doc) in docs.iter().enumerate() {
            if doc.is_empty() {
                return Err(TopicsError::EmptyDocument(i));
            }
        }

        let mut vocab: Vec<String> = Vec::new();
        let mut word_index: HashMap<String, usize> = HashMap::new();
        let encoded: Vec<Vec<usize>> = docs
            .iter()
            .map(|doc| {
                doc.iter()
                    .map(|w| {
                        *word_index.entry(w.clone()).or_insert_with(|| {
                            vocab.push(w.clone());
                            vocab.len() - 1
                        })
                    })
                    .collect()
            })
            .collect();

        let k = cfg.topics;
        let v = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut word_topic = vec![vec![0u32; k]; v];
        let mut topic_totals = vec![0u32; k];
        let mut doc_topic = vec![vec![0u32; k]; docs.len()];
        let mut assignments: Vec<Vec<usize>> = encoded
            .iter()
            .enumerate()
            .map(|(d, words)| {
                words
                    .iter()
                    .map(|&w| {
                        let z = rng.gen_range(0..k);
                        word_topic[w][z] += 1;
                        topic_totals[z] += 1;
                        doc_topic[d][z] += 1;
                        z
                    })
                    .collect()
            })
            .collect();

        let v_beta = v as f64 * cfg.beta;
        let mut weights = vec![0.0f64; k];
        for _sweep in 0..cfg.sweeps {
            for (d, words) in encoded.iter().enumerate() {
                for (i, &w) in words.iter().enumerate() {
                    let old = assignments[d][i];
                    word_topic[w][old] -= 1;
                    topic_totals[old] -= 1;
                    doc_topic[d][old] -= 1;

                    let mut total = 0.0;
                    for z in 0..k {
                        let wt = (word_topic[w][z] as f64 + cfg.beta)
                            / (topic_totals[z] as f64 + v_beta);
                        let dt = doc_topic[d][z] as f64 + cfg.alpha;
                        weights[z] = wt * dt;
                        total += weights[z];
                    }
                    let new = sample_index(&weights, total, &mut rng);

                    assignments[d][i] = new;
                    word_topic[w][new] += 1;
                    topic_totals[new] += 1;
                    doc_topic[d][new] += 1;
                }
            }
        }

        Ok(TopicModel {
            k,
            alpha: cfg.alpha,
            beta: cfg.beta,
            vocab,
            word_index,
            word_topic,
            topic_totals,
            doc_topic,
        })
    }

    pub fn topics(&self) -> usize {
        self.k
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Smoothed per-topic word probability.
    pub fn phi(&self, topic: usize, word: usize) -> f64 {
        (self.word_topic[word][topic] as f64 + self.beta)
            / (self.topic_totals[topic] as f64 + self.vocab.len() as f64 * self.beta)
    }

    /// Smoothed training-document topic distribution.
    pub fn training_theta(&self, doc: usize) -> Vec<f64> {
        let counts = &self.doc_topic[doc];
        let total: u32 = counts.iter().sum();
        let denom = total as f64 + self.k as f64 * self.alpha;
        counts
            .iter()
            .map(|&c| (c as f64 + self.alpha) / denom)
            .collect()
    }

    pub fn training_doc_count(&self) -> usize {
        self.doc_topic.len()
    }

    /// Total word-topic count, equal to the training token count. The Gibbs
    /// sweep conserves this by construction; tests assert it.
    pub fn total_count(&self) -> u64 {
        self.topic_totals.iter().map(|&c| c as u64).sum()
    }

    /// Fold-in inference for a document: sample topic assignments with the
    /// word distributions held fixed. Documents with no in-vocabulary words
    /// get the uniform distribution, flagged as a fallback.
    pub fn infer(&self, tokens: &[String], sweeps: usize, seed: u64) -> TopicDistribution {
        let words: Vec<usize> = tokens
            .iter()
            .filter_map(|t| self.word_index.get(t).copied())
            .collect();
        if words.is_empty() {
            return TopicDistribution {
                probs: vec![1.0 / self.k as f64; self.k],
                fallback_uniform: true,
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut local = vec![0u32; self.k];
        let mut assignments: Vec<usize> = words
            .iter()
            .map(|_| {
                let z = rng.gen_range(0..self.k);
                local[z] += 1;
                z
            })
            .collect();
        let mut weights = vec![0.0f64; self.k];
        for _sweep in 0..sweeps {
            for (i, &w) in words.iter().enumerate() {
                let old = assignments[i];
                local[old] -= 1;
                let mut total = 0.0;
                for z in 0..self.k {
                    weights[z] = (local[z] as f64 + self.alpha) * self.phi(z, w);
                    total += weights[z];
                }
                let new = sample_index(&weights, total, &mut rng);
                assignments[i] = new;
                local[new] += 1;
            }
        }
        let denom = words.len() as f64 + self.k as f64 * self.alpha;
        TopicDistribution {
            probs: local
                .iter()
                .map(|&c| (c as f64 + self.alpha) / denom)
                .collect(),
            fallback_uniform: false,
        }
    }

    /// The `n` most probable words of a topic, ties broken lexicographically.
    /// Asking for more than the vocabulary returns the full ordering.
    pub fn top_words(&self, topic: usize, n: usize) -> Result<Vec<String>> {
        if topic >= self.k {
            return Err(TopicsError::TopicOutOfRange { topic, k: self.k });
        }
        let mut ranked: Vec<usize> = (0..self.vocab.len()).collect();
        ranked.sort_by(|&a, &b| {
            self.word_topic[b][topic]
                .cmp(&self.word_topic[a][topic])
                .then_with(|| self.vocab[a].cmp(&self.vocab[b]))
        });
        ranked.truncate(n);
        Ok(ranked.into_iter().map(|w| self.vocab[w].clone()).collect())
    }

    /// SHA-256 over the vocabulary in id order, for integrity checks.
    pub fn vocab_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for w in &self.vocab {
            hasher.update(w.as_bytes());
            hasher.update([0u8]);
        }
        hasher.finalize().into()
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<TopicModel> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binfile::write_header(w, TOPIC_MAGIC, FORMAT_VERSION)?;
        binfile::write_u32(w, self.k as u32)?;
        binfile::write_f64(w, self.alpha)?;
        binfile::write_f64(w, self.beta)?;
        w.write_all(&self.vocab_hash())?;
        binfile::write_u32(w, self.vocab.len() as u32)?;
        for word in &self.vocab {
            binfile::write_string(w, word)?;
        }
        for row in &self.word_topic {
            for &c in row {
                binfile::write_u32(w, c)?;
            }
        }
        for &c in &self.topic_totals {
            binfile::write_u32(w, c)?;
        }
        binfile::write_u32(w, self.doc_topic.len() as u32)?;
        for row in &self.doc_topic {
            for &c in row {
                binfile::write_u32(w, c)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<TopicModel> {
        let version = binfile::read_header(r, TOPIC_MAGIC)
            .map_err(|e| TopicsError::BadFile(e.to_string()))?;
        if version != FORMAT_VERSION {
            return Err(TopicsError::BadFile(format!(
                "unsupported topic model version {version}"
            )));
        }
        let k = binfile::read_u32(r)? as usize;
        let alpha = binfile::read_f64(r)?;
        let beta = binfile::read_f64(r)?;
        let mut stored_hash = [0u8; 32];
        r.read_exact(&mut stored_hash)?;
        let vocab_len = binfile::read_u32(r)? as usize;
        let mut vocab = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            vocab.push(binfile::read_string(r)?);
        }
        let mut word_topic = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let mut row = Vec::with_capacity(k);
            for _ in 0..k {
                row.push(binfile::read_u32(r)?);
            }
            word_topic.push(row);
        }
        let mut topic_totals = Vec::with_capacity(k);
        for _ in 0..k {
            topic_totals.push(binfile::read_u32(r)?);
        }
        let doc_count = binfile::read_u32(r)? as usize;
        let mut doc_topic = Vec::with_capacity(doc_count);
        for _ in 0..doc_count {
            let mut row = Vec::with_capacity(k);
            for _ in 0..k {
                row.push(binfile::read_u32(r)?);
            }
            doc_topic.push(row);
        }
        let word_index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let model = TopicModel {
            k,
            alpha,
            beta,
            vocab,
            word_index,
            word_topic,
            topic_totals,
            doc_topic,
        };
        if model.vocab_hash() != stored_hash {
            return Err(TopicsError::BadFile(
                "vocabulary hash mismatch".to_string(),
            ));
        }
        Ok(model)
    }
}

fn sample_index<R: Rng>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let mut target = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        target -= w;
        if target <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Per-side bag-of-words documents for LDA, with the same stop-word list the
/// cache uses removed first. A document that would end up empty keeps its
/// raw tokens instead, so fitting never sees an empty document.
pub fn topic_documents(corpus: &Corpus, side: Side, stop: &StopWordList) -> Vec<Vec<String>> {
    corpus
        .documents
        .iter()
        .map(|doc| {
            let raw: Vec<String> = doc
                .pairs
                .iter()
                .flat_map(|p| match side {
                    Side::Source => p.source.iter(),
                    Side::Target => p.target.iter(),
                })
                .cloned()
                .collect();
            let filtered: Vec<String> =
                raw.iter().filter(|t| !stop.contains(t)).cloned().collect();
            if filtered.is_empty() {
                raw
            } else {
                filtered
            }
        })
        .collect()
}

/// `p(target topic | source topic)` table estimated from dominant-topic
/// co-occurrences over aligned document pairs. Rows for source topics that
/// were never dominant are absent and resolve to the corpus-wide most
/// frequent dominant target topic.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicProjection {
    rows: Vec<Option<Vec<f64>>>,
    fallback_target: usize,
}

impl TopicProjection {
    pub fn estimate(
        src_model: &TopicModel,
        tgt_model: &TopicModel,
        pairs: &[(Vec<String>, Vec<String>)],
        infer_sweeps: usize,
        seed: u64,
    ) -> Result<TopicProjection> {
        if pairs.is_empty() {
            return Err(TopicsError::NoAlignedPairs);
        }
        let mut counts = vec![vec![0u32; tgt_model.topics()]; src_model.topics()];
        let mut target_counts = vec![0u32; tgt_model.topics()];
        for (i, (src_doc, tgt_doc)) in pairs.iter().enumerate() {
            let zs = src_model
                .infer(src_doc, infer_sweeps, seed.wrapping_add(2 * i as u64))
                .dominant();
            let zt = tgt_model
                .infer(tgt_doc, infer_sweeps, seed.wrapping_add(2 * i as u64 + 1))
                .dominant();
            counts[zs][zt] += 1;
            target_counts[zt] += 1;
        }
        let fallback_target = dominant_topic(
            &target_counts.iter().map(|&c| c as f64).collect::<Vec<_>>(),
        );
        let rows = counts
            .into_iter()
            .map(|row| {
                let total: u32 = row.iter().sum();
                if total == 0 {
                    None
                } else {
                    Some(row.iter().map(|&c| c as f64 / total as f64).collect())
                }
            })
            .collect();
        Ok(TopicProjection {
            rows,
            fallback_target,
        })
    }

    pub fn source_topics(&self) -> usize {
        self.rows.len()
    }

    /// Normalized row for a source topic; `None` when it was never dominant.
    pub fn row(&self, src_topic: usize) -> Option<&[f64]> {
        self.rows
            .get(src_topic)
            .and_then(|r| r.as_deref())
    }

    /// Map a source topic to the target topic with the highest projection
    /// probability, falling back for unseen source topics.
    pub fn project(&self, src_topic: usize) -> usize {
        match self.row(src_topic) {
            Some(row) => dominant_topic(row),
            None => self.fallback_target,
        }
    }

    pub fn fallback_target(&self) -> usize {
        self.fallback_target
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binfile::write_header(w, PROJ_MAGIC, FORMAT_VERSION)?;
        binfile::write_u32(w, self.rows.len() as u32)?;
        binfile::write_u32(w, self.fallback_target as u32)?;
        for row in &self.rows {
            match row {
                None => binfile::write_u32(w, 0)?,
                Some(r) => {
                    binfile::write_u32(w, 1)?;
                    binfile::write_f64_slice(w, r)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<TopicProjection> {
        let version = binfile::read_header(r, PROJ_MAGIC)
            .map_err(|e| TopicsError::BadFile(e.to_string()))?;
        if version != FORMAT_VERSION {
            return Err(TopicsError::BadFile(format!(
                "unsupported projection version {version}"
            )));
        }
        let row_count = binfile::read_u32(r)? as usize;
        let fallback_target = binfile::read_u32(r)? as usize;
        let mut rows = Vec::with_capacity(row_count);
        for _ in 0..row_count {
            let present = binfile::read_u32(r)?;
            rows.push(if present == 1 {
                Some(binfile::read_f64_vec(r)?)
            } else {
                None
            });
        }
        Ok(TopicProjection {
            rows,
            fallback_target,
        })
    }
}
