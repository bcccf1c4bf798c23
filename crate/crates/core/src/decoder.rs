//! Document-level beam-search decoding.
//!
//! A document is translated sentence by sentence. Each live hypothesis
//! carries its own copy of the dynamic cache, extended with the words that
//! hypothesis has produced, so cache scores reflect the hypothesis's own
//! history as well as earlier sentences. When a sentence finishes, the
//! winning hypothesis's words are committed to the document cache.
//!
//! Hypotheses that emit the end marker leave the beam; decoding stops when
//! no live hypotheses remain or the length cap is reached. Scores are raw
//! log-probabilities (no length normalization) and all ties break
//! deterministically.

use crate::cache::{CacheState, DynamicCache, TopicCache};
use crate::corpus::{Document, StopWordIds, Vocabulary, EOS_ID, PAD_ID};
use crate::nmt::{NmtError, NmtModel, Result, START_ID};
use crate::numerics::{Binding, Tape, Var};
use crate::scorer::CacheModel;

/// Either model family; the baseline simply never consults a cache.
#[derive(Debug)]
pub enum AnyModel {
    Baseline(NmtModel),
    Cache(CacheModel),
}

impl AnyModel {
    pub fn nmt(&self) -> &NmtModel {
        match self {
            AnyModel::Baseline(m) => m,
            AnyModel::Cache(m) => &m.nmt,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Length cap: `max_len_factor * source_len + max_len_offset`.
    pub max_len_factor: usize,
    pub max_len_offset: usize,
    /// Dynamic-cache capacity used while decoding.
    pub dynamic_capacity: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 4,
            max_len_factor: 3,
            max_len_offset: 5,
            dynamic_capacity: 20,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(NmtError::BadConfig("beam width must be nonzero".into()));
        }
        if self.max_len_factor == 0 && self.max_len_offset == 0 {
            return Err(NmtError::BadConfig("length cap must be nonzero".into()));
        }
        Ok(())
    }

    fn max_len(&self, src_len: usize) -> usize {
        self.max_len_factor * src_len + self.max_len_offset
    }
}

/// Per-step decode diagnostics for the winning hypothesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    /// Gate weight on the model distribution; `None` when no cache was in
    /// play at this step.
    pub alpha: Option<f64>,
    /// Whether the chosen word was a cache member.
    pub cache_hit: bool,
    /// Cache-distribution mass on the chosen word (zero without a cache).
    pub p_cache_chosen: f64,
}

#[derive(Debug, Clone)]
pub struct SentenceTranslation {
    pub ids: Vec<u32>,
    pub tokens: Vec<String>,
    /// Total log-probability of the hypothesis, including the end marker
    /// when one was produced.
    pub log_prob: f64,
    /// True when the hypothesis hit the length cap instead of finishing.
    pub truncated: bool,
    pub steps: Vec<StepDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct DocumentTranslation {
    pub doc_id: String,
    pub sentences: Vec<SentenceTranslation>,
}

struct Hypothesis {
    tokens: Vec<u32>,
    log_prob: f64,
    state: Var,
    cache: DynamicCache,
    steps: Vec<StepDiagnostics>,
    truncated: bool,
}

impl Hypothesis {
    fn last_token(&self) -> u32 {
        self.tokens.last().copied().unwrap_or(START_ID)
    }
}

pub struct Decoder<'a> {
    pub model: &'a AnyModel,
    pub tgt_vocab: &'a Vocabulary,
    pub stop: &'a StopWordIds,
    pub cfg: DecodeConfig,
}

impl Decoder<'_> {
    /// Translate one sentence given the document cache so far. Returns the
    /// best hypothesis and the document cache with its words committed.
    pub fn translate_sentence(
        &self,
        src_ids: &[u32],
        state: &CacheState,
    ) -> Result<(SentenceTranslation, DynamicCache)> {
        self.cfg.validate()?;
        let nmt = self.model.nmt();
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &nmt.params, false);
        let enc = nmt.encode(&mut tape, &bind, src_ids)?;

        let mut live = vec![Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            state: enc.init_state,
            cache: state.dynamic.clone(),
            steps: Vec::new(),
            truncated: false,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        let max_len = self.cfg.max_len(src_ids.len());

        while !live.is_empty() {
            // (score, hyp index, word, diagnostics)
            let mut candidates: Vec<(f64, usize, u32, StepDiagnostics)> = Vec::new();
            let mut new_states = Vec::with_capacity(live.len());
            for (h, hyp) in live.iter().enumerate() {
                let step =
                    nmt.decoder_step(&mut tape, &bind, &enc, hyp.state, hyp.last_token(), None)?;
                let (probs, alpha, p_cache) = match self.model {
                    AnyModel::Baseline(_) => (step.probs, None, None),
                    AnyModel::Cache(cache_model) => {
                        let members = members_union(&hyp.cache, &state.topic);
                        let mixed = cache_model.mixed_step(&mut tape, &bind, &step, &members)?;
                        let alpha = mixed.alpha.map(|a| tape.value(a).item());
                        (mixed.probs, alpha, mixed.p_cache)
                    }
                };
                new_states.push(step.state);
                let row = tape.value(probs).row(0);
                let cache_row = p_cache.map(|v| tape.value(v).row(0).to_vec());
                for (word, &p) in row.iter().enumerate() {
                    if word as u32 == PAD_ID {
                        continue;
                    }
                    let p_cache_chosen = cache_row.as_ref().map_or(0.0, |r| r[word]);
                    let diag = StepDiagnostics {
                        alpha,
                        cache_hit: hyp.cache.contains(word as u32)
                            || state.topic.contains(word as u32),
                        p_cache_chosen,
                    };
                    candidates.push((hyp.log_prob + p.ln(), h, word as u32, diag));
                }
            }

            // Deterministic order: score desc, then hypothesis, then word.
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .expect("scores are never NaN")
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            candidates.truncate(self.cfg.beam_width);

            let mut next_live = Vec::with_capacity(self.cfg.beam_width);
            for (score, h, word, diag) in candidates {
                let parent = &live[h];
                let mut steps = parent.steps.clone();
                steps.push(diag);
                if word == EOS_ID {
                    finished.push(Hypothesis {
                        tokens: parent.tokens.clone(),
                        log_prob: score,
                        state: new_states[h],
                        cache: parent.cache.clone(),
                        steps,
                        truncated: false,
                    });
                } else {
                    let mut tokens = parent.tokens.clone();
                    tokens.push(word);
                    let mut cache = parent.cache.clone();
                    cache.insert(word, self.stop);
                    next_live.push(Hypothesis {
                        tokens,
                        log_prob: score,
                        state: new_states[h],
                        cache,
                        steps,
                        truncated: false,
                    });
                }
            }
            live = next_live;

            if live.iter().any(|h| h.tokens.len() >= max_len) {
                // Length cap: everything still alive finishes as-is.
                for mut hyp in live.drain(..) {
                    hyp.truncated = true;
                    finished.push(hyp);
                }
            }
        }

        // Best score; ties break toward the shorter, lexicographically
        // smaller token sequence.
        finished.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .expect("scores are never NaN")
                .then(a.tokens.len().cmp(&b.tokens.len()))
                .then(a.tokens.cmp(&b.tokens))
        });
        let best = finished
            .into_iter()
            .next()
            .expect("at least one hypothesis always finishes");

        let mut committed = state.dynamic.clone();
        committed.extend_from_sentence(&best.tokens, self.stop);

        let translation = SentenceTranslation {
            tokens: self.tgt_vocab.decode(&best.tokens),
            ids: best.tokens,
            log_prob: best.log_prob,
            truncated: best.truncated,
            steps: best.steps,
        };
        Ok((translation, committed))
    }

    /// Translate a document in order: fresh dynamic cache, the given topic
    /// cache throughout, winning words committed after every sentence.
    pub fn translate_document(
        &self,
        doc: &Document,
        src_vocab: &Vocabulary,
        topic: TopicCache,
    ) -> Result<DocumentTranslation> {
        let mut state = CacheState::with_topic(self.cfg.dynamic_capacity, topic);
        let mut sentences = Vec::with_capacity(doc.pairs.len());
        for pair in &doc.pairs {
            let src_ids = src_vocab.encode(&pair.source);
            let (translation, committed) = self.translate_sentence(&src_ids, &state)?;
            state.dynamic = committed;
            sentences.push(translation);
        }
        Ok(DocumentTranslation {
            doc_id: doc.id.clone(),
            sentences,
        })
    }
}

/// Distinct ids: dynamic entries oldest first, then unseen topic entries.
fn members_union(dynamic: &DynamicCache, topic: &TopicCache) -> Vec<u32> {
    let mut out: Vec<u32> = dynamic.iter().collect();
    for id in topic.iter() {
        if !dynamic.contains(id) {
            out.push(id);
        }
    }
    out
}
