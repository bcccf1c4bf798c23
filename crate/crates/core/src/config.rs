//! Experiment configuration: a TOML file with one section per module.
//!
//! Defaults are desk-scale so everything runs in minutes on one machine.
//! The settings used by the original large-scale experiments are noted on
//! each field; switching to them is a config edit, not a code change.
//! Unknown keys are rejected so typos fail loudly, and the resolved config
//! is echoed into every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::StopWordList;
use crate::decoder::DecodeConfig;
use crate::eval::EmbeddingConfig;
use crate::nmt::NmtConfig;
use crate::scorer::{GateMode, ScorerConfig};
use crate::synth::{PlantedTopicConfig, TranslationCorpusConfig};
use crate::topics::LdaConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub paths: PathsSection,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub cache: CacheSection,
    pub lda: LdaSection,
    pub training: TrainingSection,
    pub decode: DecodeSection,
    pub eval: EvalSection,
    pub synthetic: SyntheticSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Output directory; artifacts land here under fixed names.
    pub run_dir: PathBuf,
    pub train_corpus: PathBuf,
    pub heldout_corpus: PathBuf,
    pub test_corpus: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            run_dir: "run".into(),
            train_corpus: "data/train.txt".into(),
            heldout_corpus: "data/heldout.txt".into(),
            test_corpus: "data/test.txt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Most frequent words kept per side, reserved tokens included.
    /// Large-scale runs used 30k.
    pub vocab_cap: usize,
    /// `"minimal"`, `"default"`, or a path to a one-word-per-line file.
    pub stop_words: String,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            vocab_cap: 2000,
            stop_words: "minimal".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Word embedding width; 620 at full scale.
    pub emb_dim: usize,
    /// Recurrent state width; 1000 at full scale.
    pub hidden_dim: usize,
    /// Attention hidden width; 1000 at full scale.
    pub attn_dim: usize,
    /// Readout width; 620 at full scale.
    pub out_dim: usize,
    /// Readout dropout rate; 0.5 in the original setup too.
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            emb_dim: 32,
            hidden_dim: 64,
            attn_dim: 64,
            out_dim: 64,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    /// Dynamic cache capacity; 100 at full scale.
    pub dynamic_capacity: usize,
    /// Topic cache size; 200 at full scale.
    pub topic_capacity: usize,
    /// Scoring network hidden widths; 1000/500 at full scale.
    pub score_hidden: Vec<usize>,
    /// Gate network hidden widths; 500/200 at full scale.
    pub gate_hidden: Vec<usize>,
    /// `"learned"` or `"fixed:VALUE"` with VALUE in [0, 1].
    pub gate_mode: String,
}

impl Default for CacheSection {
    fn default() -> Self {
        CacheSection {
            dynamic_capacity: 20,
            topic_capacity: 50,
            score_hidden: vec![64, 32],
            gate_hidden: vec![32, 16],
            gate_mode: "learned".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaSection {
    /// Topic count; 100 at full scale.
    pub topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub sweeps: usize,
    pub infer_sweeps: usize,
}

impl Default for LdaSection {
    fn default() -> Self {
        let d = LdaConfig::default();
        LdaSection {
            topics: d.topics,
            alpha: d.alpha,
            beta: d.beta,
            sweeps: d.sweeps,
            infer_sweeps: d.infer_sweeps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub epochs: usize,
    /// Sentences longer than this on either side are skipped; 50 at full
    /// scale.
    pub max_len: usize,
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Adadelta decay.
    pub rho: f64,
    /// Adadelta stabilizer.
    pub epsilon: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            batch_size: 16,
            epochs: 5,
            max_len: 20,
            seed: 1,
            rho: 0.95,
            epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    /// Beam width; 10 at full scale.
    pub beam_width: usize,
    pub max_len_factor: usize,
    pub max_len_offset: usize,
    /// `"baseline"` or `"cache"`: which checkpoint translate loads.
    pub model: String,
    /// Documents translated concurrently.
    pub workers: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            beam_width: 4,
            max_len_factor: 3,
            max_len_offset: 5,
            model: "cache".into(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Embedding width for coherence; 200 at full scale.
    pub embedding_dim: usize,
    pub embedding_window: usize,
    pub embedding_negative: usize,
    pub embedding_epochs: usize,
    pub bleu_max_n: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            embedding_dim: 32,
            embedding_window: 4,
            embedding_negative: 5,
            embedding_epochs: 5,
            bleu_max_n: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    /// `"translation"` or `"planted-topic"`.
    pub kind: String,
    pub documents: usize,
    pub heldout_documents: usize,
    pub test_documents: usize,
    pub topics: usize,
    pub topic_words: usize,
    pub common_words: usize,
    pub rare_words: usize,
    /// Planted-topic generator only.
    pub words_per_topic: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub topic_word_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            kind: "translation".into(),
            documents: 2000,
            heldout_documents: 100,
            test_documents: 50,
            topics: 4,
            topic_words: 50,
            common_words: 40,
            rare_words: 100,
            words_per_topic: 100,
            min_sentences: 3,
            max_sentences: 6,
            min_words: 4,
            max_words: 8,
            topic_word_prob: 0.5,
            seed: 1,
        }
    }
}

/// Parse `"learned"` or `"fixed:VALUE"`.
pub fn parse_gate_mode(s: &str) -> Result<GateMode> {
    if s == "learned" {
        return Ok(GateMode::Learned);
    }
    if let Some(v) = s.strip_prefix("fixed:") {
        let value: f64 = v
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("bad fixed gate value {v:?}")))?;
        if !(0.0..=1.0).contains(&value) {
            return Err(ConfigError::Invalid(format!(
                "fixed gate value {value} outside [0, 1]"
            )));
        }
        return Ok(GateMode::Fixed(value));
    }
    Err(ConfigError::Invalid(format!(
        "gate_mode {s:?} is neither \"learned\" nor \"fixed:VALUE\""
    )))
}

impl Config {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.corpus.vocab_cap <= 3 {
            return bad("vocab_cap must exceed the 3 reserved tokens".into());
        }
        if self.corpus.stop_words.is_empty() {
            return bad("stop_words must be \"minimal\", \"default\", or a path".into());
        }
        for (name, v) in [
            ("emb_dim", self.model.emb_dim),
            ("hidden_dim", self.model.hidden_dim),
            ("attn_dim", self.model.attn_dim),
            ("out_dim", self.model.out_dim),
        ] {
            if v == 0 {
                return bad(format!("model.{name} must be nonzero"));
            }
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.model.dropout));
        }
        if self.cache.score_hidden.len() != 2 || self.cache.gate_hidden.len() != 2 {
            return bad("score_hidden and gate_hidden each take exactly two widths".into());
        }
        if self.cache.score_hidden.iter().chain(&self.cache.gate_hidden).any(|&w| w == 0) {
            return bad("scorer hidden widths must be nonzero".into());
        }
        parse_gate_mode(&self.cache.gate_mode)?;
        if self.lda.topics == 0 || self.lda.sweeps == 0 || self.lda.infer_sweeps == 0 {
            return bad("lda.topics, sweeps, and infer_sweeps must be nonzero".into());
        }
        if self.lda.alpha <= 0.0 || self.lda.beta <= 0.0 {
            return bad("lda.alpha and lda.beta must be positive".into());
        }
        if self.training.batch_size == 0 || self.training.epochs == 0 || self.training.max_len == 0 {
            return bad("training.batch_size, epochs, and max_len must be nonzero".into());
        }
        if !(0.0..1.0).contains(&self.training.rho) || self.training.epsilon <= 0.0 {
            return bad("training.rho must lie in [0, 1) and epsilon be positive".into());
        }
        if self.decode.beam_width == 0 {
            return bad("decode.beam_width must be nonzero".into());
        }
        if self.decode.workers == 0 {
            return bad("decode.workers must be nonzero".into());
        }
        if self.decode.model != "baseline" && self.decode.model != "cache" {
            return bad(format!(
                "decode.model {:?} is neither \"baseline\" nor \"cache\"",
                self.decode.model
            ));
        }
        if self.eval.embedding_dim == 0 || self.eval.embedding_window == 0 || self.eval.bleu_max_n == 0 {
            return bad("eval widths, window, and bleu_max_n must be nonzero".into());
        }
        if self.synthetic.kind != "translation" && self.synthetic.kind != "planted-topic" {
            return bad(format!(
                "synthetic.kind {:?} is neither \"translation\" nor \"planted-topic\"",
                self.synthetic.kind
            ));
        }
        // Range and count checks live in the generators; surface them when
        // the generator section is actually used.
        Ok(())
    }

    pub fn nmt_config(&self) -> NmtConfig {
        NmtConfig {
            emb_dim: self.model.emb_dim,
            hidden_dim: self.model.hidden_dim,
            attn_dim: self.model.attn_dim,
            out_dim: self.model.out_dim,
            dropout: self.model.dropout,
        }
    }

    pub fn scorer_config(&self) -> Result<ScorerConfig> {
        Ok(ScorerConfig {
            score_hidden: (self.cache.score_hidden[0], self.cache.score_hidden[1]),
            gate_hidden: (self.cache.gate_hidden[0], self.cache.gate_hidden[1]),
            gate_mode: parse_gate_mode(&self.cache.gate_mode)?,
        })
    }

    pub fn lda_config(&self, seed: u64) -> LdaConfig {
        LdaConfig {
            topics: self.lda.topics,
            alpha: self.lda.alpha,
            beta: self.lda.beta,
            sweeps: self.lda.sweeps,
            infer_sweeps: self.lda.infer_sweeps,
            seed,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_width: self.decode.beam_width,
            max_len_factor: self.decode.max_len_factor,
            max_len_offset: self.decode.max_len_offset,
            dynamic_capacity: self.cache.dynamic_capacity,
        }
    }

    pub fn embedding_config(&self, seed: u64) -> EmbeddingConfig {
        EmbeddingConfig {
            dim: self.eval.embedding_dim,
            window: self.eval.embedding_window,
            negative: self.eval.embedding_negative,
            epochs: self.eval.embedding_epochs,
            learning_rate: 0.025,
            seed,
        }
    }

    pub fn stop_words(&self) -> Result<StopWordList> {
        match self.corpus.stop_words.as_str() {
            "minimal" => Ok(StopWordList::minimal()),
            "default" => Ok(StopWordList::default_list()),
            path => StopWordList::from_file(path).map_err(|e| {
                ConfigError::Invalid(format!("cannot read stop words from {path:?}: {e}"))
            }),
        }
    }

    pub fn translation_synth_config(&self, documents: usize, seed: u64) -> TranslationCorpusConfig {
        let s = &self.synthetic;
        TranslationCorpusConfig {
            documents,
            topics: s.topics,
            topic_words: s.topic_words,
            common_words: s.common_words,
            rare_words: s.rare_words,
            sentences_per_doc: (s.min_sentences, s.max_sentences),
            sentence_len: (s.min_words, s.max_words),
            topic_word_prob: s.topic_word_prob,
            seed,
        }
    }

    pub fn planted_synth_config(&self) -> PlantedTopicConfig {
        let s = &self.synthetic;
        PlantedTopicConfig {
            documents: s.documents,
            topics: s.topics,
            words_per_topic: s.words_per_topic,
            sentences_per_doc: (s.min_sentences, s.max_sentences),
            sentence_len: (s.min_words, s.max_words),
            permutation: None,
            seed: s.seed,
        }
    }
}
