//! Experiment stages over a run directory.
//!
//! Every stage creates the run directory, echoes the resolved config into
//! it, writes its artifacts under fixed names, and refreshes a hash
//! manifest — enough to reproduce any run from its directory alone. Stage
//! seeds all derive from `training.seed`, so two runs with the same config
//! and inputs are byte-identical.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cache::{CacheState, TopicCache};
use crate::config::{Config, ConfigError};
use crate::corpus::{
    make_batches, Corpus, Side, StopWordIds, StopWordList, Vocabulary, EOS_TOKEN, PAD_TOKEN,
    UNK_TOKEN,
};
use crate::decoder::{AnyModel, Decoder, DocumentTranslation};
use crate::eval::{bleu, cache_overlap_stats, coherence, train_embeddings, EvalReport, OverlapInput};
use crate::nmt::NmtModel;
use crate::numerics::{AdadeltaState, Binding, ParamSet, Tape, Tensor, Var};
use crate::scorer::{CacheModel, TrainingCachePlan};
use crate::synth::{planted_topic_corpus, translation_corpus, Recurrence};
use crate::topics::{topic_documents, TopicModel, TopicProjection};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("corpus: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("numerics: {0}")]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("topics: {0}")]
    Topics(#[from] crate::topics::TopicsError),
    #[error("model: {0}")]
    Model(#[from] crate::nmt::NmtError),
    #[error("cache: {0}")]
    Cache(#[from] crate::cache::CacheError),
    #[error("synthesis: {0}")]
    Synth(#[from] crate::synth::SynthError),
    #[error("evaluation: {0}")]
    Eval(#[from] crate::eval::EvalError),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

// ---------------------------------------------------------------------------
// Run directory layout and seeds

/// Fixed artifact names inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub run_dir: PathBuf,
}

impl RunPaths {
    pub fn new<P: AsRef<Path>>(run_dir: P) -> RunPaths {
        RunPaths {
            run_dir: run_dir.as_ref().to_path_buf(),
        }
    }

    fn join(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    pub fn baseline_ckpt(&self) -> PathBuf {
        self.join("baseline.ckpt")
    }
    pub fn cache_ckpt(&self) -> PathBuf {
        self.join("cache.ckpt")
    }
    pub fn src_topics(&self) -> PathBuf {
        self.join("topics.src.bin")
    }
    pub fn tgt_topics(&self) -> PathBuf {
        self.join("topics.tgt.bin")
    }
    pub fn projection(&self) -> PathBuf {
        self.join("projection.bin")
    }
    pub fn translations(&self) -> PathBuf {
        self.join("translations.txt")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.join("diagnostics.tsv")
    }
    pub fn caches(&self) -> PathBuf {
        self.join("caches.tsv")
    }
    pub fn report(&self) -> PathBuf {
        self.join("report.tsv")
    }
    pub fn summary(&self) -> PathBuf {
        self.join("summary.toml")
    }
    pub fn config_echo(&self) -> PathBuf {
        self.join("config.toml")
    }
    pub fn hashes(&self) -> PathBuf {
        self.join("hashes.txt")
    }

    fn all_artifacts(&self) -> Vec<PathBuf> {
        vec![
            self.config_echo(),
            self.src_topics(),
            self.tgt_topics(),
            self.projection(),
            self.baseline_ckpt(),
            self.cache_ckpt(),
            self.translations(),
            self.diagnostics(),
            self.caches(),
            self.report(),
            self.summary(),
        ]
    }
}

/// Mix a stage salt into the master seed.
fn derive_seed(master: u64, salt: u64) -> u64 {
    master ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

const SALT_LDA_SRC: u64 = 1;
const SALT_LDA_TGT: u64 = 2;
const SALT_PROJECTION: u64 = 3;
const SALT_MODEL: u64 = 4;
const SALT_SHUFFLE: u64 = 5;
const SALT_DROPOUT: u64 = 6;
const SALT_TOPIC_INFER: u64 = 7;
const SALT_EMBEDDINGS: u64 = 8;

/// Create the run dir, echo the resolved config, return the layout.
fn prepare_run(cfg: &Config) -> Result<RunPaths> {
    let run = RunPaths::new(&cfg.paths.run_dir);
    std::fs::create_dir_all(&run.run_dir)?;
    std::fs::write(run.config_echo(), cfg.to_toml())?;
    Ok(run)
}

fn sha256_hex(path: &Path) -> std::io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Rewrite the hash manifest over every artifact currently present.
fn refresh_hashes(run: &RunPaths) -> Result<()> {
    let mut out = String::new();
    for path in run.all_artifacts() {
        if path.is_file() {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.push_str(&format!("{}  {}\n", sha256_hex(&path)?, name));
        }
    }
    std::fs::write(run.hashes(), out)?;
    Ok(())
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::Missing(format!(
            "{} (run {hint} first)",
            path.display()
        )))
    }
}

// ---------------------------------------------------------------------------
// gen-synthetic

#[derive(Debug, Clone)]
pub struct GenSummary {
    pub kind: String,
    pub written: Vec<PathBuf>,
}

/// Sidecar path for the recurrence positions of a synthetic test corpus.
pub fn recurrences_path(corpus_path: &Path) -> PathBuf {
    let mut name = corpus_path.file_name().unwrap_or_default().to_os_string();
    name.push(".recurrences.tsv");
    corpus_path.with_file_name(name)
}

pub fn write_recurrences(path: &Path, recs: &[Recurrence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "doc\tsent\tpos\tsource\ttarget")?;
    for r in recs {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.doc, r.sent, r.pos, r.source_token, r.target_token
        )?;
    }
    Ok(())
}

pub fn read_recurrences(path: &Path) -> Result<Vec<Recurrence>> {
    let mut recs = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(PipelineError::Invalid(format!(
                "bad recurrence line {}: {line:?}",
                i + 1
            )));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| PipelineError::Invalid(format!("bad number {s:?} on line {}", i + 1)))
        };
        recs.push(Recurrence {
            doc: parse(fields[0])?,
            sent: parse(fields[1])?,
            pos: parse(fields[2])?,
            source_token: fields[3].to_string(),
            target_token: fields[4].to_string(),
        });
    }
    Ok(recs)
}

/// Emit the synthetic corpora named in the config: train/heldout/test for
/// the translation generator (with a recurrence sidecar next to the test
/// corpus), or a single corpus plus a topic sidecar for the planted-topic
/// generator.
pub fn gen_synthetic(cfg: &Config) -> Result<GenSummary> {
    cfg.validate()?;
    let run = prepare_run(cfg)?;
    let mut written = vec![run.config_echo()];
    let s = &cfg.synthetic;
    match s.kind.as_str() {
        "translation" => {
            for (docs, seed, path) in [
                (s.documents, s.seed, &cfg.paths.train_corpus),
                (s.heldout_documents, s.seed + 1, &cfg.paths.heldout_corpus),
                (s.test_documents, s.seed + 2, &cfg.paths.test_corpus),
            ] {
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                let out = translation_corpus(&cfg.translation_synth_config(docs, seed))?;
                out.corpus.save(path)?;
                written.push(path.clone());
                if path == &cfg.paths.test_corpus {
                    let side = recurrences_path(path);
                    write_recurrences(&side, &out.recurrences)?;
                    written.push(side);
                }
            }
        }
        "planted-topic" => {
            let out = planted_topic_corpus(&cfg.planted_synth_config())?;
            let path = &cfg.paths.train_corpus;
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            out.corpus.save(path)?;
            written.push(path.clone());
            let mut name = path.file_name().unwrap_or_default().to_os_string();
            name.push(".topics.tsv");
            let side = path.with_file_name(name);
            let mut w = BufWriter::new(File::create(&side)?);
            writeln!(
                w,
                "#permutation\t{}",
                out.permutation
                    .iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            )?;
            for (doc, z) in out.corpus.documents.iter().zip(&out.doc_topics) {
                writeln!(w, "{}\t{z}", doc.id)?;
            }
            w.flush()?;
            written.push(side);
        }
        other => {
            return Err(PipelineError::Invalid(format!(
                "unknown synthetic kind {other:?}"
            )))
        }
    }
    refresh_hashes(&run)?;
    Ok(GenSummary {
        kind: s.kind.clone(),
        written,
    })
}

// ---------------------------------------------------------------------------
// train-lda

#[derive(Debug, Clone)]
pub struct LdaSummary {
    pub topics: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub documents: usize,
}

/// Fit both topic models and the source-to-target topic projection from
/// the training corpus, saving all three into the run directory.
pub fn train_lda(cfg: &Config) -> Result<LdaSummary> {
    cfg.validate()?;
    let run = prepare_run(cfg)?;
    let corpus = Corpus::load(&cfg.paths.train_corpus)?;
    let stop = cfg.stop_words()?;
    let src_docs = topic_documents(&corpus, Side::Source, &stop);
    let tgt_docs = topic_documents(&corpus, Side::Target, &stop);

    let master = cfg.training.seed;
    let src_model = TopicModel::fit(&src_docs, &cfg.lda_config(derive_seed(master, SALT_LDA_SRC)))?;
    let tgt_model = TopicModel::fit(&tgt_docs, &cfg.lda_config(derive_seed(master, SALT_LDA_TGT)))?;

    let pairs: Vec<(Vec<String>, Vec<String>)> = src_docs.into_iter().zip(tgt_docs).collect();
    let projection = TopicProjection::estimate(
        &src_model,
        &tgt_model,
        &pairs,
        cfg.lda.infer_sweeps,
        derive_seed(master, SALT_PROJECTION),
    )?;

    src_model.save(run.src_topics())?;
    tgt_model.save(run.tgt_topics())?;
    let mut w = BufWriter::new(File::create(run.projection())?);
    projection.write_to(&mut w)?;
    w.flush()?;
    drop(w);

    refresh_hashes(&run)?;
    Ok(LdaSummary {
        topics: src_model.topics(),
        src_vocab: src_model.vocab_size(),
        tgt_vocab: tgt_model.vocab_size(),
        documents: pairs.len(),
    })
}

fn load_projection(path: &Path) -> Result<TopicProjection> {
    let mut r = BufReader::new(File::open(path)?);
    Ok(TopicProjection::read_from(&mut r)?)
}

// ---------------------------------------------------------------------------
// Shared training machinery

/// Sentence pairs encoded once, indexed like the corpus.
struct EncodedCorpus {
    docs: Vec<Vec<(Vec<u32>, Vec<u32>)>>,
}

impl EncodedCorpus {
    fn new(corpus: &Corpus, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> EncodedCorpus {
        let docs = corpus
            .documents
            .iter()
            .map(|doc| {
                doc.pairs
                    .iter()
                    .map(|p| (src_vocab.encode(&p.source), tgt_vocab.encode(&p.target)))
                    .collect()
            })
            .collect();
        EncodedCorpus { docs }
    }

    fn get(&self, doc: usize, sent: usize) -> (&[u32], &[u32]) {
        let (s, t) = &self.docs[doc][sent];
        (s, t)
    }

    /// Predicted tokens over the whole corpus: each sentence contributes
    /// its target length plus the end marker.
    fn predicted_tokens(&self) -> usize {
        self.docs.iter().flatten().map(|(_, t)| t.len() + 1).sum()
    }
}

fn all_sentences(corpus: &Corpus) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (d, doc) in corpus.documents.iter().enumerate() {
        for s in 0..doc.pairs.len() {
            out.push((d, s));
        }
    }
    out
}

/// Per-sentence cache membership plans for a whole corpus, teacher-forced:
/// document caches grow with reference words, topic caches come from the
/// projected dominant topic of each source document.
struct CachePlans {
    docs: Vec<Vec<TrainingCachePlan>>,
}

struct TopicArtifacts {
    src_model: TopicModel,
    tgt_model: TopicModel,
    projection: TopicProjection,
}

fn load_topic_artifacts(run: &RunPaths) -> Result<TopicArtifacts> {
    for p in [run.src_topics(), run.tgt_topics(), run.projection()] {
        require(&p, "train-lda")?;
    }
    Ok(TopicArtifacts {
        src_model: TopicModel::load(run.src_topics())?,
        tgt_model: TopicModel::load(run.tgt_topics())?,
        projection: load_projection(&run.projection())?,
    })
}

/// Per-document topic caches: infer the dominant source topic, project it,
/// take the projected target topic's top words.
fn document_topic_caches(
    corpus: &Corpus,
    topics: &TopicArtifacts,
    stop_list: &StopWordList,
    tgt_vocab: &Vocabulary,
    cfg: &Config,
    infer_seed: u64,
) -> Result<Vec<TopicCache>> {
    let topic_docs = topic_documents(corpus, Side::Source, stop_list);
    let mut caches = Vec::with_capacity(topic_docs.len());
    for (d, tokens) in topic_docs.iter().enumerate() {
        let zs = topics
            .src_model
            .infer(tokens, cfg.lda.infer_sweeps, infer_seed.wrapping_add(d as u64))
            .dominant();
        let zt = topics.projection.project(zs);
        caches.push(TopicCache::from_topic(
            &topics.tgt_model,
            zt,
            cfg.cache.topic_capacity,
            tgt_vocab,
        )?);
    }
    Ok(caches)
}

fn build_cache_plans(
    corpus: &Corpus,
    encoded: &EncodedCorpus,
    topic_caches: &[TopicCache],
    stop_ids: &StopWordIds,
    dynamic_capacity: usize,
) -> CachePlans {
    let mut docs = Vec::with_capacity(corpus.documents.len());
    for (d, doc) in corpus.documents.iter().enumerate() {
        let mut state = CacheState::new(dynamic_capacity);
        state.begin_document(topic_caches[d].clone());
        let mut plans = Vec::with_capacity(doc.pairs.len());
        for s in 0..doc.pairs.len() {
            let (_, tgt_ids) = encoded.get(d, s);
            plans.push(TrainingCachePlan::build(&state, tgt_ids, stop_ids));
            state.dynamic.extend_from_sentence(tgt_ids, stop_ids);
        }
        docs.push(plans);
    }
    CachePlans { docs }
}

struct TrainOutcome {
    final_train_nll: f64,
    final_heldout_nll: f64,
    skipped_long: usize,
}

/// One model-agnostic training loop: shuffled sentence batches, gradients
/// averaged over each batch, one Adadelta step per batch, held-out NLL
/// after every epoch.
///
/// The parameter set lives here; callers pass closures that build one
/// sentence's loss from a binding over it (model structs only carry
/// wiring, so they stay borrowable).
fn train_loop<L, E>(
    label: &str,
    params: &mut ParamSet,
    train: &Corpus,
    train_tokens: usize,
    heldout_tokens: usize,
    heldout_sentences: &[(usize, usize)],
    cfg: &Config,
    mut loss_fn: L,
    mut eval_fn: E,
) -> Result<TrainOutcome>
where
    L: FnMut(&mut Tape, &Binding, usize, usize, &mut ChaCha8Rng) -> Result<Var>,
    E: FnMut(&mut Tape, &Binding, usize, usize) -> Result<Var>,
{
    let master = cfg.training.seed;
    let mut opt = AdadeltaState::new(params, cfg.training.rho, cfg.training.epsilon);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(master, SALT_DROPOUT));
    let mut skipped_long = 0;
    let mut final_train_nll = f64::NAN;
    let mut final_heldout_nll = f64::NAN;

    for epoch in 0..cfg.training.epochs {
        let mut shuffle =
            ChaCha8Rng::seed_from_u64(derive_seed(master, SALT_SHUFFLE).wrapping_add(epoch as u64));
        let plan = make_batches(
            train,
            cfg.training.batch_size,
            cfg.training.max_len,
            Some(&mut shuffle),
        );
        skipped_long = plan.skipped_long;
        let mut epoch_nll = 0.0;
        for batch in &plan.batches {
            let mut acc: Vec<Tensor> = (0..params.len())
                .map(|i| {
                    let t = params.tensor_at(i);
                    Tensor::zeros(t.rows(), t.cols())
                })
                .collect();
            for sref in batch {
                let mut tape = Tape::new();
                let bind = Binding::bind(&mut tape, params, true);
                let loss = loss_fn(&mut tape, &bind, sref.doc, sref.sent, &mut dropout_rng)?;
                epoch_nll += tape.value(loss).item();
                tape.backward(loss)?;
                bind.accumulate_grads(&tape, &mut acc);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut acc {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            opt.step(params, &acc);
        }
        final_train_nll = epoch_nll / train_tokens.max(1) as f64;

        let mut held_nll = 0.0;
        for &(d, s) in heldout_sentences {
            let mut tape = Tape::new();
            let bind = Binding::bind(&mut tape, params, false);
            let loss = eval_fn(&mut tape, &bind, d, s)?;
            held_nll += tape.value(loss).item();
        }
        final_heldout_nll = held_nll / heldout_tokens.max(1) as f64;
        eprintln!(
            "[{label}] epoch {}/{}: train nll/token {final_train_nll:.4}, held-out {final_heldout_nll:.4}",
            epoch + 1,
            cfg.training.epochs
        );
    }

    Ok(TrainOutcome {
        final_train_nll,
        final_heldout_nll,
        skipped_long,
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_train_nll: f64,
    pub final_heldout_nll: f64,
    pub skipped_long: usize,
    pub checkpoint: PathBuf,
}

// ---------------------------------------------------------------------------
// train-baseline

/// Train the plain attention model and save `baseline.ckpt`.
pub fn train_baseline(cfg: &Config) -> Result<TrainSummary> {
    cfg.validate()?;
    let run = prepare_run(cfg)?;
    let train = Corpus::load(&cfg.paths.train_corpus)?;
    let heldout = Corpus::load(&cfg.paths.heldout_corpus)?;
    let src_vocab = Vocabulary::build(&train, Side::Source, cfg.corpus.vocab_cap)?;
    let tgt_vocab = Vocabulary::build(&train, Side::Target, cfg.corpus.vocab_cap)?;
    let enc_train = EncodedCorpus::new(&train, &src_vocab, &tgt_vocab);
    let enc_held = EncodedCorpus::new(&heldout, &src_vocab, &tgt_vocab);

    let mut model = NmtModel::new(
        cfg.nmt_config(),
        src_vocab.size(),
        tgt_vocab.size(),
        derive_seed(cfg.training.seed, SALT_MODEL),
    )?;
    // Forward passes read values through the binding, so the set can live
    // in the loop while the model keeps only its wiring.
    let mut params = std::mem::take(&mut model.params);
    let held_list = all_sentences(&heldout);
    let outcome = train_loop(
        "baseline",
        &mut params,
        &train,
        enc_train.predicted_tokens(),
        enc_held.predicted_tokens(),
        &held_list,
        cfg,
        |tape, bind, d, s, rng| {
            let (src, tgt) = enc_train.get(d, s);
            Ok(model.sentence_nll(tape, bind, src, tgt, Some(rng))?)
        },
        |tape, bind, d, s| {
            let (src, tgt) = enc_held.get(d, s);
            Ok(model.sentence_nll(tape, bind, src, tgt, None)?)
        },
    )?;
    model.params = params;

    model.save_checkpoint(run.baseline_ckpt(), &src_vocab, &tgt_vocab)?;
    refresh_hashes(&run)?;
    Ok(TrainSummary {
        epochs: cfg.training.epochs,
        final_train_nll: outcome.final_train_nll,
        final_heldout_nll: outcome.final_heldout_nll,
        skipped_long: outcome.skipped_long,
        checkpoint: run.baseline_ckpt(),
    })
}

// ---------------------------------------------------------------------------
// train-cache

/// Initialize the cache model from the trained baseline (scorer and gate
/// stay fresh), jointly train with teacher-forced cache plans, and save
/// `cache.ckpt`. Requires `train-baseline` and `train-lda` artifacts.
pub fn train_cache(cfg: &Config) -> Result<TrainSummary> {
    cfg.validate()?;
    let run = prepare_run(cfg)?;
    require(&run.baseline_ckpt(), "train-baseline")?;
    let topics = load_topic_artifacts(&run)?;

    let (baseline, src_vocab, tgt_vocab) = NmtModel::load_checkpoint(run.baseline_ckpt())?;
    let train = Corpus::load(&cfg.paths.train_corpus)?;
    let heldout = Corpus::load(&cfg.paths.heldout_corpus)?;
    let enc_train = EncodedCorpus::new(&train, &src_vocab, &tgt_vocab);
    let enc_held = EncodedCorpus::new(&heldout, &src_vocab, &tgt_vocab);

    let stop_list = cfg.stop_words()?;
    let stop_ids = stop_list.resolve(&tgt_vocab);
    let master = cfg.training.seed;
    let infer_seed = derive_seed(master, SALT_TOPIC_INFER);
    let train_topic_caches =
        document_topic_caches(&train, &topics, &stop_list, &tgt_vocab, cfg, infer_seed)?;
    let held_topic_caches = document_topic_caches(
        &heldout,
        &topics,
        &stop_list,
        &tgt_vocab,
        cfg,
        infer_seed.wrapping_add(0x1_0000_0000),
    )?;
    let train_plans = build_cache_plans(
        &train,
        &enc_train,
        &train_topic_caches,
        &stop_ids,
        cfg.cache.dynamic_capacity,
    );
    let held_plans = build_cache_plans(
        &heldout,
        &enc_held,
        &held_topic_caches,
        &stop_ids,
        cfg.cache.dynamic_capacity,
    );

    // The architecture comes from the baseline checkpoint so the copied
    // weights always fit; the config only contributes the scorer shapes.
    let mut model = CacheModel::new(
        baseline.cfg,
        cfg.scorer_config()?,
        src_vocab.size(),
        tgt_vocab.size(),
        derive_seed(master, SALT_MODEL),
    )?;
    model.init_from_baseline(&baseline)?;
    drop(baseline);

    let mut params = std::mem::take(&mut model.nmt.params);
    let held_list = all_sentences(&heldout);
    let outcome = train_loop(
        "cache",
        &mut params,
        &train,
        enc_train.predicted_tokens(),
        enc_held.predicted_tokens(),
        &held_list,
        cfg,
        |tape, bind, d, s, rng| {
            let (src, tgt) = enc_train.get(d, s);
            Ok(model.sentence_nll(tape, bind, src, tgt, &train_plans.docs[d][s], Some(rng))?)
        },
        |tape, bind, d, s| {
            let (src, tgt) = enc_held.get(d, s);
            Ok(model.sentence_nll(tape, bind, src, tgt, &held_plans.docs[d][s], None)?)
        },
    )?;
    model.nmt.params = params;

    model.save_checkpoint(run.cache_ckpt(), &src_vocab, &tgt_vocab)?;
    refresh_hashes(&run)?;
    Ok(TrainSummary {
        epochs: cfg.training.epochs,
        final_train_nll: outcome.final_train_nll,
        final_heldout_nll: outcome.final_heldout_nll,
        skipped_long: outcome.skipped_long,
        checkpoint: run.cache_ckpt(),
    })
}

// ---------------------------------------------------------------------------
// translate

#[derive(Debug, Clone)]
pub struct TranslateSummary {
    pub model_kind: String,
    pub documents: usize,
    pub sentences: usize,
    pub truncated: usize,
    pub output: PathBuf,
}

/// Write translations: `#doc <id>` boundaries, one target sentence per
/// line.
pub fn write_translations(path: &Path, docs: &[DocumentTranslation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for doc in docs {
        writeln!(w, "#doc {}", doc.doc_id)?;
        for sent in &doc.sentences {
            writeln!(w, "{}", sent.tokens.join(" "))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a translation file back as `(doc_id, sentences)` pairs. Blank
/// lines inside a document are empty translations.
pub fn read_translations(path: &Path) -> Result<Vec<(String, Vec<Vec<String>>)>> {
    let mut docs: Vec<(String, Vec<Vec<String>>)> = Vec::new();
    for (lineno, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if let Some(id) = line.strip_prefix("#doc ") {
            docs.push((id.trim().to_string(), Vec::new()));
        } else {
            let doc = docs.last_mut().ok_or_else(|| {
                PipelineError::Invalid(format!(
                    "translation line {} appears before any #doc header",
                    lineno + 1
                ))
            })?;
            doc.1
                .push(line.split_whitespace().map(|t| t.to_string()).collect());
        }
    }
    Ok(docs)
}

/// Translate the test corpus with the checkpoint selected by
/// `decode.model`, writing the translation file, per-step diagnostics, and
/// per-document cache dumps.
pub fn translate(cfg: &Config) -> Result<TranslateSummary> {
    cfg.validate()?;
    let run = prepare_run(cfg)?;
    let test = Corpus::load(&cfg.paths.test_corpus)?;

    let (any, src_vocab, tgt_vocab) = match cfg.decode.model.as_str() {
        "baseline" => {
            require(&run.baseline_ckpt(), "train-baseline")?;
            let (m, sv, tv) = NmtModel::load_checkpoint(run.baseline_ckpt())?;
            (AnyModel::Baseline(m), sv, tv)
        }
        _ => {
            require(&run.cache_ckpt(), "train-cache")?;
            let (m, sv, tv) = CacheModel::load_checkpoint(run.cache_ckpt())?;
            (AnyModel::Cache(m), sv, tv)
        }
    };

    let stop_list = cfg.stop_words()?;
    let stop_ids = stop_list.resolve(&tgt_vocab);
    let topic_caches = match &any {
        AnyModel::Cache(_) => {
            let topics = load_topic_artifacts(&run)?;
            document_topic_caches(
                &test,
                &topics,
                &stop_list,
                &tgt_vocab,
                cfg,
                derive_seed(cfg.training.seed, SALT_TOPIC_INFER).wrapping_add(0x2_0000_0000),
            )?
        }
        AnyModel::Baseline(_) => vec![TopicCache::empty(); test.documents.len()],
    };

    let decoder = Decoder {
        model: &any,
        tgt_vocab: &tgt_vocab,
        stop: &stop_ids,
        cfg: cfg.decode_config(),
    };
    let translations = translate_documents(
        &decoder,
        &test.documents,
        &src_vocab,
        &topic_caches,
        cfg.decode.workers,
    )?;

    write_translations(&run.translations(), &translations)?;
    write_diagnostics(&run.diagnostics(), &translations)?;
    write_caches(
        &run.caches(),
        &translations,
        &topic_caches,
        &tgt_vocab,
        &stop_ids,
    )?;
    refresh_hashes(&run)?;

    let sentences = translations.iter().map(|d| d.sentences.len()).sum();
    let truncated = translations
        .iter()
        .flat_map(|d| &d.sentences)
        .filter(|s| s.truncated)
        .count();
    Ok(TranslateSummary {
        model_kind: cfg.decode.model.clone(),
        documents: translations.len(),
        sentences,
        truncated,
        output: run.translations(),
    })
}

/// Documents are independent, so fan out across worker threads and
/// reassemble in order; one worker means a plain sequential loop.
fn translate_documents(
    decoder: &Decoder<'_>,
    documents: &[crate::corpus::Document],
    src_vocab: &Vocabulary,
    topic_caches: &[TopicCache],
    workers: usize,
) -> Result<Vec<DocumentTranslation>> {
    if workers <= 1 || documents.len() <= 1 {
        return documents
            .iter()
            .zip(topic_caches)
            .map(|(doc, topic)| Ok(decoder.translate_document(doc, src_vocab, topic.clone())?))
            .collect();
    }
    let chunk = documents.len().div_ceil(workers);
    let results: Vec<crate::nmt::Result<Vec<DocumentTranslation>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = documents
            .chunks(chunk)
            .zip(topic_caches.chunks(chunk))
            .map(|(docs, topics)| {
                scope.spawn(move || {
                    docs.iter()
                        .zip(topics)
                        .map(|(doc, topic)| decoder.translate_document(doc, src_vocab, topic.clone()))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(documents.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn write_diagnostics(path: &Path, docs: &[DocumentTranslation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "doc\tsent\tstep\talpha\tcache_hit\tp_cache")?;
    for doc in docs {
        for (s, sent) in doc.sentences.iter().enumerate() {
            for (t, diag) in sent.steps.iter().enumerate() {
                let alpha = diag
                    .alpha
                    .map_or_else(|| "-".to_string(), |a| format!("{a:.6}"));
                writeln!(
                    w,
                    "{}\t{s}\t{t}\t{alpha}\t{}\t{:.6}",
                    doc.doc_id, diag.cache_hit as u8, diag.p_cache_chosen
                )?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-document cache dumps: the topic set, and the union of the topic set
/// with every word that entered the dynamic cache (any translated non-stop
/// word).
fn write_caches(
    path: &Path,
    docs: &[DocumentTranslation],
    topic_caches: &[TopicCache],
    tgt_vocab: &Vocabulary,
    stop: &StopWordIds,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "doc\ttopic_cache\tunion_cache")?;
    for (doc, topic) in docs.iter().zip(topic_caches) {
        let topic_ids: Vec<u32> = topic.iter().collect();
        let mut union_ids = topic_ids.clone();
        let mut seen: HashSet<u32> = topic_ids.iter().copied().collect();
        for sent in &doc.sentences {
            for &id in &sent.ids {
                if !stop.contains(id) && seen.insert(id) {
                    union_ids.push(id);
                }
            }
        }
        let join = |ids: &[u32]| {
            ids.iter()
                .map(|&id| tgt_vocab.token(id).to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(w, "{}\t{}\t{}", doc.doc_id, join(&topic_ids), join(&union_ids))?;
    }
    w.flush()?;
    Ok(())
}

fn read_caches(path: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(PipelineError::Invalid(format!(
                "bad cache dump line {}: {line:?}",
                i + 1
            )));
        }
        let split = |s: &str| -> Vec<String> {
            s.split_whitespace().map(|t| t.to_string()).collect()
        };
        out.push((split(fields[1]), split(fields[2])));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// evaluate

/// Score the translation file against the test references: BLEU, coherence
/// under locally trained embeddings, and cache-overlap statistics from the
/// decoder's cache dumps. Writes `report.tsv` and `summary.toml`.
pub fn evaluate(cfg: &Config) -> Result<EvalReport> {
    cfg.validate()?;
    let run = prepare_run(cfg)?;
    require(&run.translations(), "translate")?;
    require(&run.caches(), "translate")?;
    let refs = Corpus::load(&cfg.paths.test_corpus)?;
    let hyps = read_translations(&run.translations())?;

    if hyps.len() != refs.documents.len() {
        return Err(PipelineError::Invalid(format!(
            "translations cover {} documents but the test corpus has {}",
            hyps.len(),
            refs.documents.len()
        )));
    }
    let mut hyp_sents = Vec::new();
    let mut ref_sents = Vec::new();
    for (hyp, rdoc) in hyps.iter().zip(&refs.documents) {
        if hyp.0 != rdoc.id || hyp.1.len() != rdoc.pairs.len() {
            return Err(PipelineError::Invalid(format!(
                "document {} does not line up with the test corpus",
                hyp.0
            )));
        }
        for (h, p) in hyp.1.iter().zip(&rdoc.pairs) {
            hyp_sents.push(h.clone());
            ref_sents.push(p.target.clone());
        }
    }
    let bleu_score = bleu(&hyp_sents, &ref_sents, cfg.eval.bleu_max_n)?;

    let train = Corpus::load(&cfg.paths.train_corpus)?;
    let table = train_embeddings(
        &train,
        Side::Target,
        &cfg.embedding_config(derive_seed(cfg.training.seed, SALT_EMBEDDINGS)),
    )?;
    let coh = coherence(&hyps, &table);

    // Overlap works on ids; a scratch vocabulary over every token present
    // keeps it exact without consulting the model checkpoint.
    let cache_sets = read_caches(&run.caches())?;
    if cache_sets.len() != hyps.len() {
        return Err(PipelineError::Invalid(format!(
            "cache dump covers {} documents but translations cover {}",
            cache_sets.len(),
            hyps.len()
        )));
    }
    let mut scratch_tokens: Vec<String> = vec![
        PAD_TOKEN.to_string(),
        UNK_TOKEN.to_string(),
        EOS_TOKEN.to_string(),
    ];
    let mut seen: HashSet<String> = scratch_tokens.iter().cloned().collect();
    let mut note = |tok: &String| {
        if !seen.contains(tok) {
            seen.insert(tok.clone());
            scratch_tokens.push(tok.clone());
        }
    };
    for (_, sents) in &hyps {
        for sent in sents {
            sent.iter().for_each(&mut note);
        }
    }
    for (topic, union) in &cache_sets {
        topic.iter().for_each(&mut note);
        union.iter().for_each(&mut note);
    }
    let scratch = Vocabulary::from_tokens(scratch_tokens);
    let stop_ids = cfg.stop_words()?.resolve(&scratch);

    let doc_sentence_ids: Vec<Vec<Vec<u32>>> = hyps
        .iter()
        .map(|(_, sents)| sents.iter().map(|s| scratch.encode(s)).collect())
        .collect();
    let encode_set = |tokens: &[String]| -> HashSet<u32> {
        tokens.iter().map(|t| scratch.id(t)).collect()
    };
    let topic_sets: Vec<HashSet<u32>> =
        cache_sets.iter().map(|(t, _)| encode_set(t)).collect();
    let union_sets: Vec<HashSet<u32>> =
        cache_sets.iter().map(|(_, u)| encode_set(u)).collect();

    fn overlap_inputs<'a>(
        docs: &'a [Vec<Vec<u32>>],
        sets: &'a [HashSet<u32>],
    ) -> Vec<OverlapInput<'a>> {
        docs.iter()
            .zip(sets)
            .map(|(sentences, cache)| OverlapInput { sentences, cache })
            .collect()
    }
    let topic_overlap =
        cache_overlap_stats(&overlap_inputs(&doc_sentence_ids, &topic_sets), &stop_ids);
    let union_overlap =
        cache_overlap_stats(&overlap_inputs(&doc_sentence_ids, &union_sets), &stop_ids);

    let report = EvalReport {
        bleu: Some(bleu_score),
        coherence: Some(coh),
        topic_overlap: Some(topic_overlap),
        union_overlap: Some(union_overlap),
    };
    std::fs::write(run.report(), report.to_tsv())?;
    std::fs::write(run.summary(), report.to_summary())?;
    refresh_hashes(&run)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    /// A config small enough that every stage finishes in seconds.
    fn tiny_config(dir: &Path) -> Config {
        let mut cfg = Config::default();
        cfg.paths.run_dir = dir.join("run");
        cfg.paths.train_corpus = dir.join("data/train.txt");
        cfg.paths.heldout_corpus = dir.join("data/heldout.txt");
        cfg.paths.test_corpus = dir.join("data/test.txt");
        cfg.model.emb_dim = 8;
        cfg.model.hidden_dim = 12;
        cfg.model.attn_dim = 8;
        cfg.model.out_dim = 12;
        cfg.model.dropout = 0.1;
        cfg.cache.dynamic_capacity = 8;
        cfg.cache.topic_capacity = 10;
        cfg.cache.score_hidden = vec![10, 8];
        cfg.cache.gate_hidden = vec![8, 6];
        cfg.lda.topics = 4;
        cfg.lda.sweeps = 30;
        cfg.lda.infer_sweeps = 10;
        cfg.training.batch_size = 8;
        cfg.training.epochs = 1;
        cfg.training.max_len = 12;
        cfg.decode.beam_width = 2;
        cfg.eval.embedding_dim = 8;
        cfg.eval.embedding_epochs = 2;
        cfg.synthetic.documents = 24;
        cfg.synthetic.heldout_documents = 6;
        cfg.synthetic.test_documents = 6;
        cfg.synthetic.topic_words = 12;
        cfg.synthetic.common_words = 10;
        cfg.synthetic.rare_words = 12;
        cfg.synthetic.min_sentences = 2;
        cfg.synthetic.max_sentences = 3;
        cfg.synthetic.min_words = 3;
        cfg.synthetic.max_words = 5;
        cfg
    }

    #[test]
    fn all_stages_run_end_to_end() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());

        let gen = gen_synthetic(&cfg).unwrap();
        assert_eq!(gen.kind, "translation");
        assert!(cfg.paths.train_corpus.is_file());
        assert!(recurrences_path(&cfg.paths.test_corpus).is_file());

        let lda = train_lda(&cfg).unwrap();
        assert_eq!(lda.topics, 4);
        assert_eq!(lda.documents, 24);

        let base = train_baseline(&cfg).unwrap();
        assert!(base.final_heldout_nll.is_finite());
        assert!(base.checkpoint.is_file());

        let cache = train_cache(&cfg).unwrap();
        assert!(cache.final_heldout_nll.is_finite());
        assert!(cache.checkpoint.is_file());

        let tr = translate(&cfg).unwrap();
        assert_eq!(tr.documents, 6);
        assert!(tr.output.is_file());

        let report = evaluate(&cfg).unwrap();
        assert!(report.bleu.is_some());
        let run = RunPaths::new(&cfg.paths.run_dir);
        assert!(run.report().is_file());
        assert!(run.summary().is_file());
        assert!(run.hashes().is_file());
        // The summary is valid TOML.
        let text = std::fs::read_to_string(run.summary()).unwrap();
        let _: toml::Value = toml::from_str(&text).unwrap();
        // The hash manifest covers the artifacts written so far.
        let hashes = std::fs::read_to_string(run.hashes()).unwrap();
        for name in ["baseline.ckpt", "cache.ckpt", "translations.txt", "summary.toml"] {
            assert!(hashes.contains(name), "missing {name} in manifest");
        }
    }

    #[test]
    fn missing_prerequisites_name_the_stage() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());
        gen_synthetic(&cfg).unwrap();

        let err = train_cache(&cfg).unwrap_err();
        assert!(matches!(err, PipelineError::Missing(_)));
        assert!(err.to_string().contains("train-baseline"));

        let err = translate(&cfg).unwrap_err();
        assert!(err.to_string().contains("train-cache"));

        let err = evaluate(&cfg).unwrap_err();
        assert!(err.to_string().contains("translate"));
    }

    #[test]
    fn recurrence_file_round_trips() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("recs.tsv");
        let recs = vec![
            Recurrence {
                doc: 3,
                sent: 2,
                pos: 1,
                source_token: "srr5".into(),
                target_token: "trr5".into(),
            },
            Recurrence {
                doc: 7,
                sent: 1,
                pos: 0,
                source_token: "srr9".into(),
                target_token: "trr9".into(),
            },
        ];
        write_recurrences(&path, &recs).unwrap();
        assert_eq!(read_recurrences(&path).unwrap(), recs);
    }

    #[test]
    fn translation_file_round_trips_including_empty_sentences() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("tr.txt");
        let docs = vec![
            DocumentTranslation {
                doc_id: "a".into(),
                sentences: vec![
                    crate::decoder::SentenceTranslation {
                        ids: vec![3, 4],
                        tokens: vec!["x".into(), "y".into()],
                        log_prob: -1.0,
                        truncated: false,
                        steps: vec![],
                    },
                    crate::decoder::SentenceTranslation {
                        ids: vec![],
                        tokens: vec![],
                        log_prob: -0.5,
                        truncated: false,
                        steps: vec![],
                    },
                ],
            },
            DocumentTranslation {
                doc_id: "b".into(),
                sentences: vec![crate::decoder::SentenceTranslation {
                    ids: vec![5],
                    tokens: vec!["z".into()],
                    log_prob: -2.0,
                    truncated: true,
                    steps: vec![],
                }],
            },
        ];
        write_translations(&path, &docs).unwrap();
        let back = read_translations(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        assert_eq!(back[0].1, vec![vec!["x".to_string(), "y".to_string()], vec![]]);
        assert_eq!(back[1].1, vec![vec!["z".to_string()]]);
    }

    #[test]
    fn two_identical_runs_are_byte_identical() {
        let dir = TempDir::new().unwrap();
        let run_once = |sub: &str| {
            let base = dir.path().join(sub);
            let cfg = tiny_config(&base);
            gen_synthetic(&cfg).unwrap();
            train_lda(&cfg).unwrap();
            train_baseline(&cfg).unwrap();
            train_cache(&cfg).unwrap();
            translate(&cfg).unwrap();
            evaluate(&cfg).unwrap();
            let run = RunPaths::new(&cfg.paths.run_dir);
            (
                std::fs::read(run.baseline_ckpt()).unwrap(),
                std::fs::read(run.cache_ckpt()).unwrap(),
                std::fs::read(run.translations()).unwrap(),
                std::fs::read(run.report()).unwrap(),
                std::fs::read(run.summary()).unwrap(),
            )
        };
        assert_eq!(run_once("first"), run_once("second"));
    }

    #[test]
    fn worker_fanout_matches_sequential_translation() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_config(dir.path());
        gen_synthetic(&cfg).unwrap();
        train_lda(&cfg).unwrap();
        train_baseline(&cfg).unwrap();
        train_cache(&cfg).unwrap();

        translate(&cfg).unwrap();
        let run = RunPaths::new(&cfg.paths.run_dir);
        let sequential = std::fs::read(run.translations()).unwrap();

        cfg.decode.workers = 3;
        translate(&cfg).unwrap();
        let fanned = std::fs::read(run.translations()).unwrap();
        assert_eq!(sequential, fanned);
    }
}
