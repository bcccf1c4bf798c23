//! `docnmt` — experiment driver for the document-level cache NMT toolkit.
//!
//! Every subcommand reads an optional TOML config, applies flag overrides
//! on top (flags always win), and runs one pipeline stage against the run
//! directory. Exit codes: 0 success, 1 usage error, 2 config validation
//! error, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use docnmt_core::config::Config;
use docnmt_core::pipeline::{self, PipelineError};

#[derive(Parser, Debug)]
#[command(
    name = "docnmt",
    version,
    about = "Train and evaluate document-level cache translation models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpora named in the config.
    GenSynthetic(GenSyntheticArgs),
    /// Fit source and target topic models plus the topic projection.
    TrainLda(TrainLdaArgs),
    /// Train the plain attention baseline.
    TrainBaseline(TrainModelArgs),
    /// Train the cache model on top of the baseline checkpoint.
    TrainCache(TrainCacheArgs),
    /// Translate the test corpus with a trained checkpoint.
    Translate(TranslateArgs),
    /// Score the translations: BLEU, coherence, cache overlap.
    Evaluate(EvaluateArgs),
}

/// Options shared by every subcommand. Paths omitted here fall back to the
/// config file, then to the config defaults.
#[derive(Args, Debug)]
struct CommonOpts {
    /// TOML config file; command-line flags override its values.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory receiving checkpoints, translations, and reports.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
    /// Training corpus path.
    #[arg(long, value_name = "FILE")]
    train_corpus: Option<PathBuf>,
    /// Held-out corpus path.
    #[arg(long, value_name = "FILE")]
    heldout_corpus: Option<PathBuf>,
    /// Test corpus path.
    #[arg(long, value_name = "FILE")]
    test_corpus: Option<PathBuf>,
}

impl CommonOpts {
    fn load(&self) -> Result<Config, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if let Some(p) = &self.run_dir {
            cfg.paths.run_dir = p.clone();
        }
        if let Some(p) = &self.train_corpus {
            cfg.paths.train_corpus = p.clone();
        }
        if let Some(p) = &self.heldout_corpus {
            cfg.paths.heldout_corpus = p.clone();
        }
        if let Some(p) = &self.test_corpus {
            cfg.paths.test_corpus = p.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct GenSyntheticArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Corpus generator: "translation" or "planted-topic".
    #[arg(long)]
    kind: Option<String>,
    /// Training documents to generate.
    #[arg(long)]
    documents: Option<usize>,
    /// Held-out documents to generate (translation kind).
    #[arg(long)]
    heldout_documents: Option<usize>,
    /// Test documents to generate (translation kind).
    #[arg(long)]
    test_documents: Option<usize>,
    /// Document topics to plant.
    #[arg(long)]
    topics: Option<usize>,
    /// Corpus generation seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainLdaArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Number of topics to fit.
    #[arg(long)]
    topics: Option<usize>,
    /// Gibbs sweeps when fitting.
    #[arg(long)]
    sweeps: Option<usize>,
    /// Gibbs sweeps when inferring a document's topics.
    #[arg(long)]
    infer_sweeps: Option<usize>,
    /// Master seed for the run.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainModelArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Sentences per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Skip sentence pairs with either side longer than this.
    #[arg(long)]
    max_len: Option<usize>,
    /// Vocabulary cap including reserved tokens.
    #[arg(long)]
    vocab_cap: Option<usize>,
    /// Master seed for the run.
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainModelArgs {
    fn apply(&self, cfg: &mut Config) {
        if let Some(v) = self.epochs {
            cfg.training.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.training.batch_size = v;
        }
        if let Some(v) = self.max_len {
            cfg.training.max_len = v;
        }
        if let Some(v) = self.vocab_cap {
            cfg.corpus.vocab_cap = v;
        }
        if let Some(v) = self.seed {
            cfg.training.seed = v;
        }
    }
}

#[derive(Args, Debug)]
struct TrainCacheArgs {
    #[command(flatten)]
    train: TrainModelArgs,
    /// Gate mode: "learned" or "fixed:VALUE".
    #[arg(long)]
    gate_mode: Option<String>,
    /// Dynamic cache capacity.
    #[arg(long)]
    dynamic_capacity: Option<usize>,
    /// Topic cache capacity.
    #[arg(long)]
    topic_capacity: Option<usize>,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Checkpoint to decode with: "baseline" or "cache".
    #[arg(long)]
    model: Option<String>,
    /// Beam width.
    #[arg(long)]
    beam_width: Option<usize>,
    /// Worker threads for document fan-out.
    #[arg(long)]
    workers: Option<usize>,
    /// Gate mode override: "learned" or "fixed:VALUE".
    #[arg(long)]
    gate_mode: Option<String>,
    /// Master seed for the run.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Highest n-gram order scored.
    #[arg(long)]
    bleu_max_n: Option<usize>,
    /// Embedding dimension for the coherence metric.
    #[arg(long)]
    embedding_dim: Option<usize>,
    /// Embedding training epochs.
    #[arg(long)]
    embedding_epochs: Option<usize>,
    /// Master seed for the run.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::GenSynthetic(args) => {
            let mut cfg = args.common.load()?;
            if let Some(v) = args.kind {
                cfg.synthetic.kind = v;
            }
            if let Some(v) = args.documents {
                cfg.synthetic.documents = v;
            }
            if let Some(v) = args.heldout_documents {
                cfg.synthetic.heldout_documents = v;
            }
            if let Some(v) = args.test_documents {
                cfg.synthetic.test_documents = v;
            }
            if let Some(v) = args.topics {
                cfg.synthetic.topics = v;
            }
            if let Some(v) = args.seed {
                cfg.synthetic.seed = v;
            }
            let out = pipeline::gen_synthetic(&cfg)?;
            println!("generated {} corpora:", out.kind);
            for path in &out.written {
                println!("  {}", path.display());
            }
        }
        Command::TrainLda(args) => {
            let mut cfg = args.common.load()?;
            if let Some(v) = args.topics {
                cfg.lda.topics = v;
            }
            if let Some(v) = args.sweeps {
                cfg.lda.sweeps = v;
            }
            if let Some(v) = args.infer_sweeps {
                cfg.lda.infer_sweeps = v;
            }
            if let Some(v) = args.seed {
                cfg.training.seed = v;
            }
            let out = pipeline::train_lda(&cfg)?;
            println!(
                "fit {} topics over {} document pairs (src vocab {}, tgt vocab {})",
                out.topics, out.documents, out.src_vocab, out.tgt_vocab
            );
        }
        Command::TrainBaseline(args) => {
            let mut cfg = args.common.load()?;
            args.apply(&mut cfg);
            let out = pipeline::train_baseline(&cfg)?;
            print_training(&out);
        }
        Command::TrainCache(args) => {
            let mut cfg = args.train.common.load()?;
            args.train.apply(&mut cfg);
            if let Some(v) = args.gate_mode {
                cfg.cache.gate_mode = v;
            }
            if let Some(v) = args.dynamic_capacity {
                cfg.cache.dynamic_capacity = v;
            }
            if let Some(v) = args.topic_capacity {
                cfg.cache.topic_capacity = v;
            }
            let out = pipeline::train_cache(&cfg)?;
            print_training(&out);
        }
        Command::Translate(args) => {
            let mut cfg = args.common.load()?;
            if let Some(v) = args.model {
                cfg.decode.model = v;
            }
            if let Some(v) = args.beam_width {
                cfg.decode.beam_width = v;
            }
            if let Some(v) = args.workers {
                cfg.decode.workers = v;
            }
            if let Some(v) = args.gate_mode {
                cfg.cache.gate_mode = v;
            }
            if let Some(v) = args.seed {
                cfg.training.seed = v;
            }
            let out = pipeline::translate(&cfg)?;
            println!(
                "translated {} documents ({} sentences, {} truncated) with the {} model",
                out.documents, out.sentences, out.truncated, out.model_kind
            );
            println!("  {}", out.output.display());
        }
        Command::Evaluate(args) => {
            let mut cfg = args.common.load()?;
            if let Some(v) = args.bleu_max_n {
                cfg.eval.bleu_max_n = v;
            }
            if let Some(v) = args.embedding_dim {
                cfg.eval.embedding_dim = v;
            }
            if let Some(v) = args.embedding_epochs {
                cfg.eval.embedding_epochs = v;
            }
            if let Some(v) = args.seed {
                cfg.training.seed = v;
            }
            let report = pipeline::evaluate(&cfg)?;
            print!("{}", report.to_summary());
        }
    }
    Ok(())
}

fn print_training(out: &pipeline::TrainSummary) {
    println!(
        "trained {} epochs: final train nll/token {:.4}, held-out {:.4} ({} long pairs skipped)",
        out.epochs, out.final_train_nll, out.final_heldout_nll, out.skipped_long
    );
    println!("  {}", out.checkpoint.display());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successes; everything else is
            // a usage error.
            let ok = matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            );
            let _ = err.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                PipelineError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
