//! End-to-end checks of the `docnmt` binary: exit codes, flag precedence,
//! and a full pipeline over a tiny synthetic corpus.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn docnmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docnmt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A config that makes every stage finish in seconds.
fn tiny_config(dir: &Path) -> String {
    format!(
        r#"
[paths]
run_dir = "{run}"
train_corpus = "{data}/train.txt"
heldout_corpus = "{data}/heldout.txt"
test_corpus = "{data}/test.txt"

[model]
emb_dim = 8
hidden_dim = 12
attn_dim = 8
out_dim = 12
dropout = 0.1

[cache]
dynamic_capacity = 8
topic_capacity = 10
score_hidden = [10, 8]
gate_hidden = [8, 6]

[lda]
topics = 4
sweeps = 30
infer_sweeps = 10

[training]
batch_size = 8
epochs = 1
max_len = 12

[decode]
beam_width = 2

[eval]
embedding_dim = 8
embedding_epochs = 2

[synthetic]
documents = 24
heldout_documents = 6
test_documents = 6
topic_words = 12
common_words = 10
rare_words = 12
min_sentences = 2
max_sentences = 3
min_words = 3
max_words = 5
"#,
        run = dir.join("run").display(),
        data = dir.join("data").display(),
    )
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, tiny_config(dir)).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&docnmt(&["--help"])), 0);
    assert_eq!(code(&docnmt(&["translate", "--help"])), 0);
    assert_eq!(code(&docnmt(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let out = docnmt(&["no-such-command"]);
    assert_eq!(code(&out), 1);
    let out = docnmt(&[]);
    assert_eq!(code(&out), 1);
    let out = docnmt(&["translate", "--beam-width", "not-a-number"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn invalid_config_exits_two() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[decode]\nbeam_width = 0\n").unwrap();
    let out = docnmt(&["gen-synthetic", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("beam_width"));

    let path = dir.path().join("unknown.toml");
    std::fs::write(&path, "[decode]\nbean_width = 3\n").unwrap();
    let out = docnmt(&["gen-synthetic", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_prerequisite_exits_three_and_names_it() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(code(&docnmt(&["gen-synthetic", "--config", &cfg])), 0);
    let out = docnmt(&["translate", "--config", &cfg]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("train-cache"), "stderr: {}", stderr(&out));
}

#[test]
fn flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path());
    let out = docnmt(&["gen-synthetic", "--config", &cfg, "--documents", "6"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let train = std::fs::read_to_string(dir.path().join("data/train.txt")).unwrap();
    let docs = train.lines().filter(|l| l.starts_with("#doc ")).count();
    assert_eq!(docs, 6);
}

#[test]
fn same_seed_generates_identical_corpora() {
    let dir = TempDir::new().unwrap();
    let mut corpora = Vec::new();
    for sub in ["a", "b"] {
        let base = dir.path().join(sub);
        std::fs::create_dir_all(&base).unwrap();
        let cfg = write_config(&base);
        let out = docnmt(&["gen-synthetic", "--config", &cfg, "--seed", "7"]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        corpora.push(std::fs::read(base.join("data/train.txt")).unwrap());
    }
    assert_eq!(corpora[0], corpora[1]);
}

#[test]
fn full_pipeline_produces_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path());
    for cmd in [
        "gen-synthetic",
        "train-lda",
        "train-baseline",
        "train-cache",
        "translate",
    ] {
        let out = docnmt(&[cmd, "--config", &cfg]);
        assert_eq!(code(&out), 0, "{cmd} failed: {}", stderr(&out));
    }
    let out = docnmt(&["evaluate", "--config", &cfg]);
    assert_eq!(code(&out), 0, "evaluate failed: {}", stderr(&out));
    assert!(stdout(&out).contains("bleu"), "stdout: {}", stdout(&out));

    let run = dir.path().join("run");
    for name in [
        "config.toml",
        "baseline.ckpt",
        "cache.ckpt",
        "translations.txt",
        "diagnostics.tsv",
        "caches.tsv",
        "report.tsv",
        "summary.toml",
        "hashes.txt",
    ] {
        assert!(run.join(name).is_file(), "missing artifact {name}");
    }
}
