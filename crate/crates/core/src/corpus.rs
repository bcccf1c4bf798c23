//! Document-delimited parallel corpora: loading, vocabularies, stop words
//! and training batches.
//!
//! The corpus file format is UTF-8 text. A document starts with a line
//! `#doc <id>`; sentence pairs follow as alternating `S: <tokens>` /
//! `T: <tokens>` lines. Tokenization is whitespace-based; text is assumed
//! pre-tokenized.

use crate::binfile;
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("document '{doc}': source/target sentence counts differ ({src} vs {tgt})")]
    UnalignedDocument { doc: String, src: usize, tgt: usize },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("document '{0}' has no sentence pairs")]
    EmptyDocument(String),
    #[error("vocabulary cap {cap} is below the {reserved} reserved tokens")]
    CapTooSmall { cap: usize, reserved: usize },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub pairs: Vec<SentencePair>,
}

/// Ordered documents of ordered sentence pairs; document boundaries are the
/// whole point, so they are preserved everywhere.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn sentence_count(&self) -> usize {
        self.documents.iter().map(|d| d.pairs.len()).sum()
    }

    pub fn pair(&self, r: SentenceRef) -> &SentencePair {
        &self.documents[r.doc].pairs[r.sent]
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Corpus> {
        let file = File::open(path)?;
        Self::read_from(BufReader::new(file))
    }

    pub fn read_from<R: Read>(reader: BufReader<R>) -> Result<Corpus> {
        enum Expect {
            SourceLine,
            TargetLine,
        }
        let mut documents: Vec<Document> = Vec::new();
        let mut current: Option<Document> = None;
        let mut pending_source: Option<Vec<String>> = None;
        let mut expect = Expect::SourceLine;

        let finish_doc = |doc: Document,
                          pending: &Option<Vec<String>>|
         -> Result<Document> {
            if pending.is_some() {
                // A dangling S: line means the target side is short one line.
                return Err(CorpusError::UnalignedDocument {
                    doc: doc.id.clone(),
                    src: doc.pairs.len() + 1,
                    tgt: doc.pairs.len(),
                });
            }
            if doc.pairs.is_empty() {
                return Err(CorpusError::EmptyDocument(doc.id.clone()));
            }
            Ok(doc)
        };

        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = lineno + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(id) = trimmed.strip_prefix("#doc") {
                if let Some(doc) = current.take() {
                    documents.push(finish_doc(doc, &pending_source)?);
                }
                let id = id.trim();
                if id.is_empty() {
                    return Err(CorpusError::Malformed {
                        line: lineno,
                        msg: "#doc line with no id".to_string(),
                    });
                }
                current = Some(Document {
                    id: id.to_string(),
                    pairs: Vec::new(),
                });
                pending_source = None;
                expect = Expect::SourceLine;
            } else if let Some(rest) = trimmed.strip_prefix("S:") {
                let doc = current.as_mut().ok_or_else(|| CorpusError::Malformed {
                    line: lineno,
                    msg: "sentence line before any #doc header".to_string(),
                })?;
                if matches!(expect, Expect::TargetLine) {
                    return Err(CorpusError::UnalignedDocument {
                        doc: doc.id.clone(),
                        src: doc.pairs.len() + 2,
                        tgt: doc.pairs.len(),
                    });
                }
                let tokens = tokenize(rest);
                if tokens.is_empty() {
                    return Err(CorpusError::Malformed {
                        line: lineno,
                        msg: format!("document '{}': empty source sentence", doc.id),
                    });
                }
                pending_source = Some(tokens);
                expect = Expect::TargetLine;
            } else if let Some(rest) = trimmed.strip_prefix("T:") {
                let doc = current.as_mut().ok_or_else(|| CorpusError::Malformed {
                    line: lineno,
                    msg: "sentence line before any #doc header".to_string(),
                })?;
                let source = match pending_source.take() {
                    Some(s) => s,
                    None => {
                        return Err(CorpusError::UnalignedDocument {
                            doc: doc.id.clone(),
                            src: doc.pairs.len(),
                            tgt: doc.pairs.len() + 1,
                        })
                    }
                };
                let target = tokenize(rest);
                if target.is_empty() {
                    return Err(CorpusError::Malformed {
                        line: lineno,
                        msg: format!("document '{}': empty target sentence", doc.id),
                    });
                }
                doc.pairs.push(SentencePair { source, target });
                expect = Expect::SourceLine;
            } else {
                return Err(CorpusError::Malformed {
                    line: lineno,
                    msg: format!("unrecognized line: '{trimmed}'"),
                });
            }
        }
        if let Some(doc) = current.take() {
            documents.push(finish_doc(doc, &pending_source)?);
        }
        Ok(Corpus { documents })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for doc in &self.documents {
            writeln!(w, "#doc {}", doc.id)?;
            for pair in &doc.pairs {
                writeln!(w, "S: {}", pair.source.join(" "))?;
                writeln!(w, "T: {}", pair.target.join(" "))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "</s>";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const EOS_ID: u32 = 2;

const RESERVED: [&str; 3] = [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN];

/// Frequency-ranked token table with reserved padding/UNK/sentence-end ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Build from one side of a corpus. `cap` is the total vocabulary size
    /// including the three reserved tokens; tokens are ranked by descending
    /// frequency with ties broken lexicographically, and everything past the
    /// cap maps to UNK.
    pub fn build(corpus: &Corpus, side: Side, cap: usize) -> Result<Vocabulary> {
        if cap < RESERVED.len() {
            return Err(CorpusError::CapTooSmall {
                cap,
                reserved: RESERVED.len(),
            });
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for doc in &corpus.documents {
            for pair in &doc.pairs {
                let tokens = match side {
                    Side::Source => &pair.source,
                    Side::Target => &pair.target,
                };
                for tok in tokens {
                    *counts.entry(tok.as_str()).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|(tok, _)| !RESERVED.contains(tok))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(cap - RESERVED.len());

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.iter().map(|(tok, _)| tok.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token: tokens,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    /// `None` for out-of-vocabulary tokens instead of UNK.
    pub fn id_strict(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&id| self.token(id).to_string()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        binfile::write_u32(w, self.id_to_token.len() as u32)?;
        for tok in &self.id_to_token {
            binfile::write_string(w, tok)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<Vocabulary> {
        let count = binfile::read_u32(r)?;
        let mut tokens = Vec::with_capacity(count as usize);
        for _ in 0..count {
            tokens.push(binfile::read_string(r)?);
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}

/// English punctuation appended to every stop-word list.
const PUNCTUATION: [&str; 28] = [
    ".", ",", "!", "?", ";", ":", "'", "\"", "`", "``", "''", "(", ")", "[", "]", "{", "}", "-",
    "--", "...", "/", "\\", "|", "&", "%", "$", "#", "@",
];

/// Common English function words shipped as the default list. The exact
/// inventory is a local choice; the cache rules only require that UNK and
/// punctuation are always present.
const DEFAULT_FUNCTION_WORDS: [&str; 30] = [
    "a", "an", "the", "of", "to", "in", "and", "or", "is", "are", "was", "were", "be", "been",
    "that", "this", "these", "those", "it", "as", "for", "on", "with", "at", "by", "from", "not",
    "but", "have", "has",
];

/// Target tokens excluded from the dynamic cache.
#[derive(Debug, Clone)]
pub struct StopWordList {
    words: BTreeSet<String>,
}

impl StopWordList {
    /// Punctuation and UNK only; the bare minimum the cache rules require.
    pub fn minimal() -> StopWordList {
        let mut list = StopWordList {
            words: BTreeSet::new(),
        };
        list.append_mandatory();
        list
    }

    /// The shipped default: function words plus the mandatory entries.
    pub fn default_list() -> StopWordList {
        let mut list = StopWordList::minimal();
        for w in DEFAULT_FUNCTION_WORDS {
            list.words.insert(w.to_string());
        }
        list
    }

    /// An explicit word list; UNK and punctuation are appended
    /// unconditionally.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> StopWordList {
        let mut list = StopWordList {
            words: words.into_iter().collect(),
        };
        list.append_mandatory();
        list
    }

    /// One token per line; UNK and punctuation are appended unconditionally.
    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<StopWordList> {
        let file = File::open(path)?;
        let mut words = BTreeSet::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            let tok = line.trim();
            if !tok.is_empty() {
                words.insert(tok.to_string());
            }
        }
        let mut list = StopWordList { words };
        list.append_mandatory();
        Ok(list)
    }

    fn append_mandatory(&mut self) {
        self.words.insert(UNK_TOKEN.to_string());
        for p in PUNCTUATION {
            self.words.insert(p.to_string());
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false // mandatory entries are always present
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    /// Resolve against a target vocabulary. The reserved pseudo-tokens are
    /// always included so they can never enter a cache.
    pub fn resolve(&self, vocab: &Vocabulary) -> StopWordIds {
        let mut ids: HashSet<u32> = [PAD_ID, UNK_ID, EOS_ID].into_iter().collect();
        for word in &self.words {
            if let Some(id) = vocab.id_strict(word) {
                ids.insert(id);
            }
        }
        StopWordIds { ids }
    }
}

/// Stop words resolved to target-vocabulary ids.
#[derive(Debug, Clone)]
pub struct StopWordIds {
    ids: HashSet<u32>,
}

impl StopWordIds {
    pub fn contains(&self, id: u32) -> bool {
        self.ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Location of a sentence pair inside its corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SentenceRef {
    pub doc: usize,
    pub sent: usize,
}

/// Sentence-level batches with document metadata kept alongside.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batches: Vec<Vec<SentenceRef>>,
    /// Sentences excluded because either side exceeded the length limit.
    pub skipped_long: usize,
}

/// Partition trainable sentences into batches. Sentences where either side
/// exceeds `max_len` are excluded and counted. With `shuffle`, order is
/// permuted at the sentence level; otherwise batches are a straight
/// partition in corpus order.
pub fn make_batches<R: Rng>(
    corpus: &Corpus,
    batch_size: usize,
    max_len: usize,
    shuffle: Option<&mut R>,
) -> BatchPlan {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut refs = Vec::new();
    let mut skipped_long = 0;
    for (d, doc) in corpus.documents.iter().enumerate() {
        for (s, pair) in doc.pairs.iter().enumerate() {
            if pair.source.len() > max_len || pair.target.len() > max_len {
                skipped_long += 1;
            } else {
                refs.push(SentenceRef { doc: d, sent: s });
            }
        }
    }
    if let Some(rng) = shuffle {
        refs.shuffle(rng);
    }
    let batches = refs.chunks(batch_size).map(<[SentenceRef]>::to_vec).collect();
    BatchPlan {
        batches,
        skipped_long,
    }
}

/// Document-ordered view for consumers that need preceding-sentence context.
pub fn document_order(corpus: &Corpus) -> Vec<Vec<SentenceRef>> {
    corpus
        .documents
        .iter()
        .enumerate()
        .map(|(d, doc)| {
            (0..doc.pairs.len())
                .map(|s| SentenceRef { doc: d, sent: s })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus_from(text: &str) -> Result<Corpus> {
        Corpus::read_from(BufReader::new(text.as_bytes()))
    }

    #[test]
    fn load_two_documents() {
        let corpus = corpus_from(
            "#doc alpha\nS: a b\nT: x y\nS: c\nT: z\nS: d\nT: w\n\
             #doc beta\nS: e\nT: v\nS: f\nT: u\nS: g\nT: t\nS: h\nT: s\nS: i\nT: r\n",
        )
        .unwrap();
        let sizes: Vec<usize> = corpus.documents.iter().map(|d| d.pairs.len()).collect();
        assert_eq!(sizes, vec![3, 5]);
        assert_eq!(corpus.documents[0].id, "alpha");
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let corpus = corpus_from("").unwrap();
        assert!(corpus.documents.is_empty());
    }

    #[test]
    fn missing_target_line_names_document() {
        let err = corpus_from("#doc broken\nS: a b\nT: x\nS: c d\n").unwrap_err();
        assert!(err.to_string().contains("broken"), "{err}");
    }

    #[test]
    fn save_load_roundtrip() {
        let corpus = corpus_from("#doc d1\nS: a b\nT: x y z\n#doc d2\nS: q\nT: p\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        corpus.save(&path).unwrap();
        assert_eq!(Corpus::load(&path).unwrap(), corpus);
    }

    #[test]
    fn vocab_caps_and_ranks_by_frequency() {
        let corpus = corpus_from("#doc d\nS: s\nT: a a a b b c\n").unwrap();
        // cap = 2 content tokens + 3 reserved
        let vocab = Vocabulary::build(&corpus, Side::Target, 5).unwrap();
        assert_eq!(vocab.size(), 5);
        assert!(vocab.contains("a"));
        assert!(vocab.contains("b"));
        assert_eq!(vocab.id("c"), UNK_ID);
    }

    #[test]
    fn vocab_full_coverage_when_cap_generous() {
        let corpus = corpus_from("#doc d\nS: s\nT: a b c\n").unwrap();
        let vocab = Vocabulary::build(&corpus, Side::Target, 100).unwrap();
        assert_eq!(vocab.size(), 6);
        assert_ne!(vocab.id("c"), UNK_ID);
        assert_eq!(vocab.id("zzz"), UNK_ID); // true OOV still maps to UNK
    }

    #[test]
    fn vocab_frequency_tie_is_lexicographic() {
        let corpus = corpus_from("#doc d\nS: s\nT: b a b a\n").unwrap();
        let vocab = Vocabulary::build(&corpus, Side::Target, 5).unwrap();
        assert!(vocab.id("a") < vocab.id("b"));
    }

    #[test]
    fn encode_decode_roundtrip_in_vocab() {
        let corpus = corpus_from("#doc d\nS: s\nT: topic words here\n").unwrap();
        let vocab = Vocabulary::build(&corpus, Side::Target, 100).unwrap();
        let sentence = vec!["words".to_string(), "topic".to_string(), "here".to_string()];
        assert_eq!(vocab.decode(&vocab.encode(&sentence)), sentence);
    }

    #[test]
    fn batches_partition_in_order_without_shuffle() {
        let text: String = (0..10)
            .map(|i| format!("#doc d{i}\nS: w\nT: w\n"))
            .collect();
        let corpus = corpus_from(&text).unwrap();
        let plan = make_batches::<ChaCha8Rng>(&corpus, 4, 20, None);
        let sizes: Vec<usize> = plan.batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(plan.skipped_long, 0);
        // Permutation-free partition: flattening restores corpus order.
        let flat: Vec<usize> = plan.batches.iter().flatten().map(|r| r.doc).collect();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn overlong_sentences_are_excluded_and_counted() {
        let corpus = corpus_from("#doc d\nS: a b c d e\nT: x\nS: a\nT: x\n").unwrap();
        let plan = make_batches::<ChaCha8Rng>(&corpus, 4, 3, None);
        assert_eq!(plan.skipped_long, 1);
        assert_eq!(plan.batches.len(), 1);
        assert_eq!(plan.batches[0].len(), 1);
    }

    #[test]
    fn all_sentences_overlong_gives_empty_plan() {
        let corpus = corpus_from("#doc d\nS: a b c\nT: x y z\n").unwrap();
        let plan = make_batches::<ChaCha8Rng>(&corpus, 4, 2, None);
        assert!(plan.batches.is_empty());
        assert_eq!(plan.skipped_long, 1);
    }

    #[test]
    fn batch_metadata_maps_back_to_document_and_index() {
        let corpus =
            corpus_from("#doc d0\nS: a\nT: x\nS: b\nT: y\n#doc d1\nS: c\nT: z\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = make_batches(&corpus, 2, 20, Some(&mut rng));
        let mut seen: Vec<SentenceRef> = plan.batches.iter().flatten().copied().collect();
        seen.sort_by_key(|r| (r.doc, r.sent));
        assert_eq!(
            seen,
            vec![
                SentenceRef { doc: 0, sent: 0 },
                SentenceRef { doc: 0, sent: 1 },
                SentenceRef { doc: 1, sent: 0 },
            ]
        );
        for r in seen {
            // Every ref resolves to a real sentence pair.
            let _pair = corpus.pair(r);
        }
    }

    #[test]
    fn stop_list_always_has_unk_and_punctuation() {
        let list = StopWordList::minimal();
        assert!(list.contains(UNK_TOKEN));
        assert!(list.contains("."));
        assert!(list.contains(","));
        assert!(!list.contains("word"));
    }

    #[test]
    fn stop_list_from_file_appends_mandatory_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stop.txt");
        std::fs::write(&path, "foo\nbar\n").unwrap();
        let list = StopWordList::from_file(&path).unwrap();
        assert!(list.contains("foo"));
        assert!(list.contains("bar"));
        assert!(list.contains(UNK_TOKEN));
        assert!(list.contains("!"));
    }

    #[test]
    fn resolved_stop_ids_include_reserved() {
        let corpus = corpus_from("#doc d\nS: s\nT: word .\n").unwrap();
        let vocab = Vocabulary::build(&corpus, Side::Target, 100).unwrap();
        let ids = StopWordList::minimal().resolve(&vocab);
        assert!(ids.contains(PAD_ID));
        assert!(ids.contains(UNK_ID));
        assert!(ids.contains(EOS_ID));
        assert!(ids.contains(vocab.id(".")));
        assert!(!ids.contains(vocab.id("word")));
    }
}
