//! Tokenized document store with collection statistics.
//!
//! Raw text goes through lowercase -> punctuation split -> stopword filter
//! -> stem, term ids are assigned in first-occurrence order, and the
//! resulting corpus is immutable.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::Error;
use crate::Result;

mod porter;
mod stopwords;

pub use porter::porter_stem;

/// Dense term identifier assigned in first-occurrence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TermId(pub u32);

impl fmt::Display for TermId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StemmerChoice {
    /// Porter-style suffix stripping for ASCII tokens, identity otherwise.
    Suffix,
    Identity,
}

#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub stopwords: Vec<String>,
    pub stemmer: StemmerChoice,
    pub lowercase: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            stopwords: stopwords::DEFAULT_ENGLISH
                .iter()
                .map(|s| s.to_string())
                .collect(),
            stemmer: StemmerChoice::Suffix,
            lowercase: true,
        }
    }
}

impl PreprocessConfig {
    pub fn with_stopword_file(mut self, path: &Path) -> Result<Self> {
        let data = read_utf8(path)?;
        for line in data.lines() {
            let w = line.trim().to_lowercase();
            if !w.is_empty() {
                self.stopwords.push(w);
            }
        }
        Ok(self)
    }
}

/// Lowercase, strip punctuation, drop stopwords, stem.
///
/// Punctuation is any character outside letter/digit/whitespace classes.
/// Deterministic for a fixed config.
pub fn tokenize(text: &str, config: &PreprocessConfig) -> Vec<String> {
    let lowered = if config.lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .filter(|t| !config.stopwords.iter().any(|s| s == t))
        .map(|t| match config.stemmer {
            StemmerChoice::Suffix => {
                if t.is_ascii() {
                    porter_stem(t)
                } else {
                    t.to_string()
                }
            }
            StemmerChoice::Identity => t.to_string(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<TermId>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Query {
    pub query_id: String,
    pub tokens: Vec<TermId>,
}

/// Occurrence count of `w` in a token sequence. Absent terms count 0.
pub fn term_frequency(tokens: &[TermId], w: TermId) -> usize {
    tokens.iter().filter(|&&t| t == w).count()
}

/// Bidirectional term map plus collection statistics.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    terms: Vec<String>,
    ids: HashMap<String, TermId>,
    doc_freq: Vec<u32>,
    doc_count: usize,
    avg_len: f64,
}

impl Vocabulary {
    pub fn term(&self, id: TermId) -> &str {
        &self.terms[id.0 as usize]
    }

    pub fn id(&self, term: &str) -> Option<TermId> {
        self.ids.get(term).copied()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Number of documents containing the term.
    pub fn doc_freq(&self, id: TermId) -> usize {
        self.doc_freq[id.0 as usize] as usize
    }

    /// Number of documents in the collection.
    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    /// Average document length over the collection.
    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn iter(&self) -> impl Iterator<Item = (TermId, &str)> {
        self.terms
            .iter()
            .enumerate()
            .map(|(i, t)| (TermId(i as u32), t.as_str()))
    }

    fn intern(&mut self, term: &str) -> TermId {
        if let Some(&id) = self.ids.get(term) {
            return id;
        }
        let id = TermId(self.terms.len() as u32);
        self.terms.push(term.to_string());
        self.ids.insert(term.to_string(), id);
        self.doc_freq.push(0);
        id
    }
}

/// Immutable tokenized document collection.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub docs: Vec<Document>,
    doc_index: HashMap<String, usize>,
    pub config: PreprocessConfig,
}

impl Corpus {
    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn doc_by_id(&self, doc_id: &str) -> Option<&Document> {
        self.doc_index.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn internal_id(&self, doc_id: &str) -> Option<usize> {
        self.doc_index.get(doc_id).copied()
    }

    /// Preprocess a raw query string against this corpus' vocabulary.
    /// Terms never seen in the collection are dropped (they cannot match
    /// any posting and carry no statistics).
    pub fn query_from_text(&self, query_id: &str, text: &str) -> Result<Query> {
        let toks = tokenize(text, &self.config);
        if toks.is_empty() {
            return Err(Error::EmptyQuery(query_id.to_string()));
        }
        let tokens: Vec<TermId> = toks.iter().filter_map(|t| self.vocab.id(t)).collect();
        if tokens.is_empty() {
            return Err(Error::EmptyQuery(query_id.to_string()));
        }
        Ok(Query {
            query_id: query_id.to_string(),
            tokens,
        })
    }
}

/// Build an immutable corpus from (doc_id, text) pairs.
///
/// Term ids are assigned in first-occurrence order of the stream. Documents
/// that lose every token to preprocessing are kept with length 0 so the
/// doc-id space stays stable.
pub fn build_corpus<I, S1, S2>(doc_stream: I, config: PreprocessConfig) -> Result<Corpus>
where
    I: IntoIterator<Item = (S1, S2)>,
    S1: AsRef<str>,
    S2: AsRef<str>,
{
    let mut vocab = Vocabulary::default();
    let mut docs = Vec::new();
    let mut doc_index = HashMap::new();
    let mut total_len: usize = 0;

    for (doc_id, text) in doc_stream {
        let doc_id = doc_id.as_ref();
        if doc_index.contains_key(doc_id) {
            return Err(Error::DuplicateDocId(doc_id.to_string()));
        }
        let tokens: Vec<TermId> = tokenize(text.as_ref(), &config)
            .iter()
            .map(|t| vocab.intern(t))
            .collect();
        total_len += tokens.len();
        let mut seen: Vec<TermId> = tokens.clone();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            vocab.doc_freq[t.0 as usize] += 1;
        }
        doc_index.insert(doc_id.to_string(), docs.len());
        docs.push(Document {
            doc_id: doc_id.to_string(),
            tokens,
        });
    }

    vocab.doc_count = docs.len();
    vocab.avg_len = if docs.is_empty() {
        0.0
    } else {
        total_len as f64 / docs.len() as f64
    };

    Ok(Corpus {
        vocab,
        docs,
        doc_index,
        config,
    })
}

/// Read a file as UTF-8, reporting the byte offset of any invalid sequence.
pub fn read_utf8(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    String::from_utf8(bytes).map_err(|e| Error::Encoding {
        source_name: path.display().to_string(),
        offset: e.utf8_error().valid_up_to(),
    })
}

/// Parse `id<TAB>text` lines, skipping blanks and `#` comments.
fn parse_tsv_records(path: &Path) -> Result<Vec<(String, String)>> {
    let data = read_utf8(path)?;
    let mut out = Vec::new();
    for (lineno, line) in data.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: "expected `id<TAB>text`".to_string(),
        })?;
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

/// Load a corpus file: one `doc_id<TAB>text` per line.
pub fn load_corpus_file(path: &Path, config: PreprocessConfig) -> Result<Corpus> {
    let records = parse_tsv_records(path)?;
    build_corpus(records, config)
}

/// Load a query file against an existing corpus. Queries that come out
/// empty after preprocessing are rejected.
pub fn load_query_file(path: &Path, corpus: &Corpus) -> Result<Vec<Query>> {
    let records = parse_tsv_records(path)?;
    records
        .iter()
        .map(|(id, text)| corpus.query_from_text(id, text))
        .collect()
}
