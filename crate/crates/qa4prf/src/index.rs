//! Inverted index over a corpus, BM25 first-round retrieval and
//! weighted-query second-round retrieval.

use std::collections::HashMap;
use std::io::Write;

use crate::corpus::{Corpus, Query, TermId};
use crate::error::Error;
use crate::Result;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone, Copy)]
pub struct Posting {
    pub doc: usize,
    pub tf: u32,
}

/// Postings sorted by internal doc id plus the BM25 parameters.
/// Immutable after build; concurrent retrieval over a shared index is safe.
#[derive(Debug, Clone)]
pub struct InvertedIndex {
    postings: Vec<Vec<Posting>>,
    doc_lens: Vec<usize>,
    avg_len: f64,
    pub k1: f64,
    pub b: f64,
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus, k1: f64, b: f64) -> Self {
        let mut postings = vec![Vec::new(); corpus.vocab.len()];
        let mut doc_lens = Vec::with_capacity(corpus.doc_count());
        for (doc, d) in corpus.docs.iter().enumerate() {
            doc_lens.push(d.len());
            let mut counts: HashMap<TermId, u32> = HashMap::new();
            for &t in &d.tokens {
                *counts.entry(t).or_insert(0) += 1;
            }
            let mut entries: Vec<(TermId, u32)> = counts.into_iter().collect();
            entries.sort_unstable_by_key(|&(t, _)| t);
            for (t, tf) in entries {
                postings[t.0 as usize].push(Posting { doc, tf });
            }
        }
        let avg_len = if doc_lens.is_empty() {
            0.0
        } else {
            doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64
        };
        InvertedIndex {
            postings,
            doc_lens,
            avg_len,
            k1,
            b,
        }
    }

    pub fn postings(&self, t: TermId) -> &[Posting] {
        &self.postings[t.0 as usize]
    }

    pub fn doc_len(&self, doc: usize) -> usize {
        self.doc_lens[doc]
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lens.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    /// Smoothed BM25 idf, non-negative: ln((C - C_w + 0.5)/(C_w + 0.5) + 1).
    pub fn idf(&self, t: TermId) -> f64 {
        let c = self.doc_count() as f64;
        let cw = self.postings(t).len() as f64;
        ((c - cw + 0.5) / (cw + 0.5) + 1.0).ln()
    }

    /// Per-term BM25 contribution for one document.
    pub fn bm25_term(&self, t: TermId, tf: u32, doc: usize) -> f64 {
        let tf = tf as f64;
        let norm = self.k1 * (1.0 - self.b + self.b * self.doc_len(doc) as f64 / self.avg_len());
        self.idf(t) * tf * (self.k1 + 1.0) / (tf + norm)
    }
}

/// Per-query document ranking, descending score, ties broken by
/// ascending doc_id.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
    pub depth: usize,
}

impl RankedList {
    pub fn doc_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|(d, _)| d.as_str()).collect()
    }

    /// TREC run format: `query_id Q0 doc_id rank score run_tag`.
    pub fn write_trec<W: Write>(&self, w: &mut W, run_tag: &str) -> std::io::Result<()> {
        for (rank, (doc_id, score)) in self.entries.iter().enumerate() {
            writeln!(
                w,
                "{} Q0 {} {} {:.6} {}",
                self.query_id,
                doc_id,
                rank + 1,
                score,
                run_tag
            )?;
        }
        Ok(())
    }
}

/// Read a TREC run file back into per-query rankings, ordered by rank.
/// Queries come back sorted by query_id.
pub fn read_trec_run(path: &std::path::Path) -> Result<Vec<RankedList>> {
    let data = crate::corpus::read_utf8(path)?;
    let mut rows: Vec<(String, usize, String, f64)> = Vec::new();
    for (lineno, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = (|| {
            if fields.len() != 6 || fields[1] != "Q0" {
                return None;
            }
            let rank: usize = fields[3].parse().ok()?;
            let score: f64 = fields[4].parse().ok()?;
            Some((fields[0].to_string(), rank, fields[2].to_string(), score))
        })();
        match parsed {
            Some(row) => rows.push(row),
            None => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected `query_id Q0 doc_id rank score tag`".to_string(),
                })
            }
        }
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<RankedList> = Vec::new();
    for (query_id, _, doc_id, score) in rows {
        match out.last_mut() {
            Some(last) if last.query_id == query_id => {
                last.entries.push((doc_id, score));
                last.depth += 1;
            }
            _ => out.push(RankedList {
                query_id,
                entries: vec![(doc_id, score)],
                depth: 1,
            }),
        }
    }
    Ok(out)
}

pub const INDEX_MAGIC: &str = "QA4PRF-IDX v1";

/// Persist the tokenized corpus plus index parameters as a versioned text
/// artifact. Postings are cheap to rebuild, so only documents are stored.
pub fn save_index_artifact(path: &std::path::Path, corpus: &Corpus, index: &InvertedIndex) -> Result<()> {
    use crate::corpus::StemmerChoice;
    let mut buf = String::new();
    buf.push_str(INDEX_MAGIC);
    buf.push('\n');
    let stemmer = match corpus.config.stemmer {
        StemmerChoice::Suffix => "suffix",
        StemmerChoice::Identity => "identity",
    };
    buf.push_str(&format!(
        "k1={:.17e} b={:.17e} lowercase={} stemmer={} stopwords={} docs={}\n",
        index.k1,
        index.b,
        corpus.config.lowercase,
        stemmer,
        corpus.config.stopwords.len(),
        corpus.doc_count()
    ));
    for w in &corpus.config.stopwords {
        buf.push_str(w);
        buf.push('\n');
    }
    for doc in &corpus.docs {
        buf.push_str(&format!("doc\t{}\t{}\n", doc.doc_id, doc.tokens.len()));
        let toks: Vec<&str> = doc.tokens.iter().map(|&t| corpus.vocab.term(t)).collect();
        buf.push_str(&toks.join(" "));
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load an index artifact back into a corpus (with its original
/// preprocessing config, so queries are processed identically) and a
/// freshly rebuilt inverted index.
pub fn load_index_artifact(path: &std::path::Path) -> Result<(Corpus, InvertedIndex)> {
    use crate::corpus::{build_corpus, PreprocessConfig, StemmerChoice};
    let data = crate::corpus::read_utf8(path)?;
    let p = path.display().to_string();
    let err = |msg: String| Error::Checkpoint {
        path: p.clone(),
        msg,
    };
    let mut lines = data.lines();
    let first = lines.next().ok_or_else(|| err("empty artifact".into()))?;
    if first != INDEX_MAGIC {
        return Err(err(format!("bad magic `{first}`, expected `{INDEX_MAGIC}`")));
    }
    let mut hyper: HashMap<&str, &str> = HashMap::new();
    for pair in lines
        .next()
        .ok_or_else(|| err("missing parameter line".into()))?
        .split_whitespace()
    {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| err(format!("bad parameter `{pair}`")))?;
        hyper.insert(k, v);
    }
    let field = |k: &str| hyper.get(k).copied().ok_or_else(|| err(format!("missing `{k}`")));
    let k1: f64 = field("k1")?.parse().map_err(|_| err("bad k1".into()))?;
    let b: f64 = field("b")?.parse().map_err(|_| err("bad b".into()))?;
    let lowercase: bool = field("lowercase")?
        .parse()
        .map_err(|_| err("bad lowercase".into()))?;
    let stemmer = match field("stemmer")? {
        "suffix" => StemmerChoice::Suffix,
        "identity" => StemmerChoice::Identity,
        other => return Err(err(format!("unknown stemmer `{other}`"))),
    };
    let n_stop: usize = field("stopwords")?
        .parse()
        .map_err(|_| err("bad stopword count".into()))?;
    let n_docs: usize = field("docs")?.parse().map_err(|_| err("bad doc count".into()))?;
    let mut stopwords = Vec::with_capacity(n_stop);
    for _ in 0..n_stop {
        stopwords.push(
            lines
                .next()
                .ok_or_else(|| err("truncated stopword list".into()))?
                .to_string(),
        );
    }
    let mut records: Vec<(String, String)> = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        let header = lines.next().ok_or_else(|| err("truncated document list".into()))?;
        let mut it = header.split('\t');
        if it.next() != Some("doc") {
            return Err(err(format!("bad document header `{header}`")));
        }
        let doc_id = it
            .next()
            .ok_or_else(|| err(format!("bad document header `{header}`")))?;
        let len: usize = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err(format!("bad document header `{header}`")))?;
        let body = lines
            .next()
            .ok_or_else(|| err(format!("truncated document `{doc_id}`")))?;
        if body.split_whitespace().count() != len {
            return Err(err(format!("document `{doc_id}` has wrong token count")));
        }
        records.push((doc_id.to_string(), body.to_string()));
    }
    // The stored tokens are already preprocessed; rebuild verbatim, then
    // restore the original config so query processing matches.
    let mut corpus = build_corpus(
        records,
        PreprocessConfig {
            stopwords: vec![],
            stemmer: StemmerChoice::Identity,
            lowercase: false,
        },
    )?;
    corpus.config = PreprocessConfig {
        stopwords,
        stemmer,
        lowercase,
    };
    let index = InvertedIndex::build(&corpus, k1, b);
    Ok((corpus, index))
}

/// Expanded query as term-id -> mass. Masses are not renormalized;
/// BM25 ranking is invariant under positive scaling.
#[derive(Debug, Clone, Default)]
pub struct WeightedQuery {
    pub masses: Vec<(TermId, f64)>,
}

impl WeightedQuery {
    pub fn has_positive_mass(&self) -> bool {
        self.masses.iter().any(|&(_, m)| m > 0.0)
    }
}

/// Full BM25 score of a document against a plain query.
pub fn bm25_score(index: &InvertedIndex, corpus: &Corpus, q: &Query, doc: usize) -> f64 {
    let mut distinct: Vec<TermId> = q.tokens.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let d = &corpus.docs[doc];
    distinct
        .iter()
        .map(|&t| {
            let tf = crate::corpus::term_frequency(&d.tokens, t) as u32;
            if tf == 0 {
                0.0
            } else {
                index.bm25_term(t, tf, doc)
            }
        })
        .sum()
}

fn rank_scored(
    corpus: &Corpus,
    query_id: &str,
    scores: HashMap<usize, f64>,
    depth: usize,
) -> RankedList {
    let mut entries: Vec<(String, f64)> = scores
        .into_iter()
        .filter(|&(_, s)| s > 0.0)
        .map(|(doc, s)| (corpus.docs[doc].doc_id.clone(), s))
        .collect();
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    entries.truncate(depth);
    RankedList {
        query_id: query_id.to_string(),
        entries,
        depth,
    }
}

/// Top-`depth` documents by BM25, excluding zero scores.
pub fn retrieve(
    index: &InvertedIndex,
    corpus: &Corpus,
    q: &Query,
    depth: usize,
) -> Result<RankedList> {
    if corpus.doc_count() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut distinct: Vec<TermId> = q.tokens.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let mut scores: HashMap<usize, f64> = HashMap::new();
    for t in distinct {
        for p in index.postings(t) {
            *scores.entry(p.doc).or_insert(0.0) += index.bm25_term(t, p.tf, p.doc);
        }
    }
    Ok(rank_scored(corpus, &q.query_id, scores, depth))
}

/// Retrieval under an expanded query: score = sum over terms of
/// mass * per-term BM25 contribution. Same ordering and tie rules
/// as `retrieve`.
pub fn retrieve_weighted(
    index: &InvertedIndex,
    corpus: &Corpus,
    query_id: &str,
    wq: &WeightedQuery,
    depth: usize,
) -> Result<RankedList> {
    if corpus.doc_count() == 0 {
        return Err(Error::EmptyCorpus);
    }
    if !wq.has_positive_mass() {
        return Err(Error::EmptyWeightedQuery);
    }
    let mut scores: HashMap<usize, f64> = HashMap::new();
    for &(t, mass) in &wq.masses {
        if mass <= 0.0 {
            continue;
        }
        for p in index.postings(t) {
            *scores.entry(p.doc).or_insert(0.0) += mass * index.bm25_term(t, p.tf, p.doc);
        }
    }
    Ok(rank_scored(corpus, query_id, scores, depth))
}
