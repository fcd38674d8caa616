//! Synthetic test collection with a planted expansion signal: every query
//! is a single topic term whose relevant documents are initially outranked
//! by term-stuffed spam, while a rare "planted" term occurs only in the
//! strongly relevant documents. Expanding with the planted term lifts the
//! relevant documents; a ubiquitous "noise" distractor term gains nothing.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_corpus, tokenize, PreprocessConfig};
use crate::error::Error;
use crate::eval::Judgments;
use crate::expand::{delta_ndcg, ExpansionConfig};
use crate::index::InvertedIndex;
use crate::Result;

/// Shape of the generated collection. The defaults yield 520 documents
/// over 30 queries.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub seed: u64,
    pub queries: usize,
    /// Relevance-2 docs per query; they carry the planted term.
    pub strong_per_query: usize,
    /// Relevance-1 docs per query; topic term but no planted term.
    pub weak_per_query: usize,
    /// Non-relevant docs stuffed with the topic term (tf 2) per query.
    pub spam_per_query: usize,
    /// Unjudged filler documents matching no query.
    pub background_docs: usize,
    /// Filler vocabulary size.
    pub filler_vocab: usize,
    /// Tokens per normal document; spam documents are twice as long, which
    /// dampens their term-stuffing advantage enough for a single planted
    /// expansion term to overturn it.
    pub doc_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            queries: 30,
            strong_per_query: 6,
            weak_per_query: 4,
            spam_per_query: 6,
            background_docs: 40,
            filler_vocab: 300,
            doc_len: 12,
        }
    }
}

/// The generated files, as text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthOutput {
    pub corpus_text: String,
    pub queries_text: String,
    pub qrels_text: String,
    pub manifest_text: String,
}

/// One manifest row: what was planted for a query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub query_id: String,
    pub topic: String,
    pub planted: String,
}

pub const DISTRACTOR_TERM: &str = "commonnoise";

fn letters(mut n: usize, len: usize) -> String {
    let mut s = String::with_capacity(len);
    for _ in 0..len {
        s.push((b'a' + (n % 26) as u8) as char);
        n /= 26;
    }
    s
}

fn topic_term(k: usize) -> String {
    format!("topick{}", letters(k, 3))
}

fn planted_term(k: usize) -> String {
    format!("plantk{}", letters(k, 3))
}

fn junk_term(k: usize, i: usize) -> String {
    format!("junkk{}{}", letters(k, 3), letters(i, 2))
}

/// Deterministically generate the collection text. Token positions are
/// fixed: the topic term leads each on-topic document, the planted term
/// (or a filler) sits at position 1, and the distractor at position 2.
pub fn generate(spec: &SynthSpec) -> SynthOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pool: Vec<String> = Vec::with_capacity(spec.filler_vocab);
    while pool.len() < spec.filler_vocab {
        let w: String = (0..6)
            .map(|_| (b'a' + rng.gen_range(0..26u8)) as char)
            .collect();
        let w = format!("f{w}");
        if !pool.contains(&w) {
            pool.push(w);
        }
    }
    let mut pick = |rng: &mut ChaCha8Rng| pool[rng.gen_range(0..pool.len())].clone();

    let mut corpus = String::new();
    let mut queries = String::new();
    let mut qrels = String::new();
    let mut manifest = String::new();
    manifest.push_str(&format!("# seed {}\n", spec.seed));
    manifest.push_str(&format!("# distractor {DISTRACTOR_TERM}\n"));

    let fill_to = |tokens: &mut Vec<String>, len: usize, rng: &mut ChaCha8Rng,
                   pick: &mut dyn FnMut(&mut ChaCha8Rng) -> String| {
        while tokens.len() < len {
            tokens.push(pick(rng));
        }
    };

    for k in 0..spec.queries {
        let qid = format!("q{k:02}");
        let topic = topic_term(k);
        let planted = planted_term(k);
        queries.push_str(&format!("{qid}\t{topic}\n"));
        manifest.push_str(&format!("{qid}\t{topic}\t{planted}\n"));

        for i in 0..spec.strong_per_query {
            let doc_id = format!("{qid}-rel-a{i}");
            let mut toks = vec![topic.clone(), planted.clone(), DISTRACTOR_TERM.to_string()];
            fill_to(&mut toks, spec.doc_len, &mut rng, &mut pick);
            corpus.push_str(&format!("{doc_id}\t{}\n", toks.join(" ")));
            qrels.push_str(&format!("{qid} 0 {doc_id} 2\n"));
        }
        for i in 0..spec.weak_per_query {
            let doc_id = format!("{qid}-rel-w{i}");
            let mut toks = vec![topic.clone(), pick(&mut rng), DISTRACTOR_TERM.to_string()];
            fill_to(&mut toks, spec.doc_len, &mut rng, &mut pick);
            corpus.push_str(&format!("{doc_id}\t{}\n", toks.join(" ")));
            qrels.push_str(&format!("{qid} 0 {doc_id} 1\n"));
        }
        for i in 0..spec.spam_per_query {
            let doc_id = format!("{qid}-spam-{i}");
            let mut toks = vec![
                topic.clone(),
                junk_term(k, i),
                DISTRACTOR_TERM.to_string(),
                topic.clone(),
            ];
            fill_to(&mut toks, 2 * spec.doc_len, &mut rng, &mut pick);
            corpus.push_str(&format!("{doc_id}\t{}\n", toks.join(" ")));
        }
    }
    for i in 0..spec.background_docs {
        let doc_id = format!("bg-{i:03}");
        let mut toks = vec![pick(&mut rng), pick(&mut rng), DISTRACTOR_TERM.to_string()];
        fill_to(&mut toks, spec.doc_len, &mut rng, &mut pick);
        corpus.push_str(&format!("{doc_id}\t{}\n", toks.join(" ")));
    }

    SynthOutput {
        corpus_text: corpus,
        queries_text: queries,
        qrels_text: qrels,
        manifest_text: manifest,
    }
}

/// Parse manifest rows (skipping `#` header lines).
pub fn parse_manifest(text: &str) -> Vec<ManifestRow> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .filter_map(|l| {
            let mut it = l.split('\t');
            Some(ManifestRow {
                query_id: it.next()?.to_string(),
                topic: it.next()?.to_string(),
                planted: it.next()?.to_string(),
            })
        })
        .collect()
}

/// The manifest's terms after standard preprocessing, i.e. the forms that
/// actually appear in a built corpus.
pub fn canonical_term(raw: &str, config: &PreprocessConfig) -> String {
    tokenize(raw, config)
        .into_iter()
        .next()
        .unwrap_or_else(|| raw.to_string())
}

/// Generate and verify the planted signal: for every query, the planted
/// term's single-term expansion gain must be strictly positive and at
/// least the distractor's.
pub fn generate_verified(spec: &SynthSpec) -> Result<SynthOutput> {
    let out = generate(spec);
    let preprocess = PreprocessConfig::default();
    let corpus = build_corpus(
        out.corpus_text.lines().filter_map(|l| l.split_once('\t')),
        preprocess.clone(),
    )?;
    let index = InvertedIndex::build(&corpus, crate::index::DEFAULT_K1, crate::index::DEFAULT_B);
    let mut judgments = Judgments::new();
    for line in out.qrels_text.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        judgments.insert(f[0], f[2], f[3].parse().expect("generated relevance"));
    }
    let config = ExpansionConfig {
        m: 10,
        n: 5,
        depth: 50,
        ..ExpansionConfig::default()
    };
    let distractor = canonical_term(DISTRACTOR_TERM, &preprocess);
    for row in parse_manifest(&out.manifest_text) {
        let q = corpus.query_from_text(&row.query_id, &row.topic)?;
        let planted = corpus
            .vocab
            .id(&canonical_term(&row.planted, &preprocess))
            .ok_or_else(|| Error::MissingInput(format!("planted term of {}", row.query_id)))?;
        let noise = corpus
            .vocab
            .id(&distractor)
            .ok_or_else(|| Error::MissingInput("distractor term".to_string()))?;
        let d_planted = delta_ndcg(&q, planted, &index, &corpus, &judgments, &config)?;
        let d_noise = delta_ndcg(&q, noise, &index, &corpus, &judgments, &config)?;
        if d_planted <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "query {}: planted gain {d_planted} is not positive",
                row.query_id
            )));
        }
        if d_noise > d_planted {
            return Err(Error::InvalidConfig(format!(
                "query {}: distractor gain {d_noise} exceeds planted gain {d_planted}",
                row.query_id
            )));
        }
    }
    Ok(out)
}

/// Write corpus.tsv, queries.tsv, qrels.txt and manifest.tsv into `dir`.
pub fn write_files(out: &SynthOutput, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let files = [
        ("corpus.tsv", &out.corpus_text),
        ("queries.tsv", &out.queries_text),
        ("qrels.txt", &out.qrels_text),
        ("manifest.tsv", &out.manifest_text),
    ];
    let mut paths = Vec::new();
    for (name, content) in files {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))?;
        paths.push(path);
    }
    Ok(paths)
}
