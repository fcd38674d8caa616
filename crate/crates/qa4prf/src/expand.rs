//! End-to-end query expansion: the retrieval-gain oracle that labels
//! candidate terms by how much a single-term expansion changes NDCG, linear
//! interpolation of the two scorers' weights, top-N term selection, the
//! query-model update, and second-round retrieval.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::corpus::{read_utf8, term_frequency, Corpus, Document, Query, TermId};
use crate::embed::EmbeddingTable;
use crate::error::Error;
use crate::eval::{ndcg, Judgments};
use crate::index::{retrieve, retrieve_weighted, InvertedIndex, RankedList, WeightedQuery};
use crate::qa_net::{PointerModel, TrainingExample};
use crate::stat_rank::{build_candidate_set, feature_vector, RankerExample, RankerModel};
use crate::Result;

/// Expansion hyper-parameters.
#[derive(Debug, Clone)]
pub struct ExpansionConfig {
    /// Feedback documents taken from the first retrieval round.
    pub m: usize,
    /// Expansion terms added to the query.
    pub n: usize,
    /// Feedback coefficient: weight of the expansion-term mass.
    pub beta: f64,
    /// Trade-off between the pointer-network weight (gamma) and the
    /// statistical ranker weight (1 - gamma).
    pub gamma: f64,
    /// Length-normalization strength in the per-document feature.
    pub alpha: f64,
    /// Evaluation/retrieval depth for the final ranking.
    pub depth: usize,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            m: 10,
            n: 60,
            beta: 0.1,
            gamma: 0.5,
            alpha: 1.0,
            depth: 1000,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.n < 1 {
            return Err(Error::InvalidConfig(format!(
                "M and N must be at least 1 (got M={}, N={})",
                self.m, self.n
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "beta and gamma must lie in [0,1] (got beta={}, gamma={})",
                self.beta, self.gamma
            )));
        }
        if self.depth < 1 {
            return Err(Error::InvalidConfig("depth must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Query model update: P(w|Q') = (1-beta) * tf_w/|Q| + beta * [w in terms].
/// When an expansion term is also an original query term the two masses
/// add. Zero masses are pruned; BM25 ranking is scale-invariant so the
/// masses are not renormalized.
pub fn update_query(q: &Query, terms: &[TermId], beta: f64) -> WeightedQuery {
    let mut masses: BTreeMap<TermId, f64> = BTreeMap::new();
    let len = q.tokens.len() as f64;
    if len > 0.0 {
        let mut distinct: Vec<TermId> = q.tokens.clone();
        distinct.sort_unstable();
        distinct.dedup();
        for t in distinct {
            let p = term_frequency(&q.tokens, t) as f64 / len;
            masses.insert(t, (1.0 - beta) * p);
        }
    }
    for &t in terms {
        *masses.entry(t).or_insert(0.0) += beta;
    }
    WeightedQuery {
        masses: masses.into_iter().filter(|&(_, m)| m > 0.0).collect(),
    }
}

/// Second retrieval round under an expanded query. beta = 0 leaves the
/// query model unchanged, so it short-circuits to plain retrieval (which
/// also keeps the ordering exactly equal to the no-feedback run).
pub fn second_round(
    index: &InvertedIndex,
    corpus: &Corpus,
    q: &Query,
    expansion: &[TermId],
    beta: f64,
    depth: usize,
) -> Result<RankedList> {
    if beta == 0.0 || expansion.is_empty() {
        return retrieve(index, corpus, q, depth);
    }
    let wq = update_query(q, expansion, beta);
    retrieve_weighted(index, corpus, &q.query_id, &wq, depth)
}

/// NDCG change caused by expanding the query with the single term `w`.
pub fn delta_ndcg(
    q: &Query,
    w: TermId,
    index: &InvertedIndex,
    corpus: &Corpus,
    judgments: &Judgments,
    config: &ExpansionConfig,
) -> Result<f64> {
    if !judgments.contains_query(&q.query_id) {
        return Err(Error::MissingJudgments(q.query_id.clone()));
    }
    let baseline = retrieve(index, corpus, q, config.depth)?;
    let expanded = second_round(index, corpus, q, &[w], config.beta, config.depth)?;
    Ok(ndcg(&expanded, judgments, config.depth) - ndcg(&baseline, judgments, config.depth))
}

/// Cached gain labels: per training query, the NDCG change of every
/// candidate term. Stored sorted, so serialization is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTable {
    pub content_hash: String,
    rows: BTreeMap<String, BTreeMap<String, f64>>,
}

impl LabelTable {
    pub fn new(content_hash: String) -> Self {
        LabelTable {
            content_hash,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, query_id: &str, term: &str, delta: f64) {
        self.rows
            .entry(query_id.to_string())
            .or_default()
            .insert(term.to_string(), delta);
    }

    pub fn query(&self, query_id: &str) -> Option<&BTreeMap<String, f64>> {
        self.rows.get(query_id)
    }

    pub fn row_count(&self) -> usize {
        self.rows.values().map(|m| m.len()).sum()
    }

    /// `query_id<TAB>term<TAB>delta` rows under a content-hash header.
    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "# hash {}", self.content_hash)?;
        for (query_id, terms) in &self.rows {
            for (term, delta) in terms {
                writeln!(w, "{query_id}\t{term}\t{delta:.17e}")?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Load a cache, rejecting it when the stored content hash does not
    /// match the expected one (stale inputs).
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let data = read_utf8(path)?;
        let path_str = path.display().to_string();
        let mut lines = data.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            path: path_str.clone(),
            line: 1,
            msg: "empty label table".to_string(),
        })?;
        let hash = header
            .strip_prefix("# hash ")
            .ok_or_else(|| Error::Parse {
                path: path_str.clone(),
                line: 1,
                msg: "missing `# hash` header".to_string(),
            })?
            .to_string();
        if let Some(expected) = expected_hash {
            if hash != expected {
                return Err(Error::InvalidConfig(format!(
                    "label cache `{path_str}` is stale: hash {hash} != expected {expected}"
                )));
            }
        }
        let mut table = LabelTable::new(hash);
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: path_str.clone(),
                    line: lineno + 1,
                    msg: "expected `query_id<TAB>term<TAB>delta`".to_string(),
                });
            }
            let delta: f64 = fields[2].parse().map_err(|_| Error::Parse {
                path: path_str.clone(),
                line: lineno + 1,
                msg: format!("malformed delta `{}`", fields[2]),
            })?;
            table.insert(fields[0], fields[1], delta);
        }
        Ok(table)
    }
}

/// Hash of everything the label oracle depends on: corpus contents,
/// judgments, and the config fields that affect the gain computation.
pub fn label_content_hash(
    corpus: &Corpus,
    judgments: &Judgments,
    config: &ExpansionConfig,
) -> String {
    let mut hasher = Sha256::new();
    for doc in &corpus.docs {
        hasher.update(doc.doc_id.as_bytes());
        hasher.update([0u8]);
        for &t in &doc.tokens {
            hasher.update(corpus.vocab.term(t).as_bytes());
            hasher.update([1u8]);
        }
        hasher.update([2u8]);
    }
    for (q, d, r) in judgments.sorted_triples() {
        hasher.update(q.as_bytes());
        hasher.update([0u8]);
        hasher.update(d.as_bytes());
        hasher.update([0u8]);
        hasher.update(r.to_le_bytes());
    }
    hasher.update(config.m.to_le_bytes());
    hasher.update(config.beta.to_le_bytes());
    hasher.update(config.depth.to_le_bytes());
    format!("{:x}", hasher.finalize())
}

/// Feedback documents of a query: the top-M first-round results.
pub fn feedback_docs<'c>(
    q: &Query,
    index: &InvertedIndex,
    corpus: &'c Corpus,
    m: usize,
) -> Result<Vec<&'c Document>> {
    let first = retrieve(index, corpus, q, m)?;
    Ok(first
        .entries
        .iter()
        .map(|(doc_id, _)| corpus.doc_by_id(doc_id).expect("retrieved doc exists"))
        .collect())
}

/// Gain labels for every candidate term of every training query, computed
/// in parallel with deterministic (sorted) output.
pub fn generate_labels(
    queries: &[Query],
    index: &InvertedIndex,
    corpus: &Corpus,
    judgments: &Judgments,
    config: &ExpansionConfig,
) -> Result<LabelTable> {
    let per_query: Vec<(String, Vec<(String, f64)>)> = queries
        .par_iter()
        .map(|q| {
            let docs = feedback_docs(q, index, corpus, config.m)?;
            let candidates = build_candidate_set(&docs, &corpus.vocab);
            if candidates.is_empty() {
                eprintln!("query `{}`: empty candidate set, no labels", q.query_id);
            }
            let rows: Vec<(String, f64)> = candidates
                .par_iter()
                .map(|&w| {
                    let delta = delta_ndcg(q, w, index, corpus, judgments, config)?;
                    Ok((corpus.vocab.term(w).to_string(), delta))
                })
                .collect::<Result<_>>()?;
            Ok((q.query_id.clone(), rows))
        })
        .collect::<Result<_>>()?;
    let mut table = LabelTable::new(label_content_hash(corpus, judgments, config));
    for (query_id, rows) in per_query {
        for (term, delta) in rows {
            table.insert(&query_id, &term, delta);
        }
    }
    Ok(table)
}

/// W(w|Q) = gamma * W_QA + (1 - gamma) * W_PRF over the union of both key
/// sets; a term absent from one map contributes 0 there.
pub fn interpolate(
    wqa: &HashMap<TermId, f64>,
    wprf: &HashMap<TermId, f64>,
    gamma: f64,
) -> HashMap<TermId, f64> {
    let mut out: HashMap<TermId, f64> = HashMap::new();
    for (&t, &v) in wqa {
        *out.entry(t).or_insert(0.0) += gamma * v;
    }
    for (&t, &v) in wprf {
        *out.entry(t).or_insert(0.0) += (1.0 - gamma) * v;
    }
    out
}

/// Top-N terms by weight, descending; ties broken by term string
/// ascending. Fewer than N candidates returns all of them.
pub fn select_terms(weights: &HashMap<TermId, f64>, n: usize, corpus: &Corpus) -> Vec<TermId> {
    let mut terms: Vec<(TermId, f64)> = weights.iter().map(|(&t, &w)| (t, w)).collect();
    terms.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite weights")
            .then_with(|| corpus.vocab.term(a.0).cmp(corpus.vocab.term(b.0)))
    });
    terms.truncate(n);
    terms.into_iter().map(|(t, _)| t).collect()
}

/// One selected expansion term with its diagnostic scores.
#[derive(Debug, Clone)]
pub struct TermScore {
    pub term_id: TermId,
    pub term: String,
    pub weight: f64,
    pub w_qa: f64,
    pub w_prf: f64,
    /// Total occurrences across the feedback documents.
    pub tf_feedback: usize,
}

/// The ordered expansion terms of one query plus the updated query model.
#[derive(Debug, Clone)]
pub struct ExpansionResult {
    pub query_id: String,
    pub terms: Vec<TermScore>,
    pub weighted_query: WeightedQuery,
    /// Set when the first round returned nothing (or no candidates), in
    /// which case no feedback was applied.
    pub no_prf: bool,
}

impl ExpansionResult {
    /// `query_id rank term W W_QA W_PRF tf_feedback`, tab-separated.
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (rank0, t) in self.terms.iter().enumerate() {
            writeln!(
                w,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                self.query_id,
                rank0 + 1,
                t.term,
                t.weight,
                t.w_qa,
                t.w_prf,
                t.tf_feedback
            )?;
        }
        Ok(())
    }
}

/// Full expansion pipeline for one query: first-round retrieval, candidate
/// scoring by both models, interpolation, top-N selection, query update,
/// second-round retrieval. The pointer model (with embeddings) is only
/// required when gamma > 0; the ranker only when gamma < 1.
#[allow(clippy::too_many_arguments)]
pub fn expand_and_retrieve(
    q: &Query,
    index: &InvertedIndex,
    corpus: &Corpus,
    pointer: Option<(&PointerModel, &EmbeddingTable)>,
    ranker: Option<&RankerModel>,
    config: &ExpansionConfig,
) -> Result<(ExpansionResult, RankedList)> {
    config.validate()?;
    let docs = feedback_docs(q, index, corpus, config.m)?;
    let candidates = build_candidate_set(&docs, &corpus.vocab);
    if docs.is_empty() || candidates.is_empty() {
        let first = retrieve(index, corpus, q, config.depth)?;
        return Ok((
            ExpansionResult {
                query_id: q.query_id.clone(),
                terms: Vec::new(),
                weighted_query: update_query(q, &[], config.beta),
                no_prf: true,
            },
            first,
        ));
    }

    let wqa: HashMap<TermId, f64> = if config.gamma > 0.0 {
        let (model, table) = pointer.ok_or_else(|| {
            Error::MissingInput("pointer model required when gamma > 0".to_string())
        })?;
        crate::qa_net::w_qa(model, table, q, &docs)?
    } else {
        HashMap::new()
    };
    let wprf: HashMap<TermId, f64> = if config.gamma < 1.0 {
        let model = ranker.ok_or_else(|| {
            Error::MissingInput("ranker model required when gamma < 1".to_string())
        })?;
        crate::stat_rank::w_prf(model, &candidates, q, &docs, &corpus.vocab, config.alpha)?
    } else {
        HashMap::new()
    };

    let weights = interpolate(&wqa, &wprf, config.gamma);
    let selected = select_terms(&weights, config.n, corpus);
    let terms: Vec<TermScore> = selected
        .iter()
        .map(|&t| TermScore {
            term_id: t,
            term: corpus.vocab.term(t).to_string(),
            weight: weights[&t],
            w_qa: wqa.get(&t).copied().unwrap_or(0.0),
            w_prf: wprf.get(&t).copied().unwrap_or(0.0),
            tf_feedback: docs
                .iter()
                .map(|d| term_frequency(&d.tokens, t))
                .sum(),
        })
        .collect();
    let weighted_query = update_query(q, &selected, config.beta);
    let ranking = second_round(index, corpus, q, &selected, config.beta, config.depth)?;
    Ok((
        ExpansionResult {
            query_id: q.query_id.clone(),
            terms,
            weighted_query,
            no_prf: false,
        },
        ranking,
    ))
}

/// The positive term of a training query: largest gain, ties broken by
/// term string ascending. None when the query has no labels.
pub fn positive_term(labels: &LabelTable, query_id: &str, corpus: &Corpus) -> Option<TermId> {
    let row = labels.query(query_id)?;
    row.iter()
        .max_by(|(ta, va), (tb, vb)| {
            va.partial_cmp(vb)
                .expect("finite gains")
                .then_with(|| tb.cmp(ta))
        })
        .and_then(|(term, _)| corpus.vocab.id(term))
}

/// Supervised pointer examples: one per (query, feedback document)
/// containing the query's positive term; documents without it are skipped.
pub fn pointer_examples(
    queries: &[Query],
    index: &InvertedIndex,
    corpus: &Corpus,
    labels: &LabelTable,
    config: &ExpansionConfig,
    max_len: usize,
) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for q in queries {
        let Some(positive) = positive_term(labels, &q.query_id, corpus) else {
            continue;
        };
        let docs = feedback_docs(q, index, corpus, config.m)?;
        for doc in docs {
            let id = format!("{}:{}", q.query_id, doc.doc_id);
            if let Some(ex) =
                TrainingExample::new(id, q.clone(), &doc.tokens, positive, max_len)
            {
                out.push(ex);
            }
        }
    }
    Ok(out)
}

/// Ranker examples: the full candidate feature matrix and gain vector of
/// each training query, candidates in lexicographic order.
pub fn ranker_examples(
    queries: &[Query],
    index: &InvertedIndex,
    corpus: &Corpus,
    labels: &LabelTable,
    config: &ExpansionConfig,
) -> Result<Vec<RankerExample>> {
    let mut out = Vec::new();
    for q in queries {
        let Some(row) = labels.query(&q.query_id) else {
            continue;
        };
        if row.is_empty() {
            continue;
        }
        let docs = feedback_docs(q, index, corpus, config.m)?;
        let dim = docs.len() + 2;
        let mut terms = Vec::with_capacity(row.len());
        let mut delta = Vec::with_capacity(row.len());
        let mut flat = Vec::with_capacity(row.len() * dim);
        for (term, &d) in row {
            let Some(w) = corpus.vocab.id(term) else {
                continue;
            };
            let fv = feature_vector(w, q, &docs, &corpus.vocab, config.alpha)?;
            terms.push(term.clone());
            delta.push(d);
            flat.extend(fv);
        }
        let features =
            ndarray::Array2::from_shape_vec((terms.len(), dim), flat).expect("row-major features");
        out.push(RankerExample {
            query_id: q.query_id.clone(),
            terms,
            features,
            delta_ndcg: delta,
        });
    }
    Ok(out)
}

/// Everything needed to train both scorers from a label table.
#[derive(Debug, Clone)]
pub struct TrainBundleOpts {
    pub embed_dim: usize,
    pub embed_seed: u64,
    pub max_len: usize,
    pub pointer: crate::qa_net::TrainOpts,
    pub ranker: crate::stat_rank::RankerTrainOpts,
}

impl Default for TrainBundleOpts {
    fn default() -> Self {
        TrainBundleOpts {
            embed_dim: 64,
            embed_seed: 0,
            max_len: 256,
            pointer: crate::qa_net::TrainOpts::default(),
            ranker: crate::stat_rank::RankerTrainOpts::default(),
        }
    }
}

#[derive(Debug)]
pub struct TrainedModels {
    pub pointer: PointerModel,
    pub embeddings: EmbeddingTable,
    pub ranker: RankerModel,
    pub pointer_trace: Vec<f64>,
    pub ranker_trace: Vec<f64>,
}

/// Train the pointer network and the statistical ranker on the given
/// training queries, building training examples from the label table.
pub fn train_models(
    queries: &[Query],
    index: &InvertedIndex,
    corpus: &Corpus,
    labels: &LabelTable,
    config: &ExpansionConfig,
    opts: &TrainBundleOpts,
) -> Result<TrainedModels> {
    config.validate()?;
    let embeddings = EmbeddingTable::random(&corpus.vocab, opts.embed_dim, opts.embed_seed);

    let ptr_examples = pointer_examples(queries, index, corpus, labels, config, opts.max_len)?;
    if ptr_examples.is_empty() {
        return Err(Error::MissingInput(
            "no pointer training examples: no feedback document contains its query's best term"
                .to_string(),
        ));
    }
    let mut pointer = PointerModel::with_shape(
        opts.embed_dim,
        4,
        2 * opts.embed_dim,
        opts.max_len,
        opts.embed_seed,
    )?;
    let pointer_trace =
        crate::qa_net::train_pointer(&mut pointer, &embeddings, &ptr_examples, &opts.pointer)?;

    let rk_examples = ranker_examples(queries, index, corpus, labels, config)?;
    if rk_examples.is_empty() {
        return Err(Error::MissingInput(
            "no ranker training examples: the label table covers none of the training queries"
                .to_string(),
        ));
    }
    let input_dim = rk_examples[0].features.ncols();
    let mut ranker = RankerModel::new(input_dim, opts.embed_seed);
    let mut ranker_opts = opts.ranker.clone();
    ranker_opts.relevant_n = config.n;
    let ranker_trace = crate::stat_rank::train_ranker(&mut ranker, &rk_examples, &ranker_opts)?;

    Ok(TrainedModels {
        pointer,
        embeddings,
        ranker,
        pointer_trace,
        ranker_trace,
    })
}
