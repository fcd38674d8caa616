//! Statistical expansion-term scorer: an (M+2)-dimensional feature vector
//! per candidate term (normalized query frequency, smoothed inverse document
//! frequency, and one length-normalized frequency per feedback document)
//! feeds a two-layer sigmoid ranker trained with a pairwise loss weighted by
//! each pair's retrieval-gain difference.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{term_frequency, Document, Query, TermId, Vocabulary};
use crate::error::Error;
use crate::tape::{Tape, Var};
use crate::tensor_io;
use crate::Result;

pub const CHECKPOINT_MAGIC: &str = "QA4PRF-LMB v1";
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_SIGMA: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 1.0;

/// ln(C / (C_w + 1)), floored at zero: a term occurring in every document
/// carries no discriminative information, so it gets weight 0 instead of a
/// small negative value.
pub fn smoothed_idf(doc_count: usize, doc_freq: usize) -> f64 {
    (doc_count as f64 / (doc_freq as f64 + 1.0)).ln().max(0.0)
}

/// Per-feedback-document normalized frequency:
/// t_w^D * ln(1 + alpha * avg_len / |D|). An empty document contributes 0.
fn doc_norm_freq(tf: usize, doc_len: usize, avg_len: f64, alpha: f64) -> f64 {
    if doc_len == 0 {
        return 0.0;
    }
    tf as f64 * (1.0 + alpha * avg_len / doc_len as f64).ln()
}

/// Feature vector of a candidate term: `[v_w^Q, i_w, n_w^{D_1..D_M}]`,
/// dimension M+2 where M is the number of feedback documents.
pub fn feature_vector(
    w: TermId,
    q: &Query,
    feedback_docs: &[&Document],
    vocab: &Vocabulary,
    alpha: f64,
) -> Result<Vec<f64>> {
    if q.tokens.is_empty() {
        return Err(Error::EmptyQuery(q.query_id.clone()));
    }
    let mut fv = Vec::with_capacity(feedback_docs.len() + 2);
    fv.push(term_frequency(&q.tokens, w) as f64 / q.tokens.len() as f64);
    fv.push(smoothed_idf(vocab.doc_count(), vocab.doc_freq(w)));
    for doc in feedback_docs {
        fv.push(doc_norm_freq(
            term_frequency(&doc.tokens, w),
            doc.tokens.len(),
            vocab.avg_len(),
            alpha,
        ));
    }
    Ok(fv)
}

/// Union of the distinct terms of the feedback documents, in lexicographic
/// order of the term strings (stopwords were already removed when the
/// corpus was built).
pub fn build_candidate_set(feedback_docs: &[&Document], vocab: &Vocabulary) -> Vec<TermId> {
    let mut seen: Vec<TermId> = feedback_docs
        .iter()
        .flat_map(|d| d.tokens.iter().copied())
        .collect();
    seen.sort_by(|a, b| vocab.term(*a).cmp(vocab.term(*b)));
    seen.dedup();
    seen
}

/// Two-layer ranker: P(w|Q) = sigmoid(theta2 . relu(theta1 . fv + b1) + b2).
#[derive(Debug, Clone)]
pub struct RankerModel {
    pub input_dim: usize,
    pub hidden: usize,
    pub sigma: f64,
    /// hidden x input_dim
    pub theta1: Array2<f64>,
    /// 1 x hidden
    pub b1: Array2<f64>,
    /// 1 x hidden
    pub theta2: Array2<f64>,
    /// 1 x 1
    pub b2: Array2<f64>,
}

impl RankerModel {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        Self::with_shape(input_dim, DEFAULT_HIDDEN, DEFAULT_SIGMA, seed)
    }

    pub fn with_shape(input_dim: usize, hidden: usize, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input_dim.max(1) as f64).sqrt();
        let mut mat = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
        };
        RankerModel {
            input_dim,
            hidden,
            sigma,
            theta1: mat(hidden, input_dim),
            b1: Array2::zeros((1, hidden)),
            theta2: mat(1, hidden),
            b2: Array2::zeros((1, 1)),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("theta1".into(), &self.theta1),
            ("b1".into(), &self.b1),
            ("theta2".into(), &self.theta2),
            ("b2".into(), &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        vec![
            ("theta1".into(), &mut self.theta1),
            ("b1".into(), &mut self.b1),
            ("theta2".into(), &mut self.theta2),
            ("b2".into(), &mut self.b2),
        ]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        tensor_io::write_checkpoint(
            &mut buf,
            CHECKPOINT_MAGIC,
            &[
                ("input_dim", self.input_dim.to_string()),
                ("hidden", self.hidden.to_string()),
                ("sigma", format!("{:.16e}", self.sigma)),
            ],
            &self.tensors(),
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = crate::corpus::read_utf8(path)?;
        let p = path.display().to_string();
        let ckpt = tensor_io::read_checkpoint(&data, CHECKPOINT_MAGIC, &p)?;
        let input_dim: usize = ckpt.hyper_parse("input_dim", &p)?;
        let hidden: usize = ckpt.hyper_parse("hidden", &p)?;
        let sigma: f64 = ckpt.hyper_parse("sigma", &p)?;
        let mut model = RankerModel::with_shape(input_dim, hidden, sigma, 0);
        for (name, tensor) in model.tensors_mut() {
            *tensor = ckpt.tensor(&name, &p)?;
        }
        Ok(model)
    }
}

struct RankerVars {
    flat: Vec<Var>,
    theta1: Var,
    b1: Var,
    theta2: Var,
    b2: Var,
}

fn ranker_vars(tape: &mut Tape, model: &RankerModel) -> RankerVars {
    let theta1 = tape.leaf(model.theta1.clone());
    let b1 = tape.leaf(model.b1.clone());
    let theta2 = tape.leaf(model.theta2.clone());
    let b2 = tape.leaf(model.b2.clone());
    RankerVars {
        flat: vec![theta1, b1, theta2, b2],
        theta1,
        b1,
        theta2,
        b2,
    }
}

/// Probabilities for a K x input_dim batch of feature rows, as a K x 1
/// column on the tape.
fn forward_graph(tape: &mut Tape, x: Var, vars: &RankerVars) -> Var {
    let w1t = tape.transpose(vars.theta1);
    let h = tape.matmul(x, w1t);
    let hb = tape.add_row(h, vars.b1);
    let ha = tape.relu(hb);
    let w2t = tape.transpose(vars.theta2);
    let s = tape.matmul(ha, w2t);
    let sb = tape.add_row(s, vars.b2);
    tape.sigmoid(sb)
}

/// Score a batch of feature rows.
pub fn ranker_forward_batch(model: &RankerModel, features: &Array2<f64>) -> Result<Vec<f64>> {
    if features.ncols() != model.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "feature dimension {} does not match model input {}",
            features.ncols(),
            model.input_dim
        )));
    }
    let mut tape = Tape::new();
    let vars = ranker_vars(&mut tape, model);
    let x = tape.leaf(features.clone());
    let p = forward_graph(&mut tape, x, &vars);
    Ok(tape.value(p).column(0).to_vec())
}

/// P(w|Q) for a single feature vector.
pub fn ranker_forward(model: &RankerModel, fv: &[f64]) -> Result<f64> {
    let x = Array2::from_shape_vec((1, fv.len()), fv.to_vec())
        .expect("row vector shape always valid");
    Ok(ranker_forward_batch(model, &x)?[0])
}

/// Overflow-safe ln(1 + e^x).
fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Pairwise loss in scalar form:
/// |delta_i - delta_j| * ln(1 + exp(-sigma * (p_i - p_j))).
pub fn pairwise_loss_value(delta_i: f64, delta_j: f64, p_i: f64, p_j: f64, sigma: f64) -> f64 {
    (delta_i - delta_j).abs() * log1p_exp(-sigma * (p_i - p_j))
}

/// Pairwise loss of two candidate feature vectors under the model.
pub fn pairwise_loss(
    model: &RankerModel,
    fv_i: &[f64],
    fv_j: &[f64],
    delta_i: f64,
    delta_j: f64,
) -> Result<f64> {
    let p_i = ranker_forward(model, fv_i)?;
    let p_j = ranker_forward(model, fv_j)?;
    Ok(pairwise_loss_value(delta_i, delta_j, p_i, p_j, model.sigma))
}

/// A preferred/dispreferred index pair into a feature matrix, weighted by
/// the gain difference |delta_hi - delta_lo|.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermPair {
    pub hi: usize,
    pub lo: usize,
    pub weight: f64,
}

/// Candidate features and retrieval-gain labels for one training query.
#[derive(Debug, Clone)]
pub struct RankerExample {
    pub query_id: String,
    /// Candidate term strings, used only for deterministic tie-breaking.
    pub terms: Vec<String>,
    /// One row per candidate, dimension M+2.
    pub features: Array2<f64>,
    pub delta_ndcg: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RankerTrainOpts {
    pub learning_rate: f64,
    pub epochs: usize,
    pub pairs_per_query: usize,
    /// Relevant-set size; the terms with the largest gain.
    pub relevant_n: usize,
    pub seed: u64,
}

impl Default for RankerTrainOpts {
    fn default() -> Self {
        RankerTrainOpts {
            learning_rate: 1e-2,
            epochs: 100,
            pairs_per_query: 50,
            relevant_n: 60,
            seed: 0,
        }
    }
}

/// Loss and parameter gradients for one query's pair batch. Pairs are
/// sorted into canonical (hi, lo) order first, so any reordering of the
/// same pair multiset produces bit-identical gradients.
pub(crate) fn example_pair_grads(
    model: &RankerModel,
    features: &Array2<f64>,
    pairs: &[TermPair],
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut pairs: Vec<TermPair> = pairs.to_vec();
    pairs.sort_by(|a, b| {
        (a.hi, a.lo, a.weight)
            .partial_cmp(&(b.hi, b.lo, b.weight))
            .expect("finite pair keys")
    });

    let mut tape = Tape::new();
    let vars = ranker_vars(&mut tape, model);
    let x = tape.leaf(features.clone());
    let p = forward_graph(&mut tape, x, &vars);

    let k = features.nrows();
    let mut diff_mat = Array2::zeros((pairs.len(), k));
    let mut weights = Array2::zeros((pairs.len(), 1));
    for (row, pair) in pairs.iter().enumerate() {
        diff_mat[[row, pair.hi]] += 1.0;
        diff_mat[[row, pair.lo]] -= 1.0;
        weights[[row, 0]] = pair.weight;
    }
    let diff = tape.leaf(diff_mat);
    let wcol = tape.leaf(weights);
    let ones = tape.leaf(Array2::ones((1, pairs.len())));

    let d = tape.matmul(diff, p);
    let scaled = tape.scale(d, -model.sigma);
    let sp = tape.softplus(scaled);
    let weighted = tape.mul_elem(sp, wcol);
    let total = tape.matmul(ones, weighted);

    let loss = tape.value(total)[[0, 0]];
    if !loss.is_finite() {
        return Err(Error::NonFinite("pairwise ranking loss".to_string()));
    }
    let grads = tape.backward(total);
    let collected = vars.flat.iter().map(|&v| grads.get(v).clone()).collect();
    Ok((loss, collected))
}

/// Candidate indices ordered by gain descending, term string ascending.
fn gain_order(ex: &RankerExample) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ex.delta_ndcg.len()).collect();
    order.sort_by(|&a, &b| {
        ex.delta_ndcg[b]
            .partial_cmp(&ex.delta_ndcg[a])
            .expect("finite gains")
            .then_with(|| ex.terms[a].cmp(&ex.terms[b]))
    });
    order
}

/// Full-batch gradient descent on the pairwise loss. Per epoch, each query
/// contributes `pairs_per_query` pairs drawn from its relevant set (top
/// `relevant_n` by gain) against its irrelevant set; pairs whose gains tie
/// are dropped since their loss weight is zero. Queries with fewer than
/// `relevant_n + 1` candidates contribute no pairs. Returns the loss of
/// each epoch's batch before its update.
pub fn train_ranker(
    model: &mut RankerModel,
    examples: &[RankerExample],
    opts: &RankerTrainOpts,
) -> Result<Vec<f64>> {
    for ex in examples {
        if ex.features.nrows() != ex.delta_ndcg.len() || ex.features.nrows() != ex.terms.len() {
            return Err(Error::DimensionMismatch(format!(
                "query `{}`: {} feature rows, {} gains, {} terms",
                ex.query_id,
                ex.features.nrows(),
                ex.delta_ndcg.len(),
                ex.terms.len()
            )));
        }
        if ex.features.nrows() > 0 && ex.features.ncols() != model.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "query `{}`: feature dimension {} does not match model input {}",
                ex.query_id,
                ex.features.ncols(),
                model.input_dim
            )));
        }
    }
    let splits: Vec<Option<(Vec<usize>, Vec<usize>)>> = examples
        .iter()
        .map(|ex| {
            if ex.delta_ndcg.len() < opts.relevant_n + 1 {
                eprintln!(
                    "query `{}`: {} candidates <= relevant-set size {}, no pairs",
                    ex.query_id,
                    ex.delta_ndcg.len(),
                    opts.relevant_n
                );
                return None;
            }
            let order = gain_order(ex);
            let (rel, irr) = order.split_at(opts.relevant_n);
            Some((rel.to_vec(), irr.to_vec()))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trace = Vec::with_capacity(opts.epochs);
    for _epoch in 0..opts.epochs {
        let mut total_loss = 0.0;
        let mut acc: Vec<Array2<f64>> = model
            .tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.dim()))
            .collect();
        let mut any_pairs = false;
        for (ex, split) in examples.iter().zip(splits.iter()) {
            let Some((rel, irr)) = split else { continue };
            let mut pairs = Vec::with_capacity(opts.pairs_per_query);
            for _ in 0..opts.pairs_per_query {
                let hi = rel[rng.gen_range(0..rel.len())];
                let lo = irr[rng.gen_range(0..irr.len())];
                let weight = (ex.delta_ndcg[hi] - ex.delta_ndcg[lo]).abs();
                if weight > 0.0 {
                    pairs.push(TermPair { hi, lo, weight });
                }
            }
            if pairs.is_empty() {
                continue;
            }
            any_pairs = true;
            let (loss, grads) = example_pair_grads(model, &ex.features, &pairs)?;
            total_loss += loss;
            for (a, g) in acc.iter_mut().zip(grads) {
                *a += &g;
            }
        }
        trace.push(total_loss);
        if !any_pairs {
            continue;
        }
        for ((name, tensor), g) in model.tensors_mut().into_iter().zip(acc.iter()) {
            tensor.zip_mut_with(g, |t, &gi| *t -= opts.learning_rate * gi);
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("ranker tensor `{name}`")));
            }
        }
    }
    Ok(trace)
}

/// W_PRF(w|Q): ranker probability of each candidate term, scored in
/// parallel over an immutable model.
pub fn w_prf(
    model: &RankerModel,
    candidates: &[TermId],
    q: &Query,
    feedback_docs: &[&Document],
    vocab: &Vocabulary,
    alpha: f64,
) -> Result<HashMap<TermId, f64>> {
    candidates
        .par_iter()
        .map(|&w| {
            let fv = feature_vector(w, q, feedback_docs, vocab, alpha)?;
            Ok((w, ranker_forward(model, &fv)?))
        })
        .collect()
}

/// Compare analytic pair-batch gradients against central finite differences
/// (step 1e-5). Returns the max relative error over all parameter entries.
pub fn ranker_gradient_check(
    model: &RankerModel,
    features: &Array2<f64>,
    pairs: &[TermPair],
) -> Result<f64> {
    let (_, grads) = example_pair_grads(model, features, pairs)?;
    let h = 1e-5;
    let mut max_rel = 0.0_f64;
    let n_tensors = model.tensors().len();
    for ti in 0..n_tensors {
        let shape = model.tensors()[ti].1.dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let mut plus = model.clone();
                plus.tensors_mut()[ti].1[[r, c]] += h;
                let (lp, _) = example_pair_grads(&plus, features, pairs)?;
                let mut minus = model.clone();
                minus.tensors_mut()[ti].1[[r, c]] -= h;
                let (lm, _) = example_pair_grads(&minus, features, pairs)?;
                let fd = (lp - lm) / (2.0 * h);
                let a = grads[ti][[r, c]];
                let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-3);
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, Corpus, PreprocessConfig, StemmerChoice};
    use ndarray::array;

    fn plain_config() -> PreprocessConfig {
        PreprocessConfig {
            stemmer: StemmerChoice::Identity,
            stopwords: vec![],
            lowercase: true,
        }
    }

    fn toy_corpus() -> Corpus {
        // Four docs of length 4 each, so avg_len = 4.
        build_corpus(
            vec![
                ("d1", "apple apple apple pear"),
                ("d2", "pear plum cherry apple"),
                ("d3", "plum plum cherry cherry"),
                ("d4", "fig fig fig fig"),
            ],
            plain_config(),
        )
        .unwrap()
    }

    #[test]
    fn idf_matches_direct_evaluation() {
        assert!((smoothed_idf(100, 9) - 10.0_f64.ln()).abs() < 1e-12);
        assert!((10.0_f64.ln() - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn idf_floors_at_zero() {
        assert_eq!(smoothed_idf(10, 10), 0.0);
        assert_eq!(smoothed_idf(10, 9), 0.0); // ln(10/10)
    }

    #[test]
    fn idf_strictly_decreasing_below_saturation() {
        let c = 50;
        for cw in 0..c - 2 {
            assert!(smoothed_idf(c, cw) > smoothed_idf(c, cw + 1));
        }
    }

    #[test]
    fn fv_single_term_query_normalizes_to_one() {
        let corpus = toy_corpus();
        let q = corpus.query_from_text("q", "apple").unwrap();
        let apple = corpus.vocab.id("apple").unwrap();
        let d1 = corpus.doc_by_id("d1").unwrap();
        let fv = feature_vector(apple, &q, &[d1], &corpus.vocab, 1.0).unwrap();
        assert_eq!(fv.len(), 3);
        assert_eq!(fv[0], 1.0);
    }

    #[test]
    fn fv_doc_component_three_ln_two() {
        // apple appears 3 times in d1; |d1| = avg_len = 4 and alpha = 1,
        // so the component is 3 * ln 2.
        let corpus = toy_corpus();
        let q = corpus.query_from_text("q", "apple").unwrap();
        let apple = corpus.vocab.id("apple").unwrap();
        let d1 = corpus.doc_by_id("d1").unwrap();
        let fv = feature_vector(apple, &q, &[d1], &corpus.vocab, 1.0).unwrap();
        assert!((fv[2] - 3.0 * 2.0_f64.ln()).abs() < 1e-12);
        assert!((3.0 * 2.0_f64.ln() - 2.079442).abs() < 1e-6);
    }

    #[test]
    fn fv_matches_brute_force_recount() {
        let corpus = toy_corpus();
        let q = corpus.query_from_text("q", "apple pear apple").unwrap();
        let docs: Vec<&Document> = ["d2", "d3"]
            .iter()
            .map(|id| corpus.doc_by_id(id).unwrap())
            .collect();
        for (w, term) in corpus.vocab.iter() {
            let fv = feature_vector(w, &q, &docs, &corpus.vocab, 0.7).unwrap();
            // Recount everything from the raw token sequences.
            let tq = q.tokens.iter().filter(|&&t| t == w).count();
            assert!((fv[0] - tq as f64 / 3.0).abs() < 1e-12, "term {term}");
            let cw = corpus
                .docs
                .iter()
                .filter(|d| d.tokens.contains(&w))
                .count();
            let expected_idf = (4.0 / (cw as f64 + 1.0)).ln().max(0.0);
            assert!((fv[1] - expected_idf).abs() < 1e-12, "term {term}");
            for (u, doc) in docs.iter().enumerate() {
                let tf = doc.tokens.iter().filter(|&&t| t == w).count();
                let expected = tf as f64 * (1.0_f64 + 0.7 * 4.0 / 4.0).ln();
                assert!((fv[2 + u] - expected).abs() < 1e-12, "term {term} doc {u}");
            }
            assert!(fv.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn fv_zero_iff_absent_from_query() {
        let corpus = toy_corpus();
        let q = corpus.query_from_text("q", "apple pear").unwrap();
        let d1 = corpus.doc_by_id("d1").unwrap();
        for (w, _) in corpus.vocab.iter() {
            let fv = feature_vector(w, &q, &[d1], &corpus.vocab, 1.0).unwrap();
            let in_query = q.tokens.contains(&w);
            assert_eq!(fv[0] > 0.0, in_query);
        }
    }

    #[test]
    fn fv_empty_document_component_is_zero() {
        let config = PreprocessConfig {
            stemmer: StemmerChoice::Identity,
            stopwords: vec!["void".into()],
            lowercase: true,
        };
        let corpus = build_corpus(
            vec![("d1", "apple pear"), ("d2", "void void")],
            config,
        )
        .unwrap();
        let q = corpus.query_from_text("q", "apple").unwrap();
        let apple = corpus.vocab.id("apple").unwrap();
        let d2 = corpus.doc_by_id("d2").unwrap();
        assert!(d2.tokens.is_empty());
        let fv = feature_vector(apple, &q, &[d2], &corpus.vocab, 1.0).unwrap();
        assert_eq!(fv[2], 0.0);
    }

    #[test]
    fn candidate_set_identical_docs() {
        let corpus = toy_corpus();
        let d1 = corpus.doc_by_id("d1").unwrap();
        let set = build_candidate_set(&[d1, d1, d1], &corpus.vocab);
        let terms: Vec<&str> = set.iter().map(|&t| corpus.vocab.term(t)).collect();
        assert_eq!(terms, vec!["apple", "pear"]);
    }

    #[test]
    fn candidate_set_disjoint_union() {
        let corpus = build_corpus(
            vec![("a", "one two three"), ("b", "four five six seven")],
            plain_config(),
        )
        .unwrap();
        let da = corpus.doc_by_id("a").unwrap();
        let db = corpus.doc_by_id("b").unwrap();
        let set = build_candidate_set(&[da, db], &corpus.vocab);
        assert_eq!(set.len(), 7);
        let terms: Vec<&str> = set.iter().map(|&t| corpus.vocab.term(t)).collect();
        let mut sorted = terms.clone();
        sorted.sort();
        assert_eq!(terms, sorted);
    }

    #[test]
    fn candidate_set_empty() {
        let corpus = toy_corpus();
        assert!(build_candidate_set(&[], &corpus.vocab).is_empty());
    }

    #[test]
    fn forward_zero_model_is_half() {
        let mut model = RankerModel::with_shape(4, 8, 1.0, 0);
        for (_, t) in model.tensors_mut() {
            t.fill(0.0);
        }
        let p = ranker_forward(&model, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn forward_large_bias_saturates() {
        let mut model = RankerModel::with_shape(4, 8, 1.0, 0);
        for (_, t) in model.tensors_mut() {
            t.fill(0.0);
        }
        let mut last = 0.5;
        for b2 in [1.0, 5.0, 20.0] {
            model.b2[[0, 0]] = b2;
            let p = ranker_forward(&model, &[0.0; 4]).unwrap();
            assert!(p > last);
            last = p;
        }
        assert!(last > 0.9999);
    }

    #[test]
    fn forward_matches_hand_evaluation() {
        let mut model = RankerModel::with_shape(2, 2, 1.0, 0);
        model.theta1 = array![[1.0, 2.0], [-1.0, 0.5]];
        model.b1 = array![[0.1, -0.2]];
        model.theta2 = array![[0.3, 0.7]];
        model.b2 = array![[0.05]];
        let p = ranker_forward(&model, &[0.5, 1.0]).unwrap();
        // h = relu([1*0.5 + 2*1 + 0.1, -0.5 + 0.5 - 0.2]) = [2.6, 0]
        let z: f64 = 0.3 * 2.6 + 0.05;
        let expected = 1.0 / (1.0 + (-z).exp());
        assert!((p - expected).abs() < 1e-12);
    }

    #[test]
    fn forward_output_in_unit_interval() {
        let model = RankerModel::with_shape(3, 5, 1.0, 7);
        for fv in [[0.0, 0.0, 0.0], [100.0, -50.0, 3.0], [200.0, -100.0, 50.0]] {
            let p = ranker_forward(&model, &fv).unwrap();
            assert!(p > 0.0 && p < 1.0, "p = {p}");
        }
    }

    #[test]
    fn forward_dimension_mismatch_errors() {
        let model = RankerModel::with_shape(3, 5, 1.0, 7);
        assert!(matches!(
            ranker_forward(&model, &[1.0, 2.0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn pairwise_loss_zero_weight() {
        assert_eq!(pairwise_loss_value(0.4, 0.4, 0.9, 0.1, 1.0), 0.0);
    }

    #[test]
    fn pairwise_loss_equal_scores_is_ln_two() {
        let l = pairwise_loss_value(0.5, 0.2, 0.7, 0.7, 1.0);
        assert!((l - 0.3 * 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pairwise_loss_direct_evaluation() {
        let l = pairwise_loss_value(0.3, 0.1, 1.0, 0.0, 1.0);
        assert!((l - 0.2 * (1.0 + (-1.0_f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.062652).abs() < 1e-6);
    }

    #[test]
    fn pairwise_loss_nonnegative_and_monotone() {
        let mut last = f64::INFINITY;
        for diff in [-0.9, -0.5, 0.0, 0.5, 0.9] {
            let l = pairwise_loss_value(0.6, 0.1, 0.5 + diff / 2.0, 0.5 - diff / 2.0, 2.0);
            assert!(l >= 0.0);
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn pairwise_loss_model_consistent_with_scalar() {
        let model = RankerModel::with_shape(3, 4, 1.5, 3);
        let fi = [1.0, 0.0, 2.0];
        let fj = [0.0, 1.0, 0.5];
        let l = pairwise_loss(&model, &fi, &fj, 0.8, 0.3).unwrap();
        let pi = ranker_forward(&model, &fi).unwrap();
        let pj = ranker_forward(&model, &fj).unwrap();
        assert!((l - pairwise_loss_value(0.8, 0.3, pi, pj, 1.5)).abs() < 1e-15);
    }

    fn separable_example(relevant_n: usize) -> RankerExample {
        // Relevant candidates look like [1, 0], irrelevant like [0, 1].
        let k = 2 * relevant_n;
        let mut features = Array2::zeros((k, 2));
        let mut delta = vec![0.0; k];
        let mut terms = Vec::new();
        for i in 0..k {
            if i < relevant_n {
                features[[i, 0]] = 1.0;
                delta[i] = 1.0;
            } else {
                features[[i, 1]] = 1.0;
            }
            terms.push(format!("t{i:03}"));
        }
        RankerExample {
            query_id: "q".into(),
            terms,
            features,
            delta_ndcg: delta,
        }
    }

    #[test]
    fn train_zero_epochs_unchanged() {
        let mut model = RankerModel::with_shape(2, 4, 1.0, 1);
        let before = model.clone();
        let ex = separable_example(3);
        let opts = RankerTrainOpts {
            epochs: 0,
            relevant_n: 3,
            ..RankerTrainOpts::default()
        };
        let trace = train_ranker(&mut model, &[ex], &opts).unwrap();
        assert!(trace.is_empty());
        for ((_, a), (_, b)) in model.tensors().iter().zip(before.tensors().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn train_all_gains_equal_is_noop() {
        let mut model = RankerModel::with_shape(2, 4, 1.0, 1);
        let before = model.clone();
        let mut ex = separable_example(3);
        ex.delta_ndcg = vec![0.25; ex.delta_ndcg.len()];
        let opts = RankerTrainOpts {
            epochs: 10,
            relevant_n: 3,
            ..RankerTrainOpts::default()
        };
        let trace = train_ranker(&mut model, &[ex], &opts).unwrap();
        assert!(trace.iter().all(|&l| l == 0.0));
        for ((_, a), (_, b)) in model.tensors().iter().zip(before.tensors().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn train_too_few_candidates_is_noop() {
        let mut model = RankerModel::with_shape(2, 4, 1.0, 1);
        let before = model.clone();
        let ex = separable_example(2); // 4 candidates
        let opts = RankerTrainOpts {
            epochs: 5,
            relevant_n: 4,
            ..RankerTrainOpts::default()
        };
        train_ranker(&mut model, &[ex], &opts).unwrap();
        for ((_, a), (_, b)) in model.tensors().iter().zip(before.tensors().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn train_separable_toy_orders_candidates() {
        let mut model = RankerModel::with_shape(2, 8, 1.0, 5);
        let ex = separable_example(5);
        let opts = RankerTrainOpts {
            learning_rate: 0.5,
            epochs: 200,
            pairs_per_query: 40,
            relevant_n: 5,
            seed: 11,
        };
        let trace = train_ranker(&mut model, &[ex.clone()], &opts).unwrap();
        assert!(trace.last().unwrap() < trace.first().unwrap());
        let scores = ranker_forward_batch(&mut model, &ex.features).unwrap();
        let worst_rel = scores[..5].iter().cloned().fold(f64::INFINITY, f64::min);
        let best_irr = scores[5..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(
            worst_rel > best_irr,
            "worst relevant {worst_rel} vs best irrelevant {best_irr}"
        );
    }

    #[test]
    fn pair_reordering_gives_identical_gradients() {
        let model = RankerModel::with_shape(3, 4, 1.0, 9);
        let features = array![
            [1.0, 0.0, 0.5],
            [0.0, 1.0, 0.2],
            [0.3, 0.3, 0.9],
            [0.8, 0.1, 0.0]
        ];
        let pairs = vec![
            TermPair { hi: 0, lo: 1, weight: 0.4 },
            TermPair { hi: 2, lo: 3, weight: 0.1 },
            TermPair { hi: 0, lo: 3, weight: 0.7 },
            TermPair { hi: 0, lo: 1, weight: 0.4 },
        ];
        let mut shuffled = pairs.clone();
        shuffled.swap(0, 2);
        shuffled.swap(1, 3);
        let (l1, g1) = example_pair_grads(&model, &features, &pairs).unwrap();
        let (l2, g2) = example_pair_grads(&model, &features, &shuffled).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gradient_check_small_model() {
        for seed in [0, 1, 2] {
            let model = RankerModel::with_shape(5, 4, 1.0, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let features = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-1.0..1.0));
            let pairs = vec![
                TermPair { hi: 0, lo: 3, weight: 0.5 },
                TermPair { hi: 1, lo: 4, weight: 0.2 },
                TermPair { hi: 2, lo: 5, weight: 0.9 },
            ];
            let max_rel = ranker_gradient_check(&model, &features, &pairs).unwrap();
            assert!(max_rel < 1e-4, "seed {seed}: max relative error {max_rel}");
        }
    }

    #[test]
    fn w_prf_zero_model_scores_half() {
        let corpus = toy_corpus();
        let mut model = RankerModel::with_shape(3, 8, 1.0, 0);
        for (_, t) in model.tensors_mut() {
            t.fill(0.0);
        }
        let q = corpus.query_from_text("q", "apple").unwrap();
        let d1 = corpus.doc_by_id("d1").unwrap();
        let candidates = build_candidate_set(&[d1], &corpus.vocab);
        let scores = w_prf(&model, &candidates, &q, &[d1], &corpus.vocab, 1.0).unwrap();
        assert_eq!(scores.len(), 2);
        for v in scores.values() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn w_prf_identical_features_identical_scores() {
        // plum and cherry have identical counts everywhere in d3 and the
        // corpus, so their feature vectors and scores coincide.
        let corpus = toy_corpus();
        let model = RankerModel::with_shape(3, 8, 1.0, 42);
        let q = corpus.query_from_text("q", "fig").unwrap();
        let d3 = corpus.doc_by_id("d3").unwrap();
        let candidates = build_candidate_set(&[d3], &corpus.vocab);
        let scores = w_prf(&model, &candidates, &q, &[d3], &corpus.vocab, 1.0).unwrap();
        let plum = corpus.vocab.id("plum").unwrap();
        let cherry = corpus.vocab.id("cherry").unwrap();
        assert_eq!(scores[&plum], scores[&cherry]);
    }

    #[test]
    fn checkpoint_round_trip_exact() {
        let model = RankerModel::with_shape(12, 32, 1.5, 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ranker.ckpt");
        model.save(&path).unwrap();
        let loaded = RankerModel::load(&path).unwrap();
        assert_eq!(loaded.input_dim, 12);
        assert_eq!(loaded.hidden, 32);
        assert_eq!(loaded.sigma, 1.5);
        for ((_, a), (_, b)) in model.tensors().iter().zip(loaded.tensors().iter()) {
            assert_eq!(a, b);
        }
    }
}
