//! Retrieval evaluation: graded relevance judgments, NDCG / average
//! precision / precision-at-k, a robustness index against a baseline run,
//! the Wilcoxon signed-rank test, seeded k-fold cross-validation, and a
//! hyper-parameter sweep driver.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::{read_utf8, Query};
use crate::error::Error;
use crate::index::RankedList;
use crate::Result;

/// Graded relevance per (query_id, doc_id); unjudged documents are
/// relevance 0 by convention.
#[derive(Debug, Clone, Default)]
pub struct Judgments {
    map: HashMap<String, HashMap<String, u32>>,
}

impl Judgments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: &str, doc_id: &str, rel: u32) {
        self.map
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), rel);
    }

    /// TREC qrels: whitespace-separated `query_id 0 doc_id relevance`.
    pub fn load(path: &Path) -> Result<Self> {
        let data = read_utf8(path)?;
        let mut out = Judgments::new();
        for (lineno, line) in data.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: "expected `query_id 0 doc_id relevance`".to_string(),
                });
            }
            let rel: u32 = fields[3].parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("malformed relevance `{}`", fields[3]),
            })?;
            out.insert(fields[0], fields[2], rel);
        }
        Ok(out)
    }

    pub fn rel(&self, query_id: &str, doc_id: &str) -> u32 {
        self.map
            .get(query_id)
            .and_then(|docs| docs.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.map.contains_key(query_id)
    }

    pub fn judged_rels(&self, query_id: &str) -> Vec<u32> {
        self.map
            .get(query_id)
            .map(|docs| docs.values().copied().collect())
            .unwrap_or_default()
    }

    pub fn query_count(&self) -> usize {
        self.map.len()
    }

    /// All (query_id, doc_id, relevance) triples in sorted order, for
    /// deterministic hashing and serialization.
    pub fn sorted_triples(&self) -> Vec<(String, String, u32)> {
        let mut out: Vec<(String, String, u32)> = self
            .map
            .iter()
            .flat_map(|(q, docs)| {
                docs.iter()
                    .map(move |(d, &r)| (q.clone(), d.clone(), r))
            })
            .collect();
        out.sort();
        out
    }
}

fn gain(rel: u32) -> f64 {
    2.0_f64.powi(rel as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// NDCG at `depth` with exponential gain (2^rel - 1) and log2(r+1)
/// discount. IDCG sorts the judged relevances descending. A query with no
/// relevant documents scores 0.
pub fn ndcg(ranking: &RankedList, judgments: &Judgments, depth: usize) -> f64 {
    let mut ideal = judgments.judged_rels(&ranking.query_id);
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(depth)
        .enumerate()
        .map(|(i, &r)| gain(r) / discount(i + 1))
        .sum();
    if idcg == 0.0 {
        return 0.0;
    }
    let dcg: f64 = ranking
        .entries
        .iter()
        .take(depth)
        .enumerate()
        .map(|(i, (doc_id, _))| gain(judgments.rel(&ranking.query_id, doc_id)) / discount(i + 1))
        .sum();
    dcg / idcg
}

/// Average precision at `depth`, binary-izing graded labels at rel >= 1.
/// Normalized by the total number of judged relevant documents.
pub fn average_precision(ranking: &RankedList, judgments: &Judgments, depth: usize) -> f64 {
    let total_relevant = judgments
        .judged_rels(&ranking.query_id)
        .iter()
        .filter(|&&r| r >= 1)
        .count();
    if total_relevant == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, (doc_id, _)) in ranking.entries.iter().take(depth).enumerate() {
        if judgments.rel(&ranking.query_id, doc_id) >= 1 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total_relevant as f64
}

/// Fraction of the top k that is relevant; rankings shorter than k are
/// padded with non-relevant documents (i.e. the denominator stays k).
pub fn precision_at(ranking: &RankedList, judgments: &Judgments, k: usize) -> f64 {
    let hits = ranking
        .entries
        .iter()
        .take(k)
        .filter(|(doc_id, _)| judgments.rel(&ranking.query_id, doc_id) >= 1)
        .count();
    hits as f64 / k as f64
}

/// (n_plus - n_minus) / |Q| over paired per-query values; exact ties count
/// in neither direction. Inputs are (query_id, value) pairs and must cover
/// the same query set.
pub fn robustness_index(system: &[(String, f64)], baseline: &[(String, f64)]) -> Result<f64> {
    if system.is_empty() {
        return Err(Error::QuerySetMismatch("empty query set".to_string()));
    }
    let base: HashMap<&str, f64> = baseline.iter().map(|(q, v)| (q.as_str(), *v)).collect();
    if base.len() != system.len() || system.len() != baseline.len() {
        return Err(Error::QuerySetMismatch(format!(
            "{} system queries vs {} baseline queries",
            system.len(),
            baseline.len()
        )));
    }
    let mut plus = 0i64;
    let mut minus = 0i64;
    for (q, v) in system {
        let Some(&b) = base.get(q.as_str()) else {
            return Err(Error::QuerySetMismatch(format!(
                "query `{q}` missing from baseline"
            )));
        };
        if *v > b {
            plus += 1;
        } else if *v < b {
            minus += 1;
        }
    }
    Ok((plus - minus) as f64 / system.len() as f64)
}

/// Average ranks of the absolute differences, doubled so that tied
/// (half-integer) average ranks stay integral.
fn doubled_ranks(abs_diffs: &[f64]) -> Vec<u64> {
    let n = abs_diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs_diffs[a].partial_cmp(&abs_diffs[b]).expect("finite"));
    let mut out = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_diffs[order[j + 1]] == abs_diffs[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share the average; doubled sum = (i+1) + (j+1).
        let doubled_avg = (i + j + 2) as u64;
        for &idx in &order[i..=j] {
            out[idx] = doubled_avg;
        }
        i = j + 1;
    }
    out
}

/// P(W+ <= threshold) under the null, exactly, by dynamic programming over
/// the 2^n equiprobable sign assignments. Works on doubled ranks.
fn exact_cdf(doubled: &[u64], threshold: u64) -> f64 {
    let total: u64 = doubled.iter().sum();
    let cap = threshold.min(total);
    let mut dp = vec![0.0f64; cap as usize + 1];
    dp[0] = 1.0;
    for &r in doubled {
        let r = r as usize;
        for s in (0..dp.len()).rev() {
            if s >= r {
                dp[s] += dp[s - r];
            }
        }
    }
    dp.iter().sum::<f64>() / 2.0f64.powi(doubled.len() as i32)
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped; tied absolute differences get average ranks. Exact null
/// distribution for n <= 25, normal approximation with continuity and tie
/// correction beyond. Returns (W = min rank sum, p-value).
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::QuerySetMismatch(format!(
            "paired samples of different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n < 5 {
        return Err(Error::Underpowered(n));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let doubled = doubled_ranks(&abs);
    let w_plus_doubled: u64 = diffs
        .iter()
        .zip(doubled.iter())
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let total_doubled: u64 = doubled.iter().sum();
    let w_minus_doubled = total_doubled - w_plus_doubled;
    let w_doubled = w_plus_doubled.min(w_minus_doubled);
    let statistic = w_doubled as f64 / 2.0;

    let p = if n <= 25 {
        (2.0 * exact_cdf(&doubled, w_doubled)).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // Tie correction: subtract sum(t^3 - t)/48 over tie groups.
        let mut tie_term = 0.0;
        let mut sorted = abs.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (statistic - mean + 0.5) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (2.0 * normal.cdf(z)).min(1.0)
    };
    Ok((statistic, p))
}

/// Metrics for one query.
#[derive(Debug, Clone)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ap: f64,
    pub ndcg: f64,
    pub p_at: f64,
}

/// Per-query metrics plus aggregate means, with optional comparison
/// figures against a baseline run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<QueryMetrics>,
    pub depth: usize,
    pub p_at_k: usize,
    pub mean_ap: f64,
    pub mean_ndcg: f64,
    pub mean_p_at: f64,
    pub ri: Option<f64>,
    pub wilcoxon_p: Option<f64>,
}

impl EvalReport {
    /// Score every ranking; rows are sorted by query_id so aggregation is
    /// order-independent.
    pub fn compute(
        rankings: &[RankedList],
        judgments: &Judgments,
        depth: usize,
        p_at_k: usize,
    ) -> Self {
        let mut rows: Vec<QueryMetrics> = rankings
            .par_iter()
            .map(|r| QueryMetrics {
                query_id: r.query_id.clone(),
                ap: average_precision(r, judgments, depth),
                ndcg: ndcg(r, judgments, depth),
                p_at: precision_at(r, judgments, p_at_k),
            })
            .collect();
        rows.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        let n = rows.len().max(1) as f64;
        let mean_ap = rows.iter().map(|r| r.ap).sum::<f64>() / n;
        let mean_ndcg = rows.iter().map(|r| r.ndcg).sum::<f64>() / n;
        let mean_p_at = rows.iter().map(|r| r.p_at).sum::<f64>() / n;
        EvalReport {
            rows,
            depth,
            p_at_k,
            mean_ap,
            mean_ndcg,
            mean_p_at,
            ri: None,
            wilcoxon_p: None,
        }
    }

    /// Fill in the robustness index and Wilcoxon p-value against a
    /// baseline report over the same query set. An underpowered Wilcoxon
    /// (fewer than 5 nonzero NDCG differences) leaves the p-value unset.
    pub fn compare_to(&mut self, baseline: &EvalReport) -> Result<()> {
        let sys: Vec<(String, f64)> = self
            .rows
            .iter()
            .map(|r| (r.query_id.clone(), r.ndcg))
            .collect();
        let base: Vec<(String, f64)> = baseline
            .rows
            .iter()
            .map(|r| (r.query_id.clone(), r.ndcg))
            .collect();
        self.ri = Some(robustness_index(&sys, &base)?);
        let a: Vec<f64> = self.rows.iter().map(|r| r.ndcg).collect();
        let b: Vec<f64> = baseline.rows.iter().map(|r| r.ndcg).collect();
        self.wilcoxon_p = match wilcoxon_signed_rank(&a, &b) {
            Ok((_, p)) => Some(p),
            Err(Error::Underpowered(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(())
    }

    /// TSV: header, one row per query, a final `ALL` aggregate row, and
    /// `#`-prefixed footer lines for the baseline comparison when present.
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(
            w,
            "query_id\tap@{}\tndcg@{}\tp@{}",
            self.depth, self.depth, self.p_at_k
        )?;
        for row in &self.rows {
            writeln!(
                w,
                "{}\t{:.6}\t{:.6}\t{:.6}",
                row.query_id, row.ap, row.ndcg, row.p_at
            )?;
        }
        writeln!(
            w,
            "ALL\t{:.6}\t{:.6}\t{:.6}",
            self.mean_ap, self.mean_ndcg, self.mean_p_at
        )?;
        if let Some(ri) = self.ri {
            writeln!(w, "# ri\t{ri:.6}")?;
        }
        if let Some(p) = self.wilcoxon_p {
            writeln!(w, "# wilcoxon_p\t{p:.6}")?;
        }
        Ok(())
    }
}

/// Deterministic fold assignment: query indices shuffled by the seed, then
/// split into `folds` contiguous chunks whose sizes differ by at most one.
pub fn fold_assignment(n_queries: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_queries).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = n_queries / folds;
    let extra = n_queries % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    out
}

/// Per-fold and pooled evaluation.
#[derive(Debug)]
pub struct CrossValidation {
    pub fold_reports: Vec<EvalReport>,
    pub pooled: EvalReport,
    /// query_ids of each fold's test set.
    pub fold_test_ids: Vec<Vec<String>>,
}

/// k-fold cross-validation: each fold is the test set once; `factory`
/// trains a pipeline on the remaining queries and returns a scorer that
/// ranks a single test query.
pub fn cross_validate<F, P>(
    queries: &[Query],
    judgments: &Judgments,
    folds: usize,
    seed: u64,
    depth: usize,
    p_at_k: usize,
    mut factory: F,
) -> Result<CrossValidation>
where
    F: FnMut(&[Query]) -> Result<P>,
    P: Fn(&Query) -> Result<RankedList>,
{
    if folds == 0 || queries.len() < folds {
        return Err(Error::InvalidConfig(format!(
            "{} folds over {} queries",
            folds,
            queries.len()
        )));
    }
    let assignment = fold_assignment(queries.len(), folds, seed);
    let mut fold_reports = Vec::with_capacity(folds);
    let mut fold_test_ids = Vec::with_capacity(folds);
    let mut all_rankings = Vec::with_capacity(queries.len());
    for test_idx in &assignment {
        let test_set: Vec<&Query> = test_idx.iter().map(|&i| &queries[i]).collect();
        let train_set: Vec<Query> = queries
            .iter()
            .enumerate()
            .filter(|(i, _)| !test_idx.contains(i))
            .map(|(_, q)| q.clone())
            .collect();
        let pipeline = factory(&train_set)?;
        let mut rankings = Vec::with_capacity(test_set.len());
        for q in &test_set {
            rankings.push(pipeline(q)?);
        }
        fold_reports.push(EvalReport::compute(&rankings, judgments, depth, p_at_k));
        fold_test_ids.push(test_set.iter().map(|q| q.query_id.clone()).collect());
        all_rankings.extend(rankings);
    }
    let pooled = EvalReport::compute(&all_rankings, judgments, depth, p_at_k);
    Ok(CrossValidation {
        fold_reports,
        pooled,
        fold_test_ids,
    })
}

/// One evaluated grid point of the (M, N, beta, gamma) sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub m: usize,
    pub n: usize,
    pub beta: f64,
    pub gamma: f64,
    pub mean_ap: f64,
    pub mean_ndcg: f64,
    pub mean_p_at: f64,
}

/// Evaluate every grid point with the supplied runner and report the
/// results plus the index of the best point by mean average precision
/// (ties go to the earliest grid point).
pub fn sweep<F>(grid: &[(usize, usize, f64, f64)], mut run: F) -> Result<(Vec<SweepPoint>, usize)>
where
    F: FnMut(usize, usize, f64, f64) -> Result<EvalReport>,
{
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty sweep grid".to_string()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &(m, n, beta, gamma) in grid {
        let report = run(m, n, beta, gamma)?;
        points.push(SweepPoint {
            m,
            n,
            beta,
            gamma,
            mean_ap: report.mean_ap,
            mean_ndcg: report.mean_ndcg,
            mean_p_at: report.mean_p_at,
        });
    }
    let best = points
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.mean_ap
                .partial_cmp(&b.mean_ap)
                .expect("finite map")
                .then(ib.cmp(ia))
        })
        .expect("non-empty grid")
        .0;
    Ok((points, best))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(query_id: &str, docs: &[&str]) -> RankedList {
        RankedList {
            query_id: query_id.to_string(),
            entries: docs
                .iter()
                .enumerate()
                .map(|(i, d)| (d.to_string(), 1.0 / (i + 1) as f64))
                .collect(),
            depth: docs.len().max(1),
        }
    }

    fn judged(query_id: &str, rels: &[(&str, u32)]) -> Judgments {
        let mut j = Judgments::new();
        for (doc, rel) in rels {
            j.insert(query_id, doc, *rel);
        }
        j
    }

    #[test]
    fn ndcg_ideal_is_one() {
        let j = judged("q", &[("a", 3), ("b", 2), ("c", 2), ("d", 0)]);
        // Any tie resolution among the grade-2 docs is still ideal.
        for order in [["a", "b", "c", "d"], ["a", "c", "b", "d"]] {
            let r = ranking("q", &order);
            assert!((ndcg(&r, &j, 10) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ndcg_binary_direct_value() {
        let j = judged("q", &[("rel", 1)]);
        let r = ranking("q", &["junk", "rel"]);
        let expected = (1.0 / 3.0_f64.log2()) / 1.0;
        assert!((ndcg(&r, &j, 2) - expected).abs() < 1e-12);
        assert!((expected - 0.630930).abs() < 1e-6);
    }

    #[test]
    fn ndcg_no_relevant_is_zero() {
        let j = judged("q", &[("a", 0)]);
        let r = ranking("q", &["a", "b"]);
        assert_eq!(ndcg(&r, &j, 10), 0.0);
        let empty = Judgments::new();
        assert_eq!(ndcg(&r, &empty, 10), 0.0);
    }

    #[test]
    fn ndcg_depth_truncates_both_sides() {
        let j = judged("q", &[("a", 1), ("b", 1), ("c", 1)]);
        // Depth 1 with a relevant doc on top: DCG = IDCG at depth 1.
        let r = ranking("q", &["a", "x", "y"]);
        assert!((ndcg(&r, &j, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_perfect_is_one() {
        let j = judged("q", &[("a", 1), ("b", 2)]);
        let r = ranking("q", &["b", "a", "x"]);
        assert!((average_precision(&r, &j, 10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_ranks_one_and_three() {
        let j = judged("q", &[("a", 1), ("b", 1)]);
        let r = ranking("q", &["a", "x", "b"]);
        let expected = (1.0 + 2.0 / 3.0) / 2.0;
        assert!((average_precision(&r, &j, 10) - expected).abs() < 1e-12);
        assert!((expected - 0.833333).abs() < 1e-6);
    }

    #[test]
    fn ap_no_relevant_is_zero() {
        let j = Judgments::new();
        let r = ranking("q", &["a"]);
        assert_eq!(average_precision(&r, &j, 10), 0.0);
    }

    #[test]
    fn ap_matches_brute_force() {
        // Independent implementation that walks ranks directly.
        let j = judged(
            "q",
            &[("d0", 1), ("d3", 2), ("d5", 1), ("d7", 1), ("d9", 0)],
        );
        let docs: Vec<String> = (0..12).map(|i| format!("d{i}")).collect();
        let doc_refs: Vec<&str> = docs.iter().map(|s| s.as_str()).collect();
        let r = ranking("q", &doc_refs);
        let mut brute = 0.0;
        let mut hits = 0;
        for (rank0, d) in doc_refs.iter().enumerate() {
            if j.rel("q", d) >= 1 {
                hits += 1;
                brute += hits as f64 / (rank0 + 1) as f64;
            }
        }
        brute /= 4.0;
        assert!((average_precision(&r, &j, 100) - brute).abs() < 1e-12);
    }

    #[test]
    fn p_at_k_examples() {
        let j = judged("q", &[("a", 1), ("b", 1)]);
        assert_eq!(precision_at(&ranking("q", &["a", "b"]), &j, 2), 1.0);
        assert_eq!(
            precision_at(&ranking("q", &["a", "x", "y", "b", "z"]), &j, 5),
            0.4
        );
        assert_eq!(precision_at(&ranking("q", &[]), &j, 5), 0.0);
        // Short ranking pads with non-relevant.
        assert_eq!(precision_at(&ranking("q", &["a"]), &j, 4), 0.25);
    }

    #[test]
    fn metrics_invariant_under_doc_relabeling() {
        let j1 = judged("q", &[("a", 2), ("b", 1), ("c", 0)]);
        let r1 = ranking("q", &["c", "a", "b"]);
        let j2 = judged("q", &[("x", 2), ("y", 1), ("z", 0)]);
        let r2 = ranking("q", &["z", "x", "y"]);
        assert_eq!(ndcg(&r1, &j1, 10), ndcg(&r2, &j2, 10));
        assert_eq!(
            average_precision(&r1, &j1, 10),
            average_precision(&r2, &j2, 10)
        );
        assert_eq!(precision_at(&r1, &j1, 2), precision_at(&r2, &j2, 2));
    }

    fn pairs(vals: &[f64]) -> Vec<(String, f64)> {
        vals.iter()
            .enumerate()
            .map(|(i, v)| (format!("q{i}"), *v))
            .collect()
    }

    #[test]
    fn ri_identical_is_zero() {
        let a = pairs(&[0.5, 0.6, 0.7]);
        assert_eq!(robustness_index(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ri_five_better_two_worse() {
        let base = pairs(&[0.5; 10]);
        let mut sys = base.clone();
        for item in sys.iter_mut().take(5) {
            item.1 = 0.9;
        }
        for item in sys.iter_mut().skip(5).take(2) {
            item.1 = 0.1;
        }
        assert!((robustness_index(&sys, &base).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ri_all_better_is_one() {
        let base = pairs(&[0.1, 0.2, 0.3]);
        let sys = pairs(&[0.2, 0.3, 0.4]);
        assert_eq!(robustness_index(&sys, &base).unwrap(), 1.0);
    }

    #[test]
    fn ri_mismatched_sets_error() {
        let a = pairs(&[0.1, 0.2]);
        let mut b = pairs(&[0.1, 0.2]);
        b[1].0 = "other".to_string();
        assert!(robustness_index(&a, &b).is_err());
    }

    #[test]
    fn wilcoxon_all_zero_differences_error() {
        let a = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert!(matches!(
            wilcoxon_signed_rank(&a, &a),
            Err(Error::Underpowered(0))
        ));
    }

    #[test]
    fn wilcoxon_six_uniform_wins() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![0.9, 1.8, 2.7, 3.6, 4.5, 5.4];
        let (w, p) = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(w, 0.0);
        assert!((p - 0.03125).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_antisymmetric() {
        let a = vec![0.9, 0.2, 0.75, 0.4, 0.55, 0.61, 0.33];
        let b = vec![0.5, 0.3, 0.7, 0.45, 0.5, 0.6, 0.35];
        let (w1, p1) = wilcoxon_signed_rank(&a, &b).unwrap();
        let (w2, p2) = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn wilcoxon_underpowered() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![0.5, 1.5, 2.5, 3.5];
        assert!(matches!(
            wilcoxon_signed_rank(&a, &b),
            Err(Error::Underpowered(4))
        ));
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration() {
        // Brute force over all 2^n sign assignments with the same ranks.
        let a = vec![0.9, 0.2, 0.75, 0.4, 0.55, 0.61, 0.33, 0.8, 0.12, 0.5];
        let b = vec![0.5, 0.3, 0.7, 0.45, 0.5, 0.6, 0.35, 0.6, 0.2, 0.45];
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        let doubled = doubled_ranks(&abs);
        let w_plus: u64 = diffs
            .iter()
            .zip(&doubled)
            .filter(|(d, _)| **d > 0.0)
            .map(|(_, &r)| r)
            .sum();
        let total: u64 = doubled.iter().sum();
        let w_min = w_plus.min(total - w_plus);
        let n = doubled.len();
        let mut count = 0u64;
        for mask in 0u32..(1 << n) {
            let s: u64 = (0..n)
                .filter(|&i| mask & (1 << i) != 0)
                .map(|i| doubled[i])
                .sum();
            if s <= w_min {
                count += 1;
            }
        }
        let brute_p = (2.0 * count as f64 / 2.0f64.powi(n as i32)).min(1.0);
        let (_, p) = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!((p - brute_p).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_ties_get_average_ranks() {
        let abs = vec![0.3, 0.1, 0.3, 0.2, 0.3];
        // Sorted: 0.1 (rank 1), 0.2 (rank 2), three 0.3s (ranks 3,4,5 -> 4).
        assert_eq!(doubled_ranks(&abs), vec![8, 2, 8, 4, 8]);
    }

    #[test]
    fn wilcoxon_normal_branch_reasonable() {
        // n = 30 forces the approximation; a clearly one-sided sample must
        // come out significant, and a balanced one must not.
        let a: Vec<f64> = (0..30).map(|i| i as f64 + 1.0).collect();
        let b: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let (w, p) = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(w, 0.0);
        assert!(p < 0.001);

        let a2: Vec<f64> = (0..30)
            .map(|i| if i % 2 == 0 { 1.0 + 0.1 * i as f64 } else { 1.0 })
            .collect();
        let b2: Vec<f64> = (0..30)
            .map(|i| if i % 2 == 0 { 1.0 } else { 1.0 + 0.1 * i as f64 })
            .collect();
        let (_, p2) = wilcoxon_signed_rank(&a2, &b2).unwrap();
        assert!(p2 > 0.2);
    }

    #[test]
    fn qrels_parse_and_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        use std::io::Write as _;
        writeln!(f, "q1 0 docA 2").unwrap();
        writeln!(f, "q1 0 docB 0").unwrap();
        writeln!(f, "q2 0 docA 1").unwrap();
        let j = Judgments::load(f.path()).unwrap();
        assert_eq!(j.rel("q1", "docA"), 2);
        assert_eq!(j.rel("q1", "docB"), 0);
        assert_eq!(j.rel("q1", "unjudged"), 0);
        assert_eq!(j.rel("q2", "docA"), 1);
        assert_eq!(j.query_count(), 2);
    }

    #[test]
    fn qrels_malformed_line_cites_position() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        use std::io::Write as _;
        writeln!(f, "q1 0 docA 1").unwrap();
        writeln!(f, "q1 docA 1").unwrap();
        match Judgments::load(f.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn fold_assignment_partitions() {
        for (n, folds) in [(13, 5), (10, 10), (25, 5)] {
            let a = fold_assignment(n, folds, 7);
            assert_eq!(a.len(), folds);
            let mut all: Vec<usize> = a.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = a.iter().map(|f| f.len()).collect();
            let min = sizes.iter().min().unwrap();
            let max = sizes.iter().max().unwrap();
            assert!(max - min <= 1);
        }
    }

    #[test]
    fn fold_assignment_deterministic() {
        assert_eq!(fold_assignment(20, 5, 42), fold_assignment(20, 5, 42));
        assert_ne!(fold_assignment(20, 5, 42), fold_assignment(20, 5, 43));
    }

    fn queries_named(n: usize) -> Vec<Query> {
        (0..n)
            .map(|i| Query {
                query_id: format!("q{i:02}"),
                tokens: vec![],
            })
            .collect()
    }

    #[test]
    fn cross_validate_covers_every_query_once() {
        let queries = queries_named(11);
        let mut j = Judgments::new();
        for q in &queries {
            j.insert(&q.query_id, "good", 1);
        }
        let cv = cross_validate(&queries, &j, 5, 3, 10, 5, |_train| {
            Ok(|q: &Query| {
                Ok(RankedList {
                    query_id: q.query_id.clone(),
                    entries: vec![("good".to_string(), 1.0)],
                    depth: 10,
                })
            })
        })
        .unwrap();
        let mut seen: Vec<String> = cv.fold_test_ids.iter().flatten().cloned().collect();
        seen.sort();
        let mut expected: Vec<String> = queries.iter().map(|q| q.query_id.clone()).collect();
        expected.sort();
        assert_eq!(seen, expected);
        assert_eq!(cv.pooled.rows.len(), 11);
        assert!((cv.pooled.mean_ndcg - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_validate_leave_one_out() {
        let queries = queries_named(6);
        let j = Judgments::new();
        let cv = cross_validate(&queries, &j, 6, 0, 10, 5, |train| {
            assert_eq!(train.len(), 5);
            Ok(|q: &Query| {
                Ok(RankedList {
                    query_id: q.query_id.clone(),
                    entries: vec![],
                    depth: 10,
                })
            })
        })
        .unwrap();
        assert!(cv.fold_test_ids.iter().all(|f| f.len() == 1));
    }

    #[test]
    fn sweep_singleton_and_best() {
        let grid = vec![(10, 60, 0.0, 0.5), (10, 60, 0.1, 0.5)];
        let (points, best) = sweep(&grid, |_m, _n, beta, _g| {
            let mut report = EvalReport::compute(&[], &Judgments::new(), 10, 5);
            report.mean_ap = if beta > 0.0 { 0.8 } else { 0.4 };
            Ok(report)
        })
        .unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(best, 1);
    }

    #[test]
    fn report_tsv_shape() {
        let j = judged("q1", &[("a", 1)]);
        let rankings = vec![ranking("q1", &["a"]), ranking("q0", &["a"])];
        let report = EvalReport::compute(&rankings, &j, 10, 5);
        let mut buf = Vec::new();
        report.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "query_id\tap@10\tndcg@10\tp@5");
        // Rows sorted by query id, ALL last.
        assert!(lines[1].starts_with("q0\t"));
        assert!(lines[2].starts_with("q1\t"));
        assert!(lines[3].starts_with("ALL\t"));
    }

    #[test]
    fn report_compare_sets_ri() {
        let j = judged("q", &[("a", 1)]);
        let mut sys = EvalReport::compute(&[ranking("q", &["a", "b"])], &j, 10, 5);
        let base = EvalReport::compute(&[ranking("q", &["b", "a"])], &j, 10, 5);
        sys.compare_to(&base).unwrap();
        assert_eq!(sys.ri, Some(1.0));
        assert_eq!(sys.wilcoxon_p, None); // one pair: underpowered
    }
}
