//! Attention-based pointer network: multi-head self-attention blocks over
//! query and document, bidirectional query-document attention flow, and a
//! pointer head whose output distribution ranges over document positions.
//! Per-term expansion weights aggregate pointer mass over the feedback
//! documents.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Document, Query, TermId};
use crate::embed::{EmbeddingTable, PositionalEncoding};
use crate::error::Error;
use crate::tape::{Tape, Var};
use crate::tensor_io;
use crate::Result;

pub const CHECKPOINT_MAGIC: &str = "QA4PRF-PTR v1";

/// One self-attention encoder block: per-head projections, a two-layer
/// feed-forward, and the layer-norm affine parameters after each sub-layer.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub w_q: Vec<Array2<f64>>,
    pub w_k: Vec<Array2<f64>>,
    pub w_v: Vec<Array2<f64>>,
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array2<f64>,
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array2<f64>,
    pub ln1_gain: Array2<f64>,
    pub ln1_bias: Array2<f64>,
    pub ln2_gain: Array2<f64>,
    pub ln2_bias: Array2<f64>,
}

impl BlockParams {
    fn init(dim: usize, heads: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let dk = dim / heads;
        let scale = 1.0 / (dim as f64).sqrt();
        let mut mat = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
        };
        BlockParams {
            w_q: (0..heads).map(|_| mat(dim, dk)).collect(),
            w_k: (0..heads).map(|_| mat(dim, dk)).collect(),
            w_v: (0..heads).map(|_| mat(dim, dk)).collect(),
            mlp_w1: mat(dim, hidden),
            mlp_b1: Array2::zeros((1, hidden)),
            mlp_w2: mat(hidden, dim),
            mlp_b2: Array2::zeros((1, dim)),
            ln1_gain: Array2::ones((1, dim)),
            ln1_bias: Array2::zeros((1, dim)),
            ln2_gain: Array2::ones((1, dim)),
            ln2_bias: Array2::zeros((1, dim)),
        }
    }
}

/// All learned tensors of the attention/pointer architecture.
#[derive(Debug, Clone)]
pub struct PointerModel {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub use_positional: bool,
    pub doc_block: BlockParams,
    pub query_block: BlockParams,
    /// Trilinear similarity weight, split into its three d-sized pieces.
    pub flow_w_doc: Array2<f64>,
    pub flow_w_query: Array2<f64>,
    pub flow_w_prod: Array2<f64>,
    pub theta1: Array2<f64>,
    pub theta2: Array2<f64>,
    pub theta3: Array2<f64>,
}

impl PointerModel {
    /// Defaults: 4 heads, feed-forward width 2d, documents truncated to
    /// 256 tokens.
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        Self::with_shape(dim, 4, 2 * dim, 256, seed)
    }

    pub fn with_shape(
        dim: usize,
        heads: usize,
        hidden: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::DimensionMismatch(format!(
                "model dimension {dim} must be a positive multiple of heads {heads}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let doc_block = BlockParams::init(dim, heads, hidden, &mut rng);
        let query_block = BlockParams::init(dim, heads, hidden, &mut rng);
        let mut mat = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale))
        };
        Ok(PointerModel {
            dim,
            heads,
            hidden,
            max_len,
            use_positional: true,
            doc_block,
            query_block,
            flow_w_doc: mat(dim, 1),
            flow_w_query: mat(dim, 1),
            flow_w_prod: mat(1, dim),
            theta1: mat(dim, 1),
            theta2: mat(dim, dim),
            theta3: mat(dim, dim),
        })
    }

    /// Named parameter tensors in a fixed order. The graph builder pushes
    /// leaves in exactly this order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (side, block) in [("doc", &self.doc_block), ("query", &self.query_block)] {
            for (h, t) in block.w_q.iter().enumerate() {
                out.push((format!("{side}.w_q{h}"), t));
            }
            for (h, t) in block.w_k.iter().enumerate() {
                out.push((format!("{side}.w_k{h}"), t));
            }
            for (h, t) in block.w_v.iter().enumerate() {
                out.push((format!("{side}.w_v{h}"), t));
            }
            out.push((format!("{side}.mlp_w1"), &block.mlp_w1));
            out.push((format!("{side}.mlp_b1"), &block.mlp_b1));
            out.push((format!("{side}.mlp_w2"), &block.mlp_w2));
            out.push((format!("{side}.mlp_b2"), &block.mlp_b2));
            out.push((format!("{side}.ln1_gain"), &block.ln1_gain));
            out.push((format!("{side}.ln1_bias"), &block.ln1_bias));
            out.push((format!("{side}.ln2_gain"), &block.ln2_gain));
            out.push((format!("{side}.ln2_bias"), &block.ln2_bias));
        }
        out.push(("flow.w_doc".into(), &self.flow_w_doc));
        out.push(("flow.w_query".into(), &self.flow_w_query));
        out.push(("flow.w_prod".into(), &self.flow_w_prod));
        out.push(("pointer.theta1".into(), &self.theta1));
        out.push(("pointer.theta2".into(), &self.theta2));
        out.push(("pointer.theta3".into(), &self.theta3));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = Vec::new();
        for (side, block) in [
            ("doc", &mut self.doc_block),
            ("query", &mut self.query_block),
        ] {
            for (h, t) in block.w_q.iter_mut().enumerate() {
                out.push((format!("{side}.w_q{h}"), t));
            }
            for (h, t) in block.w_k.iter_mut().enumerate() {
                out.push((format!("{side}.w_k{h}"), t));
            }
            for (h, t) in block.w_v.iter_mut().enumerate() {
                out.push((format!("{side}.w_v{h}"), t));
            }
            out.push((format!("{side}.mlp_w1"), &mut block.mlp_w1));
            out.push((format!("{side}.mlp_b1"), &mut block.mlp_b1));
            out.push((format!("{side}.mlp_w2"), &mut block.mlp_w2));
            out.push((format!("{side}.mlp_b2"), &mut block.mlp_b2));
            out.push((format!("{side}.ln1_gain"), &mut block.ln1_gain));
            out.push((format!("{side}.ln1_bias"), &mut block.ln1_bias));
            out.push((format!("{side}.ln2_gain"), &mut block.ln2_gain));
            out.push((format!("{side}.ln2_bias"), &mut block.ln2_bias));
        }
        out.push(("flow.w_doc".into(), &mut self.flow_w_doc));
        out.push(("flow.w_query".into(), &mut self.flow_w_query));
        out.push(("flow.w_prod".into(), &mut self.flow_w_prod));
        out.push(("pointer.theta1".into(), &mut self.theta1));
        out.push(("pointer.theta2".into(), &mut self.theta2));
        out.push(("pointer.theta3".into(), &mut self.theta3));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        tensor_io::write_checkpoint(
            &mut buf,
            CHECKPOINT_MAGIC,
            &[
                ("dim", self.dim.to_string()),
                ("heads", self.heads.to_string()),
                ("hidden", self.hidden.to_string()),
                ("max_len", self.max_len.to_string()),
                ("use_positional", self.use_positional.to_string()),
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
        let dim: usize = ckpt.hyper_parse("dim", &p)?;
        let heads: usize = ckpt.hyper_parse("heads", &p)?;
        let hidden: usize = ckpt.hyper_parse("hidden", &p)?;
        let max_len: usize = ckpt.hyper_parse("max_len", &p)?;
        let use_positional: bool = ckpt.hyper_parse("use_positional", &p)?;
        let mut model = PointerModel::with_shape(dim, heads, hidden, max_len, 0)?;
        model.use_positional = use_positional;
        for (name, tensor) in model.tensors_mut() {
            *tensor = ckpt.tensor(&name, &p)?;
        }
        Ok(model)
    }
}

/// Pointer distribution over the (truncated) positions of one feedback
/// document, plus the mean query embedding it conditioned on.
#[derive(Debug, Clone)]
pub struct PointerOutput {
    pub probs: Vec<f64>,
    pub query_vec: Vec<f64>,
}

/// One supervised example: positions of the positive term carry label 1.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: String,
    pub query: Query,
    pub doc_tokens: Vec<TermId>,
    pub labels: Vec<f64>,
}

impl TrainingExample {
    /// Truncates to `max_len` and rejects examples without a positive
    /// position after truncation.
    pub fn new(
        id: impl Into<String>,
        query: Query,
        doc_tokens: &[TermId],
        positive: TermId,
        max_len: usize,
    ) -> Option<Self> {
        let doc_tokens: Vec<TermId> = doc_tokens.iter().take(max_len).copied().collect();
        let labels: Vec<f64> = doc_tokens
            .iter()
            .map(|&t| if t == positive { 1.0 } else { 0.0 })
            .collect();
        if labels.iter().any(|&y| y == 1.0) {
            Some(TrainingExample {
                id: id.into(),
                query,
                doc_tokens,
                labels,
            })
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Reserved for stochastic variants; full-batch training is
    /// order-canonical and needs no randomness.
    pub seed: u64,
    pub clip_norm: f64,
    /// Use the log-free linear objective instead of cross entropy.
    pub literal_loss: bool,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            learning_rate: 1e-2,
            epochs: 100,
            seed: 0,
            clip_norm: 5.0,
            literal_loss: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

pub(crate) struct BlockVars {
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
    pub w_v: Vec<Var>,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

pub(crate) struct GraphParams {
    /// Leaves in the same order as `PointerModel::tensors()`.
    pub flat: Vec<Var>,
    pub doc: BlockVars,
    pub query: BlockVars,
    pub flow_w_doc: Var,
    pub flow_w_query: Var,
    pub flow_w_prod: Var,
    pub theta1: Var,
    pub theta2: Var,
    pub theta3: Var,
}

fn leaf_block(tape: &mut Tape, b: &BlockParams, flat: &mut Vec<Var>) -> BlockVars {
    let mut push = |t: &Array2<f64>, flat: &mut Vec<Var>| {
        let v = tape.leaf(t.clone());
        flat.push(v);
        v
    };
    let w_q: Vec<Var> = b.w_q.iter().map(|t| push(t, flat)).collect();
    let w_k: Vec<Var> = b.w_k.iter().map(|t| push(t, flat)).collect();
    let w_v: Vec<Var> = b.w_v.iter().map(|t| push(t, flat)).collect();
    let mlp_w1 = push(&b.mlp_w1, flat);
    let mlp_b1 = push(&b.mlp_b1, flat);
    let mlp_w2 = push(&b.mlp_w2, flat);
    let mlp_b2 = push(&b.mlp_b2, flat);
    let ln1_gain = push(&b.ln1_gain, flat);
    let ln1_bias = push(&b.ln1_bias, flat);
    let ln2_gain = push(&b.ln2_gain, flat);
    let ln2_bias = push(&b.ln2_bias, flat);
    BlockVars {
        w_q,
        w_k,
        w_v,
        mlp_w1,
        mlp_b1,
        mlp_w2,
        mlp_b2,
        ln1_gain,
        ln1_bias,
        ln2_gain,
        ln2_bias,
    }
}

pub(crate) fn graph_params(tape: &mut Tape, model: &PointerModel) -> GraphParams {
    let mut flat = Vec::new();
    let doc = leaf_block(tape, &model.doc_block, &mut flat);
    let query = leaf_block(tape, &model.query_block, &mut flat);
    let mut push = |t: &Array2<f64>, flat: &mut Vec<Var>| {
        let v = tape.leaf(t.clone());
        flat.push(v);
        v
    };
    let flow_w_doc = push(&model.flow_w_doc, &mut flat);
    let flow_w_query = push(&model.flow_w_query, &mut flat);
    let flow_w_prod = push(&model.flow_w_prod, &mut flat);
    let theta1 = push(&model.theta1, &mut flat);
    let theta2 = push(&model.theta2, &mut flat);
    let theta3 = push(&model.theta3, &mut flat);
    GraphParams {
        flat,
        doc,
        query,
        flow_w_doc,
        flow_w_query,
        flow_w_prod,
        theta1,
        theta2,
        theta3,
    }
}

/// Scaled dot-product multi-head attention, heads concatenated.
pub(crate) fn multi_head(tape: &mut Tape, x: Var, b: &BlockVars) -> Var {
    let dk = tape.value(b.w_q[0]).ncols();
    let mut heads = Vec::new();
    for h in 0..b.w_q.len() {
        let q = tape.matmul(x, b.w_q[h]);
        let k = tape.matmul(x, b.w_k[h]);
        let v = tape.matmul(x, b.w_v[h]);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        heads.push(tape.matmul(attn, v));
    }
    if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    }
}

fn layer_norm_affine(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Var {
    let normed = tape.layer_norm_rows(x);
    let scaled = tape.mul_row(normed, gain);
    tape.add_row(scaled, bias)
}

/// Attention block: multi-head attention then a two-layer feed-forward,
/// each followed by residual connection and layer normalization.
pub(crate) fn encoder_block(tape: &mut Tape, x: Var, b: &BlockVars) -> Var {
    let mha = multi_head(tape, x, b);
    let res1 = tape.add(x, mha);
    let t = layer_norm_affine(tape, res1, b.ln1_gain, b.ln1_bias);
    let h1 = tape.matmul(t, b.mlp_w1);
    let h1b = tape.add_row(h1, b.mlp_b1);
    let h1a = tape.relu(h1b);
    let h2 = tape.matmul(h1a, b.mlp_w2);
    let h2b = tape.add_row(h2, b.mlp_b2);
    let res2 = tape.add(t, h2b);
    layer_norm_affine(tape, res2, b.ln2_gain, b.ln2_bias)
}

/// Bidirectional query-document attention over the trilinear similarity
/// S_ij = w_s^T [o_i ; r_j ; o_i * r_j]; returns E = mean(A, B, O).
pub(crate) fn attention_flow(
    tape: &mut Tape,
    o: Var,
    r: Var,
    w_doc: Var,
    w_query: Var,
    w_prod: Var,
) -> Var {
    let m = tape.value(o).nrows();
    let n = tape.value(r).nrows();
    let ones_1n = tape.leaf(Array2::ones((1, n)));
    let ones_m1 = tape.leaf(Array2::ones((m, 1)));

    let s_doc_col = tape.matmul(o, w_doc);
    let s_doc = tape.matmul(s_doc_col, ones_1n);
    let s_query_col = tape.matmul(r, w_query);
    let s_query_row = tape.transpose(s_query_col);
    let s_query = tape.matmul(ones_m1, s_query_row);
    let o_scaled = tape.mul_row(o, w_prod);
    let rt = tape.transpose(r);
    let s_prod = tape.matmul(o_scaled, rt);
    let s01 = tape.add(s_doc, s_query);
    let s = tape.add(s01, s_prod);

    // Doc-to-query: rows of S softmaxed over query terms.
    let attn_dq = tape.softmax_rows(s);
    let a = tape.matmul(attn_dq, r);

    // Query-to-doc: softmax over per-row column maxima, pooled over o.
    let max_col = tape.max_cols(s);
    let max_row = tape.transpose(max_col);
    let b_weights = tape.softmax_rows(max_row);
    let b_tilde = tape.matmul(b_weights, o);
    let b = tape.matmul(ones_m1, b_tilde);

    let ab = tape.add(a, b);
    let abo = tape.add(ab, o);
    tape.scale(abo, 1.0 / 3.0)
}

/// Pointer head: a_i = theta1^T tanh(theta2 qbar + theta3 E_i), softmax
/// over document positions. Returns a column of probabilities.
pub(crate) fn pointer_head(
    tape: &mut Tape,
    e: Var,
    qbar: Var,
    theta1: Var,
    theta2: Var,
    theta3: Var,
) -> Var {
    let m = tape.value(e).nrows();
    let ones_m1 = tape.leaf(Array2::ones((m, 1)));
    let th2t = tape.transpose(theta2);
    let q_proj_row = tape.matmul(qbar, th2t);
    let q_proj = tape.matmul(ones_m1, q_proj_row);
    let th3t = tape.transpose(theta3);
    let e_proj = tape.matmul(e, th3t);
    let pre = tape.add(q_proj, e_proj);
    let h = tape.tanh(pre);
    let logits = tape.matmul(h, theta1);
    let logits_row = tape.transpose(logits);
    let probs_row = tape.softmax_rows(logits_row);
    tape.transpose(probs_row)
}

/// Initial embeddings (word vector + positional encoding) for a token
/// sequence, truncated to the model's maximum length.
fn embed_sequence(
    model: &PointerModel,
    table: &EmbeddingTable,
    tokens: &[TermId],
) -> Result<Array2<f64>> {
    let len = tokens.len().min(model.max_len);
    if len == 0 {
        return Err(Error::EmptyDocument);
    }
    let pe = PositionalEncoding::new(table.dim(), model.max_len);
    let mut x = Array2::zeros((len, table.dim()));
    for (i, &t) in tokens.iter().take(len).enumerate() {
        let v = if model.use_positional {
            crate::embed::initial_embedding(table, &pe, t, i)?
        } else {
            table.vector(t).to_vec()
        };
        for (j, val) in v.iter().enumerate() {
            x[[i, j]] = *val;
        }
    }
    Ok(x)
}

fn mean_query_embedding(
    model: &PointerModel,
    table: &EmbeddingTable,
    query: &Query,
) -> Result<Array2<f64>> {
    let x = embed_sequence(model, table, &query.tokens)?;
    let n = x.nrows() as f64;
    let mean = x.sum_axis(ndarray::Axis(0)).mapv(|v| v / n);
    Ok(mean.insert_axis(ndarray::Axis(0)))
}

/// Full forward graph for one (query, document) pair. Returns the tape,
/// the parameter leaves, and the probability column.
fn build_forward(
    model: &PointerModel,
    table: &EmbeddingTable,
    query: &Query,
    doc_tokens: &[TermId],
) -> Result<(Tape, GraphParams, Var)> {
    let x_doc = embed_sequence(model, table, doc_tokens)?;
    let x_query = embed_sequence(model, table, &query.tokens)?;
    let qbar = mean_query_embedding(model, table, query)?;

    let mut tape = Tape::new();
    let params = graph_params(&mut tape, model);
    let xd = tape.leaf(x_doc);
    let xq = tape.leaf(x_query);
    let qb = tape.leaf(qbar);

    let o = encoder_block(&mut tape, xd, &params.doc);
    let r = encoder_block(&mut tape, xq, &params.query);
    let e = attention_flow(
        &mut tape,
        o,
        r,
        params.flow_w_doc,
        params.flow_w_query,
        params.flow_w_prod,
    );
    let probs = pointer_head(
        &mut tape,
        e,
        qb,
        params.theta1,
        params.theta2,
        params.theta3,
    );
    Ok((tape, params, probs))
}

/// Pointer distribution over the positions of one feedback document.
pub fn pointer_forward(
    model: &PointerModel,
    table: &EmbeddingTable,
    query: &Query,
    doc: &Document,
) -> Result<PointerOutput> {
    let (tape, _, probs) = build_forward(model, table, query, &doc.tokens)?;
    let qbar = mean_query_embedding(model, table, query)?;
    Ok(PointerOutput {
        probs: tape.value(probs).column(0).to_vec(),
        query_vec: qbar.row(0).to_vec(),
    })
}

/// W_QA(w|Q): pointer mass summed over every occurrence of the term in
/// every feedback document. Total mass equals the number of documents.
pub fn w_qa(
    model: &PointerModel,
    table: &EmbeddingTable,
    query: &Query,
    feedback_docs: &[&Document],
) -> Result<HashMap<TermId, f64>> {
    let mut out: HashMap<TermId, f64> = HashMap::new();
    for doc in feedback_docs {
        let output = pointer_forward(model, table, query, doc)?;
        for (i, &p) in output.probs.iter().enumerate() {
            *out.entry(doc.tokens[i]).or_insert(0.0) += p;
        }
    }
    Ok(out)
}

fn example_loss_and_grads(
    model: &PointerModel,
    table: &EmbeddingTable,
    ex: &TrainingExample,
    literal: bool,
    want_grads: bool,
) -> Result<(f64, Option<Vec<Array2<f64>>>)> {
    let (mut tape, params, probs) = build_forward(model, table, &ex.query, &ex.doc_tokens)?;
    let loss = if literal {
        tape.bce_linear(probs, &ex.labels)
    } else {
        tape.bce(probs, &ex.labels)
    };
    let loss_val = tape.value(loss)[[0, 0]];
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!("loss for example `{}`", ex.id)));
    }
    if !want_grads {
        return Ok((loss_val, None));
    }
    let grads = tape.backward(loss);
    let collected = params.flat.iter().map(|&v| grads.get(v).clone()).collect();
    Ok((loss_val, Some(collected)))
}

/// Loss of one example at the current parameters, no gradients.
pub fn example_loss(
    model: &PointerModel,
    table: &EmbeddingTable,
    ex: &TrainingExample,
    literal: bool,
) -> Result<f64> {
    example_loss_and_grads(model, table, ex, literal, false).map(|(l, _)| l)
}

fn clip_to_norm(g: &mut Array2<f64>, max_norm: f64) {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.mapv_inplace(|v| v * s);
    }
}

/// Full-batch gradient descent on the pointer loss. Returns the loss
/// trace: mean loss before each epoch plus the final loss, so zero epochs
/// yields just the initial loss.
pub fn train_pointer(
    model: &mut PointerModel,
    table: &EmbeddingTable,
    examples: &[TrainingExample],
    opts: &TrainOpts,
) -> Result<Vec<f64>> {
    if !examples.iter().any(|ex| ex.labels.iter().any(|&y| y == 1.0)) {
        return Err(Error::MissingInput(
            "no training example with a positive label".to_string(),
        ));
    }
    let n_tensors = model.tensors().len();
    let mut trace = Vec::with_capacity(opts.epochs + 1);
    for _epoch in 0..opts.epochs {
        let mut total_loss = 0.0;
        let mut acc: Vec<Array2<f64>> = model
            .tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.dim()))
            .collect();
        for ex in examples {
            let (loss, grads) =
                example_loss_and_grads(model, table, ex, opts.literal_loss, true)?;
            total_loss += loss;
            let grads = grads.expect("gradients requested");
            for (a, g) in acc.iter_mut().zip(grads) {
                *a += &g;
            }
        }
        trace.push(total_loss / examples.len() as f64);
        let scale = 1.0 / examples.len() as f64;
        for g in acc.iter_mut() {
            g.mapv_inplace(|v| v * scale);
            clip_to_norm(g, opts.clip_norm);
        }
        debug_assert_eq!(acc.len(), n_tensors);
        for ((name, tensor), g) in model.tensors_mut().into_iter().zip(acc.iter()) {
            tensor.zip_mut_with(g, |t, &gi| *t -= opts.learning_rate * gi);
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter tensor `{name}`")));
            }
        }
    }
    let mut final_loss = 0.0;
    for ex in examples {
        final_loss += example_loss(model, table, ex, opts.literal_loss)?;
    }
    trace.push(final_loss / examples.len() as f64);
    Ok(trace)
}

/// Compare analytic gradients against central finite differences
/// (step 1e-5) for every parameter tensor. Returns the max relative error.
pub fn gradient_check(
    model: &PointerModel,
    table: &EmbeddingTable,
    ex: &TrainingExample,
) -> Result<f64> {
    let (_, grads) = example_loss_and_grads(model, table, ex, false, true)?;
    let grads = grads.expect("gradients requested");
    let h = 1e-5;
    let mut max_rel = 0.0_f64;
    let names: Vec<String> = model.tensors().iter().map(|(n, _)| n.clone()).collect();
    for (ti, name) in names.iter().enumerate() {
        let shape = model.tensors()[ti].1.dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let mut perturbed = model.clone();
                perturbed.tensors_mut()[ti].1[[r, c]] += h;
                let up = example_loss(&perturbed, table, ex, false)?;
                perturbed.tensors_mut()[ti].1[[r, c]] -= 2.0 * h;
                let down = example_loss(&perturbed, table, ex, false)?;
                let fd = (up - down) / (2.0 * h);
                let a = grads[ti][[r, c]];
                let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-3);
                if rel > max_rel {
                    max_rel = rel;
                }
                debug_assert!(
                    rel.is_finite(),
                    "non-finite gradient comparison in {name} at ({r},{c})"
                );
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn zeroed_model(dim: usize, heads: usize) -> PointerModel {
        let mut model = PointerModel::with_shape(dim, heads, 2 * dim, 16, 0).unwrap();
        for (name, t) in model.tensors_mut() {
            if name.ends_with("gain") {
                t.fill(1.0);
            } else {
                t.fill(0.0);
            }
        }
        model.use_positional = false;
        model
    }

    fn query_of(tokens: &[u32]) -> Query {
        Query {
            query_id: "q".into(),
            tokens: tokens.iter().map(|&t| TermId(t)).collect(),
        }
    }

    fn doc_of(tokens: &[u32]) -> Document {
        Document {
            doc_id: "d".into(),
            tokens: tokens.iter().map(|&t| TermId(t)).collect(),
        }
    }

    #[test]
    fn mha_singleton_is_v_projection() {
        let mut tape = Tape::new();
        let model = {
            let mut m = zeroed_model(2, 1);
            m.doc_block.w_v[0] = array![[0.3, -0.7], [1.1, 0.2]];
            m.doc_block.w_q[0] = array![[0.5, 0.5], [0.5, 0.5]];
            m.doc_block.w_k[0] = array![[0.2, 0.1], [0.0, 0.4]];
            m
        };
        let params = graph_params(&mut tape, &model);
        let x = tape.leaf(array![[2.0, -1.0]]);
        let out = multi_head(&mut tape, x, &params.doc);
        let expected = array![[2.0, -1.0]].dot(&model.doc_block.w_v[0]);
        let got = tape.value(out);
        assert!((got - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn mha_two_tokens_matches_hand_computation() {
        let wq = array![[0.2, -0.1], [0.4, 0.3]];
        let wk = array![[0.1, 0.5], [-0.2, 0.2]];
        let wv = array![[1.0, 0.0], [0.0, 2.0]];
        let x = array![[1.0, 0.5], [-0.5, 1.0]];
        let mut model = zeroed_model(2, 1);
        model.doc_block.w_q[0] = wq.clone();
        model.doc_block.w_k[0] = wk.clone();
        model.doc_block.w_v[0] = wv.clone();

        let mut tape = Tape::new();
        let params = graph_params(&mut tape, &model);
        let xv = tape.leaf(x.clone());
        let out = multi_head(&mut tape, xv, &params.doc);

        // Independent scalar evaluation of the attention formula.
        let q = x.dot(&wq);
        let k = x.dot(&wk);
        let v = x.dot(&wv);
        let scale = 1.0 / 2.0_f64.sqrt();
        let mut expected = Array2::zeros((2, 2));
        for i in 0..2 {
            let s0 = (q[[i, 0]] * k[[0, 0]] + q[[i, 1]] * k[[0, 1]]) * scale;
            let s1 = (q[[i, 0]] * k[[1, 0]] + q[[i, 1]] * k[[1, 1]]) * scale;
            let max = s0.max(s1);
            let e0 = (s0 - max).exp();
            let e1 = (s1 - max).exp();
            let z = e0 + e1;
            for j in 0..2 {
                expected[[i, j]] = (e0 * v[[0, j]] + e1 * v[[1, j]]) / z;
            }
        }
        assert!((tape.value(out) - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn encoder_identical_inputs_identical_outputs() {
        let model = PointerModel::with_shape(8, 2, 16, 16, 3).unwrap();
        let mut tape = Tape::new();
        let params = graph_params(&mut tape, &model);
        let row: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let x = tape.leaf(Array2::from_shape_fn((3, 8), |(_, j)| row[j]));
        let out = encoder_block(&mut tape, x, &params.doc);
        let v = tape.value(out);
        for r in 1..3 {
            for c in 0..8 {
                assert!((v[[r, c]] - v[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flow_zero_similarity_degenerates_to_means() {
        let mut tape = Tape::new();
        let o = tape.leaf(array![[1.0, 3.0], [5.0, -1.0]]);
        let r = tape.leaf(array![[2.0, 0.0], [0.0, 4.0]]);
        let zero_col = tape.leaf(Array2::zeros((2, 1)));
        let zero_row = tape.leaf(Array2::zeros((1, 2)));
        let e = attention_flow(&mut tape, o, r, zero_col, zero_col, zero_row);
        // A rows = mean of r = [1, 2]; B rows = mean of o = [3, 1].
        let ev = tape.value(e);
        let expected = array![
            [(1.0 + 3.0 + 1.0) / 3.0, (2.0 + 1.0 + 3.0) / 3.0],
            [(1.0 + 3.0 + 5.0) / 3.0, (2.0 + 1.0 - 1.0) / 3.0]
        ];
        assert!((ev - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn flow_single_query_term_copies_it() {
        let mut tape = Tape::new();
        let o = tape.leaf(array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]]);
        let r = tape.leaf(array![[7.0, -3.0]]);
        let wd = tape.leaf(array![[0.2], [0.4]]);
        let wq = tape.leaf(array![[-0.1], [0.3]]);
        let wp = tape.leaf(array![[0.5, 0.6]]);
        let e = attention_flow(&mut tape, o, r, wd, wq, wp);
        // With n = 1 every A row is exactly r_1 and B is constant across
        // rows, so the rows of 3E - O are all equal (to r_1 + b).
        let ev = tape.value(e);
        let ov = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
        for i in 1..3 {
            for j in 0..2 {
                let row0 = 3.0 * ev[[0, j]] - ov[[0, j]];
                let rowi = 3.0 * ev[[i, j]] - ov[[i, j]];
                assert!((row0 - rowi).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flow_hand_computed_toy() {
        let o = array![[1.0, 0.0], [0.0, 1.0]];
        let r = array![[1.0, 1.0], [0.5, -0.5]];
        let wd = array![[0.3], [-0.2]];
        let wq = array![[0.1], [0.4]];
        let wp = array![[0.7, 0.2]];

        let mut tape = Tape::new();
        let ov = tape.leaf(o.clone());
        let rv = tape.leaf(r.clone());
        let wdv = tape.leaf(wd.clone());
        let wqv = tape.leaf(wq.clone());
        let wpv = tape.leaf(wp.clone());
        let e = attention_flow(&mut tape, ov, rv, wdv, wqv, wpv);

        // Scalar evaluation of the trilinear similarity and both attention
        // directions.
        let mut s = Array2::zeros((2, 2));
        for i in 0..2 {
            for j in 0..2 {
                let dot_d = o[[i, 0]] * wd[[0, 0]] + o[[i, 1]] * wd[[1, 0]];
                let dot_q = r[[j, 0]] * wq[[0, 0]] + r[[j, 1]] * wq[[1, 0]];
                let dot_p = o[[i, 0]] * r[[j, 0]] * wp[[0, 0]] + o[[i, 1]] * r[[j, 1]] * wp[[0, 1]];
                s[[i, j]] = dot_d + dot_q + dot_p;
            }
        }
        let mut a = Array2::zeros((2, 2));
        for i in 0..2 {
            let m = s[[i, 0]].max(s[[i, 1]]);
            let e0 = (s[[i, 0]] - m).exp();
            let e1 = (s[[i, 1]] - m).exp();
            let z = e0 + e1;
            for j in 0..2 {
                a[[i, j]] = (e0 * r[[0, j]] + e1 * r[[1, j]]) / z;
            }
        }
        let m0 = s[[0, 0]].max(s[[0, 1]]);
        let m1 = s[[1, 0]].max(s[[1, 1]]);
        let mm = m0.max(m1);
        let b0 = (m0 - mm).exp();
        let b1 = (m1 - mm).exp();
        let bz = b0 + b1;
        let btilde = [
            (b0 * o[[0, 0]] + b1 * o[[1, 0]]) / bz,
            (b0 * o[[0, 1]] + b1 * o[[1, 1]]) / bz,
        ];
        let mut expected = Array2::zeros((2, 2));
        for i in 0..2 {
            for j in 0..2 {
                expected[[i, j]] = (a[[i, j]] + btilde[j] + o[[i, j]]) / 3.0;
            }
        }
        assert!((tape.value(e) - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn pointer_zero_theta1_is_uniform() {
        let mut model = PointerModel::with_shape(8, 2, 16, 32, 5).unwrap();
        model.theta1.fill(0.0);
        let table = EmbeddingTable::from_vectors(
            (0..6).map(|i| vec![0.1 * i as f64; 8]).collect(),
            0,
        );
        let out = pointer_forward(
            &model,
            &table,
            &query_of(&[0]),
            &doc_of(&[1, 2, 3, 4, 5]),
        )
        .unwrap();
        for p in &out.probs {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn pointer_single_position_is_certain() {
        let model = PointerModel::with_shape(8, 2, 16, 32, 11).unwrap();
        let table = EmbeddingTable::from_vectors(
            (0..3).map(|i| vec![0.05 * (i + 1) as f64; 8]).collect(),
            0,
        );
        let out = pointer_forward(&model, &table, &query_of(&[0]), &doc_of(&[1])).unwrap();
        assert_eq!(out.probs.len(), 1);
        assert!((out.probs[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pointer_empty_document_errors() {
        let model = PointerModel::with_shape(8, 2, 16, 32, 11).unwrap();
        let table = EmbeddingTable::from_vectors(vec![vec![0.1; 8]], 0);
        assert!(matches!(
            pointer_forward(&model, &table, &query_of(&[0]), &doc_of(&[])),
            Err(Error::EmptyDocument)
        ));
    }

    #[test]
    fn pointer_constructed_logits_quarter_three_quarters() {
        // Zeroed blocks pass layer-normalized inputs straight through; rows
        // [1,-1] and [-1,1] are already standardized, so E is known in
        // closed form and the theta tensors can force logits [ln 3, 0].
        let mut model = zeroed_model(2, 1);
        let c = 1.5 * 0.5_f64.atanh();
        model.theta3[[0, 0]] = c;
        model.theta1[[0, 0]] = 2.0 * 3.0_f64.ln();
        let table =
            EmbeddingTable::from_vectors(vec![vec![1.0, -1.0], vec![-1.0, 1.0]], 0);
        let out = pointer_forward(&model, &table, &query_of(&[0]), &doc_of(&[0, 1])).unwrap();
        assert!((out.probs[0] - 0.75).abs() < 1e-9);
        assert!((out.probs[1] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn pointer_probs_sum_to_one() {
        let model = PointerModel::with_shape(8, 4, 16, 64, 21).unwrap();
        let table = EmbeddingTable::from_vectors(
            (0..10).map(|i| vec![0.03 * i as f64 - 0.1; 8]).collect(),
            0,
        );
        for len in [1, 3, 7, 9] {
            let toks: Vec<u32> = (0..len).collect();
            let out =
                pointer_forward(&model, &table, &query_of(&[0, 1]), &doc_of(&toks)).unwrap();
            let sum: f64 = out.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pointer_permutation_covariant_without_positions() {
        let mut model = PointerModel::with_shape(8, 2, 16, 32, 9).unwrap();
        model.use_positional = false;
        let table = EmbeddingTable::random_for_test(6, 8);
        let q = query_of(&[0]);
        let out1 = pointer_forward(&model, &table, &q, &doc_of(&[1, 2, 3, 4])).unwrap();
        let out2 = pointer_forward(&model, &table, &q, &doc_of(&[3, 1, 4, 2])).unwrap();
        // positions: [1,2,3,4] permuted as [3,1,4,2]
        let expected = [out1.probs[2], out1.probs[0], out1.probs[3], out1.probs[1]];
        for (a, b) in out2.probs.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wqa_uniform_and_repeated_terms() {
        let mut model = PointerModel::with_shape(8, 2, 16, 32, 13).unwrap();
        model.theta1.fill(0.0); // uniform pointer
        let table = EmbeddingTable::random_for_test(8, 8);
        let q = query_of(&[0]);
        let distinct = doc_of(&[1, 2, 3, 4]);
        let weights = w_qa(&model, &table, &q, &[&distinct]).unwrap();
        for t in [1, 2, 3, 4] {
            assert!((weights[&TermId(t)] - 0.25).abs() < 1e-12);
        }
        let repeated = doc_of(&[5, 5, 6, 7]);
        let weights = w_qa(&model, &table, &q, &[&repeated]).unwrap();
        assert!((weights[&TermId(5)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wqa_mass_conservation() {
        let model = PointerModel::with_shape(8, 2, 16, 32, 17).unwrap();
        let table = EmbeddingTable::random_for_test(12, 8);
        let q = query_of(&[0, 1]);
        let docs = [
            doc_of(&[2, 3, 4]),
            doc_of(&[5, 6, 7, 8, 9]),
            doc_of(&[10, 11, 2]),
        ];
        let refs: Vec<&Document> = docs.iter().collect();
        let weights = w_qa(&model, &table, &q, &refs).unwrap();
        let total: f64 = weights.values().sum();
        assert!((total - 3.0).abs() < 1e-6);
    }

    #[test]
    fn train_zero_epochs_model_unchanged() {
        let mut model = PointerModel::with_shape(8, 2, 16, 32, 19).unwrap();
        let before = model.clone();
        let table = EmbeddingTable::random_for_test(6, 8);
        let ex = TrainingExample::new(
            "ex0",
            query_of(&[0]),
            &[TermId(1), TermId(2), TermId(3)],
            TermId(2),
            32,
        )
        .unwrap();
        let opts = TrainOpts {
            epochs: 0,
            ..TrainOpts::default()
        };
        let trace = train_pointer(&mut model, &table, &[ex], &opts).unwrap();
        assert_eq!(trace.len(), 1);
        for ((_, a), (_, b)) in model.tensors().iter().zip(before.tensors().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn train_requires_positive_label() {
        let mut model = PointerModel::with_shape(8, 2, 16, 32, 19).unwrap();
        let table = EmbeddingTable::random_for_test(6, 8);
        let ex = TrainingExample {
            id: "bad".into(),
            query: query_of(&[0]),
            doc_tokens: vec![TermId(1), TermId(2)],
            labels: vec![0.0, 0.0],
        };
        assert!(train_pointer(&mut model, &table, &[ex], &TrainOpts::default()).is_err());
    }

    #[test]
    fn overfit_single_example() {
        let mut model = PointerModel::with_shape(8, 2, 16, 32, 23).unwrap();
        let table = EmbeddingTable::random_for_test(6, 8);
        let ex = TrainingExample::new(
            "overfit",
            query_of(&[0]),
            &[TermId(1), TermId(2), TermId(3), TermId(4)],
            TermId(3),
            32,
        )
        .unwrap();
        let opts = TrainOpts {
            learning_rate: 0.2,
            epochs: 500,
            ..TrainOpts::default()
        };
        let trace = train_pointer(&mut model, &table, &[ex.clone()], &opts).unwrap();
        let out =
            pointer_forward(&model, &table, &ex.query, &doc_of(&[1, 2, 3, 4])).unwrap();
        assert!(out.probs[2] > 0.9, "positive prob {}", out.probs[2]);
        // Training drives the loss down to the -ln(0.9) regime. Individual
        // epochs may overshoot at this step size, so only the endpoints
        // are compared.
        let last = *trace.last().unwrap();
        assert!(last < trace[0], "no overall descent: {} -> {last}", trace[0]);
        assert!(last < 0.15, "final loss too high: {last}");
    }

    #[test]
    fn disjoint_examples_learn_their_own_positives() {
        let mut model = PointerModel::with_shape(8, 2, 16, 32, 29).unwrap();
        let table = EmbeddingTable::random_for_test(10, 8);
        let ex1 = TrainingExample::new(
            "ex1",
            query_of(&[0]),
            &[TermId(2), TermId(3), TermId(4)],
            TermId(3),
            32,
        )
        .unwrap();
        let ex2 = TrainingExample::new(
            "ex2",
            query_of(&[1]),
            &[TermId(5), TermId(6), TermId(7)],
            TermId(7),
            32,
        )
        .unwrap();
        let opts = TrainOpts {
            learning_rate: 0.2,
            epochs: 500,
            ..TrainOpts::default()
        };
        train_pointer(&mut model, &table, &[ex1.clone(), ex2.clone()], &opts).unwrap();
        let o1 = pointer_forward(&model, &table, &ex1.query, &doc_of(&[2, 3, 4])).unwrap();
        let o2 = pointer_forward(&model, &table, &ex2.query, &doc_of(&[5, 6, 7])).unwrap();
        let argmax = |p: &[f64]| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&o1.probs), 1);
        assert_eq!(argmax(&o2.probs), 2);
    }

    #[test]
    fn gradient_check_small_model() {
        let model = PointerModel::with_shape(4, 2, 8, 16, 31).unwrap();
        let table = EmbeddingTable::random_for_test(6, 4);
        let ex = TrainingExample::new(
            "gc",
            query_of(&[0, 1]),
            &[TermId(2), TermId(3), TermId(4), TermId(5)],
            TermId(4),
            16,
        )
        .unwrap();
        let max_rel = gradient_check(&model, &table, &ex).unwrap();
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn checkpoint_round_trip_exact() {
        let model = PointerModel::with_shape(8, 4, 16, 64, 37).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ptr.ckpt");
        model.save(&path).unwrap();
        let loaded = PointerModel::load(&path).unwrap();
        assert_eq!(loaded.dim, model.dim);
        assert_eq!(loaded.use_positional, model.use_positional);
        for ((na, a), (nb, b)) in model.tensors().iter().zip(loaded.tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
    }
}
