//! Minimal reverse-mode automatic differentiation over f64 matrices.
//!
//! A `Tape` records the forward computation; `backward` replays it in
//! reverse and accumulates gradients for every node. Only the operations
//! needed by the pointer network and the pairwise ranker are implemented.

use ndarray::{concatenate, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    /// X (m x d) + row (1 x d), broadcast over rows.
    AddRow(usize, usize),
    /// X (m x d) * row (1 x d), broadcast over rows.
    MulRow(usize, usize),
    SoftmaxRows(usize),
    LayerNormRows(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    /// ln(1 + e^x), elementwise, overflow-safe.
    Softplus(usize),
    ConcatCols(Vec<usize>),
    /// Row-wise max over columns: (m x n) -> (m x 1).
    MaxCols(usize),
    /// Binary cross entropy of a probability column against fixed labels.
    Bce(usize, Vec<f64>),
    /// The log-free linear form: -sum y*p - sum (1-y)*(1-p).
    BceLinear(usize, Vec<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

const BCE_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Array2<f64> {
        &self.grads[v.0]
    }
}

fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

fn layer_norm_rows(a: &Array2<f64>) -> Array2<f64> {
    let d = a.ncols() as f64;
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
        let std = (var + LN_EPS).sqrt();
        row.mapv_inplace(|x| (x - mean) / std);
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(value, Op::MulElem(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| c * x);
        self.push(value, Op::Scale(a.0, c))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = &self.nodes[x.0].value + &self.nodes[row.0].value;
        self.push(value, Op::AddRow(x.0, row.0))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let value = &self.nodes[x.0].value * &self.nodes[row.0].value;
        self.push(value, Op::MulRow(x.0, row.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(&self.nodes[a.0].value);
        self.push(value, Op::SoftmaxRows(a.0))
    }

    /// Row-wise normalization to mean 0 and variance 1, without affine.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let value = layer_norm_rows(&self.nodes[a.0].value);
        self.push(value, Op::LayerNormRows(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(sigmoid);
        self.push(value, Op::Sigmoid(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(softplus);
        self.push(value, Op::Softplus(a.0))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat shapes");
        self.push(value, Op::ConcatCols(parts.iter().map(|v| v.0).collect()))
    }

    pub fn max_cols(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let mut value = Array2::zeros((src.nrows(), 1));
        for (i, row) in src.rows().into_iter().enumerate() {
            value[[i, 0]] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        self.push(value, Op::MaxCols(a.0))
    }

    /// Binary cross entropy against fixed labels, probabilities clamped
    /// to [eps, 1-eps] inside the logs. `p` must be a column vector.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Var {
        let pv = &self.nodes[p.0].value;
        assert_eq!(pv.ncols(), 1);
        assert_eq!(pv.nrows(), labels.len());
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let pc = pv[[i, 0]].clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let value = Array2::from_elem((1, 1), loss);
        self.push(value, Op::Bce(p.0, labels.to_vec()))
    }

    /// Literal log-free objective, kept for comparison runs.
    pub fn bce_linear(&mut self, p: Var, labels: &[f64]) -> Var {
        let pv = &self.nodes[p.0].value;
        assert_eq!(pv.ncols(), 1);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let pi = pv[[i, 0]];
            loss -= y * pi + (1.0 - y) * (1.0 - pi);
        }
        let value = Array2::from_elem((1, 1), loss);
        self.push(value, Op::BceLinear(p.0, labels.to_vec()))
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.dim()))
            .collect();
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        grads[loss.0][[0, 0]] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let g = grads[i].clone();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    grads[*a] += &da;
                    grads[*b] += &db;
                }
                Op::Transpose(a) => {
                    grads[*a] += &g.t();
                }
                Op::Add(a, b) => {
                    grads[*a] += &g;
                    grads[*b] += &g;
                }
                Op::Sub(a, b) => {
                    grads[*a] += &g;
                    grads[*b] -= &g;
                }
                Op::MulElem(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    grads[*a] += &da;
                    grads[*b] += &db;
                }
                Op::Scale(a, c) => {
                    grads[*a] += &g.mapv(|x| c * x);
                }
                Op::AddRow(x, row) => {
                    grads[*x] += &g;
                    let rowsum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[*row] += &rowsum;
                }
                Op::MulRow(x, row) => {
                    let dx = &g * &self.nodes[*row].value;
                    let drow = (&g * &self.nodes[*x].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    grads[*x] += &dx;
                    grads[*row] += &drow;
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                        for c in 0..y.ncols() {
                            da[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    grads[*a] += &da;
                }
                Op::LayerNormRows(a) => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[i].value;
                    let d = x.ncols() as f64;
                    let mut da = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let mean = x.row(r).sum() / d;
                        let var = x.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                        let std = (var + LN_EPS).sqrt();
                        let gmean: f64 = g.row(r).sum() / d;
                        let gdoty: f64 =
                            (0..x.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum::<f64>() / d;
                        for c in 0..x.ncols() {
                            da[[r, c]] = (g[[r, c]] - gmean - y[[r, c]] * gdoty) / std;
                        }
                    }
                    grads[*a] += &da;
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let da = ndarray::Zip::from(&g).and(x).map_collect(|&gi, &xi| {
                        if xi > 0.0 {
                            gi
                        } else {
                            0.0
                        }
                    });
                    grads[*a] += &da;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let da = ndarray::Zip::from(&g)
                        .and(y)
                        .map_collect(|&gi, &yi| gi * (1.0 - yi * yi));
                    grads[*a] += &da;
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let da = ndarray::Zip::from(&g)
                        .and(y)
                        .map_collect(|&gi, &yi| gi * yi * (1.0 - yi));
                    grads[*a] += &da;
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[*a].value;
                    let da = ndarray::Zip::from(&g)
                        .and(x)
                        .map_collect(|&gi, &xi| gi * sigmoid(xi));
                    grads[*a] += &da;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        let slice = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        grads[p] += &slice;
                        offset += w;
                    }
                }
                Op::MaxCols(a) => {
                    let x = &self.nodes[*a].value;
                    let mut da = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let mut best = 0;
                        for c in 1..x.ncols() {
                            if x[[r, c]] > x[[r, best]] {
                                best = c;
                            }
                        }
                        da[[r, best]] = g[[r, 0]];
                    }
                    grads[*a] += &da;
                }
                Op::Bce(p, labels) => {
                    let pv = &self.nodes[*p].value;
                    let scale = g[[0, 0]];
                    let mut dp = Array2::zeros(pv.dim());
                    for (r, &y) in labels.iter().enumerate() {
                        let pc = pv[[r, 0]].clamp(BCE_EPS, 1.0 - BCE_EPS);
                        dp[[r, 0]] = scale * (-(y / pc) + (1.0 - y) / (1.0 - pc));
                    }
                    grads[*p] += &dp;
                }
                Op::BceLinear(p, labels) => {
                    let pv = &self.nodes[*p].value;
                    let scale = g[[0, 0]];
                    let mut dp = Array2::zeros(pv.dim());
                    for (r, &y) in labels.iter().enumerate() {
                        dp[[r, 0]] = scale * (1.0 - 2.0 * y);
                    }
                    grads[*p] += &dp;
                }
            }
        }
        Gradients { grads }
    }
}
