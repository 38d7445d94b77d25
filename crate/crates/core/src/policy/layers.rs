use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{PolicyDims, Weights};
use crate::error::{Error, Result};

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

// Small dense kernels over standard-layout storage; the generic ndarray
// paths carry too much per-call overhead at these sizes.

fn flat(m: &Array2<f64>) -> &[f64] {
    m.as_slice().expect("standard layout")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `m x`.
pub(crate) fn mv(m: &Array2<f64>, x: ArrayView1<f64>) -> Array1<f64> {
    let x = x.as_slice().expect("contiguous");
    flat(m).chunks_exact(m.ncols().max(1)).map(|row| dot(row, x)).collect()
}

/// `m^T x`.
pub(crate) fn mtv(m: &Array2<f64>, x: ArrayView1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(m.ncols());
    let o = out.as_slice_mut().expect("fresh array");
    for (row, &xi) in flat(m).chunks_exact(m.ncols().max(1)).zip(x.iter()) {
        if xi != 0.0 {
            o.iter_mut().zip(row).for_each(|(o, r)| *o += xi * r);
        }
    }
    out
}

/// `x m^T`: every row of `x` mapped through `m`.
fn rows_mv(x: ArrayView2<f64>, m: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), m.nrows()));
    for (i, row) in x.rows().into_iter().enumerate() {
        let row = row.to_owned();
        out.row_mut(i).assign(&mv(m, row.view()));
    }
    out
}

/// `a b` for small matrices.
fn mm(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let mut out = Array2::zeros((n, b.ncols()));
    for i in 0..n {
        for l in 0..k {
            let ail = a[[i, l]];
            if ail != 0.0 {
                out.row_mut(i).scaled_add(ail, &b.row(l));
            }
        }
    }
    out
}

/// `m += a b^T` for a standard-layout `m`, skipping zero entries of `a`.
pub(crate) fn add_outer(m: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    let cols = m.ncols();
    let flat = m.as_slice_mut().expect("weights are standard layout");
    let owned;
    let b = match b.as_slice() {
        Some(b) => b,
        None => {
            owned = b.to_vec();
            &owned
        }
    };
    for (row, &ai) in flat.chunks_exact_mut(cols).zip(a.iter()) {
        if ai == 0.0 {
            continue;
        }
        for (x, &bj) in row.iter_mut().zip(b) {
            *x += ai * bj;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Relation slots of a query and their remaining weights.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryState {
    pub slot_embeddings: Array2<f64>,
    pub slot_weights: Array1<f64>,
}

impl QueryState {
    pub fn new(slot_embeddings: Array2<f64>) -> Self {
        let m = slot_embeddings.nrows();
        QueryState {
            slot_embeddings,
            slot_weights: Array1::ones(m),
        }
    }

    pub fn num_slots(&self) -> usize {
        self.slot_embeddings.nrows()
    }

    /// Lowers each slot weight by `eta` times its cosine similarity to `taken`,
    /// clipping at zero. Negative similarities count as 0 so a weight never
    /// rises; zero-norm vectors have similarity 0.
    pub fn reduce(&self, taken: ArrayView1<f64>, eta: f64) -> QueryState {
        let slot_weights = self
            .slot_embeddings
            .rows()
            .into_iter()
            .zip(&self.slot_weights)
            .map(|(slot, &w)| (w - cosine(taken, slot).max(0.0) * eta).max(0.0))
            .collect();
        QueryState {
            slot_embeddings: self.slot_embeddings.clone(),
            slot_weights,
        }
    }

    /// Mean of the weighted slot rows.
    pub fn summary(&self) -> Array1<f64> {
        let m = self.num_slots().max(1) as f64;
        self.slot_weights.dot(&self.slot_embeddings) / m
    }
}

/// Affinity attention of one subgraph.
#[derive(Clone, Debug)]
pub(crate) struct AttentionTape {
    pub nodes: Array2<f64>,
    /// k x m, each column sums to 1.
    pub weights: Array2<f64>,
    pub output: Array1<f64>,
}

/// `projected` holds the slot vectors already mapped to entity space (m x d);
/// rows are scaled by the slot weights before the affinity product.
pub(crate) fn attention_forward(
    nodes: Array2<f64>,
    projected: ArrayView2<f64>,
    slot_weights: &Array1<f64>,
) -> Result<AttentionTape> {
    let (k, d) = nodes.dim();
    let (m, pd) = projected.dim();
    if k == 0 || m == 0 {
        return Err(Error::DimensionMismatch("attention needs at least one node and one slot".into()));
    }
    if d != pd || slot_weights.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "nodes are {k}x{d}, slots are {m}x{pd} with {} weights",
            slot_weights.len()
        )));
    }
    let weighted = &projected * &slot_weights.view().insert_axis(Axis(1));
    let affinity = nodes.dot(&weighted.t());
    let mut weights = Array2::zeros((k, m));
    for j in 0..m {
        let col: Vec<f64> = affinity.column(j).to_vec();
        for (i, p) in softmax(&col).into_iter().enumerate() {
            weights[[i, j]] = p;
        }
    }
    let node_weight = weights.sum_axis(Axis(1)) / m as f64;
    let output = nodes.t().dot(&node_weight);
    Ok(AttentionTape {
        nodes,
        weights,
        output,
    })
}

/// Returns the gradient with respect to the projected slot matrix, already
/// multiplied through the slot weights.
pub(crate) fn attention_backward(
    tape: &AttentionTape,
    slot_weights: &Array1<f64>,
    d_output: ArrayView1<f64>,
) -> Array2<f64> {
    let (k, m) = tape.weights.dim();
    let d_node_weight = tape.nodes.dot(&d_output) / m as f64;
    let mut d_affinity = Array2::zeros((k, m));
    for j in 0..m {
        let col = tape.weights.column(j);
        let mean = col.dot(&d_node_weight);
        for i in 0..k {
            d_affinity[[i, j]] = col[i] * (d_node_weight[i] - mean);
        }
    }
    let d_weighted = d_affinity.t().dot(&tape.nodes);
    d_weighted * &slot_weights.view().insert_axis(Axis(1))
}

/// Affinity attention of a subgraph's nodes (k x d) against the weighted
/// query, averaged over slots.
pub fn subgraph_attention(
    nodes: &Array2<f64>,
    query: &QueryState,
    slot_proj: &Array2<f64>,
) -> Result<Array1<f64>> {
    Ok(attention_tape(nodes, query, slot_proj)?.output)
}

/// Per-slot attention weights (k x m) behind `subgraph_attention`; columns sum to 1.
pub fn affinity_weights(
    nodes: &Array2<f64>,
    query: &QueryState,
    slot_proj: &Array2<f64>,
) -> Result<Array2<f64>> {
    Ok(attention_tape(nodes, query, slot_proj)?.weights)
}

fn attention_tape(nodes: &Array2<f64>, query: &QueryState, slot_proj: &Array2<f64>) -> Result<AttentionTape> {
    if slot_proj.ncols() != query.slot_embeddings.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "slot projection expects d_r={}, slots have {}",
            slot_proj.ncols(),
            query.slot_embeddings.ncols()
        )));
    }
    let projected = query.slot_embeddings.dot(&slot_proj.t());
    attention_forward(nodes.clone(), projected.view(), &query.slot_weights)
}

#[derive(Clone, Debug)]
pub(crate) struct HeadTape {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// n x n, rows sum to 1.
    pub alpha: Array2<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct InteractionTape {
    pub inputs: Array2<f64>,
    pub heads: Vec<HeadTape>,
    pub pre: Array2<f64>,
    pub fused: Array2<f64>,
}

pub(crate) fn interaction_forward(inputs: Array2<f64>, w: &Weights, tau: f64) -> InteractionTape {
    let n = inputs.nrows();
    let head_dim = w.w_query[0].nrows();
    let mut pre = Array2::zeros((n, head_dim * w.w_query.len()));
    let mut heads = Vec::with_capacity(w.w_query.len());
    for (h, ((wq, wk), wv)) in w.w_query.iter().zip(&w.w_key).zip(&w.w_value).enumerate() {
        let q = rows_mv(inputs.view(), wq);
        let k = rows_mv(inputs.view(), wk);
        let v = rows_mv(inputs.view(), wv);
        let logits = rows_mv(q.view(), &k) * tau;
        let mut alpha = Array2::zeros((n, n));
        for i in 0..n {
            let row = softmax(&logits.row(i).to_vec());
            alpha.row_mut(i).assign(&Array1::from(row));
        }
        pre.slice_mut(s![.., h * head_dim..(h + 1) * head_dim])
            .assign(&mm(alpha.view(), v.view()));
        heads.push(HeadTape { q, k, v, alpha });
    }
    let fused = pre.mapv(elu);
    InteractionTape {
        inputs,
        heads,
        pre,
        fused,
    }
}

/// Accumulates weight gradients into `grad` and returns the gradient with
/// respect to the interaction inputs.
pub(crate) fn interaction_backward(
    tape: &InteractionTape,
    w: &Weights,
    tau: f64,
    d_fused: &Array2<f64>,
    grad: &mut Weights,
) -> Array2<f64> {
    let d_pre = d_fused * &tape.pre.mapv(elu_grad);
    let head_dim = w.w_query[0].nrows();
    let mut d_inputs = Array2::zeros(tape.inputs.raw_dim());
    for (h, head) in tape.heads.iter().enumerate() {
        let d_out = d_pre.slice(s![.., h * head_dim..(h + 1) * head_dim]);
        let d_alpha = rows_mv(d_out, &head.v);
        let d_v = mm(head.alpha.t(), d_out);
        let row_dot = (&head.alpha * &d_alpha).sum_axis(Axis(1));
        let d_logits = &head.alpha * &(&d_alpha - &row_dot.insert_axis(Axis(1)));
        let d_q = mm(d_logits.view(), head.k.view()) * tau;
        let d_k = mm(d_logits.t(), head.q.view()) * tau;
        for (i, x) in tape.inputs.rows().into_iter().enumerate() {
            add_outer(&mut grad.w_query[h], d_q.row(i), x);
            add_outer(&mut grad.w_key[h], d_k.row(i), x);
            add_outer(&mut grad.w_value[h], d_v.row(i), x);
            let mut d_x = d_inputs.row_mut(i);
            d_x += &mtv(&w.w_query[h], d_q.row(i));
            d_x += &mtv(&w.w_key[h], d_k.row(i));
            d_x += &mtv(&w.w_value[h], d_v.row(i));
        }
    }
    d_inputs
}

/// Multi-head self-attention across subgraph summaries (n x d), followed by
/// an ELU. Returns the fused vectors (n x heads*head_dim) and per-head weights.
pub fn interact_subgraphs(
    summaries: &Array2<f64>,
    weights: &Weights,
    tau: f64,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let tape = interaction_forward(summaries.clone(), weights, tau);
    let alphas = tape.heads.iter().map(|h| h.alpha.clone()).collect();
    (tape.fused, alphas)
}

/// Recurrent history: hidden vector `p_t` and cell vector.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryState {
    pub hidden: Array1<f64>,
    pub cell: Array1<f64>,
}

impl HistoryState {
    pub fn zeros(dims: &PolicyDims) -> Self {
        HistoryState {
            hidden: Array1::zeros(dims.lstm_hidden),
            cell: Array1::zeros(dims.lstm_hidden),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LstmTape {
    pub input: Array1<f64>,
    pub prev: HistoryState,
    pub i: Array1<f64>,
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub o: Array1<f64>,
    pub cell_tanh: Array1<f64>,
    pub next: HistoryState,
}

pub(crate) fn lstm_forward(prev: &HistoryState, input: Array1<f64>, w: &Weights) -> LstmTape {
    let h = prev.hidden.len();
    let gates = mv(&w.lstm_input, input.view()) + mv(&w.lstm_hidden, prev.hidden.view()) + w.lstm_bias.column(0);
    let i = gates.slice(s![0..h]).mapv(sigmoid);
    let f = gates.slice(s![h..2 * h]).mapv(sigmoid);
    let g = gates.slice(s![2 * h..3 * h]).mapv(f64::tanh);
    let o = gates.slice(s![3 * h..4 * h]).mapv(sigmoid);
    let cell = &f * &prev.cell + &i * &g;
    let cell_tanh = cell.mapv(f64::tanh);
    let hidden = &o * &cell_tanh;
    LstmTape {
        input,
        prev: prev.clone(),
        i,
        f,
        g,
        o,
        cell_tanh,
        next: HistoryState { hidden, cell },
    }
}

/// Backpropagates `(d_hidden, d_cell)` through one cell update; returns the
/// gradient with respect to the previous state.
pub(crate) fn lstm_backward(
    tape: &LstmTape,
    d_hidden: &Array1<f64>,
    d_cell: &Array1<f64>,
    w: &Weights,
    grad: &mut Weights,
) -> (Array1<f64>, Array1<f64>) {
    let h = d_hidden.len();
    let d_o = d_hidden * &tape.cell_tanh;
    let dc = d_cell + &(d_hidden * &tape.o * &tape.cell_tanh.mapv(|t| 1.0 - t * t));
    let d_i = &dc * &tape.g;
    let d_g = &dc * &tape.i;
    let d_f = &dc * &tape.prev.cell;
    let d_cell_prev = &dc * &tape.f;
    let mut d_gates = Array1::zeros(4 * h);
    d_gates
        .slice_mut(s![0..h])
        .assign(&(&d_i * &tape.i.mapv(|v| v * (1.0 - v))));
    d_gates
        .slice_mut(s![h..2 * h])
        .assign(&(&d_f * &tape.f.mapv(|v| v * (1.0 - v))));
    d_gates
        .slice_mut(s![2 * h..3 * h])
        .assign(&(&d_g * &tape.g.mapv(|v| 1.0 - v * v)));
    d_gates
        .slice_mut(s![3 * h..4 * h])
        .assign(&(&d_o * &tape.o.mapv(|v| v * (1.0 - v))));
    add_outer(&mut grad.lstm_input, d_gates.view(), tape.input.view());
    add_outer(&mut grad.lstm_hidden, d_gates.view(), tape.prev.hidden.view());
    grad.lstm_bias.column_mut(0).scaled_add(1.0, &d_gates);
    let d_hidden_prev = mtv(&w.lstm_hidden, d_gates.view());
    (d_hidden_prev, d_cell_prev)
}

/// One recurrent update with `input` (padded to the recurrent input width).
pub fn encode_history(prev: &HistoryState, input: &Array1<f64>, weights: &Weights) -> Result<HistoryState> {
    if input.len() != weights.lstm_input.ncols() || prev.hidden.len() != weights.lstm_hidden.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "recurrent input {} / hidden {} vs weights {:?} / {:?}",
            input.len(),
            prev.hidden.len(),
            weights.lstm_input.dim(),
            weights.lstm_hidden.dim()
        )));
    }
    Ok(lstm_forward(prev, input.clone(), weights).next)
}
