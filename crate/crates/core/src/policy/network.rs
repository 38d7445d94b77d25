use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use super::layers::{
    add_outer, attention_backward, mtv, mv, attention_forward, interaction_backward, interaction_forward, lstm_backward,
    lstm_forward, softmax, AttentionTape, HistoryState, InteractionTape, LstmTape, QueryState,
};
use super::{Model, Weights};
use crate::env::{init_episode, Action, ActionKind, EnvState};
use crate::error::{Error, Result};
use crate::graph::KnowledgeGraph;
use crate::query::StructuredQuery;

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Lowest index among the maxima.
pub fn greedy_index(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// `[relation; target; subgraph one-hot; 0]` for an expansion and
/// `[0; last hit; subgraph one-hot; 1]` for a self-loop.
pub fn action_embedding(model: &Model, s: &EnvState, a: &Action) -> Result<Array1<f64>> {
    let dims = &model.params.dims;
    let (dr, d) = (dims.relation_dim, dims.entity_dim);
    if a.subgraph >= dims.max_subgraphs {
        return Err(Error::DimensionMismatch(format!(
            "subgraph index {} exceeds the policy's {} slots",
            a.subgraph, dims.max_subgraphs
        )));
    }
    let mut out = Array1::zeros(dims.action_dim());
    match a.kind {
        ActionKind::Expand(t) => {
            out.slice_mut(s![0..dr]).assign(&model.embeddings.relation(t.relation)?);
            out.slice_mut(s![dr..dr + d]).assign(&model.embeddings.entity(t.target)?);
        }
        ActionKind::SelfLoop => {
            let sg = s
                .subgraphs
                .get(a.subgraph)
                .ok_or_else(|| Error::IllegalAction(format!("{a:?}")))?;
            out.slice_mut(s![dr..dr + d]).assign(&model.embeddings.entity(sg.last_hit)?);
            out[dr + d + dims.max_subgraphs] = 1.0;
        }
    }
    out[dr + d + a.subgraph] = 1.0;
    Ok(out)
}

/// Forward quantities of one decision, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct DecisionTape {
    pub actions: Vec<Action>,
    pub probs: Vec<f64>,
    attention: Vec<AttentionTape>,
    interaction: InteractionTape,
    slot_weights: Array1<f64>,
    input: Array1<f64>,
    pre_hidden: Array1<f64>,
    post_hidden: Array1<f64>,
    action_matrix: Array2<f64>,
}

impl DecisionTape {
    /// Fused subgraph vectors, one row per subgraph.
    pub fn fused(&self) -> &Array2<f64> {
        &self.interaction.fused
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.probs)
    }
}

/// Per-decision summary of a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub action: Action,
    /// Index of `action` among the legal actions.
    pub chosen: usize,
    pub num_legal: usize,
    pub probability: f64,
    pub entropy: f64,
    /// Expansions taken before this decision.
    pub step: usize,
    /// Slot weights seen by this decision.
    pub slot_weights: Vec<f64>,
}

/// An action sequence to differentiate, scaled by `coefficient`.
#[derive(Clone, Copy, Debug)]
pub struct TraceView<'a> {
    pub query: &'a StructuredQuery,
    pub actions: &'a [Action],
    pub coefficient: f64,
}

/// Encoder state carried through one episode: the reduced query, the
/// projected slots and the recurrent history.
#[derive(Clone, Debug)]
pub struct EpisodeEncoder<'m> {
    model: &'m Model,
    query: QueryState,
    projected: Array2<f64>,
    history: HistoryState,
    lstm_tapes: Vec<LstmTape>,
}

impl<'m> EpisodeEncoder<'m> {
    pub fn new(model: &'m Model, q: &StructuredQuery) -> Result<Self> {
        let dims = &model.params.dims;
        let w = &model.params.weights;
        if q.anchors.is_empty() || q.anchors.len() > dims.max_subgraphs {
            return Err(Error::DimensionMismatch(format!(
                "query {} has {} anchors, the policy supports 1..={}",
                q.id,
                q.anchors.len(),
                dims.max_subgraphs
            )));
        }
        if q.slots.is_empty() {
            return Err(Error::InvalidArgument(format!("query {} has no relation slots", q.id)));
        }
        let slots = q
            .slots
            .iter()
            .map(|r| model.embeddings.relation(*r))
            .collect::<Result<Vec<_>>>()?;
        let query = QueryState::new(stack(&slots));
        let projected = query.slot_embeddings.dot(&w.slot_proj.t());

        let (dr, d) = (dims.relation_dim, dims.entity_dim);
        let mut input = Array1::zeros(dims.lstm_input_dim());
        input.slice_mut(s![0..dr]).assign(&query.summary());
        for (i, a) in q.anchors.iter().enumerate() {
            let start = dr + i * d;
            input.slice_mut(s![start..start + d]).assign(&model.embeddings.entity(*a)?);
        }
        let tape = lstm_forward(&HistoryState::zeros(dims), input, w);
        Ok(EpisodeEncoder {
            model,
            query,
            projected,
            history: tape.next.clone(),
            lstm_tapes: vec![tape],
        })
    }

    pub fn query(&self) -> &QueryState {
        &self.query
    }

    pub fn history(&self) -> &HistoryState {
        &self.history
    }

    /// Scores `actions` in state `s`.
    pub fn decide(&self, s: &EnvState, actions: &[Action]) -> Result<DecisionTape> {
        if actions.is_empty() {
            return Err(Error::InvalidArgument("no legal actions to score".into()));
        }
        let dims = &self.model.params.dims;
        let w = &self.model.params.weights;
        let n = s.num_subgraphs();
        if n == 0 || n > dims.max_subgraphs {
            return Err(Error::DimensionMismatch(format!(
                "{n} subgraphs, the policy supports 1..={}",
                dims.max_subgraphs
            )));
        }
        let mut attention = Vec::with_capacity(n);
        for sg in &s.subgraphs {
            let rows = sg
                .nodes
                .iter()
                .map(|e| self.model.embeddings.entity(*e))
                .collect::<Result<Vec<_>>>()?;
            attention.push(attention_forward(
                stack(&rows),
                self.projected.view(),
                &self.query.slot_weights,
            )?);
        }
        let summaries = stack(&attention.iter().map(|t| t.output.view()).collect::<Vec<_>>());
        let interaction = interaction_forward(summaries, w, self.model.params.tau);

        let fd = dims.fused_dim();
        let mut input = Array1::zeros(dims.policy_input_dim());
        for (i, row) in interaction.fused.rows().into_iter().enumerate() {
            input.slice_mut(s![i * fd..(i + 1) * fd]).assign(&row);
        }
        let off = dims.max_subgraphs * fd;
        let h = dims.lstm_hidden;
        input.slice_mut(s![off..off + h]).assign(&self.history.hidden);
        input.slice_mut(s![off + h..]).assign(&self.query.summary());

        let pre_hidden = mv(&w.w1, input.view());
        let post_hidden = pre_hidden.mapv(|v| v.max(0.0));
        let u = mv(&w.w2, post_hidden.view());
        let embedded = actions
            .iter()
            .map(|a| action_embedding(self.model, s, a))
            .collect::<Result<Vec<_>>>()?;
        let action_matrix = stack(&embedded.iter().map(|e| e.view()).collect::<Vec<_>>());
        let scores = mv(&action_matrix, u.view());
        let probs = softmax(scores.as_slice().expect("contiguous"));
        Ok(DecisionTape {
            actions: actions.to_vec(),
            probs,
            attention,
            interaction,
            slot_weights: self.query.slot_weights.clone(),
            input,
            pre_hidden,
            post_hidden,
            action_matrix,
        })
    }

    /// Advances the history and the query weights past action `a`, taken in state `s`.
    pub fn observe(&mut self, s: &EnvState, a: &Action) -> Result<()> {
        let dims = &self.model.params.dims;
        let embedded = action_embedding(self.model, s, a)?;
        let mut input = Array1::zeros(dims.lstm_input_dim());
        let off = dims.relation_dim + dims.max_subgraphs * dims.entity_dim;
        input.slice_mut(s![off..]).assign(&embedded);
        let tape = lstm_forward(&self.history, input, &self.model.params.weights);
        self.history = tape.next.clone();
        self.lstm_tapes.push(tape);
        if let ActionKind::Expand(t) = a.kind {
            let r = self.model.embeddings.relation(t.relation)?;
            self.query = self.query.reduce(r, self.model.params.eta);
        }
        Ok(())
    }

    /// Gradient of `coefficient * log pi(chosen)` for one decision; returns the
    /// gradient with respect to the history vector it read.
    fn decision_backward(&self, tape: &DecisionTape, chosen: usize, coefficient: f64, grad: &mut Weights) -> Array1<f64> {
        let dims = &self.model.params.dims;
        let w = &self.model.params.weights;
        let mut d_scores: Array1<f64> = tape.probs.iter().map(|p| -coefficient * p).collect();
        d_scores[chosen] += coefficient;
        let du = mtv(&tape.action_matrix, d_scores.view());
        add_outer(&mut grad.w2, du.view(), tape.post_hidden.view());
        let dz = mtv(&w.w2, du.view());
        let d_pre: Array1<f64> = dz
            .iter()
            .zip(&tape.pre_hidden)
            .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
            .collect();
        add_outer(&mut grad.w1, d_pre.view(), tape.input.view());
        let dx = mtv(&w.w1, d_pre.view());

        let fd = dims.fused_dim();
        let n = tape.attention.len();
        let mut d_fused = Array2::zeros((n, fd));
        for i in 0..n {
            d_fused.row_mut(i).assign(&dx.slice(s![i * fd..(i + 1) * fd]));
        }
        let off = dims.max_subgraphs * fd;
        let d_hidden = dx.slice(s![off..off + dims.lstm_hidden]).to_owned();

        let d_summaries = interaction_backward(&tape.interaction, w, self.model.params.tau, &d_fused, grad);
        let mut d_projected = Array2::zeros(self.projected.raw_dim());
        for (att, d_out) in tape.attention.iter().zip(d_summaries.rows()) {
            d_projected += &attention_backward(att, &tape.slot_weights, d_out);
        }
        grad.slot_proj += &d_projected.t().dot(&self.query.slot_embeddings);
        d_hidden
    }
}

fn stack(rows: &[ArrayView1<f64>]) -> Array2<f64> {
    ndarray::stack(Axis(0), rows).expect("rows share a length")
}

/// Probabilities of `actions` in state `s` under the encoder's current history.
pub fn action_distribution(encoder: &EpisodeEncoder, s: &EnvState, actions: &[Action]) -> Result<Vec<f64>> {
    Ok(encoder.decide(s, actions)?.probs)
}

/// Sum of log-probabilities of the trace's actions, replayed from the start.
pub fn log_likelihood(model: &Model, g: &KnowledgeGraph, q: &StructuredQuery, actions: &[Action]) -> Result<f64> {
    let mut enc = EpisodeEncoder::new(model, q)?;
    let mut state = init_episode(g, q)?;
    let mut total = 0.0;
    for a in actions {
        let legal = state.legal_actions(g);
        let idx = position(&legal, a)?;
        total += enc.decide(&state, &legal)?.probs[idx].ln();
        enc.observe(&state, a)?;
        state.apply(g, a)?;
    }
    Ok(total)
}

fn position(legal: &[Action], a: &Action) -> Result<usize> {
    legal
        .iter()
        .position(|x| x == a)
        .ok_or_else(|| Error::IllegalAction(format!("{a:?}")))
}

/// Gradient of `coefficient * sum_t log pi(a_t | s_t)` with respect to the
/// trainable weights.
pub fn backward(model: &Model, g: &KnowledgeGraph, trace: TraceView) -> Result<Weights> {
    let mut grad = model.params.weights.zeros_like();
    backward_into(model, g, trace, &mut grad)?;
    Ok(grad)
}

/// Adds the gradient of `trace` to `grad`.
pub fn backward_into(model: &Model, g: &KnowledgeGraph, trace: TraceView, grad: &mut Weights) -> Result<()> {
    let w = &model.params.weights;
    let mut enc = EpisodeEncoder::new(model, trace.query)?;
    let mut state = init_episode(g, trace.query)?;
    let mut d_history = Vec::with_capacity(trace.actions.len());
    for a in trace.actions {
        let legal = state.legal_actions(g);
        let idx = position(&legal, a)?;
        let tape = enc.decide(&state, &legal)?;
        d_history.push(enc.decision_backward(&tape, idx, trace.coefficient, grad));
        enc.observe(&state, a)?;
        state.apply(g, a)?;
    }
    let h = model.params.dims.lstm_hidden;
    let mut carry_h = Array1::zeros(h);
    let mut carry_c = Array1::zeros(h);
    for t in (0..d_history.len()).rev() {
        let dh = &d_history[t] + &carry_h;
        let (ph, pc) = lstm_backward(&enc.lstm_tapes[t], &dh, &carry_c, w, grad);
        carry_h = ph;
        carry_c = pc;
    }
    Ok(())
}
