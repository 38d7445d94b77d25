//! Evaluation metrics, per-step diagnostics and comparison baselines.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::env::{init_episode, predict_answer, Action, ActionKind, EnvState};
use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, RelationId};
use crate::policy::{sample_index, EpisodeEncoder, Model, QueryState, StepRecord};
use crate::query::StructuredQuery;
use crate::trainer::{answer_scores, derive_seed, rollout_with, EpisodeTrace, Policy, PolicyEpisode};

/// 1 when `gold` is among the first `k` entries of `ranked`.
pub fn hits_at_k(ranked: &[EntityId], gold: EntityId, k: usize) -> usize {
    usize::from(ranked.iter().take(k).any(|e| *e == gold))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedEntity {
    pub entity: EntityId,
    pub log_prob: f64,
}

#[derive(Clone)]
struct Beam<'m> {
    encoder: EpisodeEncoder<'m>,
    state: EnvState,
    steps: Vec<StepRecord>,
    log_prob: f64,
}

/// Beam search over action sequences. Terminal states are scored by their
/// accumulated log-probability and mapped to their predicted entity; each
/// entity keeps its best score. `usize::MAX` enumerates every sequence.
pub fn rank_candidates(
    model: &Model,
    g: &KnowledgeGraph,
    q: &StructuredQuery,
    beam_width: usize,
    max_steps: usize,
) -> Result<Vec<RankedEntity>> {
    if beam_width == 0 {
        return Err(Error::InvalidArgument("beam width must be positive".into()));
    }
    let mut live = vec![Beam {
        encoder: EpisodeEncoder::new(model, q)?,
        state: init_episode(g, q)?,
        steps: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<(EntityId, f64)> = Vec::new();
    while !live.is_empty() {
        let mut pool = Vec::new();
        for beam in &live {
            let legal = beam.state.legal_actions(g);
            let tape = beam.encoder.decide(&beam.state, &legal)?;
            for (i, (a, p)) in legal.iter().zip(&tape.probs).enumerate() {
                pool.push((beam.log_prob + p.ln(), &*beam, *a, i, *p, legal.len(), tape.entropy()));
            }
        }
        // stable: equal scores keep beam order, then action order
        pool.sort_by(|a, b| b.0.total_cmp(&a.0));
        pool.truncate(beam_width);
        let mut next = Vec::with_capacity(pool.len());
        for (log_prob, parent, action, chosen, probability, num_legal, h) in pool {
            let mut beam = parent.clone();
            beam.steps.push(StepRecord {
                action,
                chosen,
                num_legal,
                probability,
                entropy: h,
                step: beam.state.step,
                slot_weights: beam.encoder.query().slot_weights.to_vec(),
            });
            beam.encoder.observe(&beam.state, &action)?;
            beam.state.apply(g, &action)?;
            beam.log_prob = log_prob;
            if beam.state.is_terminal(max_steps) {
                let e = predict_answer(&beam.state, &answer_scores(&beam.steps, &beam.state));
                finished.push((e, log_prob));
            } else {
                next.push(beam);
            }
        }
        live = next;
    }
    let mut best: BTreeMap<EntityId, f64> = BTreeMap::new();
    for (e, lp) in finished {
        let slot = best.entry(e).or_insert(f64::NEG_INFINITY);
        *slot = slot.max(lp);
    }
    let mut ranked: Vec<RankedEntity> = best
        .into_iter()
        .map(|(entity, log_prob)| RankedEntity { entity, log_prob })
        .collect();
    ranked.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then(a.entity.cmp(&b.entity)));
    Ok(ranked)
}

/// Entities reachable from `start` using only edges labelled with `relations`.
pub fn reachable_set(g: &KnowledgeGraph, start: EntityId, relations: &HashSet<RelationId>) -> BTreeSet<EntityId> {
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(e) = queue.pop_front() {
        for &(r, t) in g.outgoing(e).unwrap_or(&[]) {
            if relations.contains(&r) && seen.insert(t) {
                queue.push_back(t);
            }
        }
    }
    seen
}

/// Per-decision correctness of one trace. `None` for self-loops; for an
/// expansion, `Some(true)` when its target is not the gold answer and gold
/// cannot be reached from it through slot relations still weighted after
/// the expansion.
pub fn judge_trace(
    g: &KnowledgeGraph,
    embeddings: &EmbeddingTable,
    eta: f64,
    q: &StructuredQuery,
    trace: &EpisodeTrace,
) -> Result<Vec<Option<bool>>> {
    let slots = q
        .slots
        .iter()
        .map(|r| embeddings.relation(*r))
        .collect::<Result<Vec<_>>>()?;
    let mut query = QueryState::new(ndarray::stack(ndarray::Axis(0), &slots).map_err(|e| Error::ShapeMismatch(e.to_string()))?);
    let mut out = Vec::with_capacity(trace.steps.len());
    for step in &trace.steps {
        let ActionKind::Expand(t) = step.action.kind else {
            out.push(None);
            continue;
        };
        query = query.reduce(embeddings.relation(t.relation)?, eta);
        if t.target == q.gold {
            out.push(Some(false));
            continue;
        }
        let remaining: HashSet<RelationId> = q
            .slots
            .iter()
            .zip(&query.slot_weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(r, _)| *r)
            .collect();
        out.push(Some(!reachable_set(g, t.target, &remaining).contains(&q.gold)));
    }
    Ok(out)
}

/// Fraction of wrong expansions at each expansion index (0-based), over the
/// traces that reached that index.
pub fn error_rate_from_judgements(judged: &[Vec<Option<bool>>]) -> Vec<f64> {
    let mut wrong: Vec<usize> = Vec::new();
    let mut total: Vec<usize> = Vec::new();
    for trace in judged {
        for (t, w) in trace.iter().flatten().enumerate() {
            if t >= total.len() {
                total.push(0);
                wrong.push(0);
            }
            total[t] += 1;
            wrong[t] += usize::from(*w);
        }
    }
    wrong.iter().zip(&total).map(|(w, n)| *w as f64 / *n as f64).collect()
}

/// Mean action-distribution entropy at each decision index.
pub fn entropy_per_step(traces: &[EpisodeTrace]) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut count: Vec<usize> = Vec::new();
    for trace in traces {
        for (t, step) in trace.steps.iter().enumerate() {
            if t >= sum.len() {
                sum.push(0.0);
                count.push(0);
            }
            sum[t] += step.entropy;
            count[t] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, n)| s / *n as f64).collect()
}

/// `(H1 - H2) / (H2 - H3)`; `None` with fewer than three steps or a zero denominator.
pub fn entropy_ratio(per_step: &[f64]) -> Option<f64> {
    let [h1, h2, h3, ..] = per_step else {
        return None;
    };
    let den = h2 - h3;
    (den != 0.0).then(|| (h1 - h2) / den)
}

/// Bucket label: expansions so far and the sorted slot weights rounded to 0.25.
pub fn state_bucket(step: usize, slot_weights: &[f64]) -> String {
    let mut w: Vec<f64> = slot_weights.iter().map(|v| (v * 4.0).round() / 4.0).collect();
    w.sort_by(f64::total_cmp);
    let parts: Vec<String> = w.iter().map(|v| format!("{v:.2}")).collect();
    format!("{step}|{}", parts.join(" "))
}

/// One expansion decision seen from a bucketed state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RiskVisit {
    pub bucket: String,
    pub subgraph: usize,
    pub wrong: bool,
}

pub fn risk_visits(trace: &EpisodeTrace, judged: &[Option<bool>]) -> Vec<RiskVisit> {
    trace
        .steps
        .iter()
        .zip(judged)
        .filter_map(|(step, w)| {
            w.map(|wrong| RiskVisit {
                bucket: state_bucket(step.step, &step.slot_weights),
                subgraph: step.action.subgraph,
                wrong,
            })
        })
        .collect()
}

/// Wrong choices of subgraph `i` in a bucket over all choices of `i` there.
pub fn risk_estimate(visits: &[RiskVisit]) -> BTreeMap<(String, usize), f64> {
    let mut counts: BTreeMap<(String, usize), (usize, usize)> = BTreeMap::new();
    for v in visits {
        let c = counts.entry((v.bucket.clone(), v.subgraph)).or_default();
        c.0 += usize::from(v.wrong);
        c.1 += 1;
    }
    counts
        .into_iter()
        .map(|(k, (w, n))| (k, w as f64 / n as f64))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaselineKind {
    RandomOrder,
    FixedOrder,
    GreedyLocal,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::RandomOrder, BaselineKind::FixedOrder, BaselineKind::GreedyLocal];

    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineKind::RandomOrder => "random-order",
            BaselineKind::FixedOrder => "fixed-order",
            BaselineKind::GreedyLocal => "greedy-local",
        }
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown baseline {s:?}")))
    }
}

/// Order heuristics that pick edges by relation similarity to the remaining slots.
#[derive(Clone, Debug)]
pub struct Baseline<'e> {
    pub kind: BaselineKind,
    embeddings: &'e EmbeddingTable,
    eta: f64,
}

pub fn baseline_policy<'e>(name: &str, embeddings: &'e EmbeddingTable, eta: f64) -> Result<Baseline<'e>> {
    Ok(Baseline {
        kind: name.parse()?,
        embeddings,
        eta,
    })
}

impl<'e> Baseline<'e> {
    pub fn new(kind: BaselineKind, embeddings: &'e EmbeddingTable, eta: f64) -> Self {
        Baseline { kind, embeddings, eta }
    }
}

struct BaselineEpisode<'e> {
    kind: BaselineKind,
    embeddings: &'e EmbeddingTable,
    eta: f64,
    query: QueryState,
    decisions: usize,
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

impl Policy for Baseline<'_> {
    fn name(&self) -> String {
        self.kind.as_str().into()
    }

    fn start<'a>(&'a self, q: &StructuredQuery) -> Result<Box<dyn PolicyEpisode + 'a>> {
        let slots = q
            .slots
            .iter()
            .map(|r| self.embeddings.relation(*r))
            .collect::<Result<Vec<_>>>()?;
        if slots.is_empty() {
            return Err(Error::InvalidArgument(format!("query {} has no relation slots", q.id)));
        }
        Ok(Box::new(BaselineEpisode {
            kind: self.kind,
            embeddings: self.embeddings,
            eta: self.eta,
            query: QueryState::new(ndarray::stack(ndarray::Axis(0), &slots).expect("equal widths")),
            decisions: 0,
        }))
    }
}

impl BaselineEpisode<'_> {
    /// Best similarity of `r` to any slot that still has weight.
    fn similarity(&self, r: RelationId) -> Result<f64> {
        let v = self.embeddings.relation(r)?;
        Ok(self
            .query
            .slot_embeddings
            .rows()
            .into_iter()
            .zip(&self.query.slot_weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(s, _)| cosine(v, s))
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Uniform over the subgraph's most slot-like edges, or its self-loop.
    fn edge_choice(&self, legal: &[Action], subgraph: usize) -> Result<Vec<usize>> {
        let mut best = 0.0;
        let mut picks = Vec::new();
        for (i, a) in legal.iter().enumerate() {
            let Some(t) = a.triple().filter(|_| a.subgraph == subgraph) else {
                continue;
            };
            let s = self.similarity(t.relation)?;
            if s > best + 1e-12 {
                best = s;
                picks.clear();
            }
            if s > 0.0 && (s - best).abs() <= 1e-12 {
                picks.push(i);
            }
        }
        if picks.is_empty() {
            let own = legal
                .iter()
                .position(|a| a.subgraph == subgraph && a.is_self_loop())
                .expect("live subgraphs offer a self-loop");
            picks.push(own);
        }
        Ok(picks)
    }
}

impl PolicyEpisode for BaselineEpisode<'_> {
    fn distribution(&mut self, s: &EnvState, legal: &[Action]) -> Result<Vec<f64>> {
        let live: Vec<usize> = (0..s.num_subgraphs()).filter(|i| !s.subgraphs[*i].terminated).collect();
        if live.is_empty() || legal.is_empty() {
            return Err(Error::InvalidArgument("no legal actions to score".into()));
        }
        let mut probs = vec![0.0; legal.len()];
        let chosen: Vec<usize> = match self.kind {
            BaselineKind::RandomOrder => live.clone(),
            BaselineKind::FixedOrder => {
                let n = s.num_subgraphs();
                let first = (0..n)
                    .map(|k| (self.decisions + k) % n)
                    .find(|i| live.contains(i))
                    .expect("some subgraph is live");
                vec![first]
            }
            BaselineKind::GreedyLocal => {
                let size = |i: usize| legal.iter().filter(|a| a.subgraph == i).count();
                let min = live.iter().map(|i| size(*i)).min().expect("nonempty");
                vec![*live.iter().find(|i| size(**i) == min).expect("nonempty")]
            }
        };
        for &sg in &chosen {
            let picks = self.edge_choice(legal, sg)?;
            for i in &picks {
                probs[*i] += 1.0 / (chosen.len() * picks.len()) as f64;
            }
        }
        Ok(probs)
    }

    fn observe(&mut self, _s: &EnvState, a: &Action) -> Result<()> {
        self.decisions += 1;
        if let ActionKind::Expand(t) = a.kind {
            self.query = self.query.reduce(self.embeddings.relation(t.relation)?, self.eta);
        }
        Ok(())
    }

    fn slot_weights(&self) -> Vec<f64> {
        self.query.slot_weights.to_vec()
    }
}

/// Uniform over the legal actions.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformPolicy;

struct UniformEpisode(usize);

impl Policy for UniformPolicy {
    fn name(&self) -> String {
        "uniform".into()
    }

    fn start<'a>(&'a self, q: &StructuredQuery) -> Result<Box<dyn PolicyEpisode + 'a>> {
        Ok(Box::new(UniformEpisode(q.slots.len())))
    }
}

impl PolicyEpisode for UniformEpisode {
    fn distribution(&mut self, _s: &EnvState, legal: &[Action]) -> Result<Vec<f64>> {
        if legal.is_empty() {
            return Err(Error::InvalidArgument("no legal actions to score".into()));
        }
        Ok(vec![1.0 / legal.len() as f64; legal.len()])
    }

    fn observe(&mut self, _s: &EnvState, _a: &Action) -> Result<()> {
        Ok(())
    }

    fn slot_weights(&self) -> Vec<f64> {
        vec![1.0; self.0]
    }
}

/// Sampled rollouts of `policy`, `trials` per query, in query-major order.
/// Each rollout draws from its own seed so the result does not depend on
/// thread scheduling.
pub fn sample_traces(
    policy: &dyn Policy,
    g: &KnowledgeGraph,
    queries: &[StructuredQuery],
    trials: usize,
    seed: u64,
    max_steps: Option<usize>,
    lambda: f64,
) -> Result<Vec<Vec<EpisodeTrace>>> {
    queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| {
            let cap = max_steps.unwrap_or_else(|| crate::env::default_max_steps(q));
            (0..trials)
                .map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, qi as u64, t as u64]));
                    rollout_with(policy, g, q, cap, lambda, |p| sample_index(p, &mut rng))
                })
                .collect()
        })
        .collect()
}

/// True when the first expansion of `trace` grows the anchor of smallest out-degree.
pub fn expands_low_fanout_first(g: &KnowledgeGraph, q: &StructuredQuery, trace: &EpisodeTrace) -> Option<bool> {
    let first = trace.steps.iter().find(|s| !s.action.is_self_loop())?;
    let degree = |a: &EntityId| g.out_degree(*a);
    let min = q.anchors.iter().map(degree).min()?;
    Some(degree(&q.anchors[first.action.subgraph]) == min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub beam_width: usize,
    /// Sampled rollouts per query for the per-step diagnostics and baselines.
    pub trials: usize,
    pub seed: u64,
    pub max_steps: Option<usize>,
    pub lambda_util: f64,
    pub baselines: Vec<BaselineKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beam_width: 10,
            trials: 20,
            seed: 0,
            max_steps: None,
            lambda_util: 0.5,
            baselines: BaselineKind::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub queries: usize,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    /// Greedy-rollout hits@1.
    pub greedy_hits1: f64,
    /// Share of greedy rollouts whose first expansion grows the lowest-degree anchor.
    pub low_fanout_first: f64,
    /// Sample variance of greedy terminal rewards over the queries.
    pub reward_variance: f64,
    pub per_step_error_rate: Vec<f64>,
    pub per_step_entropy: Vec<f64>,
    pub entropy_ratio: Option<f64>,
    pub risk_table: BTreeMap<(String, usize), f64>,
    /// Sampled hits@1 of each baseline.
    pub baseline_hits1: BTreeMap<String, f64>,
    /// Greedy hits@1 minus each baseline's hits@1.
    pub baseline_deltas: BTreeMap<String, f64>,
}

/// Per-step error rates, entropies and risk from sampled traces of any policy.
pub struct Diagnostics {
    pub error_rate: Vec<f64>,
    pub entropy: Vec<f64>,
    pub risk: BTreeMap<(String, usize), f64>,
    pub hits1: f64,
    pub reward_variance: f64,
}

pub fn diagnose(
    g: &KnowledgeGraph,
    embeddings: &EmbeddingTable,
    eta: f64,
    queries: &[StructuredQuery],
    traces: &[Vec<EpisodeTrace>],
) -> Result<Diagnostics> {
    let mut judged = Vec::new();
    let mut visits = Vec::new();
    let mut flat = Vec::new();
    let mut hits = 0;
    let mut rewards = Vec::new();
    for (q, ts) in queries.iter().zip(traces) {
        for t in ts {
            let j = judge_trace(g, embeddings, eta, q, t)?;
            visits.extend(risk_visits(t, &j));
            judged.push(j);
            hits += usize::from(t.predicted == q.gold);
            rewards.push(t.terminal_reward);
            flat.push(t.clone());
        }
    }
    Ok(Diagnostics {
        error_rate: error_rate_from_judgements(&judged),
        entropy: entropy_per_step(&flat),
        risk: risk_estimate(&visits),
        hits1: hits as f64 / flat.len().max(1) as f64,
        reward_variance: crate::trainer::sample_variance(&rewards),
    })
}

/// The per-step error rate of `policy` on `queries`, `trials` sampled rollouts each.
pub fn error_rate_per_step(
    g: &KnowledgeGraph,
    queries: &[StructuredQuery],
    policy: &dyn Policy,
    embeddings: &EmbeddingTable,
    eta: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let traces = sample_traces(policy, g, queries, trials, seed, None, 0.0)?;
    Ok(diagnose(g, embeddings, eta, queries, &traces)?.error_rate)
}

pub fn evaluate(model: &Model, g: &KnowledgeGraph, queries: &[StructuredQuery], cfg: &EvalConfig) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::NoQueries);
    }
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    model.embeddings.check_graph(g)?;
    let cap = |q: &StructuredQuery| cfg.max_steps.unwrap_or_else(|| crate::env::default_max_steps(q));
    let per_query = queries
        .par_iter()
        .map(|q| {
            let ranked = rank_candidates(model, g, q, cfg.beam_width, cap(q))?;
            let ids: Vec<EntityId> = ranked.iter().map(|r| r.entity).collect();
            let greedy = rollout_with(model, g, q, cap(q), cfg.lambda_util, crate::policy::greedy_index)?;
            Ok(([1, 3, 10].map(|k| hits_at_k(&ids, q.gold, k)), greedy))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = queries.len() as f64;
    let hits = |i: usize| per_query.iter().map(|(h, _)| h[i]).sum::<usize>() as f64 / n;
    let greedy_hits1 = per_query
        .iter()
        .zip(queries)
        .filter(|((_, t), q)| t.predicted == q.gold)
        .count() as f64
        / n;
    let low_first = per_query
        .iter()
        .zip(queries)
        .filter(|((_, t), q)| expands_low_fanout_first(g, q, t) == Some(true))
        .count() as f64
        / n;
    let greedy_rewards: Vec<f64> = per_query.iter().map(|(_, t)| t.terminal_reward).collect();

    let eta = model.params.eta;
    let traces = sample_traces(model, g, queries, cfg.trials, cfg.seed, cfg.max_steps, cfg.lambda_util)?;
    let diag = diagnose(g, &model.embeddings, eta, queries, &traces)?;

    let mut baseline_hits1 = BTreeMap::new();
    let mut baseline_deltas = BTreeMap::new();
    for kind in &cfg.baselines {
        let policy = Baseline::new(*kind, &model.embeddings, eta);
        let seed = derive_seed(&[cfg.seed, 1 + *kind as u64]);
        let bt = sample_traces(&policy, g, queries, cfg.trials, seed, cfg.max_steps, cfg.lambda_util)?;
        let h = diagnose(g, &model.embeddings, eta, queries, &bt)?.hits1;
        baseline_hits1.insert(kind.as_str().to_string(), h);
        baseline_deltas.insert(kind.as_str().to_string(), greedy_hits1 - h);
    }
    Ok(EvalReport {
        queries: queries.len(),
        hits1: hits(0),
        hits3: hits(1),
        hits10: hits(2),
        greedy_hits1,
        low_fanout_first: low_first,
        reward_variance: crate::trainer::sample_variance(&greedy_rewards),
        entropy_ratio: entropy_ratio(&diag.entropy),
        per_step_error_rate: diag.error_rate,
        per_step_entropy: diag.entropy,
        risk_table: diag.risk,
        baseline_hits1,
        baseline_deltas,
    })
}

pub const REPORT_HEADER: &str = "metric,value";
pub const PER_STEP_HEADER: &str = "step,error_rate,entropy";
pub const RISK_HEADER: &str = "bucket,subgraph,risk";

impl EvalReport {
    /// `metric,value` rows.
    pub fn report_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        let mut row = |k: &str, v: String| writeln!(out, "{k},{v}").expect("string write");
        row("queries", self.queries.to_string());
        row("hits@1", self.hits1.to_string());
        row("hits@3", self.hits3.to_string());
        row("hits@10", self.hits10.to_string());
        row("greedy_hits@1", self.greedy_hits1.to_string());
        row("low_fanout_first", self.low_fanout_first.to_string());
        row("reward_variance", self.reward_variance.to_string());
        row(
            "entropy_ratio",
            self.entropy_ratio.map(|v| v.to_string()).unwrap_or_default(),
        );
        for (k, v) in &self.baseline_hits1 {
            row(&format!("baseline_hits@1:{k}"), v.to_string());
        }
        for (k, v) in &self.baseline_deltas {
            row(&format!("baseline_delta:{k}"), v.to_string());
        }
        out
    }

    /// Steps are 1-based. Error rates index expansions, entropies index
    /// decisions; a missing value is left empty.
    pub fn per_step_csv(&self) -> String {
        let mut out = format!("{PER_STEP_HEADER}\n");
        let n = self.per_step_error_rate.len().max(self.per_step_entropy.len());
        let cell = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in 0..n {
            writeln!(
                out,
                "{},{},{}",
                t + 1,
                cell(self.per_step_error_rate.get(t)),
                cell(self.per_step_entropy.get(t))
            )
            .expect("string write");
        }
        out
    }

    pub fn risk_csv(&self) -> String {
        let mut out = format!("{RISK_HEADER}\n");
        for ((bucket, sg), r) in &self.risk_table {
            writeln!(out, "{bucket},{sg},{r}").expect("string write");
        }
        out
    }

    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.csv", self.report_csv()),
            ("per_step.csv", self.per_step_csv()),
            ("risk.csv", self.risk_csv()),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "hits@1={:.4} hits@3={:.4} hits@10={:.4} greedy_hits@1={:.4}",
            self.hits1, self.hits3, self.hits10, self.greedy_hits1
        );
        for (k, v) in &self.baseline_deltas {
            write!(out, "\ndelta vs {k}: {v:+.4}").expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::init_one_hot;
    use crate::graph::TripleDialect;
    use crate::policy::{entropy, PolicyDims, PolicyParameters};

    #[test]
    fn hits_examples() {
        let (gold, x, y) = (EntityId(0), EntityId(1), EntityId(2));
        assert_eq!(hits_at_k(&[gold, x, y], gold, 1), 1);
        assert_eq!(hits_at_k(&[x, gold], gold, 1), 0);
        assert_eq!(hits_at_k(&[x, gold], gold, 3), 1);
        assert_eq!(hits_at_k(&[], gold, 10), 0);
    }

    #[test]
    fn entropy_examples() {
        let trace = |probs: &[f64]| EpisodeTrace {
            query_id: "q".into(),
            steps: vec![StepRecord {
                action: Action::self_loop(0),
                chosen: 0,
                num_legal: probs.len(),
                probability: probs[0],
                entropy: entropy(probs),
                step: 0,
                slot_weights: vec![],
            }],
            final_state: EnvState {
                subgraphs: vec![],
                step: 0,
                consumed: vec![],
            },
            predicted: EntityId(0),
            terminal_reward: 0.0,
        };
        let h = entropy_per_step(&[trace(&[0.25; 4])]);
        assert!((h[0] - 4f64.ln()).abs() < 1e-15);
        assert!((h[0] - 1.3863).abs() < 1e-4);
        assert_eq!(entropy_per_step(&[trace(&[1.0])]), vec![0.0]);
        assert_eq!(entropy_ratio(&[3.0, 2.0, 1.5]), Some(2.0));
        assert_eq!(entropy_ratio(&[3.0, 2.0]), None);
        assert_eq!(entropy_ratio(&[1.0, 1.0, 1.0]), None);
    }

    #[test]
    fn risk_examples() {
        let visit = |sg, wrong| RiskVisit {
            bucket: "s".into(),
            subgraph: sg,
            wrong,
        };
        // ten visits, subgraph 0 chosen four times and wrong once
        let mut visits = vec![visit(0, true), visit(0, false), visit(0, false), visit(0, false)];
        visits.extend((0..6).map(|_| visit(1, false)));
        let table = risk_estimate(&visits);
        assert_eq!(table[&("s".to_string(), 0)], 0.25);
        assert_eq!(table[&("s".to_string(), 1)], 0.0);
        assert!(!table.contains_key(&("s".to_string(), 2)));
    }

    #[test]
    fn bucket_label() {
        assert_eq!(state_bucket(2, &[1.0, 0.1, 0.4]), "2|0.00 0.50 1.00");
    }

    fn fanout_fixture() -> (KnowledgeGraph, EmbeddingTable, StructuredQuery) {
        // anchor a has out-degree 2, anchor h has out-degree 4
        let text = "a\tr\tx\na\ts\ty\nh\tt\tx\nh\tt\tp\nh\tt\tq\nh\tt\tw\n";
        let g = KnowledgeGraph::parse(text, TripleDialect::default()).unwrap();
        let emb = init_one_hot(&g, 4, 0).unwrap();
        let q = StructuredQuery {
            id: "q".into(),
            anchors: vec![g.entity_id("a").unwrap(), g.entity_id("h").unwrap()],
            slots: vec![g.relation_id("r").unwrap(), g.relation_id("t").unwrap()],
            gold: g.entity_id("x").unwrap(),
        };
        (g, emb, q)
    }

    fn first_distribution(p: &dyn Policy, g: &KnowledgeGraph, q: &StructuredQuery) -> (Vec<Action>, Vec<f64>) {
        let s = init_episode(g, q).unwrap();
        let legal = s.legal_actions(g);
        let probs = p.start(q).unwrap().distribution(&s, &legal).unwrap();
        (legal, probs)
    }

    #[test]
    fn baselines_pick_slot_like_edges() {
        let (g, emb, q) = fanout_fixture();
        let random = baseline_policy("random-order", &emb, 1.0).unwrap();
        let (legal, p) = first_distribution(&random, &g, &q);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, pi) in legal.iter().zip(&p) {
            let expect = match (a.subgraph, a.triple().map(|t| g.relation_label(t.relation).unwrap())) {
                (0, Some("r")) => 0.5,
                (1, Some("t")) => 0.125,
                _ => 0.0,
            };
            assert!((pi - expect).abs() < 1e-12, "{a:?}");
        }
        let local = baseline_policy("greedy-local", &emb, 1.0).unwrap();
        let (legal, p) = first_distribution(&local, &g, &q);
        let chosen = greedy_index_of(&p);
        assert_eq!(legal[chosen].subgraph, 0);
        assert!(baseline_policy("nope", &emb, 1.0).is_err());
    }

    fn greedy_index_of(p: &[f64]) -> usize {
        crate::policy::greedy_index(p)
    }

    #[test]
    fn fixed_order_alternates() {
        let text = "a\tr\tb\nb\tr\tc\nc\tr\td\nd\tr\te\nh\tr\ti\ni\tr\tj\nj\tr\tk\nk\tr\tl\n";
        let g = KnowledgeGraph::parse(text, TripleDialect::default()).unwrap();
        let emb = init_one_hot(&g, 4, 0).unwrap();
        let r = g.relation_id("r").unwrap();
        let q = StructuredQuery {
            id: "q".into(),
            anchors: vec![g.entity_id("a").unwrap(), g.entity_id("h").unwrap()],
            slots: vec![r; 4],
            gold: g.entity_id("e").unwrap(),
        };
        // eta small so slots stay weighted through four expansions
        let fixed = baseline_policy("fixed-order", &emb, 0.1).unwrap();
        let t = rollout_with(&fixed, &g, &q, 4, 0.5, crate::policy::greedy_index).unwrap();
        let order: Vec<usize> = t.steps.iter().map(|s| s.action.subgraph).collect();
        assert_eq!(order, vec![0, 1, 0, 1]);
    }

    #[test]
    fn random_order_is_reproducible() {
        let (g, emb, q) = fanout_fixture();
        let random = baseline_policy("random-order", &emb, 1.0).unwrap();
        let queries = vec![q];
        let a = sample_traces(&random, &g, &queries, 5, 3, None, 0.5).unwrap();
        let b = sample_traces(&random, &g, &queries, 5, 3, None, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn judge_flags_dead_ends() {
        let (g, emb, q) = fanout_fixture();
        let s = init_episode(&g, &q).unwrap();
        let legal = s.legal_actions(&g);
        let pick = |sg: usize, target: &str| {
            *legal
                .iter()
                .find(|a| a.subgraph == sg && a.triple().map(|t| t.target) == g.entity_id(target))
                .unwrap()
        };
        let trace = |a: Action| EpisodeTrace {
            query_id: "q".into(),
            steps: vec![StepRecord {
                action: a,
                chosen: 0,
                num_legal: 1,
                probability: 1.0,
                entropy: 0.0,
                step: 0,
                slot_weights: vec![1.0, 1.0],
            }],
            final_state: s.clone(),
            predicted: EntityId(0),
            terminal_reward: 0.0,
        };
        assert_eq!(judge_trace(&g, &emb, 1.0, &q, &trace(pick(0, "x"))).unwrap(), vec![Some(false)]);
        assert_eq!(judge_trace(&g, &emb, 1.0, &q, &trace(pick(0, "y"))).unwrap(), vec![Some(true)]);
        assert_eq!(judge_trace(&g, &emb, 1.0, &q, &trace(pick(1, "p"))).unwrap(), vec![Some(true)]);
        assert_eq!(
            judge_trace(&g, &emb, 1.0, &q, &trace(Action::self_loop(0))).unwrap(),
            vec![None]
        );
    }

    #[test]
    fn error_rates_index_expansions() {
        let judged = vec![
            vec![Some(false), None, Some(true)],
            vec![Some(true)],
            vec![None, Some(false), Some(false), Some(true)],
        ];
        assert_eq!(error_rate_from_judgements(&judged), vec![1.0 / 3.0, 0.5, 1.0]);
    }

    #[test]
    fn beam_of_one_is_greedy_and_report_is_monotone() {
        let (g, emb, q) = fanout_fixture();
        let dims = PolicyDims {
            max_subgraphs: 2,
            ..PolicyDims::countries(4, emb.relation_dim())
        };
        let m = Model::new(PolicyParameters::init(dims, 1.0, 1.0, 8).unwrap(), emb).unwrap();
        let greedy = rollout_with(&m, &g, &q, 3, 0.5, crate::policy::greedy_index).unwrap();
        let ranked = rank_candidates(&m, &g, &q, 1, 3).unwrap();
        assert_eq!(ranked.len(), 1);
        assert_eq!(ranked[0].entity, greedy.predicted);
        assert!((ranked[0].log_prob - greedy.log_probability()).abs() < 1e-12);

        let wide = rank_candidates(&m, &g, &q, usize::MAX, 3).unwrap();
        let ids: BTreeSet<_> = wide.iter().map(|r| r.entity).collect();
        assert_eq!(ids.len(), wide.len());

        let cfg = EvalConfig {
            trials: 3,
            ..EvalConfig::default()
        };
        let report = evaluate(&m, &g, std::slice::from_ref(&q), &cfg).unwrap();
        assert!(report.hits1 <= report.hits3 && report.hits3 <= report.hits10);
        assert!(report.report_csv().starts_with("metric,value\nqueries,1\n"));
        assert!(report.per_step_csv().starts_with(PER_STEP_HEADER));
        assert!(matches!(evaluate(&m, &g, &[], &cfg), Err(Error::NoQueries)));
    }
}
