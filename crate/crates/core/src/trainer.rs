//! REINFORCE with a per-query variance penalty, a running-mean baseline and
//! Adam updates.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{default_max_steps, init_episode, predict_answer, terminal_reward, Action, EnvState, RewardContext};
use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph};
use crate::policy::{backward_into, entropy, greedy_index, sample_index, EpisodeEncoder, Model, StepRecord, TraceView, Weights};
use crate::query::{QuerySplit, StructuredQuery};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutMode {
    Sample,
    Greedy,
}

/// One episode of the policy on one query.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub query_id: String,
    pub steps: Vec<StepRecord>,
    pub final_state: EnvState,
    pub predicted: EntityId,
    pub terminal_reward: f64,
}

impl EpisodeTrace {
    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn log_probability(&self) -> f64 {
        self.steps.iter().map(|s| s.probability.ln()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Queries per iteration; the whole train split when larger.
    pub batch_size: usize,
    pub rollouts_per_query: usize,
    pub k_var: f64,
    pub lambda_util: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Expansion cap per episode; `None` uses the number of slots plus one.
    pub max_steps: Option<usize>,
    pub baseline_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            batch_size: 16,
            rollouts_per_query: 8,
            k_var: 0.1,
            lambda_util: 0.5,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_steps: None,
            baseline_decay: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.rollouts_per_query < 2 {
            return bad("rollouts per query must be at least 2");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.k_var >= 0.0 && self.lambda_util >= 0.0) {
            return bad("k_var and lambda must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return bad("learning rate and epsilon must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.baseline_decay) {
            return bad("baseline decay must lie in [0, 1]");
        }
        if self.max_steps == Some(0) {
            return bad("max steps must be positive");
        }
        Ok(())
    }

    pub fn max_steps_for(&self, q: &StructuredQuery) -> usize {
        self.max_steps.unwrap_or_else(|| default_max_steps(q))
    }
}

/// Unbiased sample variance (divisor n - 1); 0 for fewer than two values.
/// Values are shifted by the first one and combined as
/// `(n * sum d^2 - (sum d)^2) / (n (n - 1))`, which is exact on small integers.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let shift = values[0];
    let (sum, sum_sq) = values.iter().fold((0.0, 0.0), |(s, q), v| {
        let d = v - shift;
        (s + d, q + d * d)
    });
    let n = n as f64;
    ((n * sum_sq - sum * sum) / (n * (n - 1.0))).max(0.0)
}

/// Sample mean minus `k_var` times the sample variance.
pub fn objective_estimate(rewards: &[f64], k_var: f64) -> Result<f64> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "objective needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(mean - k_var * sample_variance(rewards))
}

/// `(R_i - k_var * var(R)) - baseline` for the rollouts of one query.
pub fn advantage(rewards: &[f64], k_var: f64, baseline: f64) -> Vec<f64> {
    let penalty = k_var * sample_variance(rewards);
    rewards.iter().map(|r| r - penalty - baseline).collect()
}

/// Probability of each subgraph's final expansion, keyed by the entity it reached.
pub fn answer_scores(steps: &[StepRecord], state: &EnvState) -> HashMap<EntityId, f64> {
    let mut scores = HashMap::new();
    for (i, sg) in state.subgraphs.iter().enumerate() {
        let last = steps
            .iter()
            .rev()
            .find(|s| s.action.subgraph == i && !s.action.is_self_loop());
        if let Some(step) = last {
            let e = scores.entry(sg.last_hit).or_insert(0.0);
            *e = f64::max(*e, step.probability);
        }
    }
    scores
}

/// Something that scores legal actions; the network and the analysis baselines.
pub trait Policy: Sync {
    fn name(&self) -> String;
    fn start<'a>(&'a self, q: &StructuredQuery) -> Result<Box<dyn PolicyEpisode + 'a>>;
}

/// Per-episode state of a policy.
pub trait PolicyEpisode {
    /// Probabilities aligned with `legal`.
    fn distribution(&mut self, s: &EnvState, legal: &[Action]) -> Result<Vec<f64>>;
    /// Called with the state before `a` is applied.
    fn observe(&mut self, s: &EnvState, a: &Action) -> Result<()>;
    fn slot_weights(&self) -> Vec<f64>;
}

impl Policy for Model {
    fn name(&self) -> String {
        "model".into()
    }

    fn start<'a>(&'a self, q: &StructuredQuery) -> Result<Box<dyn PolicyEpisode + 'a>> {
        Ok(Box::new(EpisodeEncoder::new(self, q)?))
    }
}

impl PolicyEpisode for EpisodeEncoder<'_> {
    fn distribution(&mut self, s: &EnvState, legal: &[Action]) -> Result<Vec<f64>> {
        Ok(self.decide(s, legal)?.probs)
    }

    fn observe(&mut self, s: &EnvState, a: &Action) -> Result<()> {
        EpisodeEncoder::observe(self, s, a)
    }

    fn slot_weights(&self) -> Vec<f64> {
        self.query().slot_weights.to_vec()
    }
}

/// Runs one episode of `policy`, picking actions with `choose` from each distribution.
pub fn rollout_with(
    policy: &dyn Policy,
    g: &KnowledgeGraph,
    q: &StructuredQuery,
    max_steps: usize,
    lambda: f64,
    mut choose: impl FnMut(&[f64]) -> usize,
) -> Result<EpisodeTrace> {
    let mut episode = policy.start(q)?;
    let mut state = init_episode(g, q)?;
    let mut steps = Vec::new();
    while !state.is_terminal(max_steps) {
        let legal = state.legal_actions(g);
        let probs = episode.distribution(&state, &legal)?;
        let chosen = choose(&probs);
        let action = legal[chosen];
        steps.push(StepRecord {
            action,
            chosen,
            num_legal: legal.len(),
            probability: probs[chosen],
            entropy: entropy(&probs),
            step: state.step,
            slot_weights: episode.slot_weights(),
        });
        episode.observe(&state, &action)?;
        state.apply(g, &action)?;
    }
    let predicted = predict_answer(&state, &answer_scores(&steps, &state));
    let reward = terminal_reward(&state, &RewardContext::new(g, q), predicted, lambda);
    Ok(EpisodeTrace {
        query_id: q.id.clone(),
        steps,
        final_state: state,
        predicted,
        terminal_reward: reward,
    })
}

pub fn rollout(
    policy: &dyn Policy,
    g: &KnowledgeGraph,
    q: &StructuredQuery,
    mode: RolloutMode,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<EpisodeTrace> {
    let max_steps = cfg.max_steps_for(q);
    match mode {
        RolloutMode::Greedy => rollout_with(policy, g, q, max_steps, cfg.lambda_util, greedy_index),
        RolloutMode::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rollout_with(policy, g, q, max_steps, cfg.lambda_util, |p| sample_index(p, &mut rng))
        }
    }
}

/// Stateless seed mixing so every rollout has its own stream.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub mean_reward: f64,
    /// Mean over queries of the per-query sample variance.
    pub reward_variance: f64,
    pub mean_step_entropy: f64,
    /// Fraction of sampled rollouts that predicted the gold answer.
    pub hits1_train_sample: f64,
}

pub const METRICS_HEADER: &str = "iteration,mean_reward,reward_variance,mean_step_entropy,hits@1_train_sample";

pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration, r.mean_reward, r.reward_variance, r.mean_step_entropy, r.hits1_train_sample
        )
        .expect("writing to a string");
    }
    out
}

struct Adam {
    m: Weights,
    v: Weights,
    t: i32,
}

impl Adam {
    fn new(w: &Weights) -> Self {
        Adam {
            m: w.zeros_like(),
            v: w.zeros_like(),
            t: 0,
        }
    }

    /// Gradient ascent step.
    fn step(&mut self, params: &mut Weights, grad: &Weights, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut())
            .zip(grad.blocks());
        for ((((_, p), (_, m)), (_, v)), (_, g)) in blocks {
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p += cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
            });
        }
    }
}

struct QueryBatch {
    grad: Weights,
    rewards: Vec<f64>,
    entropies: Vec<f64>,
    hits: usize,
    objective: f64,
}

fn train_query(
    model: &Model,
    g: &KnowledgeGraph,
    q: &StructuredQuery,
    cfg: &TrainConfig,
    baseline: f64,
    seeds: &[u64],
) -> Result<QueryBatch> {
    let traces = seeds
        .iter()
        .map(|s| rollout(model, g, q, RolloutMode::Sample, *s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let rewards: Vec<f64> = traces.iter().map(|t| t.terminal_reward).collect();
    let adv = advantage(&rewards, cfg.k_var, baseline);
    let mut grad = model.params.weights.zeros_like();
    for (trace, a) in traces.iter().zip(&adv) {
        if *a == 0.0 || trace.steps.is_empty() {
            continue;
        }
        let actions = trace.actions();
        let view = TraceView {
            query: q,
            actions: &actions,
            coefficient: *a,
        };
        backward_into(model, g, view, &mut grad)?;
    }
    Ok(QueryBatch {
        grad,
        entropies: traces.iter().flat_map(|t| t.steps.iter().map(|s| s.entropy)).collect(),
        hits: traces.iter().filter(|t| t.predicted == q.gold).count(),
        objective: objective_estimate(&rewards, cfg.k_var)?,
        rewards,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
}

/// Trains `model` on the train half of `split`. Rollouts for different
/// queries run in parallel; gradients are summed in query order.
pub fn train(
    g: &KnowledgeGraph,
    split: &QuerySplit,
    model: Model,
    cfg: &TrainConfig,
    mut on_iteration: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::NoQueries);
    }
    let mut model = model;
    let mut adam = Adam::new(&model.params.weights);
    let mut baseline = 0.0;
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let n = split.train.len();
    let batch = cfg.batch_size.min(n);
    for it in 0..cfg.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, it as u64, 0]));
        let mut picked = sample_indices(&mut rng, n, batch).into_vec();
        picked.sort_unstable();
        let snapshot = &model;
        let results = picked
            .par_iter()
            .map(|&qi| {
                let seeds: Vec<u64> = (0..cfg.rollouts_per_query)
                    .map(|r| derive_seed(&[cfg.seed, it as u64, 1, qi as u64, r as u64]))
                    .collect();
                train_query(snapshot, g, &split.train[qi], cfg, baseline, &seeds)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grad = model.params.weights.zeros_like();
        let (mut rewards, mut entropies, mut hits, mut var_sum, mut obj_sum) = (Vec::new(), Vec::new(), 0, 0.0, 0.0);
        for r in &results {
            grad.add_assign(&r.grad);
            var_sum += sample_variance(&r.rewards);
            obj_sum += r.objective;
            rewards.extend_from_slice(&r.rewards);
            entropies.extend_from_slice(&r.entropies);
            hits += r.hits;
        }
        grad.scale(1.0 / rewards.len() as f64);
        if !grad.is_finite() {
            return Err(Error::NonFinite { iteration: it });
        }
        adam.step(&mut model.params.weights, &grad, cfg);
        if !model.params.weights.is_finite() {
            return Err(Error::NonFinite { iteration: it });
        }
        let batch_objective = obj_sum / results.len() as f64;
        baseline = if it == 0 {
            batch_objective
        } else {
            cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * batch_objective
        };
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let row = MetricsRow {
            iteration: it,
            mean_reward: mean(&rewards),
            reward_variance: var_sum / results.len() as f64,
            mean_step_entropy: mean(&entropies),
            hits1_train_sample: hits as f64 / rewards.len() as f64,
        };
        if !(row.mean_reward.is_finite() && row.mean_step_entropy.is_finite()) {
            return Err(Error::NonFinite { iteration: it });
        }
        on_iteration(&row);
        metrics.push(row);
    }
    Ok(TrainOutcome { model, metrics })
}
