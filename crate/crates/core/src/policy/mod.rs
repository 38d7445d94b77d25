//! State encoder and policy head.
//!
//! Each subgraph is summarised by attending over its node vectors with the
//! weighted relation slots, the summaries exchange information through
//! multi-head self-attention, a recurrent cell tracks the action history and
//! a two-layer head scores every legal action. Gradients are written out by
//! hand for exactly this architecture.

mod checkpoint;
mod layers;
mod network;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use layers::{
    affinity_weights, elu, encode_history, interact_subgraphs, softmax, subgraph_attention, HistoryState,
    QueryState,
};
pub use network::{
    action_distribution, action_embedding, backward, backward_into, entropy, greedy_index, log_likelihood,
    sample_index, DecisionTape, EpisodeEncoder, StepRecord, TraceView,
};

/// Layer sizes of the encoder and policy head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub entity_dim: usize,
    pub relation_dim: usize,
    pub heads: usize,
    /// Per-head attention width.
    pub head_dim: usize,
    pub lstm_hidden: usize,
    pub policy_hidden: usize,
    /// Largest number of anchors a query may carry.
    pub max_subgraphs: usize,
}

impl PolicyDims {
    /// Countries-scale widths: attention hidden 8, recurrent hidden 32.
    pub fn countries(entity_dim: usize, relation_dim: usize) -> Self {
        PolicyDims {
            entity_dim,
            relation_dim,
            heads: 4,
            head_dim: 8,
            lstm_hidden: 32,
            policy_hidden: 64,
            max_subgraphs: 3,
        }
    }

    /// Width of the fused subgraph vector.
    pub fn fused_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Relation part, target-entity part, subgraph one-hot and a self-loop flag.
    pub fn action_dim(&self) -> usize {
        self.relation_dim + self.entity_dim + self.max_subgraphs + 1
    }

    /// Recurrent input: initial query summary and anchors, or an action embedding.
    pub fn lstm_input_dim(&self) -> usize {
        self.relation_dim + self.max_subgraphs * self.entity_dim + self.action_dim()
    }

    pub fn policy_input_dim(&self) -> usize {
        self.max_subgraphs * self.fused_dim() + self.lstm_hidden + self.relation_dim
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.entity_dim,
            self.relation_dim,
            self.heads,
            self.head_dim,
            self.lstm_hidden,
            self.policy_hidden,
            self.max_subgraphs,
        ];
        if all.contains(&0) {
            return Err(Error::InvalidArgument(format!("all policy dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Trainable tensors. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    /// Projects relation-slot vectors into entity space (d x d_r).
    pub slot_proj: Array2<f64>,
    pub w_query: Vec<Array2<f64>>,
    pub w_key: Vec<Array2<f64>>,
    pub w_value: Vec<Array2<f64>>,
    /// Gate order i, f, g, o.
    pub lstm_input: Array2<f64>,
    pub lstm_hidden: Array2<f64>,
    /// Column vector (4h x 1).
    pub lstm_bias: Array2<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

impl Weights {
    pub fn zeros(dims: &PolicyDims) -> Self {
        let z = |r, c| Array2::zeros((r, c));
        let heads = |r, c| (0..dims.heads).map(|_| z(r, c)).collect::<Vec<_>>();
        let h4 = 4 * dims.lstm_hidden;
        Weights {
            slot_proj: z(dims.entity_dim, dims.relation_dim),
            w_query: heads(dims.head_dim, dims.entity_dim),
            w_key: heads(dims.head_dim, dims.entity_dim),
            w_value: heads(dims.head_dim, dims.entity_dim),
            lstm_input: z(h4, dims.lstm_input_dim()),
            lstm_hidden: z(h4, dims.lstm_hidden),
            lstm_bias: z(h4, 1),
            w1: z(dims.policy_hidden, dims.policy_input_dim()),
            w2: z(dims.action_dim(), dims.policy_hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut w = self.clone();
        w.blocks_mut().into_iter().for_each(|(_, b)| b.fill(0.0));
        w
    }

    /// Named blocks in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![("slot_proj".to_string(), &self.slot_proj)];
        for (name, list) in [("w_query", &self.w_query), ("w_key", &self.w_key), ("w_value", &self.w_value)] {
            out.extend(list.iter().enumerate().map(|(i, b)| (format!("{name}.{i}"), b)));
        }
        out.push(("lstm_input".into(), &self.lstm_input));
        out.push(("lstm_hidden".into(), &self.lstm_hidden));
        out.push(("lstm_bias".into(), &self.lstm_bias));
        out.push(("w1".into(), &self.w1));
        out.push(("w2".into(), &self.w2));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let Weights {
            slot_proj,
            w_query,
            w_key,
            w_value,
            lstm_input,
            lstm_hidden,
            lstm_bias,
            w1,
            w2,
        } = self;
        let mut out = vec![("slot_proj".to_string(), slot_proj)];
        for (name, list) in [("w_query", w_query), ("w_key", w_key), ("w_value", w_value)] {
            out.extend(list.iter_mut().enumerate().map(|(i, b)| (format!("{name}.{i}"), b)));
        }
        out.push(("lstm_input".into(), lstm_input));
        out.push(("lstm_hidden".into(), lstm_hidden));
        out.push(("lstm_bias".into(), lstm_bias));
        out.push(("w1".into(), w1));
        out.push(("w2".into(), w2));
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Weights) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            match (a.as_slice_mut(), b.as_slice()) {
                (Some(x), Some(y)) => x.iter_mut().zip(y).for_each(|(x, y)| *x += y),
                _ => *a += b,
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, b) in self.blocks_mut() {
            b.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParameters {
    pub dims: PolicyDims,
    /// Interaction attention temperature.
    pub tau: f64,
    /// Query-reduction step size.
    pub eta: f64,
    pub weights: Weights,
}

impl PolicyParameters {
    /// Glorot-uniform weights; the forget-gate bias starts at 1.
    pub fn init(dims: PolicyDims, tau: f64, eta: f64, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Weights::zeros(&dims);
        for (name, block) in weights.blocks_mut() {
            if name == "lstm_bias" {
                let h = dims.lstm_hidden;
                block.slice_mut(ndarray::s![h..2 * h, ..]).fill(1.0);
                continue;
            }
            let (rows, cols) = block.dim();
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            block.mapv_inplace(|_| rng.gen_range(-limit..=limit));
        }
        Ok(PolicyParameters {
            dims,
            tau,
            eta,
            weights,
        })
    }
}

/// Policy parameters together with the frozen embedding tables they read.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub params: PolicyParameters,
    pub embeddings: EmbeddingTable,
}

impl Model {
    pub fn new(params: PolicyParameters, embeddings: EmbeddingTable) -> Result<Self> {
        if params.dims.entity_dim != embeddings.entity_dim()
            || params.dims.relation_dim != embeddings.relation_dim()
        {
            return Err(Error::DimensionMismatch(format!(
                "policy expects d={} d_r={}, embeddings have d={} d_r={}",
                params.dims.entity_dim,
                params.dims.relation_dim,
                embeddings.entity_dim(),
                embeddings.relation_dim()
            )));
        }
        Ok(Model { params, embeddings })
    }
}
