//! Entity and relation vectors consumed by the state encoder.
//!
//! Two initialisers are provided: one-hot relations with small random entity
//! vectors, and a diagonal-bilinear link predictor trained with a margin
//! ranking loss against corrupted targets.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, RelationId, Triple};

pub const ENTITY_INIT_RANGE: f64 = 0.1;
/// Targets are corrupted uniformly, resampling corruptions that hit true triples.
pub const NEGATIVES_PER_POSITIVE: usize = 4;
pub const MARGIN: f64 = 1.0;
const PRETRAIN_INIT_RANGE: f64 = 0.5;
const PRETRAIN_LEARNING_RATE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub entity: Array2<f64>,
    pub relation: Array2<f64>,
}

impl EmbeddingTable {
    pub fn entity_dim(&self) -> usize {
        self.entity.ncols()
    }

    pub fn relation_dim(&self) -> usize {
        self.relation.ncols()
    }

    pub fn num_entities(&self) -> usize {
        self.entity.nrows()
    }

    pub fn num_relations(&self) -> usize {
        self.relation.nrows()
    }

    pub fn entity(&self, e: EntityId) -> Result<ArrayView1<'_, f64>> {
        if e.0 >= self.num_entities() {
            return Err(Error::UnknownEntity(e.0));
        }
        Ok(self.entity.row(e.0))
    }

    pub fn relation(&self, r: RelationId) -> Result<ArrayView1<'_, f64>> {
        if r.0 >= self.num_relations() {
            return Err(Error::UnknownRelation(r.0));
        }
        Ok(self.relation.row(r.0))
    }

    pub fn is_finite(&self) -> bool {
        self.entity.iter().chain(self.relation.iter()).all(|v| v.is_finite())
    }

    /// Checks that row counts match `g`.
    pub fn check_graph(&self, g: &KnowledgeGraph) -> Result<()> {
        if self.num_entities() != g.num_entities() || self.num_relations() != g.num_relations() {
            return Err(Error::ShapeMismatch(format!(
                "embedding table has {} entities / {} relations, graph has {} / {}",
                self.num_entities(),
                self.num_relations(),
                g.num_entities(),
                g.num_relations()
            )));
        }
        Ok(())
    }

    pub fn header(&self) -> String {
        format!(
            "entities={} relations={} d={} d_r={}",
            self.num_entities(),
            self.num_relations(),
            self.entity_dim(),
            self.relation_dim()
        )
    }

    /// Text matrix file: the header line, then one row per line (entities first).
    pub fn to_text(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for row in self.entity.rows().into_iter().chain(self.relation.rows()) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: Default::default(),
            line,
            message,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let mut dims = [0usize; 4];
        let keys = ["entities", "relations", "d", "d_r"];
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad(1, format!("malformed header {header:?}")));
        }
        for (slot, (field, key)) in dims.iter_mut().zip(fields.iter().zip(keys)) {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| bad(1, format!("malformed header field {field:?}")))?;
            if k != key {
                return Err(bad(1, format!("expected {key}=, found {field:?}")));
            }
            *slot = v
                .parse()
                .map_err(|_| bad(1, format!("bad integer in {field:?}")))?;
        }
        let [n, m, d, dr] = dims;
        let mut read_rows = |rows: usize, cols: usize, offset: usize| -> Result<Array2<f64>> {
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                let lineno = offset + i + 2;
                let line = lines
                    .next()
                    .ok_or_else(|| bad(lineno, "unexpected end of file".into()))?;
                let before = data.len();
                for tok in line.split_whitespace() {
                    data.push(
                        tok.parse::<f64>()
                            .map_err(|_| bad(lineno, format!("bad number {tok:?}")))?,
                    );
                }
                if data.len() - before != cols {
                    return Err(bad(lineno, format!("expected {cols} values")));
                }
            }
            Ok(Array2::from_shape_vec((rows, cols), data).expect("row lengths checked"))
        };
        let entity = read_rows(n, d, 0)?;
        let relation = read_rows(m, dr, n)?;
        Ok(EmbeddingTable { entity, relation })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn uniform_matrix(rows: usize, cols: usize, range: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-range..=range))
}

/// One-hot relation rows and seeded uniform entity vectors in [-0.1, 0.1].
pub fn init_one_hot(g: &KnowledgeGraph, d: usize, seed: u64) -> Result<EmbeddingTable> {
    if d == 0 {
        return Err(Error::InvalidArgument("entity dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entity = uniform_matrix(g.num_entities(), d, ENTITY_INIT_RANGE, &mut rng);
    let relation = Array2::eye(g.num_relations());
    Ok(EmbeddingTable { entity, relation })
}

/// Seeded uniform vectors for both tables; stands in for pre-trained word vectors.
pub fn init_random(g: &KnowledgeGraph, d: usize, d_r: usize, seed: u64) -> Result<EmbeddingTable> {
    if d == 0 || d_r == 0 {
        return Err(Error::InvalidArgument("embedding dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entity = uniform_matrix(g.num_entities(), d, ENTITY_INIT_RANGE, &mut rng);
    let relation = uniform_matrix(g.num_relations(), d_r, ENTITY_INIT_RANGE, &mut rng);
    Ok(EmbeddingTable { entity, relation })
}

/// Diagonal bilinear score `sum_k e1[k] * r[k] * e2[k]`.
pub fn bilinear_score(table: &EmbeddingTable, s: EntityId, r: RelationId, t: EntityId) -> f64 {
    let (es, er, et) = (table.entity.row(s.0), table.relation.row(r.0), table.entity.row(t.0));
    es.iter().zip(er).zip(et).map(|((a, b), c)| a * b * c).sum()
}

#[derive(Clone, Debug)]
pub struct PretrainResult {
    pub table: EmbeddingTable,
    /// Mean hinge loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a diagonal bilinear link predictor with margin ranking loss and Adagrad.
pub fn pretrain_link_embeddings(
    g: &KnowledgeGraph,
    d: usize,
    epochs: usize,
    seed: u64,
) -> Result<PretrainResult> {
    if d < 2 {
        return Err(Error::InvalidArgument("pretraining needs d >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = EmbeddingTable {
        entity: uniform_matrix(g.num_entities(), d, PRETRAIN_INIT_RANGE, &mut rng),
        relation: uniform_matrix(g.num_relations(), d, PRETRAIN_INIT_RANGE, &mut rng),
    };
    let mut order: Vec<usize> = (0..g.triples().len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    let n_ent = g.num_entities();
    let lr = PRETRAIN_LEARNING_RATE;
    // Adagrad accumulators; the decaying step keeps late epochs quiet.
    let mut acc_e = Array2::<f64>::zeros(table.entity.raw_dim());
    let mut acc_r = Array2::<f64>::zeros(table.relation.raw_dim());
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for &ti in &order {
            let t = g.triples()[ti];
            for _ in 0..NEGATIVES_PER_POSITIVE {
                // filtered corruption: never treat a true triple as a negative
                let Some(neg) = (0..16)
                    .map(|_| EntityId(rng.gen_range(0..n_ent)))
                    .find(|&e| !g.contains_triple(&Triple::new(t.source, t.relation, e)))
                else {
                    continue;
                };
                let pos_score = bilinear_score(&table, t.source, t.relation, t.target);
                let neg_score = bilinear_score(&table, t.source, t.relation, neg);
                let loss = MARGIN - pos_score + neg_score;
                count += 1;
                if loss <= 0.0 {
                    continue;
                }
                total += loss;
                // d loss / d params for -s(pos) + s(neg)
                let es = table.entity.row(t.source.0).to_owned();
                let er = table.relation.row(t.relation.0).to_owned();
                let ep = table.entity.row(t.target.0).to_owned();
                let en = table.entity.row(neg.0).to_owned();
                let g_s = &er * &(&en - &ep);
                let g_r = &es * &(&en - &ep);
                let g_p = -(&es * &er);
                let g_n = &es * &er;
                let mut step_entity = |row: usize, grad: &Array1<f64>| {
                    let mut acc = acc_e.row_mut(row);
                    let mut p = table.entity.row_mut(row);
                    for ((a, w), gv) in acc.iter_mut().zip(p.iter_mut()).zip(grad) {
                        *a += gv * gv;
                        *w -= lr * gv / (a.sqrt() + 1e-10);
                    }
                };
                step_entity(t.source.0, &g_s);
                step_entity(t.target.0, &g_p);
                step_entity(neg.0, &g_n);
                let mut acc = acc_r.row_mut(t.relation.0);
                let mut p = table.relation.row_mut(t.relation.0);
                for ((a, w), gv) in acc.iter_mut().zip(p.iter_mut()).zip(&g_r) {
                    *a += gv * gv;
                    *w -= lr * gv / (a.sqrt() + 1e-10);
                }
            }
        }
        let mean = total / count.max(1) as f64;
        if !mean.is_finite() || !table.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(mean);
    }
    Ok(PretrainResult {
        table,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TripleDialect;

    fn two_relation_graph() -> KnowledgeGraph {
        KnowledgeGraph::parse("a\tr\tb\nb\ts\tc\n", TripleDialect::default()).unwrap()
    }

    fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    }

    #[test]
    fn one_hot_relation_rows() {
        let t = init_one_hot(&two_relation_graph(), 4, 1).unwrap();
        assert_eq!(t.relation.row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(t.relation.row(1).to_vec(), vec![0.0, 1.0]);
        assert_eq!(cosine(t.relation.row(0), t.relation.row(1)), 0.0);
        assert!(t.entity.iter().all(|v| v.abs() <= ENTITY_INIT_RANGE));
        assert_eq!(t.entity.dim(), (3, 4));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let g = two_relation_graph();
        assert_eq!(init_one_hot(&g, 4, 9).unwrap(), init_one_hot(&g, 4, 9).unwrap());
        assert_ne!(init_one_hot(&g, 4, 9).unwrap(), init_one_hot(&g, 4, 10).unwrap());
    }

    #[test]
    fn lookup_fails_on_unknown_ids() {
        let t = init_one_hot(&two_relation_graph(), 4, 1).unwrap();
        assert!(t.entity(EntityId(2)).is_ok());
        assert!(matches!(t.entity(EntityId(3)), Err(Error::UnknownEntity(3))));
        assert!(matches!(t.relation(RelationId(2)), Err(Error::UnknownRelation(2))));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let g = two_relation_graph();
        let a = pretrain_link_embeddings(&g, 4, 0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = uniform_matrix(g.num_entities(), 4, PRETRAIN_INIT_RANGE, &mut rng);
        assert_eq!(a.table.entity, e);
        assert!(a.epoch_losses.is_empty());
    }

    #[test]
    fn pretraining_separates_true_triples_from_corruptions() {
        let g = KnowledgeGraph::parse("a\tr\tb\nb\tr\tc\nc\tr\td\n", TripleDialect::default())
            .unwrap();
        let res = pretrain_link_embeddings(&g, 8, 200, 5).unwrap();
        let t = &res.table;
        let true_mean: f64 = g
            .triples()
            .iter()
            .map(|x| bilinear_score(t, x.source, x.relation, x.target))
            .sum::<f64>()
            / 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut corrupt = Vec::new();
        while corrupt.len() < 10 {
            let x = g.triples()[rng.gen_range(0..3)];
            let e = EntityId(rng.gen_range(0..g.num_entities()));
            if !g.contains_triple(&crate::graph::Triple::new(x.source, x.relation, e)) {
                corrupt.push(bilinear_score(t, x.source, x.relation, e));
            }
        }
        let corrupt_mean = corrupt.iter().sum::<f64>() / corrupt.len() as f64;
        assert!(true_mean > corrupt_mean, "{true_mean} vs {corrupt_mean}");
    }

    #[test]
    fn pretraining_loss_non_increasing_within_tolerance() {
        let mut b = crate::graph::GraphBuilder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let (s, t) = (rng.gen_range(0..40), rng.gen_range(0..40));
            b.add(&format!("e{s}"), &format!("r{}", rng.gen_range(0..3)), &format!("e{t}"));
        }
        let g = b.build().unwrap();
        let res = pretrain_link_embeddings(&g, 16, 100, 2).unwrap();
        // compare block averages so single noisy epochs don't dominate
        let blocks: Vec<f64> = res
            .epoch_losses
            .chunks(20)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        for w in blocks.windows(2) {
            assert!(w[1] <= w[0] * 1.05 + 1e-12, "{blocks:?}");
        }
        assert!(res.table.is_finite());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let g = two_relation_graph();
        let a = pretrain_link_embeddings(&g, 4, 20, 11).unwrap();
        let b = pretrain_link_embeddings(&g, 4, 20, 11).unwrap();
        assert_eq!(a.table, b.table);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let g = two_relation_graph();
        let t = pretrain_link_embeddings(&g, 4, 5, 1).unwrap().table;
        let text = t.to_text();
        assert!(text.starts_with("entities=3 relations=2 d=4 d_r=4\n"));
        assert_eq!(EmbeddingTable::from_text(&text).unwrap(), t);
    }
}
