//! Conjunctive query synthesis, splitting, validation and the query file format.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EntityId, GraphBuilder, KnowledgeGraph, RelationId};

/// A conjunction question: every anchor must reach `gold` through the slot relations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuredQuery {
    pub id: String,
    pub anchors: Vec<EntityId>,
    /// Relation slots, a multiset; order carries no meaning.
    pub slots: Vec<RelationId>,
    pub gold: EntityId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuerySplit {
    pub train: Vec<StructuredQuery>,
    pub test: Vec<StructuredQuery>,
    pub seed: u64,
}

/// Biases anchor selection toward one low-fanout and one high-fanout anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FanoutBias {
    pub low_max: usize,
    pub high_min: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub count: usize,
    pub max_chain_len: usize,
    pub n_anchors: usize,
    pub seed: u64,
    pub fanout_bias: Option<FanoutBias>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            count: 100,
            max_chain_len: 2,
            n_anchors: 2,
            seed: 0,
            fanout_bias: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Generated {
    pub queries: Vec<StructuredQuery>,
    pub warnings: Vec<String>,
}

/// Entities reachable from `from` (excluding `from` itself unless revisited) using
/// only edges whose relation is in `relations`.
pub fn reachable_via(
    g: &KnowledgeGraph,
    from: EntityId,
    relations: &HashSet<RelationId>,
) -> HashSet<EntityId> {
    let mut seen = HashSet::new();
    let mut visited = HashSet::from([from]);
    let mut queue = VecDeque::from([from]);
    while let Some(e) = queue.pop_front() {
        for &(r, t) in g.outgoing(e).unwrap_or(&[]) {
            if relations.contains(&r) {
                seen.insert(t);
                if visited.insert(t) {
                    queue.push_back(t);
                }
            }
        }
    }
    seen
}

/// True when `target` is `from` or reachable from it through `relations`.
pub fn reaches(
    g: &KnowledgeGraph,
    from: EntityId,
    target: EntityId,
    relations: &HashSet<RelationId>,
) -> bool {
    from == target || reachable_via(g, from, relations).contains(&target)
}

/// Entities consistent with every anchor's constraint.
pub fn answer_intersection(g: &KnowledgeGraph, q: &StructuredQuery) -> BTreeSet<EntityId> {
    let rels: HashSet<RelationId> = q.slots.iter().copied().collect();
    let mut sets = q.anchors.iter().map(|&a| reachable_via(g, a, &rels));
    let Some(first) = sets.next() else {
        return BTreeSet::new();
    };
    let mut acc: BTreeSet<EntityId> = first.into_iter().collect();
    for s in sets {
        acc.retain(|e| s.contains(e));
    }
    acc
}

/// Explains why `q` is not answerable in `g`, or returns `Ok(())`.
pub fn check_query(g: &KnowledgeGraph, q: &StructuredQuery) -> std::result::Result<(), String> {
    if q.anchors.is_empty() {
        return Err(format!("{}: no anchors", q.id));
    }
    for &a in q.anchors.iter().chain(std::iter::once(&q.gold)) {
        if !g.contains_entity(a) {
            return Err(format!("{}: unknown entity id {}", q.id, a.0));
        }
    }
    if let Some(r) = q.slots.iter().find(|r| !g.contains_relation(**r)) {
        return Err(format!("{}: unknown relation id {}", q.id, r.0));
    }
    let distinct: HashSet<_> = q.anchors.iter().collect();
    if distinct.len() != q.anchors.len() {
        return Err(format!("{}: duplicate anchors", q.id));
    }
    let rels: HashSet<RelationId> = q.slots.iter().copied().collect();
    for &a in &q.anchors {
        if !reachable_via(g, a, &rels).contains(&q.gold) {
            return Err(format!(
                "{}: gold {} not reachable from anchor {} via slot relations",
                q.id, q.gold.0, a.0
            ));
        }
    }
    Ok(())
}

pub fn validate_query(g: &KnowledgeGraph, q: &StructuredQuery) -> bool {
    check_query(g, q).is_ok()
}

type Chain = (EntityId, Vec<RelationId>);

fn incoming_index(g: &KnowledgeGraph) -> Vec<Vec<(RelationId, EntityId)>> {
    let mut inc = vec![Vec::new(); g.num_entities()];
    for t in g.triples() {
        inc[t.target.0].push((t.relation, t.source));
    }
    for v in &mut inc {
        v.sort_unstable();
    }
    inc
}

/// Walks backwards from `answer` as far as `max_len` allows; returns the
/// anchor and the relations read in the forward direction.
fn inverse_walk(
    incoming: &[Vec<(RelationId, EntityId)>],
    answer: EntityId,
    max_len: usize,
    rng: &mut impl Rng,
) -> Option<Chain> {
    let mut visited = HashSet::from([answer]);
    let mut cur = answer;
    let mut rels = Vec::new();
    for _ in 0..max_len {
        let options: Vec<_> = incoming[cur.0]
            .iter()
            .filter(|(_, s)| !visited.contains(s))
            .collect();
        let Some(&&(r, s)) = options.choose(rng) else {
            break;
        };
        visited.insert(s);
        rels.push(r);
        cur = s;
    }
    if rels.is_empty() {
        return None;
    }
    rels.reverse();
    Some((cur, rels))
}

fn pick_chains(
    g: &KnowledgeGraph,
    candidates: Vec<Chain>,
    n: usize,
    bias: Option<FanoutBias>,
    rng: &mut impl Rng,
) -> Option<Vec<Chain>> {
    let mut by_anchor: Vec<Chain> = Vec::new();
    for c in candidates {
        if !by_anchor.iter().any(|(a, _)| *a == c.0) {
            by_anchor.push(c);
        }
    }
    if by_anchor.len() < n {
        return None;
    }
    by_anchor.shuffle(rng);
    let Some(bias) = bias else {
        by_anchor.truncate(n);
        return Some(by_anchor);
    };
    let low = by_anchor
        .iter()
        .position(|(a, _)| g.out_degree(*a) <= bias.low_max)?;
    let high = by_anchor
        .iter()
        .position(|(a, _)| g.out_degree(*a) >= bias.high_min)?;
    let mut chosen = vec![by_anchor[low].clone(), by_anchor[high].clone()];
    chosen.extend(
        by_anchor
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != low && *i != high)
            .map(|(_, c)| c.clone())
            .take(n.saturating_sub(2)),
    );
    if chosen.len() < n {
        return None;
    }
    chosen.truncate(n);
    chosen.shuffle(rng);
    Some(chosen)
}

/// Samples an answer, walks `n_anchors` distinct inverse chains from it and keeps
/// the query when the per-anchor reachable sets intersect in exactly the answer.
pub fn generate_conjunctions(g: &KnowledgeGraph, cfg: &GenerateConfig) -> Result<Generated> {
    if cfg.n_anchors < 2 {
        return Err(Error::InvalidArgument("n_anchors must be at least 2".into()));
    }
    if cfg.max_chain_len < 1 {
        return Err(Error::InvalidArgument("max_chain_len must be at least 1".into()));
    }
    let mut out = Generated::default();
    if cfg.count == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let incoming = incoming_index(g);
    let answers: Vec<EntityId> = g
        .entities()
        .filter(|e| !incoming[e.0].is_empty())
        .collect();
    let budget = 200 * cfg.count + 1000;
    let walks = 4 * cfg.n_anchors + 4;
    let mut seen = HashSet::new();
    for _ in 0..budget {
        if out.queries.len() == cfg.count {
            break;
        }
        let Some(&answer) = answers.choose(&mut rng) else {
            break;
        };
        let candidates: Vec<Chain> = (0..walks)
            .filter_map(|_| inverse_walk(&incoming, answer, cfg.max_chain_len, &mut rng))
            .collect();
        let Some(chains) = pick_chains(g, candidates, cfg.n_anchors, cfg.fanout_bias, &mut rng)
        else {
            continue;
        };
        let anchors: Vec<EntityId> = chains.iter().map(|(a, _)| *a).collect();
        let slots: Vec<RelationId> = chains.iter().flat_map(|(_, r)| r.iter().copied()).collect();
        let mut key: Vec<usize> = anchors.iter().map(|a| a.0).collect();
        key.sort_unstable();
        key.push(answer.0);
        if seen.contains(&key) {
            continue;
        }
        let q = StructuredQuery {
            id: format!("q{:05}", out.queries.len()),
            anchors,
            slots,
            gold: answer,
        };
        let inter = answer_intersection(g, &q);
        if inter.len() != 1 || !inter.contains(&answer) {
            continue;
        }
        seen.insert(key);
        out.queries.push(q);
    }
    if out.queries.len() < cfg.count {
        out.warnings.push(format!(
            "graph too sparse: generated {} of {} requested queries",
            out.queries.len(),
            cfg.count
        ));
    }
    Ok(out)
}

/// Seeded shuffle into disjoint train/test lists; `|test| = round(frac * n)`,
/// clamped so that neither side is empty.
pub fn split_queries(qs: &[StructuredQuery], test_fraction: f64, seed: u64) -> Result<QuerySplit> {
    if qs.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 queries to split".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = qs.len();
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test_idx = idx[..n_test].to_vec();
    let mut train_idx = idx[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok(QuerySplit {
        train: train_idx.into_iter().map(|i| qs[i].clone()).collect(),
        test: test_idx.into_iter().map(|i| qs[i].clone()).collect(),
        seed,
    })
}

fn check_label(label: &str) -> Result<&str> {
    if label.contains(',') || label.contains('\t') || label.contains('\n') {
        return Err(Error::InvalidArgument(format!(
            "label {label:?} cannot be written to a query file"
        )));
    }
    Ok(label)
}

/// One record per line: `id \t anchors \t slots \t gold`, lists comma-joined.
pub fn format_queries(g: &KnowledgeGraph, qs: &[StructuredQuery]) -> Result<String> {
    let mut out = String::new();
    for q in qs {
        let anchors = q
            .anchors
            .iter()
            .map(|&a| g.entity_label(a).and_then(check_label))
            .collect::<Result<Vec<_>>>()?;
        let slots = q
            .slots
            .iter()
            .map(|&r| g.relation_label(r).and_then(check_label))
            .collect::<Result<Vec<_>>>()?;
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            check_label(&q.id)?,
            anchors.join(","),
            slots.join(","),
            check_label(g.entity_label(q.gold)?)?
        ));
    }
    Ok(out)
}

pub fn write_queries(path: impl AsRef<Path>, g: &KnowledgeGraph, qs: &[StructuredQuery]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_queries(g, qs)?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default)]
pub struct LoadedQueries {
    pub queries: Vec<StructuredQuery>,
    pub warnings: Vec<String>,
}

/// Parses query records. Slot relations missing from `g` are dropped with a
/// warning; queries that fail validation are skipped with a warning.
pub fn parse_queries(g: &KnowledgeGraph, text: &str) -> Result<LoadedQueries> {
    let mut out = LoadedQueries::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: Default::default(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let entity = |label: &str| {
            g.entity_id(label)
                .ok_or_else(|| bad(format!("unknown entity {label:?}")))
        };
        let anchors = fields[1]
            .split(',')
            .map(entity)
            .collect::<Result<Vec<_>>>()?;
        let mut slots = Vec::new();
        for label in fields[2].split(',').filter(|s| !s.is_empty()) {
            match g.relation_id(label) {
                Some(r) => slots.push(r),
                None => out.warnings.push(format!(
                    "{}: relation {label:?} not in graph; slot dropped",
                    fields[0]
                )),
            }
        }
        let q = StructuredQuery {
            id: fields[0].to_string(),
            anchors,
            slots,
            gold: entity(fields[3])?,
        };
        match check_query(g, &q) {
            Ok(()) => out.queries.push(q),
            Err(why) => out.warnings.push(format!("skipping invalid query {why}")),
        }
    }
    Ok(out)
}

pub fn read_queries(path: impl AsRef<Path>, g: &KnowledgeGraph) -> Result<LoadedQueries> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_queries(g, &text).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })
}

/// Shape of the synthetic two-fanout world used for ordering experiments.
///
/// Authors write one book each and carry a `filmed_in` distractor edge to a
/// town; books are filmed in a city; events are held in many cities. An
/// author therefore has out-degree 2 and an event has out-degree in
/// `event_fanout`, mirroring a "book by X filmed where event Y was held"
/// question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanoutWorldConfig {
    pub authors: usize,
    pub cities: usize,
    pub towns: usize,
    pub events: usize,
    pub event_fanout: (usize, usize),
    pub genres: usize,
}

impl Default for FanoutWorldConfig {
    fn default() -> Self {
        FanoutWorldConfig {
            authors: 150,
            cities: 40,
            towns: 30,
            events: 8,
            event_fanout: (20, 26),
            genres: 4,
        }
    }
}

pub fn fanout_world(cfg: &FanoutWorldConfig, seed: u64) -> Result<KnowledgeGraph> {
    let (lo, hi) = cfg.event_fanout;
    if cfg.events == 0 || cfg.authors == 0 || cfg.towns == 0 || cfg.genres == 0 {
        return Err(Error::InvalidArgument("fanout world needs every entity kind".into()));
    }
    if lo == 0 || lo > hi || hi > cfg.cities {
        return Err(Error::InvalidArgument(format!(
            "event fanout {lo}..={hi} incompatible with {} cities",
            cfg.cities
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let cities: Vec<String> = (0..cfg.cities).map(|i| format!("city_{i}")).collect();
    let mut hosted = BTreeSet::new();
    for e in 0..cfg.events {
        let k = rng.gen_range(lo..=hi);
        for c in cities.choose_multiple(&mut rng, k) {
            b.add(&format!("event_{e}"), "held_in", c);
            hosted.insert(c.clone());
        }
    }
    let hosted: Vec<String> = hosted.into_iter().collect();
    for a in 0..cfg.authors {
        let author = format!("author_{a}");
        let book = format!("book_{a}");
        b.add(&author, "wrote", &book);
        b.add(&author, "filmed_in", &format!("town_{}", rng.gen_range(0..cfg.towns)));
        b.add(&book, "filmed_in", hosted.choose(&mut rng).expect("events host cities"));
        for _ in 0..rng.gen_range(1..=2) {
            b.add(&book, "has_genre", &format!("genre_{}", rng.gen_range(0..cfg.genres)));
        }
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TripleDialect;

    pub(crate) fn fig1_graph() -> KnowledgeGraph {
        KnowledgeGraph::parse(
            "jkr\twrote\thp\nhp\tfilmed_in\tlondon\noly\theld_in\tlondon\n",
            TripleDialect::default(),
        )
        .unwrap()
    }

    fn random_graph(n: usize, edges: usize, rels: usize, seed: u64) -> KnowledgeGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = GraphBuilder::new();
        for _ in 0..edges {
            let s = rng.gen_range(0..n);
            let t = rng.gen_range(0..n);
            b.add(&format!("e{s}"), &format!("r{}", rng.gen_range(0..rels)), &format!("e{t}"));
        }
        b.build().unwrap()
    }

    fn id(g: &KnowledgeGraph, s: &str) -> EntityId {
        g.entity_id(s).unwrap()
    }

    #[test]
    fn fig1_generation() {
        let g = fig1_graph();
        let cfg = GenerateConfig {
            count: 1,
            max_chain_len: 2,
            n_anchors: 2,
            seed: 3,
            fanout_bias: None,
        };
        let out = generate_conjunctions(&g, &cfg).unwrap();
        assert_eq!(out.queries.len(), 1);
        let q = &out.queries[0];
        let anchors: BTreeSet<_> = q.anchors.iter().copied().collect();
        assert_eq!(anchors, BTreeSet::from([id(&g, "jkr"), id(&g, "oly")]));
        let mut slots: Vec<&str> = q.slots.iter().map(|&r| g.relation_label(r).unwrap()).collect();
        slots.sort_unstable();
        assert_eq!(slots, vec!["filmed_in", "held_in", "wrote"]);
        assert_eq!(q.gold, id(&g, "london"));
        assert!(validate_query(&g, q));
    }

    #[test]
    fn zero_count_is_empty() {
        let g = fig1_graph();
        let cfg = GenerateConfig {
            count: 0,
            ..Default::default()
        };
        let out = generate_conjunctions(&g, &cfg).unwrap();
        assert!(out.queries.is_empty());
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn generation_is_seeded() {
        let g = random_graph(5, 12, 3, 1);
        let cfg = GenerateConfig {
            count: 3,
            seed: 7,
            ..Default::default()
        };
        let a = generate_conjunctions(&g, &cfg).unwrap();
        let b = generate_conjunctions(&g, &cfg).unwrap();
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.warnings, b.warnings);
    }

    #[test]
    fn sparse_graph_gives_partial_list_and_warning() {
        let g = fig1_graph();
        let cfg = GenerateConfig {
            count: 5,
            ..Default::default()
        };
        let out = generate_conjunctions(&g, &cfg).unwrap();
        assert!(out.queries.len() < 5);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn rejects_bad_generation_arguments() {
        let g = fig1_graph();
        let one_anchor = GenerateConfig {
            n_anchors: 1,
            ..Default::default()
        };
        assert!(generate_conjunctions(&g, &one_anchor).is_err());
        let no_chain = GenerateConfig {
            max_chain_len: 0,
            ..Default::default()
        };
        assert!(generate_conjunctions(&g, &no_chain).is_err());
    }

    #[test]
    fn generator_validator_closure_on_random_graph() {
        let g = random_graph(60, 120, 8, 2);
        let cfg = GenerateConfig {
            count: 100,
            seed: 5,
            ..Default::default()
        };
        let out = generate_conjunctions(&g, &cfg).unwrap();
        assert_eq!(out.queries.len(), 100, "{:?}", out.warnings);
        for q in &out.queries {
            assert!(validate_query(&g, q), "{q:?}");
            let self_loop = g.triples().iter().any(|t| t.source == t.target);
            if !self_loop {
                assert!(!q.anchors.contains(&q.gold));
            }
            assert!(q.slots.len() >= q.anchors.len());
        }
    }

    #[test]
    fn validate_rejects_unreachable_gold() {
        let mut b = GraphBuilder::new();
        b.add("jkr", "wrote", "hp");
        b.add("hp", "filmed_in", "london");
        b.add("oly", "held_in", "london");
        b.add("oly", "held_in", "paris");
        let g = b.build().unwrap();
        let q = StructuredQuery {
            id: "q".into(),
            anchors: vec![id(&g, "jkr"), id(&g, "oly")],
            slots: ["wrote", "filmed_in", "held_in"]
                .iter()
                .map(|r| g.relation_id(r).unwrap())
                .collect(),
            gold: id(&g, "london"),
        };
        assert!(validate_query(&g, &q));
        let wrong = StructuredQuery {
            gold: id(&g, "paris"),
            ..q.clone()
        };
        assert!(!validate_query(&g, &wrong));
        let unknown = StructuredQuery {
            gold: EntityId(99),
            ..q
        };
        assert!(check_query(&g, &unknown).unwrap_err().contains("unknown entity"));
    }

    fn dummy_queries(n: usize) -> Vec<StructuredQuery> {
        (0..n)
            .map(|i| StructuredQuery {
                id: format!("q{i}"),
                anchors: vec![EntityId(0)],
                slots: vec![RelationId(0)],
                gold: EntityId(1),
            })
            .collect()
    }

    fn ids(qs: &[StructuredQuery]) -> BTreeSet<String> {
        qs.iter().map(|q| q.id.clone()).collect()
    }

    #[test]
    fn split_sizes_match_table_counts() {
        let s = split_queries(&dummy_queries(579), 0.25, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (434, 145));
        assert!(ids(&s.train).is_disjoint(&ids(&s.test)));
    }

    #[test]
    fn split_small_and_seeded() {
        let s = split_queries(&dummy_queries(4), 0.5, 0).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (2, 2));
        assert!(ids(&s.train).is_disjoint(&ids(&s.test)));

        let qs = dummy_queries(1130);
        let a = split_queries(&qs, 0.29, 42).unwrap();
        let b = split_queries(&qs, 0.29, 42).unwrap();
        assert_eq!(ids(&a.test), ids(&b.test));
        assert_eq!(a.test.len(), 328);
        let c = split_queries(&qs, 0.29, 43).unwrap();
        assert_ne!(ids(&a.test), ids(&c.test));
    }

    #[test]
    fn split_errors() {
        assert!(split_queries(&dummy_queries(1), 0.5, 0).is_err());
        assert!(split_queries(&dummy_queries(4), 0.0, 0).is_err());
        assert!(split_queries(&dummy_queries(4), 1.0, 0).is_err());
    }

    #[test]
    fn query_file_round_trip_and_missing_relation() {
        let g = fig1_graph();
        let cfg = GenerateConfig {
            count: 1,
            seed: 3,
            ..Default::default()
        };
        let qs = generate_conjunctions(&g, &cfg).unwrap().queries;
        let text = format_queries(&g, &qs).unwrap();
        let back = parse_queries(&g, &text).unwrap();
        assert_eq!(back.queries, qs);
        assert!(back.warnings.is_empty());

        let odd = "qx\tjkr,oly\twrote,filmed_in,held_in,capital_of\tlondon\n";
        let loaded = parse_queries(&g, odd).unwrap();
        assert_eq!(loaded.queries.len(), 1);
        assert_eq!(loaded.queries[0].slots.len(), 3);
        assert_eq!(loaded.warnings.len(), 1);

        let invalid = "qy\tjkr\twrote\toly\n";
        let loaded = parse_queries(&g, invalid).unwrap();
        assert!(loaded.queries.is_empty());
        assert_eq!(loaded.warnings.len(), 1);

        assert!(parse_queries(&g, "q\tjkr\n").is_err());
        assert!(parse_queries(&g, "q\tnobody\twrote\tlondon\n").is_err());
    }

    #[test]
    fn fanout_world_queries_have_low_and_high_anchor() {
        let g = fanout_world(&FanoutWorldConfig::default(), 4).unwrap();
        let cfg = GenerateConfig {
            count: 100,
            max_chain_len: 2,
            n_anchors: 2,
            seed: 9,
            fanout_bias: Some(FanoutBias {
                low_max: 2,
                high_min: 20,
            }),
        };
        let out = generate_conjunctions(&g, &cfg).unwrap();
        assert_eq!(out.queries.len(), 100, "{:?}", out.warnings);
        let mut low_first = 0;
        for q in &out.queries {
            assert!(validate_query(&g, q));
            let degs: Vec<usize> = q.anchors.iter().map(|&a| g.out_degree(a)).collect();
            assert_eq!(degs.iter().filter(|&&d| d <= 2).count(), 1, "{degs:?}");
            assert_eq!(degs.iter().filter(|&&d| d >= 20).count(), 1, "{degs:?}");
            assert_eq!(answer_intersection(&g, q).len(), 1);
            low_first += usize::from(degs[0] <= 2);
        }
        // anchor order is shuffled, so position does not reveal fanout
        assert!((25..=75).contains(&low_first), "{low_first}");
    }
}
