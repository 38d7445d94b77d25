//! The decision process: one growing subgraph per anchor, triple expansions,
//! self-loop termination and the terminal reward.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::graph::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::query::{answer_intersection, StructuredQuery};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubGraph {
    pub anchor: EntityId,
    /// Visited entities in insertion order.
    pub nodes: Vec<EntityId>,
    pub edges: Vec<Triple>,
    pub last_hit: EntityId,
    pub terminated: bool,
}

impl SubGraph {
    fn new(anchor: EntityId) -> Self {
        SubGraph {
            anchor,
            nodes: vec![anchor],
            edges: Vec::new(),
            last_hit: anchor,
            terminated: false,
        }
    }

    pub fn contains(&self, e: EntityId) -> bool {
        self.nodes.contains(&e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActionKind {
    Expand(Triple),
    SelfLoop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Action {
    pub subgraph: usize,
    pub kind: ActionKind,
}

impl Action {
    pub fn expand(subgraph: usize, triple: Triple) -> Self {
        Action {
            subgraph,
            kind: ActionKind::Expand(triple),
        }
    }

    pub fn self_loop(subgraph: usize) -> Self {
        Action {
            subgraph,
            kind: ActionKind::SelfLoop,
        }
    }

    pub fn is_self_loop(&self) -> bool {
        matches!(self.kind, ActionKind::SelfLoop)
    }

    pub fn triple(&self) -> Option<Triple> {
        match self.kind {
            ActionKind::Expand(t) => Some(t),
            ActionKind::SelfLoop => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvState {
    pub subgraphs: Vec<SubGraph>,
    /// Number of expansions so far; self-loops do not count.
    pub step: usize,
    pub consumed: Vec<RelationId>,
}

/// Default episode cutoff: one expansion per relation slot plus one.
pub fn default_max_steps(q: &StructuredQuery) -> usize {
    q.slots.len() + 1
}

pub fn init_episode(g: &KnowledgeGraph, q: &StructuredQuery) -> Result<EnvState> {
    if let Some(a) = q.anchors.iter().find(|a| !g.contains_entity(**a)) {
        return Err(Error::UnknownEntity(a.0));
    }
    Ok(EnvState {
        subgraphs: q.anchors.iter().map(|&a| SubGraph::new(a)).collect(),
        step: 0,
        consumed: Vec::new(),
    })
}

impl EnvState {
    pub fn num_subgraphs(&self) -> usize {
        self.subgraphs.len()
    }

    pub fn last_hits(&self) -> Vec<EntityId> {
        self.subgraphs.iter().map(|s| s.last_hit).collect()
    }

    pub fn all_terminated(&self) -> bool {
        self.subgraphs.iter().all(|s| s.terminated)
    }

    pub fn is_terminal(&self, max_steps: usize) -> bool {
        self.all_terminated() || self.step >= max_steps
    }

    /// Expansions of one live subgraph, in node-insertion then (relation, target) order.
    /// Triples already taken by the subgraph are not offered again.
    pub fn expansions_of(&self, g: &KnowledgeGraph, i: usize) -> Vec<Action> {
        let sg = &self.subgraphs[i];
        let mut out = Vec::new();
        if sg.terminated {
            return out;
        }
        for &node in &sg.nodes {
            for &(r, t) in g.outgoing(node).unwrap_or(&[]) {
                let triple = Triple::new(node, r, t);
                if !sg.edges.contains(&triple) {
                    out.push(Action::expand(i, triple));
                }
            }
        }
        out
    }

    /// All legal actions: per live subgraph its expansions followed by its self-loop.
    pub fn legal_actions(&self, g: &KnowledgeGraph) -> Vec<Action> {
        let mut out = Vec::new();
        for (i, sg) in self.subgraphs.iter().enumerate() {
            if sg.terminated {
                continue;
            }
            out.extend(self.expansions_of(g, i));
            out.push(Action::self_loop(i));
        }
        out
    }

    pub fn is_legal(&self, g: &KnowledgeGraph, a: &Action) -> bool {
        let Some(sg) = self.subgraphs.get(a.subgraph) else {
            return false;
        };
        if sg.terminated {
            return false;
        }
        match a.kind {
            ActionKind::SelfLoop => true,
            ActionKind::Expand(t) => {
                sg.contains(t.source) && g.contains_triple(&t) && !sg.edges.contains(&t)
            }
        }
    }

    /// Deterministic transition; rejects actions not in `legal_actions`.
    pub fn apply(&mut self, g: &KnowledgeGraph, a: &Action) -> Result<()> {
        if !self.is_legal(g, a) {
            return Err(Error::IllegalAction(format!("{a:?}")));
        }
        let sg = &mut self.subgraphs[a.subgraph];
        match a.kind {
            ActionKind::SelfLoop => sg.terminated = true,
            ActionKind::Expand(t) => {
                if !sg.nodes.contains(&t.target) {
                    sg.nodes.push(t.target);
                }
                sg.edges.push(t);
                sg.last_hit = t.target;
                self.step += 1;
                self.consumed.push(t.relation);
            }
        }
        Ok(())
    }
}

pub fn legal_actions(g: &KnowledgeGraph, s: &EnvState) -> Vec<Action> {
    s.legal_actions(g)
}

pub fn apply_action(g: &KnowledgeGraph, s: &EnvState, a: &Action) -> Result<EnvState> {
    let mut next = s.clone();
    next.apply(g, a)?;
    Ok(next)
}

pub fn is_terminal(s: &EnvState, max_steps: usize) -> bool {
    s.is_terminal(max_steps)
}

/// The last-hit entity shared by the most subgraphs; ties go to the higher
/// score, then to the lower entity id. Entities missing from `scores` score 0.
pub fn predict_answer(s: &EnvState, scores: &HashMap<EntityId, f64>) -> EntityId {
    let mut counts: Vec<(EntityId, usize)> = Vec::new();
    for e in s.last_hits() {
        match counts.iter_mut().find(|(x, _)| *x == e) {
            Some((_, c)) => *c += 1,
            None => counts.push((e, 1)),
        }
    }
    let score = |e: &EntityId| scores.get(e).copied().unwrap_or(0.0);
    counts
        .into_iter()
        .max_by(|(ea, ca), (eb, cb)| {
            ca.cmp(cb)
                .then(score(ea).total_cmp(&score(eb)))
                .then(eb.cmp(ea))
        })
        .map(|(e, _)| e)
        .expect("an episode has at least one subgraph")
}

/// Per-query data needed to score terminal states.
#[derive(Clone, Debug)]
pub struct RewardContext {
    pub gold: EntityId,
    /// Entities satisfying every anchor's slot-relation constraint.
    pub consistent: BTreeSet<EntityId>,
}

impl RewardContext {
    pub fn new(g: &KnowledgeGraph, q: &StructuredQuery) -> Self {
        RewardContext {
            gold: q.gold,
            consistent: answer_intersection(g, q),
        }
    }
}

/// `z + lambda * y` for a correct prediction, `-1` otherwise. `z` counts
/// subgraphs whose last hit is the gold answer and `y` counts subgraphs whose
/// last hit is consistent with every anchor.
pub fn terminal_reward(s: &EnvState, ctx: &RewardContext, predicted: EntityId, lambda: f64) -> f64 {
    if predicted != ctx.gold {
        return -1.0;
    }
    let z = s.subgraphs.iter().filter(|sg| sg.last_hit == ctx.gold).count();
    let y = s
        .subgraphs
        .iter()
        .filter(|sg| ctx.consistent.contains(&sg.last_hit))
        .count();
    utility(z, y, lambda)
}

pub fn utility(z: usize, y: usize, lambda: f64) -> f64 {
    z as f64 + lambda * y as f64
}

/// `SELF_LOOP` or the tab-joined `source relation target` labels of an action.
pub fn describe_action(g: &KnowledgeGraph, a: &Action) -> Result<String> {
    match a.kind {
        ActionKind::SelfLoop => Ok("SELF_LOOP".to_string()),
        ActionKind::Expand(t) => Ok(format!(
            "{}\t{}\t{}",
            g.entity_label(t.source)?,
            g.relation_label(t.relation)?,
            g.entity_label(t.target)?
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TripleDialect;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fig1() -> (KnowledgeGraph, StructuredQuery) {
        let g = KnowledgeGraph::parse(
            "jkr\twrote\thp\nhp\tfilmed_in\tlondon\noly\theld_in\tlondon\noly\theld_in\tparis\njkr\tborn_in\tyate\n",
            TripleDialect::default(),
        )
        .unwrap();
        let e = |s: &str| g.entity_id(s).unwrap();
        let r = |s: &str| g.relation_id(s).unwrap();
        let q = StructuredQuery {
            id: "fig1".into(),
            anchors: vec![e("jkr"), e("oly")],
            slots: vec![r("wrote"), r("filmed_in"), r("held_in")],
            gold: e("london"),
        };
        (g, q)
    }

    fn single(g: &KnowledgeGraph, anchor: &str) -> StructuredQuery {
        StructuredQuery {
            id: "s".into(),
            anchors: vec![g.entity_id(anchor).unwrap()],
            slots: vec![RelationId(0)],
            gold: g.entity_id(anchor).unwrap(),
        }
    }

    #[test]
    fn init_one_subgraph_per_anchor() {
        let (g, q) = fig1();
        let s = init_episode(&g, &q).unwrap();
        assert_eq!(s.num_subgraphs(), 2);
        assert_eq!(s.subgraphs[0].anchor, g.entity_id("jkr").unwrap());
        assert_eq!(s.subgraphs[1].anchor, g.entity_id("oly").unwrap());
        for sg in &s.subgraphs {
            assert_eq!(sg.nodes, vec![sg.anchor]);
            assert_eq!(sg.last_hit, sg.anchor);
            assert!(!sg.terminated);
        }
        assert_eq!(s.step, 0);

        let s1 = init_episode(&g, &single(&g, "jkr")).unwrap();
        assert_eq!(s1.num_subgraphs(), 1);

        let bad = StructuredQuery {
            anchors: vec![EntityId(42)],
            ..q
        };
        assert!(matches!(init_episode(&g, &bad), Err(Error::UnknownEntity(42))));
    }

    #[test]
    fn legal_action_counts() {
        let (g, q) = fig1();
        let s = init_episode(&g, &q).unwrap();
        let jkr = g.entity_id("jkr").unwrap();
        let oly = g.entity_id("oly").unwrap();
        let expected = g.outgoing(jkr).unwrap().len() + g.outgoing(oly).unwrap().len() + 2;
        assert_eq!(s.legal_actions(&g).len(), expected);

        let one = KnowledgeGraph::parse("a\tr\tb\n", TripleDialect::default()).unwrap();
        let s = init_episode(&one, &single(&one, "a")).unwrap();
        assert_eq!(
            s.legal_actions(&one),
            vec![Action::expand(0, one.triples()[0]), Action::self_loop(0)]
        );
    }

    #[test]
    fn no_actions_when_all_terminated() {
        let (g, q) = fig1();
        let mut s = init_episode(&g, &q).unwrap();
        s.apply(&g, &Action::self_loop(0)).unwrap();
        s.apply(&g, &Action::self_loop(1)).unwrap();
        assert!(s.legal_actions(&g).is_empty());
        assert!(s.is_terminal(100));
    }

    #[test]
    fn expansion_and_self_loop_transitions() {
        let g = KnowledgeGraph::parse("a\tr\tb\na\ts\tc\n", TripleDialect::default()).unwrap();
        let e = |s: &str| g.entity_id(s).unwrap();
        let s0 = init_episode(&g, &single(&g, "a")).unwrap();
        let ab = Triple::new(e("a"), g.relation_id("r").unwrap(), e("b"));
        let s1 = apply_action(&g, &s0, &Action::expand(0, ab)).unwrap();
        assert_eq!(s1.subgraphs[0].nodes, vec![e("a"), e("b")]);
        assert_eq!(s1.subgraphs[0].last_hit, e("b"));
        assert_eq!(s1.step, 1);
        assert_eq!(s1.consumed, vec![ab.relation]);

        // branching: the source may be any inferred entity, not only the last hit
        let ac = Triple::new(e("a"), g.relation_id("s").unwrap(), e("c"));
        let s2 = apply_action(&g, &s1, &Action::expand(0, ac)).unwrap();
        assert_eq!(s2.subgraphs[0].nodes, vec![e("a"), e("b"), e("c")]);

        let s3 = apply_action(&g, &s2, &Action::self_loop(0)).unwrap();
        assert_eq!(s3.subgraphs[0].nodes, s2.subgraphs[0].nodes);
        assert!(s3.subgraphs[0].terminated);
        assert_eq!(s3.step, 2);
    }

    #[test]
    fn illegal_actions_rejected() {
        let g = KnowledgeGraph::parse("a\tr\tb\nb\tr\tc\n", TripleDialect::default()).unwrap();
        let e = |s: &str| g.entity_id(s).unwrap();
        let s0 = init_episode(&g, &single(&g, "a")).unwrap();
        let bc = Triple::new(e("b"), RelationId(0), e("c"));
        assert!(matches!(
            apply_action(&g, &s0, &Action::expand(0, bc)),
            Err(Error::IllegalAction(_))
        ));
        assert!(apply_action(&g, &s0, &Action::self_loop(3)).is_err());
        let done = apply_action(&g, &s0, &Action::self_loop(0)).unwrap();
        assert!(apply_action(&g, &done, &Action::self_loop(0)).is_err());
    }

    #[test]
    fn terminal_conditions() {
        let (g, q) = fig1();
        let mut s = init_episode(&g, &q).unwrap();
        assert!(!s.is_terminal(4));
        s.apply(&g, &Action::self_loop(0)).unwrap();
        assert!(!is_terminal(&s, 4));
        s.step = 4;
        assert!(is_terminal(&s, 4));
    }

    fn with_last_hits(hits: &[EntityId]) -> EnvState {
        EnvState {
            subgraphs: hits
                .iter()
                .map(|&h| SubGraph {
                    last_hit: h,
                    ..SubGraph::new(h)
                })
                .collect(),
            step: 0,
            consumed: vec![],
        }
    }

    #[test]
    fn predict_answer_rules() {
        let (london, paris, x, y) = (EntityId(1), EntityId(2), EntityId(3), EntityId(4));
        let none = HashMap::new();
        assert_eq!(predict_answer(&with_last_hits(&[london, london]), &none), london);
        let scores = HashMap::from([(london, 0.7), (paris, 0.2)]);
        assert_eq!(predict_answer(&with_last_hits(&[paris, london]), &scores), london);
        assert_eq!(predict_answer(&with_last_hits(&[x, y, x]), &none), x);
        // equal scores fall back to the lower id
        assert_eq!(predict_answer(&with_last_hits(&[y, x]), &none), x);
    }

    #[test]
    fn reward_examples() {
        let (g, q) = fig1();
        let ctx = RewardContext::new(&g, &q);
        assert_eq!(ctx.consistent, BTreeSet::from([q.gold]));
        assert_eq!(utility(3, 2, 0.5), 4.0);
        assert_eq!(utility(2, 0, 0.9), 2.0);

        let both = with_last_hits(&[q.gold, q.gold]);
        assert_eq!(terminal_reward(&both, &ctx, q.gold, 0.5), 3.0);
        let paris = g.entity_id("paris").unwrap();
        let split = with_last_hits(&[q.gold, paris]);
        assert_eq!(terminal_reward(&split, &ctx, q.gold, 0.5), 1.5);
        assert_eq!(terminal_reward(&split, &ctx, paris, 0.5), -1.0);
    }

    #[test]
    fn random_walk_invariants() {
        let mut b = crate::graph::GraphBuilder::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..80 {
            let (s, t) = (rng.gen_range(0..20), rng.gen_range(0..20));
            b.add(&format!("e{s}"), &format!("r{}", rng.gen_range(0..3)), &format!("e{t}"));
        }
        let g = b.build().unwrap();
        let ctx_q = |anchors: Vec<EntityId>| StructuredQuery {
            id: "r".into(),
            anchors,
            slots: vec![RelationId(0), RelationId(1), RelationId(2)],
            gold: EntityId(0),
        };
        for episode in 0..100 {
            let n = 1 + episode % 3;
            let anchors: Vec<EntityId> = (0..n).map(|i| EntityId((episode + 7 * i) % 20)).collect();
            let q = ctx_q(anchors);
            let ctx = RewardContext::new(&g, &q);
            let mut s = init_episode(&g, &q).unwrap();
            let max_steps = default_max_steps(&q);
            while !s.is_terminal(max_steps) {
                let actions = s.legal_actions(&g);
                assert_eq!(actions, s.legal_actions(&g));
                assert!(!actions.is_empty());
                let a = actions[rng.gen_range(0..actions.len())];
                let before: Vec<usize> = s.subgraphs.iter().map(|sg| sg.nodes.len()).collect();
                s.apply(&g, &a).unwrap();
                for (sg, b) in s.subgraphs.iter().zip(before) {
                    assert!(sg.nodes.len() >= b);
                    assert!(sg.nodes.contains(&sg.anchor) && sg.nodes.contains(&sg.last_hit));
                }
                assert_eq!(s.consumed.len(), s.step);
            }
            let pred = predict_answer(&s, &HashMap::new());
            let r = terminal_reward(&s, &ctx, pred, 0.5);
            assert!(r == -1.0 || (0.0..=n as f64 * 1.5).contains(&r), "{r}");
        }
    }

    #[test]
    fn describes_actions() {
        let (g, _) = fig1();
        let t = g.triples()[0];
        assert_eq!(describe_action(&g, &Action::expand(0, t)).unwrap(), "jkr\twrote\thp");
        assert_eq!(describe_action(&g, &Action::self_loop(1)).unwrap(), "SELF_LOOP");
    }
}
