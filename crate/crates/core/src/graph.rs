//! Immutable triple store with an outgoing-edge index.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense entity id, contiguous from 0 in first-appearance order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub usize);

/// Dense relation id, contiguous from 0 in first-appearance order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub source: EntityId,
    pub relation: RelationId,
    pub target: EntityId,
}

impl Triple {
    pub fn new(source: EntityId, relation: RelationId, target: EntityId) -> Self {
        Triple {
            source,
            relation,
            target,
        }
    }
}

/// Options for reading a triple file.
#[derive(Clone, Copy, Debug, Default)]
pub struct TripleDialect {
    /// Materialize `r_inv` edges for every triple.
    pub add_inverse: bool,
}

pub const INVERSE_SUFFIX: &str = "_inv";

#[derive(Clone, Debug, Default)]
struct Interner {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    fn intern(&mut self, label: &str) -> usize {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len();
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), id);
        id
    }

    fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

/// Incrementally assembles a [`KnowledgeGraph`] from labelled triples.
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    entities: Interner,
    relations: Interner,
    triples: Vec<Triple>,
    seen: std::collections::HashSet<Triple>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn entity(&mut self, label: &str) -> EntityId {
        EntityId(self.entities.intern(label))
    }

    fn relation(&mut self, label: &str) -> RelationId {
        RelationId(self.relations.intern(label))
    }

    /// Adds a triple; duplicates are ignored. Returns true if it was new.
    pub fn add(&mut self, source: &str, relation: &str, target: &str) -> bool {
        let s = self.entity(source);
        let r = self.relation(relation);
        let t = self.entity(target);
        let triple = Triple::new(s, r, t);
        if self.seen.insert(triple) {
            self.triples.push(triple);
            true
        } else {
            false
        }
    }

    pub fn build(self) -> Result<KnowledgeGraph> {
        if self.triples.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut out_index = vec![Vec::new(); self.entities.labels.len()];
        for t in &self.triples {
            out_index[t.source.0].push((t.relation, t.target));
        }
        for edges in &mut out_index {
            edges.sort_unstable();
        }
        Ok(KnowledgeGraph {
            entities: self.entities,
            relations: self.relations,
            triples: self.triples,
            out_index,
        })
    }
}

/// The search world: entities, relations and the triples connecting them.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Interner,
    relations: Interner,
    triples: Vec<Triple>,
    out_index: Vec<Vec<(RelationId, EntityId)>>,
}

impl KnowledgeGraph {
    /// Reads a tab-separated `source\trelation\ttarget` file.
    pub fn load(path: impl AsRef<Path>, dialect: TripleDialect) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, dialect).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    /// Parses triple-file text. Line numbers in errors are 1-based.
    pub fn parse(text: &str, dialect: TripleDialect) -> Result<Self> {
        let mut builder = GraphBuilder::new();
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::Parse {
                    path: Default::default(),
                    line: i + 1,
                    message: format!("expected 3 non-empty tab-separated fields, got {:?}", line),
                });
            }
            builder.add(fields[0], fields[1], fields[2]);
            rows.push((fields[0], fields[1], fields[2]));
        }
        if dialect.add_inverse {
            for (s, r, t) in rows {
                builder.add(t, &format!("{r}{INVERSE_SUFFIX}"), s);
            }
        }
        builder.build()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.labels.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.labels.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_label(&self, e: EntityId) -> Result<&str> {
        self.entities
            .labels
            .get(e.0)
            .map(String::as_str)
            .ok_or(Error::UnknownEntity(e.0))
    }

    pub fn relation_label(&self, r: RelationId) -> Result<&str> {
        self.relations
            .labels
            .get(r.0)
            .map(String::as_str)
            .ok_or(Error::UnknownRelation(r.0))
    }

    pub fn entity_id(&self, label: &str) -> Option<EntityId> {
        self.entities.get(label).map(EntityId)
    }

    pub fn relation_id(&self, label: &str) -> Option<RelationId> {
        self.relations.get(label).map(RelationId)
    }

    pub fn contains_entity(&self, e: EntityId) -> bool {
        e.0 < self.num_entities()
    }

    pub fn contains_relation(&self, r: RelationId) -> bool {
        r.0 < self.num_relations()
    }

    /// Outgoing `(relation, target)` pairs of `e`, sorted by relation then target.
    pub fn outgoing(&self, e: EntityId) -> Result<&[(RelationId, EntityId)]> {
        self.out_index
            .get(e.0)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownEntity(e.0))
    }

    pub fn out_degree(&self, e: EntityId) -> usize {
        self.out_index.get(e.0).map_or(0, Vec::len)
    }

    pub fn contains_triple(&self, t: &Triple) -> bool {
        self.out_index
            .get(t.source.0)
            .is_some_and(|edges| edges.binary_search(&(t.relation, t.target)).is_ok())
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        (0..self.num_entities()).map(EntityId)
    }

    pub fn summary(&self) -> String {
        format!(
            "entities={} relations={} triples={}",
            self.num_entities(),
            self.num_relations(),
            self.triples.len()
        )
    }

    /// Writes the graph in the triple-file dialect, preserving id order on reload.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        // Insertion order reproduces first-appearance interning on reload.
        for t in &self.triples {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.entities.labels[t.source.0],
                self.relations.labels[t.relation.0],
                self.entities.labels[t.target.0]
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for KnowledgeGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.summary())
    }
}
