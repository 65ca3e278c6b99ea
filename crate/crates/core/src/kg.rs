//! Ground-truth knowledge graph.
//!
//! A graph is a set of `(subject, relation, object)` triples over densely
//! numbered entities and relations. Functional relations (at most one object
//! per subject) are mirrored in a forward index so multi-hop paths resolve in
//! one lookup per hop. Graph values are immutable: edits return a new graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seeds::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: RelationId,
    pub label: String,
    pub functional: bool,
}

/// Ordered by `(subject, relation, object)`, which is also the canonical
/// neighborhood order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

impl Triple {
    pub fn new(subject: EntityId, relation: RelationId, object: EntityId) -> Self {
        Self {
            subject,
            relation,
            object,
        }
    }
}

/// Replace `(subject, relation, old_object)` with `(subject, relation, new_object)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeEdit {
    pub subject: EntityId,
    pub relation: RelationId,
    pub old_object: EntityId,
    pub new_object: EntityId,
}

impl EdgeEdit {
    pub fn reverted(&self) -> Self {
        Self {
            old_object: self.new_object,
            new_object: self.old_object,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Forward,
    Backward,
}

#[derive(Debug, Error, PartialEq)]
pub enum KgError {
    #[error("duplicate functional edge for ({subject}, {relation})")]
    DuplicateFunctionalEdge {
        subject: EntityId,
        relation: RelationId,
    },
    #[error("dangling id: {0}")]
    DanglingId(String),
    #[error("ids must be dense 0..n: {0}")]
    NonDenseId(String),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("edge ({subject}, {relation}, {object}) not present")]
    MissingEdge {
        subject: EntityId,
        relation: RelationId,
        object: EntityId,
    },
    #[error("edit is a no-op: old and new object are both {0}")]
    NoOpEdit(EntityId),
    #[error("edge ({subject}, {relation}, {object}) already present")]
    DuplicateTriple {
        subject: EntityId,
        relation: RelationId,
        object: EntityId,
    },
    #[error("path broken at hop {hop}: no {relation} edge from {entity}")]
    BrokenPath {
        hop: usize,
        entity: EntityId,
        relation: RelationId,
    },
    #[error("relation {0} is not functional")]
    NonFunctional(RelationId),
    #[error("infeasible synthetic config: {0}")]
    InfeasibleConfig(String),
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("unknown {kind} label {label:?}")]
    UnknownLabel { kind: &'static str, label: String },
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, KgError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    triples: BTreeSet<Triple>,
    forward: BTreeMap<(EntityId, RelationId), EntityId>,
}

impl Default for KnowledgeGraph {
    fn default() -> Self {
        Self::empty()
    }
}

impl KnowledgeGraph {
    pub fn empty() -> Self {
        Self {
            entities: Vec::new(),
            relations: Vec::new(),
            triples: BTreeSet::new(),
            forward: BTreeMap::new(),
        }
    }

    /// Validate and index a graph.
    pub fn build(
        entities: Vec<Entity>,
        relations: Vec<Relation>,
        triples: impl IntoIterator<Item = Triple>,
    ) -> Result<Self> {
        let mut labels = BTreeSet::new();
        for (i, e) in entities.iter().enumerate() {
            if e.id.index() != i {
                return Err(KgError::NonDenseId(format!("entity {} at position {i}", e.id)));
            }
            if !labels.insert(e.label.as_str()) {
                return Err(KgError::DuplicateLabel(e.label.clone()));
            }
        }
        let mut labels = BTreeSet::new();
        for (i, r) in relations.iter().enumerate() {
            if r.id.index() != i {
                return Err(KgError::NonDenseId(format!("relation {} at position {i}", r.id)));
            }
            if !labels.insert(r.label.as_str()) {
                return Err(KgError::DuplicateLabel(r.label.clone()));
            }
        }

        let mut graph = Self {
            entities,
            relations,
            triples: BTreeSet::new(),
            forward: BTreeMap::new(),
        };
        for t in triples {
            graph.insert_triple(t)?;
        }
        Ok(graph)
    }

    fn check_triple_ids(&self, t: &Triple) -> Result<()> {
        if t.subject.index() >= self.entities.len() {
            return Err(KgError::DanglingId(format!("subject {}", t.subject)));
        }
        if t.object.index() >= self.entities.len() {
            return Err(KgError::DanglingId(format!("object {}", t.object)));
        }
        if t.relation.index() >= self.relations.len() {
            return Err(KgError::DanglingId(format!("relation {}", t.relation)));
        }
        Ok(())
    }

    fn insert_triple(&mut self, t: Triple) -> Result<()> {
        self.check_triple_ids(&t)?;
        if self.relations[t.relation.index()].functional {
            if self.forward.contains_key(&(t.subject, t.relation)) {
                return Err(KgError::DuplicateFunctionalEdge {
                    subject: t.subject,
                    relation: t.relation,
                });
            }
            self.forward.insert((t.subject, t.relation), t.object);
        }
        self.triples.insert(t);
        Ok(())
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn triples(&self) -> &BTreeSet<Triple> {
        &self.triples
    }

    pub fn forward_index(&self) -> &BTreeMap<(EntityId, RelationId), EntityId> {
        &self.forward
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity(&self, id: EntityId) -> Option<&Entity> {
        self.entities.get(id.index())
    }

    pub fn relation(&self, id: RelationId) -> Option<&Relation> {
        self.relations.get(id.index())
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entities[id.index()].label
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        &self.relations[id.index()].label
    }

    pub fn entity_by_label(&self, label: &str) -> Option<EntityId> {
        self.entities.iter().find(|e| e.label == label).map(|e| e.id)
    }

    pub fn relation_by_label(&self, label: &str) -> Option<RelationId> {
        self.relations.iter().find(|r| r.label == label).map(|r| r.id)
    }

    pub fn is_functional(&self, r: RelationId) -> bool {
        self.relations.get(r.index()).is_some_and(|r| r.functional)
    }

    /// Object of a functional `(subject, relation)` edge.
    pub fn object_of(&self, subject: EntityId, relation: RelationId) -> Option<EntityId> {
        self.forward.get(&(subject, relation)).copied()
    }

    /// Triples whose subject is `entity` (forward) or whose object is
    /// `entity` (backward), in `(subject, relation, object)` order.
    pub fn neighborhood(&self, entity: EntityId, direction: Direction) -> Vec<Triple> {
        match direction {
            Direction::Forward => {
                let lo = Triple::new(entity, RelationId(0), EntityId(0));
                let hi = Triple::new(entity, RelationId(u32::MAX), EntityId(u32::MAX));
                self.triples.range(lo..=hi).copied().collect()
            }
            Direction::Backward => self
                .triples
                .iter()
                .filter(|t| t.object == entity)
                .copied()
                .collect(),
        }
    }

    /// Functional forward edges only; these are the edges paths may use.
    pub fn functional_out(&self, entity: EntityId) -> Vec<Triple> {
        self.neighborhood(entity, Direction::Forward)
            .into_iter()
            .filter(|t| self.is_functional(t.relation))
            .collect()
    }

    pub fn out_degree(&self, entity: EntityId) -> usize {
        self.functional_out(entity).len()
    }

    pub fn apply_edge_edit(&self, edit: &EdgeEdit) -> Result<Self> {
        if edit.old_object == edit.new_object {
            return Err(KgError::NoOpEdit(edit.old_object));
        }
        let old = Triple::new(edit.subject, edit.relation, edit.old_object);
        let new = Triple::new(edit.subject, edit.relation, edit.new_object);
        self.check_triple_ids(&new)?;
        if !self.triples.contains(&old) {
            return Err(KgError::MissingEdge {
                subject: old.subject,
                relation: old.relation,
                object: old.object,
            });
        }
        if self.triples.contains(&new) {
            return Err(KgError::DuplicateTriple {
                subject: new.subject,
                relation: new.relation,
                object: new.object,
            });
        }
        let mut next = self.clone();
        next.triples.remove(&old);
        next.triples.insert(new);
        if next.is_functional(edit.relation) {
            next.forward.insert((edit.subject, edit.relation), edit.new_object);
        }
        Ok(next)
    }

    pub fn apply_edits<'a>(&self, edits: impl IntoIterator<Item = &'a EdgeEdit>) -> Result<Self> {
        let mut g = self.clone();
        for e in edits {
            g = g.apply_edge_edit(e)?;
        }
        Ok(g)
    }

    /// Fold the forward index over `relations` starting at `subject`.
    pub fn resolve_path(&self, subject: EntityId, relations: &[RelationId]) -> Result<EntityId> {
        if subject.index() >= self.entities.len() {
            return Err(KgError::DanglingId(format!("subject {subject}")));
        }
        let mut at = subject;
        for (hop, &r) in relations.iter().enumerate() {
            if !self.is_functional(r) {
                return Err(KgError::NonFunctional(r));
            }
            at = self.object_of(at, r).ok_or(KgError::BrokenPath {
                hop,
                entity: at,
                relation: r,
            })?;
        }
        Ok(at)
    }

    /// Entities visited along a path, including the start.
    pub fn walk(&self, subject: EntityId, relations: &[RelationId]) -> Result<Vec<EntityId>> {
        let mut out = Vec::with_capacity(relations.len() + 1);
        out.push(subject);
        for i in 0..relations.len() {
            let next = self.resolve_path(out[i], &relations[i..=i])?;
            out.push(next);
        }
        Ok(out)
    }

    /// Every functional path of exactly `depth` hops, in canonical order.
    pub fn enumerate_paths(&self, depth: usize) -> Vec<(EntityId, Vec<RelationId>)> {
        let mut out = Vec::new();
        for e in &self.entities {
            let mut stack = vec![(e.id, Vec::new())];
            while let Some((at, chain)) = stack.pop() {
                if chain.len() == depth {
                    out.push((e.id, chain));
                    continue;
                }
                for t in self.functional_out(at).into_iter().rev() {
                    let mut c = chain.clone();
                    c.push(t.relation);
                    stack.push((t.object, c));
                }
            }
        }
        out
    }

    /// SHA-256 over the canonical JSON-lines encoding.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        hex_digest(&Sha256::digest(&buf))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entities {
            let rec = GraphRecord::Entity {
                id: e.id.0,
                label: e.label.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        for r in &self.relations {
            let rec = GraphRecord::Relation {
                id: r.id.0,
                label: r.label.clone(),
                functional: r.functional,
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        for t in &self.triples {
            let rec = GraphRecord::Triple {
                s: t.subject.0,
                r: t.relation.0,
                o: t.object.0,
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut g = Self::empty();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| KgError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| KgError::ParseError {
                line: line_no,
                message,
            };
            let rec: GraphRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            match rec {
                GraphRecord::Entity { id, label } => {
                    if id as usize != g.entities.len() {
                        return Err(parse_err(format!("entity id {id} is not dense")));
                    }
                    if g.entities.iter().any(|e| e.label == label) {
                        return Err(parse_err(format!("duplicate entity label {label:?}")));
                    }
                    g.entities.push(Entity {
                        id: EntityId(id),
                        label,
                    });
                }
                GraphRecord::Relation {
                    id,
                    label,
                    functional,
                } => {
                    if id as usize != g.relations.len() {
                        return Err(parse_err(format!("relation id {id} is not dense")));
                    }
                    if g.relations.iter().any(|r| r.label == label) {
                        return Err(parse_err(format!("duplicate relation label {label:?}")));
                    }
                    g.relations.push(Relation {
                        id: RelationId(id),
                        label,
                        functional,
                    });
                }
                GraphRecord::Triple { s, r, o } => {
                    let t = Triple::new(EntityId(s), RelationId(r), EntityId(o));
                    g.insert_triple(t).map_err(|e| parse_err(e.to_string()))?;
                }
            }
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| KgError::Io(e.to_string()))?;
        let mut w = BufWriter::new(f);
        self.write_jsonl(&mut w).map_err(|e| KgError::Io(e.to_string()))?;
        w.flush().map_err(|e| KgError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| KgError::Io(format!("{}: {e}", path.display())))?;
        Self::read_jsonl(BufReader::new(f))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum GraphRecord {
    Entity { id: u32, label: String },
    Relation { id: u32, label: String, functional: bool },
    Triple { s: u32, r: u32, o: u32 },
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_entities: 200,
            n_relations: 8,
            n_facts: 600,
            seed: 7,
        }
    }
}

/// Zipf exponent for object popularity.
const ZIPF_EXPONENT: f64 = 0.8;

/// Generate a random graph of functional relations.
///
/// Every entity gets one outgoing edge when `n_facts >= n_entities`; the
/// objects of those first edges cover half of the entities so that chains
/// exist, and all other objects are drawn from a Zipf-like popularity
/// distribution over a shuffled entity order so some entities become hubs.
pub fn gen_synthetic(config: &SyntheticConfig) -> Result<KnowledgeGraph> {
    let SyntheticConfig {
        n_entities,
        n_relations,
        n_facts,
        seed,
    } = *config;
    if n_facts > n_entities.saturating_mul(n_relations) {
        return Err(KgError::InfeasibleConfig(format!(
            "{n_facts} facts exceed {n_entities} entities x {n_relations} relations"
        )));
    }
    if n_facts > 0 && n_entities < 2 {
        return Err(KgError::InfeasibleConfig(
            "at least two entities are needed to place a fact".into(),
        ));
    }

    let mut rng = rng_from_seed(seed);
    let width = n_entities.max(1).to_string().len().max(3);
    let entities = (0..n_entities)
        .map(|i| Entity {
            id: EntityId(i as u32),
            label: format!("E{i:0width$}"),
        })
        .collect::<Vec<_>>();
    let relations = (0..n_relations)
        .map(|i| Relation {
            id: RelationId(i as u32),
            label: format!("rel{i}"),
            functional: true,
        })
        .collect::<Vec<_>>();

    let mut popularity: Vec<u32> = (0..n_entities as u32).collect();
    popularity.shuffle(&mut rng);
    let weights: Vec<f64> = (0..n_entities)
        .map(|rank| 1.0 / ((rank + 1) as f64).powf(ZIPF_EXPONENT))
        .collect();
    let total: f64 = weights.iter().sum();
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();
    let draw_zipf = |rng: &mut rand_chacha::ChaCha8Rng| -> EntityId {
        let u: f64 = rng.random();
        let rank = cumulative.partition_point(|&c| c < u).min(n_entities - 1);
        EntityId(popularity[rank])
    };

    let mut used: BTreeMap<(EntityId, RelationId), EntityId> = BTreeMap::new();
    let mut triples = Vec::with_capacity(n_facts);

    if n_facts >= n_entities && n_facts > 0 {
        let mut cover: Vec<u32> = (0..n_entities as u32).collect();
        cover.shuffle(&mut rng);
        let n_cover = n_entities.div_ceil(2);
        for s in 0..n_entities as u32 {
            let subject = EntityId(s);
            let relation = RelationId(rng.random_range(0..n_relations as u32));
            let object = if (s as usize) < n_cover {
                let mut o = EntityId(cover[s as usize]);
                if o == subject {
                    // swap with the next cover slot to avoid a self-loop
                    let j = (s as usize + 1) % n_entities;
                    cover.swap(s as usize, j);
                    o = EntityId(cover[s as usize]);
                }
                o
            } else {
                loop {
                    let o = draw_zipf(&mut rng);
                    if o != subject {
                        break o;
                    }
                }
            };
            used.insert((subject, relation), object);
            triples.push(Triple::new(subject, relation, object));
        }
    }

    // Remaining facts go to uniformly drawn free (subject, relation) slots.
    let mut free: Vec<(EntityId, RelationId)> = (0..n_entities as u32)
        .flat_map(|s| (0..n_relations as u32).map(move |r| (EntityId(s), RelationId(r))))
        .filter(|k| !used.contains_key(k))
        .collect();
    free.shuffle(&mut rng);
    for &(subject, relation) in free.iter().take(n_facts - triples.len()) {
        let object = loop {
            let o = draw_zipf(&mut rng);
            if o != subject {
                break o;
            }
        };
        triples.push(Triple::new(subject, relation, object));
    }

    KnowledgeGraph::build(entities, relations, triples)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// The prime-minister scenario, before the edit.
    pub struct PmWorld {
        pub graph: KnowledgeGraph,
        pub uk: EntityId,
        pub boris: EntityId,
        pub sunak: EntityId,
        pub carrie: EntityId,
        pub murty: EntityId,
        pub pm: RelationId,
        pub spouse: RelationId,
    }

    pub fn pm_world() -> PmWorld {
        let labels = [
            "the United Kingdom",
            "Boris Johnson",
            "Rishi Sunak",
            "Carrie Johnson",
            "Akshata Murty",
        ];
        let entities = labels
            .iter()
            .enumerate()
            .map(|(i, l)| Entity {
                id: EntityId(i as u32),
                label: l.to_string(),
            })
            .collect();
        let relations = vec![
            Relation {
                id: RelationId(0),
                label: "prime minister".into(),
                functional: true,
            },
            Relation {
                id: RelationId(1),
                label: "spouse".into(),
                functional: true,
            },
        ];
        let (uk, boris, sunak, carrie, murty) =
            (EntityId(0), EntityId(1), EntityId(2), EntityId(3), EntityId(4));
        let (pm, spouse) = (RelationId(0), RelationId(1));
        let graph = KnowledgeGraph::build(
            entities,
            relations,
            [
                Triple::new(uk, pm, boris),
                Triple::new(boris, spouse, carrie),
                Triple::new(sunak, spouse, murty),
            ],
        )
        .unwrap();
        PmWorld {
            graph,
            uk,
            boris,
            sunak,
            carrie,
            murty,
            pm,
            spouse,
        }
    }

    impl PmWorld {
        pub fn edit(&self) -> EdgeEdit {
            EdgeEdit {
                subject: self.uk,
                relation: self.pm,
                old_object: self.boris,
                new_object: self.sunak,
            }
        }
    }
}
