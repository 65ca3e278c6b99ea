//! Contextual-edit compilation.
//!
//! A base edit `(s, r, o -> o*)` is expanded into chained edits that reach
//! past the new object: for every forward edge `(o*, r2, o2)` of the edited
//! graph the chain `(s, [r, r2]) -> o2` is emitted, and so on up to the
//! requested depth. Prompts are composed from the per-relation templates and
//! never mention `o*` itself.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{Direction, EdgeEdit, EntityId, KgError, KnowledgeGraph, RelationId, Triple};
use crate::seeds::{keyed_seed, rng_from_seed};
use crate::templates::{TemplateError, TemplateRegistry};

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("no template pair for relation {0:?}")]
    MissingTemplate(String),
    #[error("contextual depth must be at least 2, got {0}")]
    InvalidDepth(usize),
    #[error("fan-out must be at least 1")]
    InvalidFanout,
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ContextError>;

/// A base edit with its rendered cloze prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub subject: EntityId,
    pub relation: RelationId,
    pub old_object: EntityId,
    pub new_object: EntityId,
    pub prompt: String,
    pub subject_text: String,
}

impl EditRequest {
    pub fn new(edit: &EdgeEdit, graph: &KnowledgeGraph, templates: &TemplateRegistry) -> Result<Self> {
        if edit.old_object == edit.new_object {
            return Err(KgError::NoOpEdit(edit.old_object).into());
        }
        for id in [edit.subject, edit.old_object, edit.new_object] {
            if graph.entity(id).is_none() {
                return Err(KgError::DanglingId(format!("entity {id}")).into());
            }
        }
        if graph.relation(edit.relation).is_none() {
            return Err(KgError::DanglingId(format!("relation {}", edit.relation)).into());
        }
        let subject_text = graph.entity_label(edit.subject).to_string();
        let prompt = templates
            .render_cloze(edit.relation, &subject_text)
            .map_err(|e| missing(e, graph))?;
        Ok(Self {
            subject: edit.subject,
            relation: edit.relation,
            old_object: edit.old_object,
            new_object: edit.new_object,
            prompt,
            subject_text,
        })
    }

    pub fn edge(&self) -> EdgeEdit {
        EdgeEdit {
            subject: self.subject,
            relation: self.relation,
            old_object: self.old_object,
            new_object: self.new_object,
        }
    }
}

/// Requests for a whole batch, in batch order.
pub fn edit_requests(
    edits: &[EdgeEdit],
    graph: &KnowledgeGraph,
    templates: &TemplateRegistry,
) -> Result<Vec<EditRequest>> {
    edits.iter().map(|e| EditRequest::new(e, graph, templates)).collect()
}

fn missing(err: TemplateError, graph: &KnowledgeGraph) -> ContextError {
    match err {
        TemplateError::UnknownRelation(r) => ContextError::MissingTemplate(
            graph
                .relation(r)
                .map(|rel| rel.label.clone())
                .unwrap_or_else(|| r.to_string()),
        ),
        other => other.into(),
    }
}

/// A chained edit `(s, r1..rd) -> o_d*` derived from a base edit.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextualEdit {
    /// Position of the originating base edit in its batch.
    pub anchor: usize,
    pub subject: EntityId,
    pub relation_chain: Vec<RelationId>,
    pub target_object: EntityId,
    pub prompt: String,
    pub depth: usize,
}

/// Expand each base edit into depth-`depth` chains over the forward
/// neighborhoods of `graph`, which must already contain every batch edit.
///
/// When a node has more than `fanout` usable edges, `fanout` of them are
/// drawn with a seed keyed by `(seed, subject, chain)`. Edges whose
/// `(entity, relation)` appears in `holdout` are never used as next hops.
pub fn get_contextual_edits(
    batch: &[EditRequest],
    graph: &KnowledgeGraph,
    templates: &TemplateRegistry,
    depth: usize,
    fanout: usize,
    seed: u64,
    holdout: &BTreeSet<(EntityId, RelationId)>,
) -> Result<Vec<ContextualEdit>> {
    if depth < 2 {
        return Err(ContextError::InvalidDepth(depth));
    }
    if fanout == 0 {
        return Err(ContextError::InvalidFanout);
    }
    let mut out = Vec::new();
    for (anchor, edit) in batch.iter().enumerate() {
        let mut frontier = vec![(vec![edit.relation], edit.new_object)];
        for _ in 2..=depth {
            let mut next = Vec::new();
            for (chain, node) in &frontier {
                let edges: Vec<Triple> = graph
                    .neighborhood(*node, Direction::Forward)
                    .into_iter()
                    .filter(|t| graph.is_functional(t.relation))
                    .filter(|t| !holdout.contains(&(t.subject, t.relation)))
                    .collect();
                let chosen: Vec<Triple> = if edges.len() > fanout {
                    let mut key = vec![edit.subject.0 as u64];
                    key.extend(chain.iter().map(|r| r.0 as u64));
                    let mut rng = rng_from_seed(keyed_seed(seed, &key));
                    let mut picked: Vec<Triple> = edges.choose_multiple(&mut rng, fanout).copied().collect();
                    picked.sort();
                    picked
                } else {
                    edges
                };
                for t in chosen {
                    let mut extended = chain.clone();
                    extended.push(t.relation);
                    next.push((extended, t.object));
                }
            }
            frontier = next;
        }
        for (chain, target) in frontier {
            let prompt = templates
                .compose_prompt(&edit.subject_text, &chain)
                .map_err(|e| missing(e, graph))?;
            out.push(ContextualEdit {
                anchor,
                subject: edit.subject,
                depth: chain.len(),
                relation_chain: chain,
                target_object: target,
                prompt,
            });
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictReason {
    /// Another batch edit rewrites a later hop of the chain, so the
    /// compiled target is stale.
    TargetOverridden,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conflict {
    /// Index into the contextual-edit list.
    pub index: usize,
    pub contextual: ContextualEdit,
    pub clashing_edit: EditRequest,
    pub reason: ConflictReason,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictPolicy {
    Drop,
    #[default]
    Retarget,
}

/// Flag contextual edits whose target disagrees with `edited`, the graph
/// with every batch edit applied, because another batch edit rewrites a hop
/// after the anchor.
pub fn detect_conflicts(
    contextual: &[ContextualEdit],
    batch: &[EditRequest],
    edited: &KnowledgeGraph,
) -> Vec<Conflict> {
    let mut conflicts = Vec::new();
    for (index, ce) in contextual.iter().enumerate() {
        let mut node = ce.subject;
        for (hop, &r) in ce.relation_chain.iter().enumerate() {
            if hop > 0 {
                let clash = batch
                    .iter()
                    .enumerate()
                    .find(|(i, e)| *i != ce.anchor && e.subject == node && e.relation == r);
                if let Some((_, clashing)) = clash {
                    let resolved = edited.resolve_path(ce.subject, &ce.relation_chain).ok();
                    if resolved != Some(ce.target_object) {
                        conflicts.push(Conflict {
                            index,
                            contextual: ce.clone(),
                            clashing_edit: clashing.clone(),
                            reason: ConflictReason::TargetOverridden,
                        });
                        break;
                    }
                }
            }
            match edited.object_of(node, r) {
                Some(o) => node = o,
                None => break,
            }
        }
    }
    conflicts
}

/// Apply `policy` to the flagged edits. Retargeting resolves the chain on
/// `edited`; a chain that no longer resolves is dropped.
pub fn resolve_conflicts(
    contextual: &[ContextualEdit],
    conflicts: &[Conflict],
    policy: ConflictPolicy,
    edited: &KnowledgeGraph,
) -> Vec<ContextualEdit> {
    let flagged: BTreeSet<usize> = conflicts.iter().map(|c| c.index).collect();
    contextual
        .iter()
        .enumerate()
        .filter_map(|(i, ce)| {
            if !flagged.contains(&i) {
                return Some(ce.clone());
            }
            match policy {
                ConflictPolicy::Drop => None,
                ConflictPolicy::Retarget => edited
                    .resolve_path(ce.subject, &ce.relation_chain)
                    .ok()
                    .map(|target| ContextualEdit {
                        target_object: target,
                        ..ce.clone()
                    }),
            }
        })
        .collect()
}

/// Draw `n` base edits over distinct stored facts. New objects are drawn
/// among entities with at least `min_out_degree` outgoing edges, never equal
/// to the subject or the old object.
pub fn sample_edit_batch(graph: &KnowledgeGraph, n: usize, min_out_degree: usize, seed: u64) -> Vec<EdgeEdit> {
    let facts: Vec<(EntityId, RelationId, EntityId)> = graph
        .forward_index()
        .iter()
        .map(|(&(s, r), &o)| (s, r, o))
        .collect();
    let mut candidates: Vec<EntityId> = graph
        .entities()
        .iter()
        .map(|e| e.id)
        .filter(|&e| graph.out_degree(e) >= min_out_degree)
        .collect();
    if candidates.len() < 3 {
        candidates = graph.entities().iter().map(|e| e.id).collect();
    }
    let mut rng = rng_from_seed(seed);
    let mut edits = Vec::new();
    for &(s, r, o) in facts.choose_multiple(&mut rng, n.min(facts.len())) {
        let usable: Vec<EntityId> = candidates.iter().copied().filter(|&c| c != s && c != o).collect();
        if let Some(&new_object) = usable.choose(&mut rng) {
            edits.push(EdgeEdit {
                subject: s,
                relation: r,
                old_object: o,
                new_object,
            });
        }
    }
    edits
}

#[derive(Debug, Serialize, Deserialize)]
struct EditRecord {
    s: String,
    r: String,
    o_old: String,
    o_new: String,
}

/// Edit batches are JSON lines of entity and relation labels.
pub fn write_edit_batch<W: Write>(edits: &[EdgeEdit], graph: &KnowledgeGraph, mut w: W) -> Result<()> {
    for e in edits {
        let rec = EditRecord {
            s: graph.entity_label(e.subject).to_string(),
            r: graph.relation_label(e.relation).to_string(),
            o_old: graph.entity_label(e.old_object).to_string(),
            o_new: graph.entity_label(e.new_object).to_string(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("edit record serializes"))?;
    }
    Ok(())
}

pub fn read_edit_batch<R: BufRead>(reader: R, graph: &KnowledgeGraph) -> Result<Vec<EdgeEdit>> {
    let mut edits = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| ContextError::ParseError { line: lineno, message };
        let rec: EditRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let entity = |label: &str| {
            graph
                .entity_by_label(label)
                .ok_or_else(|| parse_err(format!("unknown entity {label:?}")))
        };
        let relation = graph
            .relation_by_label(&rec.r)
            .ok_or_else(|| parse_err(format!("unknown relation {:?}", rec.r)))?;
        edits.push(EdgeEdit {
            subject: entity(&rec.s)?,
            relation,
            old_object: entity(&rec.o_old)?,
            new_object: entity(&rec.o_new)?,
        });
    }
    Ok(edits)
}

pub fn save_edit_batch(edits: &[EdgeEdit], graph: &KnowledgeGraph, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_edit_batch(edits, graph, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_edit_batch(path: &Path, graph: &KnowledgeGraph) -> Result<Vec<EdgeEdit>> {
    let file = std::fs::File::open(path)?;
    read_edit_batch(std::io::BufReader::new(file), graph)
}

#[derive(Debug, Serialize)]
struct ExportRecord<'a> {
    subject: &'a str,
    chain: Vec<&'a str>,
    target: &'a str,
    depth: usize,
    prompt: &'a str,
}

/// Contextual edits as JSON lines with labels and prompt text.
pub fn export_contextual<W: Write>(edits: &[ContextualEdit], graph: &KnowledgeGraph, mut w: W) -> Result<()> {
    for ce in edits {
        let rec = ExportRecord {
            subject: graph.entity_label(ce.subject),
            chain: ce.relation_chain.iter().map(|&r| graph.relation_label(r)).collect(),
            target: graph.entity_label(ce.target_object),
            depth: ce.depth,
            prompt: &ce.prompt,
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("export record serializes"))?;
    }
    Ok(())
}
