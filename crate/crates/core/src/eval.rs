//! Evaluation sets and the metric suite.
//!
//! Multi-hop questions are regenerated from the graph: every question is a
//! relation chain that passes through at least one edited edge and whose
//! answer changes under the edits. Single-edit metrics follow the usual
//! counterfactual-editing trio: efficacy (the new object beats the old one
//! on the edit query), paraphrase (the same comparison under held-out input
//! perturbations) and specificity (neighboring facts that share the edited
//! relation and old object still resolve to it).

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::kg::{EdgeEdit, EntityId, KnowledgeGraph, RelationId};
use crate::memit::context_noise;
use crate::model::{ModelError, ModelParams, StructuredQuery};
use crate::seeds::{keyed_seed, rng_from_seed};
use crate::templates::TemplateRegistry;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuestion {
    pub subject: EntityId,
    pub relation_chain: Vec<RelationId>,
    pub gold_pre: EntityId,
    pub gold_post: EntityId,
    pub n_edited_hops: usize,
    pub prompt_text: String,
}

impl EvalQuestion {
    pub fn hops(&self) -> usize {
        self.relation_chain.len()
    }

    pub fn query(&self) -> StructuredQuery {
        StructuredQuery::new(self.subject, self.relation_chain.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub questions: Vec<EvalQuestion>,
    /// Hop counts for which fewer questions exist than were requested, as
    /// `(hops, requested, available)`.
    pub shortfall: Vec<(usize, usize, usize)>,
}

impl EvalSet {
    /// Set when some hop count could not be filled.
    pub fn insufficient_paths(&self) -> bool {
        !self.shortfall.is_empty()
    }

    /// `(entity, relation)` pairs used by the second and later hops of every
    /// question, walked on the edited graph.
    pub fn later_hop_edges(&self, post: &KnowledgeGraph) -> BTreeSet<(EntityId, RelationId)> {
        let mut edges = BTreeSet::new();
        for q in &self.questions {
            if let Ok(nodes) = post.walk(q.subject, &q.relation_chain) {
                for (i, &r) in q.relation_chain.iter().enumerate().skip(1) {
                    edges.insert((nodes[i], r));
                }
            }
        }
        edges
    }
}

/// Sample questions of each hop count in `hops` that traverse at least one
/// edited edge and whose answer differs between `pre` and `post`.
///
/// Questions are balanced across the position of the first edited hop, so
/// the mix does not follow the in-degree of edited subjects. Within a
/// position, chains whose intermediate entities all have out-degree ≥ 2
/// are drawn first.
pub fn gen_eval_set(
    pre: &KnowledgeGraph,
    post: &KnowledgeGraph,
    edits: &[EdgeEdit],
    templates: &TemplateRegistry,
    n_per_hopcount: usize,
    hops: RangeInclusive<usize>,
    seed: u64,
) -> EvalSet {
    let edited: BTreeSet<(EntityId, RelationId)> = edits.iter().map(|e| (e.subject, e.relation)).collect();
    let mut set = EvalSet::default();
    for h in hops {
        // keyed by the position of the first edited hop
        let mut buckets: BTreeMap<usize, (Vec<EvalQuestion>, Vec<EvalQuestion>)> = BTreeMap::new();
        for (subject, chain) in post.enumerate_paths(h) {
            let Ok(nodes) = post.walk(subject, &chain) else {
                continue;
            };
            let touched: Vec<usize> = (0..h).filter(|&i| edited.contains(&(nodes[i], chain[i]))).collect();
            let Some(&first_edited) = touched.first() else {
                continue;
            };
            let n_edited = touched.len();
            let Ok(gold_pre) = pre.resolve_path(subject, &chain) else {
                continue;
            };
            let gold_post = nodes[h];
            if gold_pre == gold_post {
                continue;
            }
            let prompt_text = templates
                .compose_prompt(post.entity_label(subject), &chain)
                .unwrap_or_default();
            let q = EvalQuestion {
                subject,
                relation_chain: chain,
                gold_pre,
                gold_post,
                n_edited_hops: n_edited,
                prompt_text,
            };
            let bucket = buckets.entry(first_edited).or_default();
            if nodes[1..h].iter().all(|&e| post.out_degree(e) >= 2) {
                bucket.0.push(q);
            } else {
                bucket.1.push(q);
            }
        }
        let mut rng = rng_from_seed(keyed_seed(seed, &[h as u64]));
        let mut queues: Vec<std::vec::IntoIter<EvalQuestion>> = buckets
            .into_values()
            .map(|(mut preferred, mut rest)| {
                preferred.shuffle(&mut rng);
                rest.shuffle(&mut rng);
                preferred.extend(rest);
                preferred.into_iter()
            })
            .collect();
        let available: usize = queues.iter().map(|q| q.len()).sum();
        // round robin over edited positions keeps them balanced
        let mut picked = Vec::new();
        while picked.len() < n_per_hopcount.min(available) {
            for queue in queues.iter_mut() {
                if picked.len() == n_per_hopcount {
                    break;
                }
                if let Some(q) = queue.next() {
                    picked.push(q);
                }
            }
        }
        if available < n_per_hopcount {
            set.shortfall.push((h, n_per_hopcount, available));
        }
        picked.sort_by(|a, b| (&a.subject, &a.relation_chain).cmp(&(&b.subject, &b.relation_chain)));
        set.questions.extend(picked);
    }
    set
}

/// Mean with standard error `SD / √n` (sample SD, `n - 1` denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub sem: f64,
    pub n: usize,
}

impl Metric {
    pub fn from_outcomes(outcomes: &[f64]) -> Self {
        let n = outcomes.len();
        if n == 0 {
            return Self {
                value: 0.0,
                sem: 0.0,
                n: 0,
            };
        }
        let mean = outcomes.iter().sum::<f64>() / n as f64;
        let sem = if n > 1 {
            let var = outcomes.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { value: mean, sem, n }
    }
}

fn beats(params: &ModelParams, query: &StructuredQuery, new: EntityId, old: EntityId) -> Result<bool, ModelError> {
    let p = params.probabilities(&params.final_state(query)?);
    Ok(p[new.index()] > p[old.index()])
}

/// Fraction of edits whose clean query puts more mass on the new object
/// than on the old one.
pub fn efficacy(params: &ModelParams, edits: &[EdgeEdit]) -> Result<Metric, ModelError> {
    let outcomes = edits
        .iter()
        .map(|e| {
            let q = StructuredQuery::new(e.subject, vec![e.relation]);
            beats(params, &q, e.new_object, e.old_object).map(|b| b as u8 as f64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Metric::from_outcomes(&outcomes))
}

/// Efficacy averaged over `n_variants` perturbed copies of each edit query,
/// drawn from a seed that editing never used.
pub fn paraphrase_score(
    params: &ModelParams,
    edits: &[EdgeEdit],
    n_variants: usize,
    noise_scale: f64,
    fresh_seed: u64,
) -> Result<Metric, ModelError> {
    let mut outcomes = Vec::with_capacity(edits.len());
    for e in edits {
        let base = StructuredQuery::new(e.subject, vec![e.relation]);
        let mut hits = 0usize;
        for j in 0..n_variants.max(1) {
            let noise = context_noise(&base, params.dims.d, noise_scale, fresh_seed, j);
            let q = base.clone().with_noise(noise);
            if beats(params, &q, e.new_object, e.old_object)? {
                hits += 1;
            }
        }
        outcomes.push(hits as f64 / n_variants.max(1) as f64);
    }
    Ok(Metric::from_outcomes(&outcomes))
}

/// Unedited facts `(s', r, o)` that share relation and old object with an
/// edit, at most `per_edit` per edit.
pub fn specificity_probes(
    pre: &KnowledgeGraph,
    edits: &[EdgeEdit],
    per_edit: usize,
    seed: u64,
) -> Vec<(EntityId, RelationId, EntityId)> {
    let edited: BTreeSet<(EntityId, RelationId)> = edits.iter().map(|e| (e.subject, e.relation)).collect();
    let mut rng = rng_from_seed(seed);
    let mut probes = Vec::new();
    for e in edits {
        let neighbors: Vec<EntityId> = pre
            .forward_index()
            .iter()
            .filter(|(&(s, r), &o)| r == e.relation && o == e.old_object && s != e.subject)
            .map(|(&(s, _), _)| s)
            .filter(|&s| !edited.contains(&(s, e.relation)))
            .collect();
        for &s in neighbors.choose_multiple(&mut rng, per_edit.min(neighbors.len())) {
            probes.push((s, e.relation, e.old_object));
        }
    }
    probes
}

/// Fraction of probes whose prediction is still the stored object.
pub fn specificity_on(
    params: &ModelParams,
    probes: &[(EntityId, RelationId, EntityId)],
) -> Result<Metric, ModelError> {
    let outcomes = probes
        .iter()
        .map(|&(s, r, o)| {
            params
                .predict(&StructuredQuery::new(s, vec![r]))
                .map(|p| (p == o) as u8 as f64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Metric::from_outcomes(&outcomes))
}

pub fn specificity(
    params: &ModelParams,
    edits: &[EdgeEdit],
    pre: &KnowledgeGraph,
    per_edit: usize,
    seed: u64,
) -> Result<Metric, ModelError> {
    specificity_on(params, &specificity_probes(pre, edits, per_edit, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BreakdownCell {
    pub hops: usize,
    pub n_edited: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultihopResult {
    pub accuracy: Metric,
    pub breakdown: Vec<BreakdownCell>,
    /// Per-question predictions, in question order.
    pub predictions: Vec<EntityId>,
}

pub fn multihop_accuracy(params: &ModelParams, questions: &[EvalQuestion]) -> Result<MultihopResult, ModelError> {
    let mut outcomes = Vec::with_capacity(questions.len());
    let mut predictions = Vec::with_capacity(questions.len());
    let mut cells: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for q in questions {
        let p = params.predict(&q.query())?;
        let hit = p == q.gold_post;
        predictions.push(p);
        outcomes.push(hit as u8 as f64);
        let cell = cells.entry((q.hops(), q.n_edited_hops)).or_default();
        cell.0 += hit as usize;
        cell.1 += 1;
    }
    Ok(MultihopResult {
        accuracy: Metric::from_outcomes(&outcomes),
        breakdown: cells
            .into_iter()
            .map(|((hops, n_edited), (correct, total))| BreakdownCell {
                hops,
                n_edited,
                correct,
                total,
            })
            .collect(),
        predictions,
    })
}

/// Fraction of queries on which two models predict the same entity.
pub fn agreement(a: &ModelParams, b: &ModelParams, queries: &[StructuredQuery]) -> Result<f64, ModelError> {
    if queries.is_empty() {
        return Ok(1.0);
    }
    let mut same = 0usize;
    for q in queries {
        if a.predict(q)? == b.predict(q)? {
            same += 1;
        }
    }
    Ok(same as f64 / queries.len() as f64)
}

/// Chains of length `hops` that touch no edited edge, up to `n`.
pub fn untouched_queries(
    post: &KnowledgeGraph,
    edits: &[EdgeEdit],
    hops: usize,
    n: usize,
    seed: u64,
) -> Vec<StructuredQuery> {
    let edited: BTreeSet<(EntityId, RelationId)> = edits.iter().map(|e| (e.subject, e.relation)).collect();
    let pool: Vec<StructuredQuery> = post
        .enumerate_paths(hops)
        .into_iter()
        .filter(|(s, chain)| match post.walk(*s, chain) {
            Ok(nodes) => chain.iter().enumerate().all(|(i, &r)| !edited.contains(&(nodes[i], r))),
            Err(_) => false,
        })
        .map(|(s, chain)| StructuredQuery::new(s, chain))
        .collect();
    let mut rng = rng_from_seed(seed);
    pool.choose_multiple(&mut rng, n.min(pool.len())).cloned().collect()
}
