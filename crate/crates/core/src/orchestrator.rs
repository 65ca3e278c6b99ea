//! Baseline and contextual editing runs.
//!
//! A contextual run first applies the base batch, then for each depth
//! `2..=k` compiles contextual edits on the edited graph and writes them
//! with the same batch editor. Contextual edits that share an edit point
//! (same subject and chain prefix) are pooled into a single target state
//! whose objective averages over all of their continuations. The parallel
//! ordering instead computes every target state on the unedited model and
//! inserts them together.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{
    detect_conflicts, edit_requests, get_contextual_edits, resolve_conflicts, ConflictPolicy, ContextError,
    ContextualEdit,
};
use crate::kg::{EdgeEdit, EntityId, KgError, KnowledgeGraph, RelationId};
use crate::memit::{
    compute_shared_target_state, compute_target_state, sample_preserved_facts, spread_and_insert, DeltaHyper, EditPlan,
    InsertReport, LayerHyper, MemitError, TargetState,
};
use crate::model::{ModelParams, StructuredQuery};
use crate::seeds::child_seed;
use crate::templates::TemplateRegistry;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("edit batch is empty")]
    EmptyBatch,
    #[error("contextual runs need depth >= 2, got {0}")]
    InvalidDepth(usize),
    #[error("run config has method baseline; use run_baseline")]
    NotContextual,
    #[error(transparent)]
    Memit(#[from] MemitError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Kg(#[from] KgError),
}

pub type Result<T> = std::result::Result<T, RunError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    #[default]
    Kedit,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    #[default]
    Sequential,
    Parallel,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "kedit" => Ok(Self::Kedit),
            _ => Err(format!("unknown method {s:?} (expected baseline or kedit)")),
        }
    }
}

impl std::str::FromStr for Order {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "parallel" => Ok(Self::Parallel),
            _ => Err(format!("unknown order {s:?} (expected sequential or parallel)")),
        }
    }
}

/// Settings of one editing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: Method,
    pub order: Order,
    pub depth: usize,
    /// Continuations kept per chain node.
    pub fanout: usize,
    /// `(entity, relation)` edges never used as contextual next hops.
    pub holdout: BTreeSet<(EntityId, RelationId)>,
    pub conflict_policy: ConflictPolicy,
    /// Target-state settings for base edits.
    pub base_delta: DeltaHyper,
    /// Target-state settings for contextual rounds.
    pub context_delta: DeltaHyper,
    pub layer: LayerHyper,
    /// Stored facts held fixed by every insertion.
    pub n_preserved: usize,
    pub seed: u64,
    /// Repetitions of each contextual round. Experimental; one round per
    /// depth is the reference procedure.
    #[serde(skip_serializing_if = "is_one")]
    pub rounds_per_depth: usize,
}

fn is_one(n: &usize) -> bool {
    *n == 1
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Kedit,
            order: Order::Sequential,
            depth: 2,
            fanout: 8,
            holdout: BTreeSet::new(),
            conflict_policy: ConflictPolicy::Retarget,
            base_delta: DeltaHyper {
                weight_decay: 2.5,
                max_steps: 60,
                step_size: 0.05,
                ..DeltaHyper::default()
            },
            context_delta: DeltaHyper {
                weight_decay: 1.0,
                max_steps: 15,
                step_size: 0.2,
                ..DeltaHyper::default()
            },
            layer: LayerHyper::default(),
            n_preserved: 600,
            seed: 0,
            rounds_per_depth: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Kedit && self.depth < 2 {
            return Err(RunError::InvalidDepth(self.depth));
        }
        self.base_delta.validate()?;
        self.context_delta.validate()?;
        Ok(())
    }

    fn hyper(&self, base: DeltaHyper, label: &str) -> DeltaHyper {
        DeltaHyper {
            seed: child_seed(self.seed, label),
            ..base
        }
    }
}

/// What one insertion round did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1 for the base batch, the chain length for contextual rounds.
    pub depth: usize,
    pub n_compiled: usize,
    /// Target states inserted (pooled groups for contextual rounds).
    pub n_targets: usize,
    /// Groups whose target-state descent made no progress.
    pub n_skipped: usize,
    pub insert: Option<InsertReport>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub params: ModelParams,
    pub rounds: Vec<RoundReport>,
    pub contextual: Vec<ContextualEdit>,
}

impl RunOutcome {
    /// Contextual edits compiled per depth, starting at depth 2.
    pub fn contextual_counts(&self) -> Vec<usize> {
        self.rounds.iter().filter(|r| r.depth >= 2).map(|r| r.n_compiled).collect()
    }
}

fn edited_pairs(batch: &[EdgeEdit]) -> BTreeSet<(EntityId, RelationId)> {
    batch.iter().map(|e| (e.subject, e.relation)).collect()
}

fn preserved_queries(graph: &KnowledgeGraph, batch: &[EdgeEdit], config: &RunConfig) -> Vec<StructuredQuery> {
    sample_preserved_facts(
        graph,
        &edited_pairs(batch),
        config.n_preserved,
        child_seed(config.seed, "preserved"),
    )
}

fn base_targets(params: &ModelParams, batch: &[EdgeEdit], config: &RunConfig) -> Result<Vec<TargetState>> {
    let hyper = config.hyper(config.base_delta, "delta/base");
    batch
        .iter()
        .map(|e| {
            compute_target_state(params, &StructuredQuery::new(e.subject, vec![e.relation]), e.new_object, &hyper)
                .map_err(RunError::from)
        })
        .collect()
}

fn insert(
    params: &ModelParams,
    targets: Vec<TargetState>,
    preserved: &[StructuredQuery],
    layer: &LayerHyper,
) -> Result<(ModelParams, Option<InsertReport>)> {
    if targets.is_empty() {
        return Ok((params.clone(), None));
    }
    let (next, report) = spread_and_insert(params, &EditPlan::new(targets), preserved, layer)?;
    Ok((next, Some(report)))
}

/// Base batch edit: one target state per edit on `params`, then one
/// insertion that preserves the unedited facts of `graph`.
pub fn run_baseline(
    params: &ModelParams,
    graph: &KnowledgeGraph,
    batch: &[EdgeEdit],
    config: &RunConfig,
) -> Result<(ModelParams, RoundReport)> {
    if batch.is_empty() {
        return Err(RunError::EmptyBatch);
    }
    let targets = base_targets(params, batch, config)?;
    let preserved = preserved_queries(graph, batch, config);
    let (next, report) = insert(params, targets, &preserved, &config.layer)?;
    Ok((
        next,
        RoundReport {
            depth: 1,
            n_compiled: batch.len(),
            n_targets: batch.len(),
            n_skipped: 0,
            insert: report,
        },
    ))
}

/// Contextual edits of one depth on the edited graph, with conflicts
/// resolved by `config.conflict_policy`.
pub fn compile_contextual(
    graph_pre: &KnowledgeGraph,
    graph_post: &KnowledgeGraph,
    batch: &[EdgeEdit],
    templates: &TemplateRegistry,
    depth: usize,
    config: &RunConfig,
) -> Result<Vec<ContextualEdit>> {
    let requests = edit_requests(batch, graph_pre, templates)?;
    let compiled = get_contextual_edits(
        &requests,
        graph_post,
        templates,
        depth,
        config.fanout,
        child_seed(config.seed, "fanout"),
        &config.holdout,
    )?;
    let conflicts = detect_conflicts(&compiled, &requests, graph_post);
    Ok(resolve_conflicts(&compiled, &conflicts, config.conflict_policy, graph_post))
}

/// Group contextual edits by edit point: subject plus every relation but
/// the last.
fn pooled_groups(edits: &[ContextualEdit]) -> Vec<Vec<(StructuredQuery, EntityId)>> {
    let mut groups: BTreeMap<(EntityId, Vec<RelationId>), Vec<(StructuredQuery, EntityId)>> = BTreeMap::new();
    for ce in edits {
        let prefix = ce.relation_chain[..ce.relation_chain.len() - 1].to_vec();
        groups.entry((ce.subject, prefix)).or_default().push((
            StructuredQuery::new(ce.subject, ce.relation_chain.clone()),
            ce.target_object,
        ));
    }
    groups.into_values().collect()
}

/// Pooled target states on `params`. Groups whose descent stalls are
/// counted and left out.
fn contextual_targets(
    params: &ModelParams,
    edits: &[ContextualEdit],
    hyper: &DeltaHyper,
) -> Result<(Vec<TargetState>, usize)> {
    let mut targets = Vec::new();
    let mut skipped = 0;
    for members in pooled_groups(edits) {
        match compute_shared_target_state(params, &members, hyper) {
            Ok(t) => targets.push(t),
            Err(MemitError::NoProgress { .. }) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok((targets, skipped))
}

/// Base batch followed by contextual rounds up to `config.depth`.
pub fn run_kedit(
    params: &ModelParams,
    graph_pre: &KnowledgeGraph,
    batch: &[EdgeEdit],
    templates: &TemplateRegistry,
    config: &RunConfig,
) -> Result<RunOutcome> {
    if config.method != Method::Kedit {
        return Err(RunError::NotContextual);
    }
    config.validate()?;
    if batch.is_empty() {
        return Err(RunError::EmptyBatch);
    }
    let graph_post = graph_pre.apply_edits(batch)?;
    let preserved = preserved_queries(graph_pre, batch, config);
    let mut contextual = Vec::new();
    let mut rounds = Vec::new();
    match config.order {
        Order::Sequential => {
            let (mut current, base) = run_baseline(params, graph_pre, batch, config)?;
            rounds.push(base);
            for depth in 2..=config.depth {
                let edits = compile_contextual(graph_pre, &graph_post, batch, templates, depth, config)?;
                let hyper = config.hyper(config.context_delta, &format!("delta/depth{depth}"));
                for _ in 0..config.rounds_per_depth.max(1) {
                    let (targets, skipped) = contextual_targets(&current, &edits, &hyper)?;
                    let n_targets = targets.len();
                    let (next, report) = insert(&current, targets, &preserved, &config.layer)?;
                    current = next;
                    rounds.push(RoundReport {
                        depth,
                        n_compiled: edits.len(),
                        n_targets,
                        n_skipped: skipped,
                        insert: report,
                    });
                }
                contextual.extend(edits);
            }
            Ok(RunOutcome {
                params: current,
                rounds,
                contextual,
            })
        }
        Order::Parallel => {
            let mut targets = base_targets(params, batch, config)?;
            rounds.push(RoundReport {
                depth: 1,
                n_compiled: batch.len(),
                n_targets: batch.len(),
                n_skipped: 0,
                insert: None,
            });
            for depth in 2..=config.depth {
                let edits = compile_contextual(graph_pre, &graph_post, batch, templates, depth, config)?;
                let hyper = config.hyper(config.context_delta, &format!("delta/depth{depth}"));
                let (ctx, skipped) = contextual_targets(params, &edits, &hyper)?;
                rounds.push(RoundReport {
                    depth,
                    n_compiled: edits.len(),
                    n_targets: ctx.len(),
                    n_skipped: skipped,
                    insert: None,
                });
                targets.extend(ctx);
                contextual.extend(edits);
            }
            let (next, report) = insert(params, targets, &preserved, &config.layer)?;
            if let Some(last) = rounds.last_mut() {
                last.insert = report;
            }
            Ok(RunOutcome {
                params: next,
                rounds,
                contextual,
            })
        }
    }
}

/// [`run_kedit`] with `eval_edges` added to the holdout.
pub fn run_generalization_ablation(
    params: &ModelParams,
    graph_pre: &KnowledgeGraph,
    batch: &[EdgeEdit],
    templates: &TemplateRegistry,
    eval_edges: &BTreeSet<(EntityId, RelationId)>,
    config: &RunConfig,
) -> Result<RunOutcome> {
    let mut ablated = config.clone();
    ablated.holdout.extend(eval_edges.iter().copied());
    run_kedit(params, graph_pre, batch, templates, &ablated)
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub graph_hash: String,
    pub model_pre: String,
    pub model_post: String,
    pub contextual_counts: Vec<usize>,
    pub rounds: Vec<RoundReport>,
    pub timings_ms: BTreeMap<String, u128>,
}

/// Milliseconds since `start`.
pub fn elapsed_ms(start: Instant) -> u128 {
    start.elapsed().as_millis()
}
