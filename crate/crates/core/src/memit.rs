//! Batch editor for the associative-memory model.
//!
//! Editing a memory happens in two stages. First a target state `z = ĥ + δ*`
//! is found by descending a regularized negative log-likelihood in `δ`,
//! averaged over `P` noisy copies of the query. Then the critical layers are
//! walked in order; at layer `l` each memory's remaining residual
//! `δ_i = z_i - ĥ_i` is recomputed under the current weights, the fraction
//! `δ_i / (L - l + 1)` is assigned to that layer, and `W_out[l]` receives the
//! ridge least-squares update
//!
//! ```text
//! Δ = R·K_Eᵀ·(K_E·K_Eᵀ + λ_p·K_P·K_Pᵀ + ε·I)⁻¹
//! ```
//!
//! which moves edited keys by their residuals while holding preserved keys
//! in place.
//!
//! The state that receives `δ` is the *edit point* of a query: the final
//! state of the last hop for a single-relation query, and the carried state
//! before the last relation for a chain (the compound subject
//! `r_{d-1}(...r_1(s))`). For chains the objective is evaluated through the
//! remaining hop, and the update is written along the edit-point hop.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::model::{log_softmax_at, softmax, HopTrace, ModelError, ModelParams, StructuredQuery};
use crate::seeds::{keyed_seed, rng_from_seed};

#[derive(Debug, Error, PartialEq)]
pub enum MemitError {
    #[error("target-state descent made no progress for subject {subject} (loss {start} -> {after})")]
    NoProgress {
        subject: EntityId,
        start: f64,
        after: f64,
    },
    #[error("layer update system is singular even with ridge")]
    SingularSystem,
    #[error("edit plan is empty")]
    EmptyPlan,
    #[error("queries pooled into one target state do not share an edit point")]
    MixedEditPoints,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MemitError>;

/// Hyperparameters of the target-state objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeltaHyper {
    /// Number of perturbed contexts `P`.
    pub n_contexts: usize,
    /// Per-coordinate standard deviation of the context perturbation.
    pub noise_scale: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    pub step_size: f64,
    /// Gradient-norm stopping threshold.
    pub tol: f64,
    /// Seed for the context perturbations.
    pub seed: u64,
}

impl Default for DeltaHyper {
    fn default() -> Self {
        Self {
            n_contexts: 8,
            noise_scale: 0.05,
            weight_decay: 1e-3,
            max_steps: 200,
            step_size: 0.5,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl DeltaHyper {
    pub fn validate(&self) -> Result<()> {
        let positive = self.n_contexts >= 1
            && self.noise_scale >= 0.0
            && self.weight_decay >= 0.0
            && self.step_size > 0.0
            && self.tol > 0.0;
        if positive {
            Ok(())
        } else {
            Err(MemitError::InvalidHyper(format!("{self:?}")))
        }
    }
}

/// Weights of the layer least-squares problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerHyper {
    /// `λ_p`, weight on preserved keys.
    pub preserve_weight: f64,
    /// `ε`, ridge on the update.
    pub ridge: f64,
}

impl Default for LayerHyper {
    fn default() -> Self {
        Self {
            preserve_weight: 1.0,
            ridge: 1e-6,
        }
    }
}

/// Hop index whose final state receives `δ` for a chain of `chain_len`.
pub fn edit_hop(chain_len: usize) -> usize {
    chain_len.saturating_sub(2)
}

/// Deterministic perturbation for context `j` of a query.
pub fn context_noise(query: &StructuredQuery, d: usize, scale: f64, seed: u64, j: usize) -> DVector<f64> {
    let mut key = query.fingerprint();
    key.push(j as u64);
    let mut rng = rng_from_seed(keyed_seed(seed, &key));
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * scale)
}

/// Trace of the edit-point hop of `query` under `params`.
pub fn edit_trace(params: &ModelParams, query: &StructuredQuery) -> Result<HopTrace> {
    let hop = edit_hop(query.chain.len());
    let state = params.state_after(query, hop)?;
    Ok(params.forward_hop(&state, query.chain[hop])?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaObjective {
    pub loss: f64,
    pub gradient: DVector<f64>,
    /// Mean log-probability of the target over contexts (no penalty).
    pub mean_logprob: f64,
}

/// Noisy copies of queries that share a tail length, pushed to the edit
/// point and stored column-wise.
struct ContextBatch {
    /// `d x n` edit-point states.
    states: DMatrix<f64>,
    /// Per tail hop, the `d x n` relation injections `P·G[r]`.
    injections: Vec<DMatrix<f64>>,
    targets: Vec<usize>,
}

/// The objective with every context already pushed to the edit point.
struct DeltaProblem<'a> {
    params: &'a ModelParams,
    batches: Vec<ContextBatch>,
    n_items: usize,
    weight_decay: f64,
}

impl<'a> DeltaProblem<'a> {
    fn new(params: &'a ModelParams, members: &[(StructuredQuery, EntityId)], hyper: &DeltaHyper) -> Result<Self> {
        hyper.validate()?;
        // tail length -> (states, tails, targets)
        let mut grouped: std::collections::BTreeMap<usize, (Vec<DVector<f64>>, Vec<Vec<RelationId>>, Vec<usize>)> =
            Default::default();
        for (query, target) in members {
            if query.chain.is_empty() {
                return Err(ModelError::EmptyChain.into());
            }
            if target.index() >= params.dims.n_entities {
                return Err(ModelError::UnknownEntity(*target).into());
            }
            let hop = edit_hop(query.chain.len());
            let tail = query.chain[hop + 1..].to_vec();
            let entry = grouped.entry(tail.len()).or_default();
            for j in 0..hyper.n_contexts {
                let noise = context_noise(query, params.dims.d, hyper.noise_scale, hyper.seed, j);
                let mut q = query.clone();
                q.noise = Some(match &query.noise {
                    Some(n) => n + noise,
                    None => noise,
                });
                entry.0.push(params.state_after(&q, hop + 1)?);
                entry.1.push(tail.clone());
                entry.2.push(target.index());
            }
        }
        let mut batches = Vec::new();
        let mut n_items = 0;
        for (len, (states, tails, targets)) in grouped {
            n_items += states.len();
            let injections = (0..len)
                .map(|t| {
                    let cols = tails
                        .iter()
                        .map(|tail| params.injection(tail[t]))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    Ok(DMatrix::from_columns(&cols))
                })
                .collect::<Result<Vec<_>>>()?;
            batches.push(ContextBatch {
                states: DMatrix::from_columns(&states),
                injections,
                targets,
            });
        }
        Ok(Self {
            params,
            batches,
            n_items,
            weight_decay: hyper.weight_decay,
        })
    }

    /// Summed `-log p(target)` over a batch and its gradient with respect to
    /// `δ`, summed over columns.
    fn batch_nll(&self, batch: &ContextBatch, delta: &DVector<f64>) -> (f64, DVector<f64>) {
        let m = self.params;
        let n = batch.targets.len();
        let mut h = batch.states.clone();
        for mut col in h.column_iter_mut() {
            col += delta;
        }
        let mut keys: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(batch.injections.len());
        for inj in &batch.injections {
            h += inj;
            let mut hop_keys = Vec::with_capacity(m.dims.n_layers);
            for l in 0..m.dims.n_layers {
                let mut k = &m.w_in[l] * &h;
                k.apply(|x| *x = x.tanh());
                h.gemm(1.0, &m.w_out[l], &k, 1.0);
                hop_keys.push(k);
            }
            keys.push(hop_keys);
        }
        let scale = m.dims.readout_scale;
        let logits = &m.e * &h * scale;
        let mut nll = 0.0;
        let mut resid = DMatrix::zeros(logits.nrows(), n);
        for (c, &target) in batch.targets.iter().enumerate() {
            let col = logits.column(c).into_owned();
            nll -= log_softmax_at(&col, target);
            let mut p = softmax(&col);
            p[target] -= 1.0;
            resid.set_column(c, &p);
        }
        let mut g = m.e.tr_mul(&resid) * scale;
        for hop_keys in keys.iter().rev() {
            for l in (0..m.dims.n_layers).rev() {
                let k = &hop_keys[l];
                let mut u = m.w_out[l].tr_mul(&g);
                u.zip_apply(k, |ui, ki| *ui *= 1.0 - ki * ki);
                g.gemm_tr(1.0, &m.w_in[l], &u, 1.0);
            }
        }
        (nll, g.column_sum())
    }

    fn evaluate(&self, delta: &DVector<f64>) -> Result<DeltaObjective> {
        if !delta.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFiniteState.into());
        }
        let n = self.n_items as f64;
        let mut nll = 0.0;
        let mut grad = DVector::zeros(delta.len());
        for batch in &self.batches {
            let (l, g) = self.batch_nll(batch, delta);
            nll += l;
            grad += g;
        }
        nll /= n;
        grad /= n;
        grad.axpy(2.0 * self.weight_decay, delta, 1.0);
        Ok(DeltaObjective {
            loss: nll + self.weight_decay * delta.norm_squared(),
            gradient: grad,
            mean_logprob: -nll,
        })
    }
}

/// Regularized objective at `delta`:
/// `-(1/P)·Σ_j log softmax(E·T(ĥ_j + δ))[target] + wd·‖δ‖²`, where `T` is the
/// hop after the edit point (identity for single-relation queries).
pub fn delta_objective(
    params: &ModelParams,
    query: &StructuredQuery,
    target: EntityId,
    delta: &DVector<f64>,
    hyper: &DeltaHyper,
) -> Result<DeltaObjective> {
    DeltaProblem::new(params, &[(query.clone(), target)], hyper)?.evaluate(delta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetState {
    pub query: StructuredQuery,
    pub target: EntityId,
    /// Desired edit-point state.
    pub z: DVector<f64>,
    pub delta: DVector<f64>,
    pub achieved_logprob: f64,
    pub steps: usize,
}

/// Steps after which the loss must have dropped.
const PROGRESS_WINDOW: usize = 10;

/// Gradient descent on [`delta_objective`] from `δ = 0`, halving the step
/// after any step that would raise the loss.
pub fn compute_target_state(
    params: &ModelParams,
    query: &StructuredQuery,
    target: EntityId,
    hyper: &DeltaHyper,
) -> Result<TargetState> {
    compute_shared_target_state(params, &[(query.clone(), target)], hyper)
}

/// Single target state for several queries that share an edit point, with
/// the objective averaged over all of their contexts.
pub fn compute_shared_target_state(
    params: &ModelParams,
    members: &[(StructuredQuery, EntityId)],
    hyper: &DeltaHyper,
) -> Result<TargetState> {
    let (query, target) = members.first().ok_or(MemitError::EmptyPlan)?;
    let point = params.state_after(query, edit_hop(query.chain.len()) + 1)?;
    for (q, _) in &members[1..] {
        let other = params.state_after(q, edit_hop(q.chain.len()) + 1)?;
        if other != point {
            return Err(MemitError::MixedEditPoints);
        }
    }
    let problem = DeltaProblem::new(params, members, hyper)?;
    let mut delta = DVector::zeros(params.dims.d);
    let mut obj = problem.evaluate(&delta)?;
    let start = obj.loss;
    let mut steps = 0;
    let mut step = hyper.step_size;
    while steps < hyper.max_steps && obj.gradient.norm() >= hyper.tol {
        let trial = &delta - &obj.gradient * step;
        let next = problem.evaluate(&trial)?;
        steps += 1;
        // halve the step whenever the loss goes up
        if next.loss <= obj.loss {
            delta = trial;
            obj = next;
        } else {
            step *= 0.5;
        }
        if steps == PROGRESS_WINDOW && !(obj.loss < start) {
            break;
        }
    }
    if steps > 0 && !(obj.loss < start) {
        return Err(MemitError::NoProgress {
            subject: query.subject,
            start,
            after: obj.loss,
        });
    }
    Ok(TargetState {
        query: query.clone(),
        target: *target,
        z: point + &delta,
        delta,
        achieved_logprob: obj.mean_logprob,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerUpdateProblem {
    /// `d_k x n`.
    pub edited_keys: DMatrix<f64>,
    /// `d x n`.
    pub residuals: DMatrix<f64>,
    /// `d_k x u`; may have zero columns.
    pub preserved_keys: DMatrix<f64>,
    pub hyper: LayerHyper,
}

impl LayerUpdateProblem {
    /// Least-squares objective of a candidate update `Δ` (ridge included).
    pub fn objective(&self, update: &DMatrix<f64>) -> f64 {
        let fit = update * &self.edited_keys - &self.residuals;
        let keep = update * &self.preserved_keys;
        fit.norm_squared()
            + self.hyper.preserve_weight * keep.norm_squared()
            + self.hyper.ridge * update.norm_squared()
    }
}

/// Closed-form minimizer of [`LayerUpdateProblem::objective`], returned as
/// the updated matrix `W + Δ`.
pub fn solve_layer_update(w_out: &DMatrix<f64>, problem: &LayerUpdateProblem) -> Result<DMatrix<f64>> {
    Ok(w_out + layer_delta(problem)?)
}

pub fn layer_delta(problem: &LayerUpdateProblem) -> Result<DMatrix<f64>> {
    let ke = &problem.edited_keys;
    let kp = &problem.preserved_keys;
    let d_k = ke.nrows();
    let mut a = ke * ke.transpose();
    if kp.ncols() > 0 {
        a.gemm(problem.hyper.preserve_weight, kp, &kp.transpose(), 1.0);
    }
    for i in 0..d_k {
        a[(i, i)] += problem.hyper.ridge;
    }
    // A symmetric, so Δᵀ = A⁻¹·K_E·Rᵀ
    let rhs = ke * problem.residuals.transpose();
    let chol = a.cholesky().ok_or(MemitError::SingularSystem)?;
    let delta_t = chol.solve(&rhs);
    if !delta_t.iter().all(|x| x.is_finite()) {
        return Err(MemitError::SingularSystem);
    }
    Ok(delta_t.transpose())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EditPlan {
    pub memories: Vec<TargetState>,
}

impl EditPlan {
    pub fn new(memories: Vec<TargetState>) -> Self {
        Self { memories }
    }

    pub fn len(&self) -> usize {
        self.memories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memories.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertReport {
    pub n_memories: usize,
    pub n_preserved: usize,
    /// Mean `‖z_i - ĥ_i‖` before the first critical layer.
    pub mean_residual_before: f64,
    /// Mean `‖z_i - ĥ_i‖` after the last critical layer.
    pub mean_residual_after: f64,
}

fn edit_point_states(params: &ModelParams, plan: &EditPlan) -> Result<Vec<HopTrace>> {
    plan.memories
        .iter()
        .map(|m| edit_trace(params, &m.query))
        .collect()
}

fn mean_residual(plan: &EditPlan, traces: &[HopTrace]) -> f64 {
    let total: f64 = plan
        .memories
        .iter()
        .zip(traces)
        .map(|(m, t)| (&m.z - t.final_state()).norm())
        .sum();
    total / plan.len() as f64
}

/// Spread each memory's residual over the critical layers and solve one
/// least-squares update per layer, lowest layer first.
pub fn spread_and_insert(
    params: &ModelParams,
    plan: &EditPlan,
    preserved: &[StructuredQuery],
    hyper: &LayerHyper,
) -> Result<(ModelParams, InsertReport)> {
    if plan.is_empty() {
        return Err(MemitError::EmptyPlan);
    }
    let dims = params.dims;
    let mut current = params.clone();
    let mut before = None;
    for layer in dims.critical_layers() {
        let traces = edit_point_states(&current, plan)?;
        if before.is_none() {
            before = Some(mean_residual(plan, &traces));
        }
        let remaining = (dims.critical_end - layer + 1) as f64;
        let n = plan.len();
        let mut edited_keys = DMatrix::zeros(dims.d_k, n);
        let mut residuals = DMatrix::zeros(dims.d, n);
        for (i, (m, t)) in plan.memories.iter().zip(&traces).enumerate() {
            edited_keys.set_column(i, t.key(layer));
            residuals.set_column(i, &((&m.z - t.final_state()) / remaining));
        }
        let mut preserved_keys = DMatrix::zeros(dims.d_k, preserved.len());
        for (i, q) in preserved.iter().enumerate() {
            preserved_keys.set_column(i, edit_trace(&current, q)?.key(layer));
        }
        let problem = LayerUpdateProblem {
            edited_keys,
            residuals,
            preserved_keys,
            hyper: *hyper,
        };
        let idx = layer - 1;
        current.w_out[idx] = solve_layer_update(&current.w_out[idx], &problem)?;
    }
    let traces = edit_point_states(&current, plan)?;
    let report = InsertReport {
        n_memories: plan.len(),
        n_preserved: preserved.len(),
        mean_residual_before: before.unwrap_or(0.0),
        mean_residual_after: mean_residual(plan, &traces),
    };
    Ok((current, report))
}

/// Randomly drawn stored single-hop facts whose `(subject, relation)` is not
/// excluded, in draw order.
pub fn sample_preserved_facts(
    graph: &KnowledgeGraph,
    exclude: &BTreeSet<(EntityId, RelationId)>,
    count: usize,
    seed: u64,
) -> Vec<StructuredQuery> {
    let pool: Vec<(EntityId, RelationId)> = graph
        .forward_index()
        .keys()
        .filter(|k| !exclude.contains(k))
        .copied()
        .collect();
    let mut rng = rng_from_seed(seed);
    pool.choose_multiple(&mut rng, count.min(pool.len()))
        .map(|&(s, r)| StructuredQuery::new(s, vec![r]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreservedKeys {
    pub queries: Vec<StructuredQuery>,
    /// One `d_k x u` matrix per critical layer, lowest first.
    pub keys: Vec<DMatrix<f64>>,
}

/// Sample preserved facts and compute their keys at every critical layer
/// under `params`.
pub fn sample_preserved_keys(
    params: &ModelParams,
    graph: &KnowledgeGraph,
    exclude: &BTreeSet<(EntityId, RelationId)>,
    count: usize,
    seed: u64,
) -> Result<PreservedKeys> {
    let queries = sample_preserved_facts(graph, exclude, count, seed);
    let traces = queries
        .iter()
        .map(|q| edit_trace(params, q))
        .collect::<Result<Vec<_>>>()?;
    let keys = params
        .dims
        .critical_layers()
        .map(|l| {
            let mut m = DMatrix::zeros(params.dims.d_k, traces.len());
            for (i, t) in traces.iter().enumerate() {
                m.set_column(i, t.key(l));
            }
            m
        })
        .collect();
    Ok(PreservedKeys { queries, keys })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{gen_synthetic, SyntheticConfig};
    use crate::model::{init_model, ModelDims};
    use rand::Rng;

    fn small_dims() -> ModelDims {
        ModelDims {
            d: 16,
            d_r: 4,
            d_k: 32,
            n_layers: 4,
            critical_start: 2,
            critical_end: 4,
            n_entities: 20,
            n_relations: 3,
            key_gain: 1.0,
            readout_scale: 1.0,
        }
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn uniform_logits_give_log_n() {
        // orthonormal embeddings and a zero edit-point state
        let mut m = init_model(ModelDims { d: 20, n_entities: 20, ..small_dims() }, 0).unwrap();
        m.e = DMatrix::identity(20, 20);
        m.p = DMatrix::zeros(20, 4);
        let q = StructuredQuery::new(EntityId(0), vec![RelationId(0)])
            .with_noise(-m.embedding(EntityId(0)).unwrap());
        let hyper = DeltaHyper {
            noise_scale: 0.0,
            ..Default::default()
        };
        let obj = delta_objective(&m, &q, EntityId(3), &DVector::zeros(20), &hyper).unwrap();
        assert!((obj.loss - (20f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_raises_loss_for_nonzero_delta() {
        let m = init_model(small_dims(), 1).unwrap();
        let q = StructuredQuery::new(EntityId(2), vec![RelationId(1)]);
        let delta = DVector::from_element(16, 0.3);
        let mut prev = f64::NEG_INFINITY;
        for wd in [0.0, 1e-3, 1e-2, 1e-1] {
            let hyper = DeltaHyper {
                weight_decay: wd,
                ..Default::default()
            };
            let l = delta_objective(&m, &q, EntityId(5), &delta, &hyper).unwrap().loss;
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn target_state_improves_target_probability() {
        let m = init_model(small_dims(), 1).unwrap();
        let q = StructuredQuery::new(EntityId(2), vec![RelationId(1)]);
        let hyper = DeltaHyper::default();
        let ts = compute_target_state(&m, &q, EntityId(7), &hyper).unwrap();
        let before = m.probabilities(&m.final_state(&q).unwrap())[7];
        let after = m.probabilities(&ts.z)[7];
        assert!(after > before);
        assert_eq!(ts, compute_target_state(&m, &q, EntityId(7), &hyper).unwrap());
    }

    #[test]
    fn confident_target_needs_small_delta() {
        let m0 = init_model(small_dims(), 3).unwrap();
        let hyper = DeltaHyper::default();
        let q = StructuredQuery::new(EntityId(4), vec![RelationId(0)]);
        // make entity 9 the confident answer, then ask for it again
        let ts = compute_target_state(&m0, &q, EntityId(9), &hyper).unwrap();
        let plan = EditPlan::new(vec![ts]);
        let (m1, _) = spread_and_insert(&m0, &plan, &[], &LayerHyper { ridge: 1e-10, ..Default::default() }).unwrap();
        assert_eq!(m1.predict(&q).unwrap(), EntityId(9));
        let again = compute_target_state(&m1, &q, EntityId(9), &hyper).unwrap();
        let random = compute_target_state(&m1, &q, EntityId(13), &hyper).unwrap();
        assert!(
            again.delta.norm() <= 0.25 * random.delta.norm(),
            "{} vs {}",
            again.delta.norm(),
            random.delta.norm()
        );
    }

    #[test]
    fn rank_one_update_for_single_unit_key() {
        let mut rng = rng_from_seed(5);
        let mut k = random_matrix(8, 1, &mut rng);
        k /= k.norm();
        let r = random_matrix(6, 1, &mut rng);
        let eps = 1e-6;
        let problem = LayerUpdateProblem {
            edited_keys: k.clone(),
            residuals: r.clone(),
            preserved_keys: DMatrix::zeros(8, 0),
            hyper: LayerHyper {
                preserve_weight: 1.0,
                ridge: eps,
            },
        };
        let delta = layer_delta(&problem).unwrap();
        let expected = &r * k.transpose() / (1.0 + eps);
        // the ridge makes the system ill-conditioned (~1e6), so allow for that
        assert!((delta - expected).amax() < 1e-9);
    }

    #[test]
    fn preserved_keys_shrink_with_weight() {
        let mut rng = rng_from_seed(11);
        let ke = random_matrix(8, 3, &mut rng);
        let kp = random_matrix(8, 6, &mut rng);
        let r = random_matrix(8, 3, &mut rng);
        let mut prev = f64::INFINITY;
        for lambda in [1.0, 10.0, 100.0] {
            let problem = LayerUpdateProblem {
                edited_keys: ke.clone(),
                residuals: r.clone(),
                preserved_keys: kp.clone(),
                hyper: LayerHyper {
                    preserve_weight: lambda,
                    ridge: 1e-6,
                },
            };
            let leak = (layer_delta(&problem).unwrap() * &kp).norm();
            assert!(leak < prev);
            prev = leak;
        }
    }

    #[test]
    fn solution_is_a_local_minimum() {
        let mut rng = rng_from_seed(21);
        for _ in 0..10 {
            let n = rng.random_range(1..5);
            let u = rng.random_range(0..9);
            let problem = LayerUpdateProblem {
                edited_keys: random_matrix(8, n, &mut rng),
                residuals: random_matrix(8, n, &mut rng),
                preserved_keys: random_matrix(8, u, &mut rng),
                hyper: LayerHyper::default(),
            };
            let best = layer_delta(&problem).unwrap();
            let f = problem.objective(&best);
            for _ in 0..100 {
                let p = random_matrix(8, 8, &mut rng) * 1e-4;
                assert!(problem.objective(&(&best + p)) >= f - 1e-12);
            }
        }
    }

    #[test]
    fn empty_plan_rejected() {
        let m = init_model(small_dims(), 0).unwrap();
        assert_eq!(
            spread_and_insert(&m, &EditPlan::default(), &[], &LayerHyper::default()).unwrap_err(),
            MemitError::EmptyPlan
        );
    }

    #[test]
    fn spreading_assigns_quarter_at_first_of_four_layers() {
        let dims = ModelDims {
            critical_start: 3,
            critical_end: 6,
            n_layers: 6,
            ..small_dims()
        };
        let m = init_model(dims, 2).unwrap();
        let q = StructuredQuery::new(EntityId(1), vec![RelationId(2)]);
        let ts = compute_target_state(&m, &q, EntityId(8), &DeltaHyper::default()).unwrap();
        let delta = ts.z.clone() - m.final_state(&q).unwrap();
        let hyper = LayerHyper {
            preserve_weight: 1.0,
            ridge: 1e-12,
        };
        // Stop after the first critical layer by restricting the range.
        let mut one = m.clone();
        one.dims.critical_end = 3;
        let plan = EditPlan::new(vec![ts]);
        let t_before = edit_trace(&m, &q).unwrap();
        let k = t_before.key(3).clone();
        let problem = LayerUpdateProblem {
            edited_keys: DMatrix::from_column_slice(k.len(), 1, k.as_slice()),
            residuals: DMatrix::from_column_slice(delta.len(), 1, (&delta / 4.0).as_slice()),
            preserved_keys: DMatrix::zeros(k.len(), 0),
            hyper,
        };
        let w3 = solve_layer_update(&m.w_out[2], &problem).unwrap();
        assert!(((&w3 * &k) - &delta / 4.0).amax() < 1e-9);
        let (full, report) = spread_and_insert(&m, &plan, &[], &hyper).unwrap();
        assert!((&full.w_out[2] - &w3).amax() < 1e-12);
        assert!(report.mean_residual_after < 1e-6, "{report:?}");
        // frozen surface
        assert_eq!(full.e, m.e);
        assert_eq!(full.w_in, m.w_in);
        assert_eq!(full.w_out[0], m.w_out[0]);
        assert_eq!(full.w_out[1], m.w_out[1]);
    }

    #[test]
    fn preserved_sampling_filters_and_is_deterministic() {
        let g = gen_synthetic(&SyntheticConfig::default()).unwrap();
        let m = init_model(ModelDims::desk(200, 8), 0).unwrap();
        let exclude: BTreeSet<_> = g.forward_index().keys().take(300).copied().collect();
        let a = sample_preserved_keys(&m, &g, &exclude, 200, 9).unwrap();
        let b = sample_preserved_keys(&m, &g, &exclude, 200, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.queries.len(), 200);
        assert_eq!(a.keys.len(), 4);
        assert_eq!(a.keys[0].ncols(), 200);
        for q in &a.queries {
            assert!(!exclude.contains(&(q.subject, q.chain[0])));
        }
        let none = sample_preserved_keys(&m, &g, &exclude, 0, 9).unwrap();
        assert_eq!(none.keys[0].ncols(), 0);
    }
}
