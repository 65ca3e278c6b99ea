//! Residual stack of key-value associative-memory layers.
//!
//! A hop maps a carried state and a relation to a new state:
//!
//! ```text
//! h_0 = state + P·G[r]
//! k_l = tanh(W_in[l]·h_{l-1})
//! h_l = h_{l-1} + W_out[l]·k_l          l = 1..n_layers
//! ```
//!
//! Entity embeddings `E` double as the readout (`softmax(E·h)`). A query
//! starts from `E[subject]` and carries the final state of each hop into the
//! next one, so a chain `r_1..r_d` is answered latently. Only the `W_out`
//! matrices of the critical layers are ever modified.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::seq::{IndexedRandom, SliceRandom};

use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::memit::{spread_and_insert, EditPlan, LayerHyper, MemitError, TargetState};
use crate::seeds::rng_from_seed;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid dims: {0}")]
    InvalidDims(String),
    #[error("non-finite state at hop input")]
    NonFiniteState,
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("unknown relation {0}")]
    UnknownRelation(RelationId),
    #[error("empty relation chain")]
    EmptyChain,
    #[error("checkpoint parse error: {0}")]
    ParseError(String),
    #[error("checkpoint dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Hidden width.
    pub d: usize,
    /// Relation-embedding width.
    pub d_r: usize,
    /// Key width of each memory layer.
    pub d_k: usize,
    pub n_layers: usize,
    /// First critical layer (1-based, inclusive).
    pub critical_start: usize,
    /// Last critical layer (1-based, inclusive).
    pub critical_end: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    /// Multiplier on the `1/√d` scale of `W_in`, so key pre-activations of
    /// unit-norm states are O(1).
    pub key_gain: f64,
    /// Inverse temperature of the readout `softmax(scale·E·h)`.
    pub readout_scale: f64,
}

impl ModelDims {
    pub fn desk(n_entities: usize, n_relations: usize) -> Self {
        Self {
            d: 64,
            d_r: 16,
            d_k: 1024,
            n_layers: 6,
            critical_start: 3,
            critical_end: 6,
            n_entities,
            n_relations,
            key_gain: 4.0,
            readout_scale: 8.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_r == 0 || self.d_k == 0 {
            return Err(ModelError::InvalidDims("widths must be >= 1".into()));
        }
        if !(self.key_gain > 0.0 && self.key_gain.is_finite())
            || !(self.readout_scale > 0.0 && self.readout_scale.is_finite())
        {
            return Err(ModelError::InvalidDims("key_gain and readout_scale must be positive".into()));
        }
        if !(1 <= self.critical_start
            && self.critical_start <= self.critical_end
            && self.critical_end <= self.n_layers)
        {
            return Err(ModelError::InvalidDims(format!(
                "critical range [{}..{}] outside 1..={}",
                self.critical_start, self.critical_end, self.n_layers
            )));
        }
        Ok(())
    }

    /// Critical layers, 1-based.
    pub fn critical_layers(&self) -> std::ops::RangeInclusive<usize> {
        self.critical_start..=self.critical_end
    }
}

/// Full record of one hop.
#[derive(Debug, Clone, PartialEq)]
pub struct HopTrace {
    pub relation: RelationId,
    /// `h_0..h_{n_layers}`.
    pub hidden: Vec<DVector<f64>>,
    /// `k_1..k_{n_layers}`; `keys[l-1]` is the key of layer `l`.
    pub keys: Vec<DVector<f64>>,
}

impl HopTrace {
    pub fn final_state(&self) -> &DVector<f64> {
        self.hidden.last().expect("trace has at least h_0")
    }

    pub fn key(&self, layer: usize) -> &DVector<f64> {
        &self.keys[layer - 1]
    }
}

/// Structured stand-in for a composed prompt `t_{r_d}(...r_1(subject))`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredQuery {
    pub subject: EntityId,
    pub chain: Vec<RelationId>,
    /// Added to `E[subject]` before the first hop.
    pub noise: Option<DVector<f64>>,
}

impl StructuredQuery {
    pub fn new(subject: EntityId, chain: Vec<RelationId>) -> Self {
        Self {
            subject,
            chain,
            noise: None,
        }
    }

    pub fn with_noise(mut self, noise: DVector<f64>) -> Self {
        self.noise = Some(noise);
        self
    }

    /// Integer fingerprint `(subject, chain...)` for keyed seeding.
    pub fn fingerprint(&self) -> Vec<u64> {
        std::iter::once(self.subject.0 as u64)
            .chain(self.chain.iter().map(|r| r.0 as u64 + (1 << 32)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct QueryResult {
    pub prediction: EntityId,
    pub probabilities: DVector<f64>,
    pub traces: Vec<HopTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// `n_entities x d`, unit-norm rows.
    pub e: DMatrix<f64>,
    /// `n_relations x d_r`.
    pub g: DMatrix<f64>,
    /// `d x d_r`.
    pub p: DMatrix<f64>,
    /// `d_k x d` per layer.
    pub w_in: Vec<DMatrix<f64>>,
    /// `d x d_k` per layer; the edit surface.
    pub w_out: Vec<DMatrix<f64>>,
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    // filled row-major so the stream layout does not depend on storage order
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

pub fn init_model(dims: ModelDims, seed: u64) -> Result<ModelParams> {
    dims.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut e = gaussian(dims.n_entities, dims.d, 1.0, &mut rng);
    for mut row in e.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    let g = gaussian(dims.n_relations, dims.d_r, 1.0 / (dims.d_r as f64).sqrt(), &mut rng);
    let p = gaussian(dims.d, dims.d_r, 1.0 / (dims.d_r as f64).sqrt(), &mut rng);
    let w_in = (0..dims.n_layers)
        .map(|_| gaussian(dims.d_k, dims.d, dims.key_gain / (dims.d as f64).sqrt(), &mut rng))
        .collect();
    let w_out = (0..dims.n_layers)
        .map(|_| DMatrix::zeros(dims.d, dims.d_k))
        .collect();
    Ok(ModelParams {
        dims,
        e,
        g,
        p,
        w_in,
        w_out,
    })
}

impl ModelParams {
    pub fn embedding(&self, entity: EntityId) -> Result<DVector<f64>> {
        if entity.index() >= self.dims.n_entities {
            return Err(ModelError::UnknownEntity(entity));
        }
        Ok(self.e.row(entity.index()).transpose())
    }

    /// `P·G[r]`.
    pub fn injection(&self, relation: RelationId) -> Result<DVector<f64>> {
        if relation.index() >= self.dims.n_relations {
            return Err(ModelError::UnknownRelation(relation));
        }
        Ok(&self.p * self.g.row(relation.index()).transpose())
    }

    pub fn forward_hop(&self, state: &DVector<f64>, relation: RelationId) -> Result<HopTrace> {
        if !state.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFiniteState);
        }
        let mut h = state + self.injection(relation)?;
        let mut hidden = Vec::with_capacity(self.dims.n_layers + 1);
        let mut keys = Vec::with_capacity(self.dims.n_layers);
        hidden.push(h.clone());
        for (w_in, w_out) in self.w_in.iter().zip(&self.w_out) {
            let k = (w_in * &h).map(f64::tanh);
            h.gemv(1.0, w_out, &k, 1.0);
            keys.push(k);
            hidden.push(h.clone());
        }
        Ok(HopTrace {
            relation,
            hidden,
            keys,
        })
    }

    /// Final state of a hop without recording the trace.
    pub fn hop_final(&self, state: &DVector<f64>, relation: RelationId) -> Result<DVector<f64>> {
        if !state.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFiniteState);
        }
        let mut h = state + self.injection(relation)?;
        let mut k = DVector::zeros(self.dims.d_k);
        for (w_in, w_out) in self.w_in.iter().zip(&self.w_out) {
            k.gemv(1.0, w_in, &h, 0.0);
            k.apply(|x| *x = x.tanh());
            h.gemv(1.0, w_out, &k, 1.0);
        }
        Ok(h)
    }

    pub fn initial_state(&self, q: &StructuredQuery) -> Result<DVector<f64>> {
        let mut s = self.embedding(q.subject)?;
        if let Some(n) = &q.noise {
            s += n;
        }
        Ok(s)
    }

    /// Carried state after the first `hops` relations of the chain.
    pub fn state_after(&self, q: &StructuredQuery, hops: usize) -> Result<DVector<f64>> {
        let mut s = self.initial_state(q)?;
        for &r in &q.chain[..hops] {
            s = self.hop_final(&s, r)?;
        }
        Ok(s)
    }

    pub fn final_state(&self, q: &StructuredQuery) -> Result<DVector<f64>> {
        if q.chain.is_empty() {
            return Err(ModelError::EmptyChain);
        }
        self.state_after(q, q.chain.len())
    }

    pub fn logits(&self, state: &DVector<f64>) -> DVector<f64> {
        (&self.e * state) * self.dims.readout_scale
    }

    pub fn probabilities(&self, state: &DVector<f64>) -> DVector<f64> {
        softmax(&self.logits(state))
    }

    /// Argmax of the readout for a final state.
    pub fn predict_state(&self, state: &DVector<f64>) -> EntityId {
        EntityId(argmax(&self.logits(state)) as u32)
    }

    pub fn predict(&self, q: &StructuredQuery) -> Result<EntityId> {
        Ok(self.predict_state(&self.final_state(q)?))
    }

    pub fn query(&self, q: &StructuredQuery) -> Result<QueryResult> {
        if q.chain.is_empty() {
            return Err(ModelError::EmptyChain);
        }
        let mut state = self.initial_state(q)?;
        let mut traces = Vec::with_capacity(q.chain.len());
        for &r in &q.chain {
            let t = self.forward_hop(&state, r)?;
            state = t.final_state().clone();
            traces.push(t);
        }
        let probabilities = self.probabilities(&state);
        let prediction = EntityId(argmax(&probabilities) as u32);
        Ok(QueryResult {
            prediction,
            probabilities,
            traces,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| ModelError::Io(e.to_string()))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, &Checkpoint::from(self))
            .map_err(|e| ModelError::Io(e.to_string()))?;
        w.flush().map_err(|e| ModelError::Io(e.to_string()))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(f))
            .map_err(|e| ModelError::ParseError(e.to_string()))?;
        ck.into_params()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Checkpoint::from(self)).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| ModelError::ParseError(e.to_string()))?;
        ck.into_params()
    }
}

pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let mut p = logits.map(|x| (x - max).exp());
    let z = p.sum();
    p /= z;
    p
}

pub fn log_softmax_at(logits: &DVector<f64>, index: usize) -> f64 {
    let max = logits.max();
    let lse = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    logits[index] - lse
}

/// First index of the maximum.
pub fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// How stored facts are written into a fresh model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeederConfig {
    /// Facts per insertion batch.
    pub batch_size: usize,
    /// Full passes over the fact set.
    pub passes: usize,
    /// Preserved keys per batch, as a multiple of the batch size.
    pub preserve_factor: usize,
    pub layer: LayerHyper,
    pub seed: u64,
}

impl Default for SeederConfig {
    fn default() -> Self {
        Self {
            batch_size: 600,
            passes: 1,
            preserve_factor: 4,
            layer: LayerHyper::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub n_facts: usize,
    /// Fraction of stored facts whose single-hop query predicts the object.
    pub recall: f64,
}

/// Fraction of functional triples recalled by their single-hop query.
pub fn one_hop_recall(params: &ModelParams, graph: &KnowledgeGraph) -> Result<f64> {
    let facts = graph.forward_index();
    if facts.is_empty() {
        return Ok(1.0);
    }
    let mut hits = 0usize;
    for (&(s, r), &o) in facts {
        if params.predict(&StructuredQuery::new(s, vec![r]))? == o {
            hits += 1;
        }
    }
    Ok(hits as f64 / facts.len() as f64)
}

/// Insert every functional triple of `graph` with target state `E[object]`.
pub fn seed_facts(
    params: &ModelParams,
    graph: &KnowledgeGraph,
    config: &SeederConfig,
) -> std::result::Result<(ModelParams, SeedReport), MemitError> {
    let mut facts: Vec<(EntityId, RelationId, EntityId)> = graph
        .forward_index()
        .iter()
        .map(|(&(s, r), &o)| (s, r, o))
        .collect();
    if facts.is_empty() {
        return Ok((
            params.clone(),
            SeedReport {
                n_facts: 0,
                recall: 1.0,
            },
        ));
    }
    let mut rng = rng_from_seed(config.seed);
    facts.shuffle(&mut rng);
    let batch_size = config.batch_size.max(1);
    let mut current = params.clone();
    for _ in 0..config.passes.max(1) {
        for (b, batch) in facts.chunks(batch_size).enumerate() {
            let memories = batch
                .iter()
                .map(|&(s, r, o)| {
                    let query = StructuredQuery::new(s, vec![r]);
                    let z = current.embedding(o)?;
                    let now = current.final_state(&query)?;
                    Ok(TargetState {
                        query,
                        target: o,
                        delta: &z - now,
                        z,
                        achieved_logprob: 0.0,
                        steps: 0,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            // preserve facts from other batches
            let others: Vec<_> = facts
                .iter()
                .enumerate()
                .filter(|(i, _)| i / batch_size != b)
                .map(|(_, &(s, r, _))| StructuredQuery::new(s, vec![r]))
                .collect();
            let u = (config.preserve_factor * batch.len()).min(others.len());
            let preserved: Vec<_> = others.choose_multiple(&mut rng, u).cloned().collect();
            let (next, _) = spread_and_insert(&current, &EditPlan::new(memories), &preserved, &config.layer)?;
            current = next;
        }
    }
    let recall = one_hop_recall(&current, graph)?;
    Ok((
        current,
        SeedReport {
            n_facts: facts.len(),
            recall,
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRecord {
    fn from(m: &DMatrix<f64>) -> Self {
        let data = m.transpose().as_slice().to_vec();
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatrixRecord {
    fn into_matrix(self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        if self.rows != rows || self.cols != cols {
            return Err(ModelError::DimMismatch(format!(
                "{name}: expected {rows}x{cols}, found {}x{}",
                self.rows, self.cols
            )));
        }
        if self.data.len() != rows * cols {
            return Err(ModelError::DimMismatch(format!(
                "{name}: {} entries for {rows}x{cols}",
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(rows, cols, &self.data))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    dims: ModelDims,
    #[serde(rename = "E")]
    e: MatrixRecord,
    #[serde(rename = "G")]
    g: MatrixRecord,
    #[serde(rename = "P")]
    p: MatrixRecord,
    #[serde(rename = "W_in")]
    w_in: Vec<MatrixRecord>,
    #[serde(rename = "W_out")]
    w_out: Vec<MatrixRecord>,
}

impl From<&ModelParams> for Checkpoint {
    fn from(m: &ModelParams) -> Self {
        Self {
            dims: m.dims,
            e: (&m.e).into(),
            g: (&m.g).into(),
            p: (&m.p).into(),
            w_in: m.w_in.iter().map(Into::into).collect(),
            w_out: m.w_out.iter().map(Into::into).collect(),
        }
    }
}

impl Checkpoint {
    fn into_params(self) -> Result<ModelParams> {
        let dims = self.dims;
        dims.validate()
            .map_err(|e| ModelError::DimMismatch(e.to_string()))?;
        let layers = |v: Vec<MatrixRecord>, name: &str, r: usize, c: usize| {
            if v.len() != dims.n_layers {
                return Err(ModelError::DimMismatch(format!(
                    "{name}: {} layers, expected {}",
                    v.len(),
                    dims.n_layers
                )));
            }
            v.into_iter()
                .enumerate()
                .map(|(i, m)| m.into_matrix(&format!("{name}[{i}]"), r, c))
                .collect::<Result<Vec<_>>>()
        };
        let params = ModelParams {
            e: self.e.into_matrix("E", dims.n_entities, dims.d)?,
            g: self.g.into_matrix("G", dims.n_relations, dims.d_r)?,
            p: self.p.into_matrix("P", dims.d, dims.d_r)?,
            w_in: layers(self.w_in, "W_in", dims.d_k, dims.d)?,
            w_out: layers(self.w_out, "W_out", dims.d, dims.d_k)?,
            dims,
        };
        Ok(params)
    }
}
