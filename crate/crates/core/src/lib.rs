//! Knowledge-graph-driven contextual model editing.
//!
//! The crate is organized bottom-up:
//!
//! - [`kg`]: ground-truth knowledge graph, path resolution, synthetic graphs.
//! - [`templates`]: per-relation cloze / noun-phrase templates and prompt composition.
//! - [`context`]: compiles base edits into multi-hop contextual edits.
//! - [`model`]: the editable associative-memory model.
//! - [`memit`]: target-state optimization and least-squares layer updates.
//! - [`orchestrator`]: baseline and contextual editing runs.
//! - [`eval`]: evaluation sets and the metric suite.
//! - [`report`]: report documents and text tables.
//! - [`pipeline`]: end-to-end experiments driven by a single config document.

pub mod context;
pub mod eval;
pub mod kg;
pub mod memit;
pub mod model;
pub mod orchestrator;
pub mod pipeline;
pub mod report;
pub mod seeds;
pub mod templates;

pub use kg::{EdgeEdit, Entity, EntityId, KnowledgeGraph, Relation, RelationId, Triple};
pub use memit::{DeltaHyper, LayerHyper};
pub use model::{ModelDims, ModelParams, StructuredQuery};
pub use templates::TemplateRegistry;
