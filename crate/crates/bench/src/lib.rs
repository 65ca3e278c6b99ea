//! Shared fixtures for the benchmarks.

use kedit_core::kg::KnowledgeGraph;
use kedit_core::model::ModelParams;
use kedit_core::pipeline::{build_graph, seed_model, ExperimentConfig};

/// The desk graph and a model with its facts seeded, as the pipeline builds them.
pub fn seeded_desk() -> (KnowledgeGraph, ModelParams) {
    let config = ExperimentConfig::default();
    let graph = build_graph(&config).expect("desk graph");
    let (params, _) = seed_model(&config, &graph).expect("seeding");
    (graph, params)
}
