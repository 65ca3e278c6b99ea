//! Benchmarks for the editing hot paths on the desk configuration.

use std::collections::BTreeSet;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use kedit_bench::seeded_desk;
use kedit_core::context::sample_edit_batch;
use kedit_core::memit::{
    compute_target_state, layer_delta, sample_preserved_facts, spread_and_insert, DeltaHyper, EditPlan,
    LayerHyper, LayerUpdateProblem,
};
use kedit_core::StructuredQuery;
use nalgebra::DMatrix;

fn layer_update(c: &mut Criterion) {
    let (d, d_k, n, u) = (64, 1024, 50, 600);
    let unit = |rows, cols, salt: usize| {
        DMatrix::from_fn(rows, cols, |i, j| ((i * 31 + j * 17 + salt) % 97) as f64 / 48.5 - 1.0)
    };
    let problem = LayerUpdateProblem {
        edited_keys: unit(d_k, n, 1),
        residuals: unit(d, n, 2),
        preserved_keys: unit(d_k, u, 3),
        hyper: LayerHyper::default(),
    };
    c.bench_function("layer_delta/50 edits, 600 preserved", |b| {
        b.iter(|| layer_delta(&problem).unwrap())
    });
}

fn editing(c: &mut Criterion) {
    let (graph, params) = seeded_desk();
    let edits = sample_edit_batch(&graph, 50, 2, 11);
    let hyper = DeltaHyper {
        weight_decay: 2.5,
        max_steps: 60,
        step_size: 0.05,
        ..DeltaHyper::default()
    };
    let first = &edits[0];
    let query = StructuredQuery::new(first.subject, vec![first.relation]);
    c.bench_function("target_state/one base edit", |b| {
        b.iter(|| compute_target_state(&params, &query, first.new_object, &hyper).unwrap())
    });

    let memories: Vec<_> = edits
        .iter()
        .map(|e| {
            let q = StructuredQuery::new(e.subject, vec![e.relation]);
            compute_target_state(&params, &q, e.new_object, &hyper).unwrap()
        })
        .collect();
    let exclude: BTreeSet<_> = edits.iter().map(|e| (e.subject, e.relation)).collect();
    let preserved = sample_preserved_facts(&graph, &exclude, 600, 5);
    let plan = EditPlan::new(memories);
    let mut group = c.benchmark_group("insert");
    group.sample_size(10);
    group.bench_function("spread_and_insert/50 memories", |b| {
        b.iter_batched(
            || params.clone(),
            |p| spread_and_insert(&p, &plan, &preserved, &LayerHyper::default()).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, layer_update, editing);
criterion_main!(benches);
