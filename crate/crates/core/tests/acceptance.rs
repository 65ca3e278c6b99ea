//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always printed.
//!
//! Math-level checks compare library routines against independent oracles
//! written here. The directional checks run the full pipeline on the desk
//! configuration for five master seeds and compare variant reports.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use kedit_core::context::sample_edit_batch;
use kedit_core::eval::{efficacy, Metric};
use kedit_core::kg::{gen_synthetic, Entity, Relation, SyntheticConfig, Triple};
use kedit_core::memit::{
    delta_objective, edit_trace, solve_layer_update, spread_and_insert, DeltaHyper, EditPlan, LayerHyper,
    LayerUpdateProblem, TargetState,
};
use kedit_core::model::{init_model, ModelDims};
use kedit_core::pipeline::{cmd_pipeline, prepare, run_variant, ExperimentConfig, Variant};
use kedit_core::report::{harmonic_score, MetricsReport};
use kedit_core::{EntityId, KnowledgeGraph, RelationId, StructuredQuery, TemplateRegistry};

const SOLVER_TOL: f64 = 1e-6;
const GRADIENT_TOL: f64 = 1e-4;
const TELESCOPE_TOL: f64 = 1e-6;
const SCORE_TOL: f64 = 1e-3;
const MASTER_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Verdicts {
    lines: Vec<(String, bool)>,
}

impl Verdicts {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        let line = format!("[{}] {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((line, pass));
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

/// Conjugate gradient on `‖Δ·K_E − R‖² + λ·‖Δ·K_P‖² + ε·‖Δ‖²`, written from
/// the objective alone. The operator `X ↦ X·H` is SPD under the Frobenius
/// inner product, so matrix-valued CG converges.
fn descent_minimizer(ke: &DMatrix<f64>, r: &DMatrix<f64>, kp: &DMatrix<f64>, lambda: f64, eps: f64) -> DMatrix<f64> {
    let (d, d_k) = (r.nrows(), ke.nrows());
    let hessian_apply = |x: &DMatrix<f64>| -> DMatrix<f64> {
        let mut h = x * ke * ke.transpose() + x * eps;
        if kp.ncols() > 0 {
            h += x * kp * kp.transpose() * lambda;
        }
        h
    };
    let mut delta = DMatrix::zeros(d, d_k);
    let mut residual = r * ke.transpose();
    let mut direction = residual.clone();
    let mut rr = residual.norm_squared();
    for _ in 0..10_000 {
        if rr < 1e-30 {
            break;
        }
        let hd = hessian_apply(&direction);
        let alpha = rr / hd.dot(&direction);
        delta += &direction * alpha;
        residual -= hd * alpha;
        let next = residual.norm_squared();
        direction = &residual + &direction * (next / rr);
        rr = next;
    }
    delta
}

fn criterion_solver(v: &mut Verdicts) {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (d, d_k) = (8, 8);
        let n = r.random_range(1..=4);
        let u = r.random_range(0..=8);
        let ke = gaussian(d_k, n, &mut r);
        let res = gaussian(d, n, &mut r);
        let kp = gaussian(d_k, u, &mut r);
        let w = gaussian(d, d_k, &mut r);
        let hyper = LayerHyper {
            preserve_weight: r.random_range(0.5..2.0),
            ridge: 1e-3,
        };
        let problem = LayerUpdateProblem {
            edited_keys: ke.clone(),
            residuals: res.clone(),
            preserved_keys: kp.clone(),
            hyper,
        };
        let solved = solve_layer_update(&w, &problem).expect("solvable");
        let oracle = &w + descent_minimizer(&ke, &res, &kp, hyper.preserve_weight, hyper.ridge);
        worst = worst.max(max_abs_diff(&solved, &oracle));
    }
    let elapsed = start.elapsed();
    v.record(
        "C1 solver-oracle equivalence",
        worst <= SOLVER_TOL && elapsed < Duration::from_secs(10),
        format!("max |diff| {worst:.2e} (tol {SOLVER_TOL:.0e}), {elapsed:.2?} (limit 10s)"),
    );
}

fn small_dims() -> ModelDims {
    ModelDims {
        d: 12,
        d_r: 4,
        d_k: 24,
        n_layers: 4,
        critical_start: 2,
        critical_end: 4,
        n_entities: 15,
        n_relations: 3,
        key_gain: 4.0,
        readout_scale: 8.0,
    }
}

fn random_query(r: &mut ChaCha8Rng, dims: &ModelDims) -> StructuredQuery {
    let hops = r.random_range(1..=2);
    StructuredQuery::new(
        EntityId(r.random_range(0..dims.n_entities as u32)),
        (0..hops).map(|_| RelationId(r.random_range(0..dims.n_relations as u32))).collect(),
    )
}

fn criterion_gradient(v: &mut Verdicts) {
    let start = Instant::now();
    let mut r = rng(202);
    let dims = small_dims();
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let params = init_model(dims, 300 + i).unwrap();
        let query = random_query(&mut r, &dims);
        let target = EntityId(r.random_range(0..dims.n_entities as u32));
        let hyper = DeltaHyper {
            n_contexts: 3,
            noise_scale: 0.05,
            weight_decay: 0.05,
            seed: i,
            ..DeltaHyper::default()
        };
        let delta = DVector::from_fn(dims.d, |_, _| 0.1 * r.sample::<f64, _>(StandardNormal));
        let analytic = delta_objective(&params, &query, target, &delta, &hyper).unwrap().gradient;
        let h = 1e-5;
        let numeric = DVector::from_fn(dims.d, |k, _| {
            let mut plus = delta.clone();
            plus[k] += h;
            let mut minus = delta.clone();
            minus[k] -= h;
            let lp = delta_objective(&params, &query, target, &plus, &hyper).unwrap().loss;
            let lm = delta_objective(&params, &query, target, &minus, &hyper).unwrap().loss;
            (lp - lm) / (2.0 * h)
        });
        let rel = (&analytic - &numeric).norm() / analytic.norm().max(numeric.norm()).max(1e-12);
        worst = worst.max(rel);
    }
    let elapsed = start.elapsed();
    v.record(
        "C2 gradient vs central differences",
        worst <= GRADIENT_TOL && elapsed < Duration::from_secs(10),
        format!("max relative error {worst:.2e} (tol {GRADIENT_TOL:.0e}), {elapsed:.2?} (limit 10s)"),
    );
}

fn criterion_telescoping(v: &mut Verdicts) {
    let start = Instant::now();
    let mut r = rng(303);
    let dims = small_dims();
    let params = init_model(dims, 7).unwrap();
    let query = StructuredQuery::new(EntityId(3), vec![RelationId(1)]);
    let now = edit_trace(&params, &query).unwrap().final_state().clone();
    let delta = DVector::from_fn(dims.d, |_, _| 0.3 * r.sample::<f64, _>(StandardNormal));
    let z = &now + &delta;
    let memory = TargetState {
        query: query.clone(),
        target: EntityId(0),
        z: z.clone(),
        delta,
        achieved_logprob: 0.0,
        steps: 0,
    };
    let hyper = LayerHyper {
        preserve_weight: 1.0,
        ridge: 1e-10,
    };
    let (post, _) = spread_and_insert(&params, &EditPlan::new(vec![memory]), &[], &hyper).unwrap();
    let reached = edit_trace(&post, &query).unwrap().final_state().clone();
    let gap = (&reached - &z).abs().max();
    let elapsed = start.elapsed();
    v.record(
        "C3 spreading telescopes to the target",
        gap <= TELESCOPE_TOL && elapsed < Duration::from_secs(5),
        format!("max |h - z| {gap:.2e} (tol {TELESCOPE_TOL:.0e}), {elapsed:.2?} (limit 5s)"),
    );
}

/// Follow a chain by scanning a flat triple list.
fn scan(triples: &[(EntityId, RelationId, EntityId)], s: EntityId, chain: &[RelationId]) -> Option<EntityId> {
    let mut at = s;
    for &r in chain {
        at = triples.iter().find(|t| t.0 == at && t.1 == r)?.2;
    }
    Some(at)
}

fn criterion_propagation(v: &mut Verdicts) {
    let start = Instant::now();
    let graph = gen_synthetic(&SyntheticConfig::default()).unwrap();
    let edits = sample_edit_batch(&graph, 50, 1, 17);
    let mut post = graph.clone();
    for e in &edits {
        post = post.apply_edge_edit(e).unwrap();
    }
    // overlay the edits on the original triple list independently
    let mut flat: Vec<(EntityId, RelationId, EntityId)> =
        graph.triples().iter().map(|t| (t.subject, t.relation, t.object)).collect();
    for e in &edits {
        for t in flat.iter_mut() {
            if t.0 == e.subject && t.1 == e.relation {
                t.2 = e.new_object;
            }
        }
    }
    let mut r = rng(404);
    let mut agree = 0;
    let n_paths = 1000;
    for _ in 0..n_paths {
        let depth = r.random_range(1..=4);
        let s = EntityId(r.random_range(0..graph.n_entities() as u32));
        let chain: Vec<RelationId> = (0..depth)
            .map(|_| RelationId(r.random_range(0..graph.n_relations() as u32)))
            .collect();
        if post.resolve_path(s, &chain).ok() == scan(&flat, s, &chain) {
            agree += 1;
        }
    }
    let elapsed = start.elapsed();
    v.record(
        "C4 path resolution after edits",
        agree == n_paths && elapsed < Duration::from_secs(5),
        format!("{agree}/{n_paths} paths agree with the triple-scan oracle, {elapsed:.2?} (limit 5s)"),
    );
}

fn criterion_templates(v: &mut Verdicts) {
    let labels = ["the United Kingdom", "Boris Johnson", "Rishi Sunak"];
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
    let world = KnowledgeGraph::build(
        entities,
        relations,
        [Triple::new(EntityId(0), RelationId(0), EntityId(1))],
    )
    .unwrap();
    let mut reg = TemplateRegistry::new();
    reg.register(RelationId(0), "The Prime Minister of {subject} is", "{subject} Prime Minister")
        .unwrap();
    reg.register(RelationId(1), "The spouse of {subject} is", "the spouse of {subject}")
        .unwrap();
    let prompt = reg
        .compose_prompt(world.entity_label(EntityId(0)), &[RelationId(0), RelationId(1)])
        .unwrap();
    let expected = "The spouse of the United Kingdom Prime Minister is";

    let desk = gen_synthetic(&SyntheticConfig::default()).unwrap();
    let generic = TemplateRegistry::generic_for(&desk);
    let paths = desk.enumerate_paths(2);
    let prompts: Result<BTreeSet<String>, _> = paths
        .iter()
        .map(|(s, chain)| generic.compose_prompt(desk.entity_label(*s), chain))
        .collect();
    let compiled = prompts.as_ref().map(|p| p.len()).unwrap_or(0);
    let pass = prompt == expected && generic.template_count() == 16 && compiled == paths.len();
    v.record(
        "C5 template exactness",
        pass,
        format!(
            "worked example {:?}; {compiled}/{} distinct 2-hop prompts from {} template strings",
            prompt,
            paths.len(),
            generic.template_count()
        ),
    );
}

fn criterion_harmonic(v: &mut Verdicts) {
    let score = harmonic_score(&[0.998, 0.953, 0.795]);
    v.record(
        "C10 harmonic-mean score",
        (score - 0.906).abs() <= SCORE_TOL,
        format!("score {score:.4} (expected 0.906 ± {SCORE_TOL})"),
    );
}

struct SeedRun {
    seed: u64,
    reports: Vec<MetricsReport>,
    /// kg, model, baseline and sequential stages, milliseconds.
    sequential_ms: u128,
}

impl SeedRun {
    fn report(&self, variant: Variant) -> &MetricsReport {
        self.reports
            .iter()
            .find(|r| r.metadata.variant == variant.label())
            .expect("variant report")
    }

    fn multihop(&self, variant: Variant) -> f64 {
        self.report(variant).multihop_accuracy.value
    }
}

fn desk_config(seed: u64, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        master_seed: seed,
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn run_seed(seed: u64, out: &Path) -> SeedRun {
    let config = desk_config(seed, out);
    let outcome = cmd_pipeline(&config, false).expect("pipeline");
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(outcome.run_dir.join("manifest.json")).unwrap()).unwrap();
    let t = &manifest["timings_ms"];
    let ms = |k: &str| t[k].as_u64().unwrap_or(0) as u128;
    SeedRun {
        seed,
        reports: outcome.reports,
        sequential_ms: ms("kg") + ms("model") + ms("baseline") + ms("kedit-sequential"),
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criteria_directional(v: &mut Verdicts, runs: &[SeedRun]) {
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: base {:.1} seq {:.1} par {:.1} gen {:.1}",
                r.seed,
                100.0 * r.multihop(Variant::Baseline),
                100.0 * r.multihop(Variant::KeditSequential),
                100.0 * r.multihop(Variant::KeditParallel),
                100.0 * r.multihop(Variant::KeditGeneralize)
            )
        })
        .collect();
    println!("{}", per_seed.join("\n"));
    let base = mean(runs.iter().map(|r| r.multihop(Variant::Baseline)));
    let seq = mean(runs.iter().map(|r| r.multihop(Variant::KeditSequential)));
    let par = mean(runs.iter().map(|r| r.multihop(Variant::KeditParallel)));
    let gen = mean(runs.iter().map(|r| r.multihop(Variant::KeditGeneralize)));
    let min_gain = runs
        .iter()
        .map(|r| r.multihop(Variant::KeditSequential) - r.multihop(Variant::Baseline))
        .fold(f64::INFINITY, f64::min);
    let secs = runs.iter().map(|r| r.sequential_ms).sum::<u128>() as f64 / 1000.0;
    v.record(
        "C6 contextual beats baseline on 2-hop",
        seq >= base + 0.15 && min_gain >= 0.05 && secs <= 300.0,
        format!(
            "mean seq {:.1} vs base {:.1} (gain {:.1}, need 15), min per-seed gain {:.1} (need 5), {secs:.0}s (limit 300s)",
            100.0 * seq,
            100.0 * base,
            100.0 * (seq - base),
            100.0 * min_gain
        ),
    );
    v.record(
        "C7 sequential beats parallel",
        seq >= par + 0.05,
        format!("mean seq {:.1} vs par {:.1} (need +5)", 100.0 * seq, 100.0 * par),
    );
    v.record(
        "C8 held-out chains still gain",
        gen >= base + 0.03 && gen < seq,
        format!(
            "mean held-out {:.1}, base {:.1} (need +3), full {:.1} (must stay below)",
            100.0 * gen,
            100.0 * base,
            100.0 * seq
        ),
    );
}

fn criterion_edit_quality(v: &mut Verdicts, runs: &[SeedRun], batch200: f64) {
    let mut ok = true;
    let mut worst_eff: f64 = 1.0;
    let mut worst_para_gap: f64 = 0.0;
    let mut worst_spec_drop: f64 = 0.0;
    for r in runs {
        let rep = r.report(Variant::KeditSequential);
        let eff: &Metric = &rep.efficacy;
        worst_eff = worst_eff.min(eff.value);
        worst_para_gap = worst_para_gap.max(eff.value - rep.paraphrase.value);
        worst_spec_drop = worst_spec_drop.max(rep.specificity_pre.value - rep.specificity.value);
    }
    ok &= worst_eff >= 0.95 && worst_para_gap <= 0.10 && worst_spec_drop <= 0.05 && batch200 >= 0.90;
    v.record(
        "C9 edit quality",
        ok,
        format!(
            "batch 50 worst efficacy {:.1} (need 95), paraphrase gap {:.1} (max 10), specificity drop {:.1} (max 5); batch 200 efficacy {:.1} (need 90)",
            100.0 * worst_eff,
            100.0 * worst_para_gap,
            100.0 * worst_spec_drop,
            100.0 * batch200
        ),
    );
}

fn batch200_efficacy(out: &Path) -> f64 {
    let mut config = desk_config(1, out);
    config.edits.n_edits = 200;
    let prep = prepare(&config).unwrap();
    let (edited, _, _) = run_variant(&config, &prep, Variant::KeditSequential).unwrap();
    efficacy(&edited, &prep.edits).unwrap().value
}

fn criterion_determinism(v: &mut Verdicts, first: &Path, second: &Path) {
    cmd_pipeline(&desk_config(1, second), false).expect("rerun");
    let mut identical = 0;
    for variant in Variant::ALL {
        let name = format!("report_{}.json", variant.label());
        let a = std::fs::read(first.join("seed-1").join(&name)).unwrap();
        let b = std::fs::read(second.join("seed-1").join(&name)).unwrap();
        identical += (a == b) as usize;
    }
    v.record(
        "C11 byte-identical reports on rerun",
        identical == Variant::ALL.len(),
        format!("{identical}/{} report files identical", Variant::ALL.len()),
    );
}

fn main() {
    let mut v = Verdicts { lines: vec![] };
    criterion_solver(&mut v);
    criterion_gradient(&mut v);
    criterion_telescoping(&mut v);
    criterion_propagation(&mut v);
    criterion_templates(&mut v);

    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let runs: Vec<SeedRun> = MASTER_SEEDS.iter().map(|&s| run_seed(s, &first)).collect();
    criteria_directional(&mut v, &runs);
    let eff200 = batch200_efficacy(&dir.path().join("batch200"));
    criterion_edit_quality(&mut v, &runs, eff200);
    criterion_harmonic(&mut v);
    criterion_determinism(&mut v, &first, &dir.path().join("second"));

    v.lines.sort_by_key(|(line, _)| {
        let id = line.split_whitespace().nth(1).unwrap_or("").trim_start_matches('C').to_string();
        id.parse::<u32>().unwrap_or(0)
    });
    println!("\nacceptance summary:");
    for (line, _) in &v.lines {
        println!("{line}");
    }
    let failed = v.lines.iter().filter(|(_, pass)| !pass).count();
    println!("{} of {} criteria passed", v.lines.len() - failed, v.lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
