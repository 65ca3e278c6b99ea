//! End-to-end tests of the `kedit` binary on a small configuration.

use std::path::Path;
use std::process::{Command, Output};

use kedit_core::kg::SyntheticConfig;
use kedit_core::pipeline::{ExperimentConfig, ModelShape};
use kedit_core::report::MetricsReport;

fn small_config(out: &Path) -> ExperimentConfig {
    let mut config = ExperimentConfig {
        graph: SyntheticConfig {
            n_entities: 60,
            n_relations: 4,
            n_facts: 150,
            seed: 0,
        },
        model: ModelShape {
            d: 32,
            d_r: 8,
            d_k: 256,
            ..ModelShape::default()
        },
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    config.edits.n_edits = 5;
    config.eval.n_per_hopcount = 10;
    config
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, small_config(&dir.join("out")).to_json()).unwrap();
    path
}

fn kedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kedit")).args(args).output().unwrap()
}

fn ok(output: Output) -> String {
    assert!(
        output.status.success(),
        "status {:?}\nstderr: {}",
        output.status,
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout).unwrap()
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let text = ok(kedit(&["--config", config.to_str().unwrap(), "--seed", "4", "--show-config"]));
    let parsed = ExperimentConfig::from_json(&text).unwrap();
    assert_eq!(parsed.master_seed, 4);
    assert_eq!(parsed.graph.n_entities, 60);
}

#[test]
fn stepwise_commands_share_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let c = config.to_str().unwrap();
    let out = dir.path().join("out");

    let gen = ok(kedit(&["--config", c, "kg", "gen"]));
    assert!(gen.contains("5 edits"), "{gen}");
    assert!(out.join("graph.jsonl").exists() && out.join("edits.jsonl").exists());

    let check = ok(kedit(&["--config", c, "templates", "check"]));
    assert!(check.contains("4 relations covered by 8 template strings"), "{check}");

    let preview = ok(kedit(&["--config", c, "kg", "edit-preview"]));
    for line in preview.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }

    ok(kedit(&["--config", c, "model", "seed"]));
    assert!(out.join("model_pre.json").exists());

    let manifest = ok(kedit(&["--config", c, "edit", "apply", "--method", "baseline"]));
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(manifest["config"]["method"], "baseline");

    let edited = out.join("model_post.json");
    let report = ok(kedit(&[
        "--config",
        c,
        "eval",
        "run",
        "--edited",
        edited.to_str().unwrap(),
        "--label",
        "baseline",
    ]));
    let report: MetricsReport = serde_json::from_str(&report).unwrap();
    assert_eq!(report.metadata.variant, "baseline");
    assert_eq!(report.metadata.n_edits, 5);
}

#[test]
fn pipeline_resume_reuses_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let c = config.to_str().unwrap();
    let tables = ok(kedit(&["--config", c, "pipeline"]));
    assert!(tables.contains("kedit-sequential"), "{tables}");
    let run_dir = dir.path().join("out").join("seed-1");
    let first = std::fs::read(run_dir.join("report_kedit-parallel.json")).unwrap();

    ok(kedit(&["--config", c, "--resume", "pipeline"]));
    assert_eq!(std::fs::read(run_dir.join("report_kedit-parallel.json")).unwrap(), first);

    let report = run_dir.join("report_baseline.json");
    let table = ok(kedit(&["report", report.to_str().unwrap()]));
    assert!(table.contains("baseline"), "{table}");
}

#[test]
fn failures_map_to_stage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(kedit(&["--config", bad.to_str().unwrap(), "pipeline"]).status.code(), Some(2));

    let config = write_config(dir.path());
    let missing = kedit(&["--config", config.to_str().unwrap(), "model", "seed"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("graph.jsonl"));

    assert_eq!(kedit(&[]).status.code(), Some(1));
}
