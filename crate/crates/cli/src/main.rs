//! `kedit`: command-line driver for knowledge-graph-driven model editing.
//!
//! Every command reads one JSON experiment config (`--config`), optionally
//! overridden by `--seed` and `--out`. Environment variables are never
//! consulted, so a config file plus the command line fully determine a run.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use kedit_core::context::{edit_requests, export_contextual, get_contextual_edits, load_edit_batch, save_edit_batch};
use kedit_core::orchestrator::{run_baseline, run_kedit, Method, Order, RunManifest};
use kedit_core::pipeline::{
    build_eval_set, build_graph, calibration_table, cmd_calibrate, cmd_pipeline, evaluate, load_templates,
    sample_edits, seed_model, ExperimentConfig, PipelineError, Prepared, SweepSpec,
};
use kedit_core::report::show_report_files;
use kedit_core::{EntityId, KnowledgeGraph, ModelParams, RelationId, TemplateRegistry};

#[derive(Debug, Parser)]
#[command(name = "kedit", version, about = "Knowledge-graph-driven contextual model editing")]
struct Cli {
    /// Experiment config (JSON). Defaults to the desk configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Reuse artifacts of stages that already finished.
    #[arg(long, global = true)]
    resume: bool,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    show_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Knowledge-graph utilities.
    #[command(subcommand)]
    Kg(KgCommand),
    /// Model utilities.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Apply an edit batch to a seeded model.
    #[command(subcommand)]
    Edit(EditCommand),
    /// Evaluate an edited model.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Print comparison tables for report files.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Sweep graph size, width and batch size for the interference regime.
    Calibrate {
        /// Sweep spec (JSON with `n_facts`, `d`, `batch_size` lists).
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Run every stage and variant end to end.
    Pipeline,
    /// Template utilities.
    #[command(subcommand)]
    Templates(TemplatesCommand),
}

#[derive(Debug, Subcommand)]
enum KgCommand {
    /// Generate the synthetic graph and a sampled edit batch.
    Gen,
    /// Print the contextual edits a batch compiles to, as JSONL.
    EditPreview {
        #[command(flatten)]
        files: Files,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long)]
        fanout: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
enum ModelCommand {
    /// Seed a fresh model with every stored fact.
    Seed {
        #[command(flatten)]
        files: Files,
    },
}

#[derive(Debug, Subcommand)]
enum EditCommand {
    /// Edit the seeded model and print the run manifest.
    Apply {
        #[command(flatten)]
        files: Files,
        #[arg(long, default_value = "kedit")]
        method: Method,
        #[arg(long, default_value = "sequential")]
        order: Order,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        fanout: Option<usize>,
        /// JSON list of `[entity, relation]` label pairs excluded from
        /// contextual compilation.
        #[arg(long)]
        holdout: Option<PathBuf>,
        /// Where to write the edited model.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Score an edited model and print the report JSON.
    Run {
        #[command(flatten)]
        files: Files,
        /// Edited model checkpoint.
        #[arg(long)]
        edited: PathBuf,
        /// Variant label recorded in the report.
        #[arg(long, default_value = "custom")]
        label: String,
    },
}

#[derive(Debug, Subcommand)]
enum TemplatesCommand {
    /// Check that every relation of the graph has a template pair.
    Check {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
}

/// Artifact locations; each defaults to a file in the output directory.
#[derive(Debug, Args)]
struct Files {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    edits: Option<PathBuf>,
    /// Seeded (pre-edit) model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl Files {
    fn graph(&self, out: &Path) -> PathBuf {
        self.graph.clone().unwrap_or_else(|| out.join("graph.jsonl"))
    }

    fn edits(&self, out: &Path) -> PathBuf {
        self.edits.clone().unwrap_or_else(|| out.join("edits.jsonl"))
    }

    fn model(&self, out: &Path) -> PathBuf {
        self.model.clone().unwrap_or_else(|| out.join("model_pre.json"))
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn load_graph(path: &Path) -> Result<KnowledgeGraph> {
    KnowledgeGraph::load(path).with_context(|| format!("loading graph {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelParams> {
    ModelParams::load_checkpoint(path).with_context(|| format!("loading model {}", path.display()))
}

fn parse_holdout(path: &Path, graph: &KnowledgeGraph) -> Result<BTreeSet<(EntityId, RelationId)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let pairs: Vec<(String, String)> = serde_json::from_str(&text).context("holdout must be a list of pairs")?;
    pairs
        .iter()
        .map(|(e, r)| {
            let entity = graph.entity_by_label(e).ok_or_else(|| anyhow!("unknown entity {e:?}"))?;
            let relation = graph.relation_by_label(r).ok_or_else(|| anyhow!("unknown relation {r:?}"))?;
            Ok((entity, relation))
        })
        .collect()
}

fn prepared(config: &ExperimentConfig, files: &Files) -> Result<Prepared> {
    let out = config.out_dir.as_path();
    let graph = load_graph(&files.graph(out))?;
    let templates = load_templates(config, &graph)?;
    let model = load_model(&files.model(out))?;
    let edits = load_edit_batch(&files.edits(out), &graph)?;
    let graph_post = graph.apply_edits(&edits)?;
    let eval_set = build_eval_set(config, &graph, &graph_post, &edits, &templates);
    let seed_recall = kedit_core::model::one_hop_recall(&model, &graph)?;
    Ok(Prepared {
        graph,
        graph_post,
        templates,
        model,
        seed_recall,
        edits,
        eval_set,
    })
}

fn run(cli: Cli) -> Result<()> {
    let config = resolve_config(&cli)?;
    if cli.show_config {
        println!("{}", config.to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no command given; see --help");
    };
    let out = config.out_dir.clone();
    match command {
        Command::Kg(KgCommand::Gen) => {
            fs::create_dir_all(&out)?;
            let graph = build_graph(&config)?;
            graph.save(&out.join("graph.jsonl"))?;
            let edits = sample_edits(&config, &graph);
            save_edit_batch(&edits, &graph, &out.join("edits.jsonl"))?;
            println!(
                "graph {} ({} entities, {} relations, {} facts), {} edits in {}",
                graph.content_hash(),
                graph.n_entities(),
                graph.n_relations(),
                graph.triples().len(),
                edits.len(),
                out.display()
            );
        }
        Command::Kg(KgCommand::EditPreview { files, depth, fanout }) => {
            let graph = load_graph(&files.graph(&out))?;
            let templates = load_templates(&config, &graph)?;
            let edits = load_edit_batch(&files.edits(&out), &graph)?;
            let post = graph.apply_edits(&edits)?;
            let requests = edit_requests(&edits, &graph, &templates)?;
            let compiled = get_contextual_edits(
                &requests,
                &post,
                &templates,
                depth,
                fanout.unwrap_or(config.run.fanout),
                kedit_core::seeds::child_seed(config.seed("edit"), "fanout"),
                &config.run.holdout,
            )?;
            let stdout = std::io::stdout();
            export_contextual(&compiled, &post, stdout.lock())?;
        }
        Command::Model(ModelCommand::Seed { files }) => {
            let graph = load_graph(&files.graph(&out))?;
            let (model, recall) = seed_model(&config, &graph)?;
            let path = files.model(&out);
            model.save_checkpoint(&path)?;
            println!("seeded {} facts, recall {:.3}, wrote {}", graph.forward_index().len(), recall, path.display());
        }
        Command::Edit(EditCommand::Apply {
            files,
            method,
            order,
            depth,
            fanout,
            holdout,
            output,
        }) => {
            let graph = load_graph(&files.graph(&out))?;
            let templates = load_templates(&config, &graph)?;
            let model = load_model(&files.model(&out))?;
            let edits = load_edit_batch(&files.edits(&out), &graph)?;
            let mut run_config = config.run_config(method, order);
            if let Some(d) = depth {
                run_config.depth = d;
            }
            if let Some(f) = fanout {
                run_config.fanout = f;
            }
            if let Some(p) = holdout {
                run_config.holdout.extend(parse_holdout(&p, &graph)?);
            }
            let start = std::time::Instant::now();
            let (edited, rounds, counts) = match method {
                Method::Baseline => {
                    let (m, round) = run_baseline(&model, &graph, &edits, &run_config)?;
                    (m, vec![round], vec![])
                }
                Method::Kedit => {
                    let outcome = run_kedit(&model, &graph, &edits, &templates, &run_config)?;
                    let counts = outcome.contextual_counts();
                    (outcome.params, outcome.rounds, counts)
                }
            };
            let edit_ms = kedit_core::orchestrator::elapsed_ms(start);
            let path = output.unwrap_or_else(|| out.join("model_post.json"));
            edited.save_checkpoint(&path)?;
            let manifest = RunManifest {
                config: run_config,
                graph_hash: graph.content_hash(),
                model_pre: files.model(&out).display().to_string(),
                model_post: path.display().to_string(),
                contextual_counts: counts,
                rounds,
                timings_ms: [("edit".to_string(), edit_ms)].into(),
            };
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Eval(EvalCommand::Run { files, edited, label }) => {
            let prep = prepared(&config, &files)?;
            let model = load_model(&edited)?;
            let report = evaluate(&config, &prep, &model, &label, vec![])?;
            print!("{}", report.to_json());
        }
        Command::Report { reports } => {
            print!("{}", show_report_files(&reports)?);
        }
        Command::Calibrate { sweep } => {
            let spec = match sweep {
                Some(p) => serde_json::from_str(&fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing sweep {}", p.display()))?,
                None => SweepSpec::default(),
            };
            let rows = cmd_calibrate(&config, &spec)?;
            print!("{}", calibration_table(&rows));
        }
        Command::Pipeline => {
            let outcome = cmd_pipeline(&config, cli.resume)?;
            print!("{}", kedit_core::report::show_tables(&outcome.reports)?);
            println!("\nartifacts in {}", outcome.run_dir.display());
        }
        Command::Templates(TemplatesCommand::Check { graph, templates }) => {
            let graph = load_graph(&graph.unwrap_or_else(|| out.join("graph.jsonl")))?;
            let registry = match templates {
                Some(p) => TemplateRegistry::load(&p, &graph)?,
                None => TemplateRegistry::generic_for(&graph),
            };
            let missing = registry.missing_for(&graph);
            if !missing.is_empty() {
                bail!("missing templates for relations: {}", missing.join(", "));
            }
            println!(
                "{} relations covered by {} template strings",
                graph.n_relations(),
                registry.template_count()
            );
        }
    }
    Ok(())
}

/// Nonzero exit code per pipeline stage, so scripts can tell failures apart.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<PipelineError>().map(PipelineError::stage) {
        Some("config") => 2,
        Some("kg") => 3,
        Some("templates") => 4,
        Some("model") => 5,
        Some("edits") => 6,
        Some("edit") => 7,
        Some("eval") => 8,
        Some("report") => 9,
        Some(_) => 10,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
