//! Command-line entry points: thin wrappers over the plan, harness,
//! dataset, and report modules — running a command is identical to calling
//! the underlying operation with the same plan.
//!
//! Plans are files; flags exist for ergonomics only. Sugar flags
//! (`--model`, `--seed`, `--eval-seed`, `--workers`, `--output`) rewrite
//! the corresponding plan fields, then `--set key=value` overrides apply
//! in order; unknown keys are rejected before any work starts.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure (including
//! a run that finished above the skip threshold — its outputs are still on
//! disk). Successful runs print the output directory and the plan hash;
//! `--json` switches both results (stdout) and errors (stderr) to
//! machine-readable JSON objects.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use ldmrb_core::adapter::{ModelDescriptor, ModelKind, ModuleTarget};
use ldmrb_core::dataset::{build_inpainting_dataset, build_variation_dataset, PipelineConfig};
use serde_json::{json, Value};

use crate::corpus::{load_coco_corpus, synthesize_corpus, CorpusPaths};
use crate::harness::{HarnessError, Runner};
use crate::manifest::{self, import_review, MANIFEST_FILE};
use crate::models;
use crate::plan::{self, ExperimentPlan};
use crate::report;

/// Robustness benchmarking for latent-diffusion image editors.
#[derive(Debug, Parser)]
#[command(name = "ldmrb", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Emit results (stdout) and errors (stderr) as JSON objects.
    #[arg(long, global = true)]
    json: bool,
    /// Progress detail on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

/// Plan selection and override flags shared by the experiment commands.
#[derive(Debug, Args)]
struct PlanArgs {
    /// Experiment plan file (JSON).
    #[arg(long)]
    plan: PathBuf,
    /// Replace the source model: a builtin spec (`toy:<seed>:<channels>:<steps>`,
    /// `toy-inpaint:...`, or the `toy` / `toy-inpaint` shorthands) or a
    /// checkpoint path.
    #[arg(long)]
    model: Option<String>,
    /// Base seed; propagates to every seeded operation.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation-time seed (defaults to a value derived from the base seed).
    #[arg(long)]
    eval_seed: Option<u64>,
    /// Worker threads for per-item parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (relative paths resolve under $LDMRB_OUTPUT_DIR).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Plan field override, dotted-path key=value; repeatable, applied in
    /// order after the sugar flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransferKind {
    Prompt,
    Model,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetMode {
    Variation,
    Inpainting,
}

#[derive(Debug, Args)]
struct BuildDatasetArgs {
    /// Corpus directory: instances.json, captions.json, images/.
    #[arg(long)]
    corpus: PathBuf,
    /// Which benchmark to build.
    #[arg(long, value_enum)]
    mode: DatasetMode,
    /// Prompt-expansion client: `mock`, `replay:<path>`, or `exec:<command>`.
    #[arg(long, default_value = "mock")]
    llm: String,
    /// Transcript file recording (and later replaying) every LLM exchange.
    #[arg(long)]
    llm_cache: Option<PathBuf>,
    /// Output dataset directory (manifest + copied images/masks).
    #[arg(long)]
    out: PathBuf,
    /// Image/text agreement scorer id.
    #[arg(long, default_value = "mock-scorer")]
    scorer: String,
    /// Editor used to rank candidate prompts by edit quality.
    #[arg(long, default_value = "toy:0:4:2")]
    model: String,
    /// First generate a synthetic corpus of this many images into --corpus.
    #[arg(long, value_name = "N")]
    synthesize: Option<usize>,
    /// Ranking (and synthesis) seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of the corpus kept by image ranking, in (0, 1].
    #[arg(long)]
    fraction: Option<f64>,
    /// Captions expanded per selected image.
    #[arg(long)]
    captions_per_image: Option<usize>,
    /// Prompts kept per item after edit-quality ranking.
    #[arg(long)]
    final_prompts: Option<usize>,
    /// Denoising steps for the ranking edits.
    #[arg(long)]
    rank_steps: Option<usize>,
    /// Inpainting crop output side length.
    #[arg(long)]
    crop_size: Option<usize>,
    /// Apply a review file ({"approved": [ids...]}) to the written manifest.
    #[arg(long)]
    review: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Craft (or load) one adversarial example for a module and item.
    Attack {
        #[command(flatten)]
        plan: PlanArgs,
        /// Target module or process group (e.g. `encoder`, `self-attn`, `unet`).
        #[arg(long)]
        module: String,
        /// Manifest item id; defaults to the first item.
        #[arg(long)]
        item: Option<u64>,
    },
    /// White-box sweep: every module, plus Gaussian and Benign baselines.
    Sweep {
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Prompt- and/or model-transfer evaluation.
    Transfer {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, value_enum, default_value_t = TransferKind::Both)]
        kind: TransferKind,
    },
    /// Defended evaluation: every plan defense over every module.
    Defend {
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Build a variation or inpainting benchmark from a COCO-format corpus.
    BuildDataset(BuildDatasetArgs),
    /// Re-render report.{csv,md} (and normalize report.json) in a run directory.
    Report {
        /// Run directory holding report.json.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Check a plan end to end: fields, dataset, clients, models.
    Validate {
        #[command(flatten)]
        plan: PlanArgs,
    },
}

/// A command failure with its exit-code class.
#[derive(Debug)]
enum CliError {
    /// Bad inputs, detected before (or instead of) doing work → exit 1.
    Validation(String),
    /// The work itself failed → exit 2.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

/// Splits harness failures into validation (bad plan or dataset) and
/// runtime (the run itself broke, or broke the skip threshold).
fn classify(err: HarnessError) -> CliError {
    match err {
        HarnessError::Plan(_) | HarnessError::Manifest(_) | HarnessError::EmptyDataset(_) => {
            CliError::Validation(err.to_string())
        }
        other => CliError::Runtime(other.to_string()),
    }
}

/// A successful command: JSON payload plus the plain-text lines.
struct Outcome {
    payload: Value,
    human: Vec<String>,
}

/// Parses argv, runs the command, prints the result, returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();

    match execute(&cli.command) {
        Ok(outcome) => {
            if cli.json {
                println!("{}", outcome.payload);
            } else {
                for line in &outcome.human {
                    println!("{line}");
                }
            }
            0
        }
        Err(err) => {
            if cli.json {
                eprintln!("{}", json!({ "error": err.message(), "kind": err.kind() }));
            } else {
                eprintln!("error: {}", err.message());
            }
            err.code()
        }
    }
}

fn execute(command: &Command) -> Result<Outcome, CliError> {
    match command {
        Command::Attack { plan, module, item } => cmd_attack(plan, module, *item),
        Command::Sweep { plan } => cmd_sweep(plan),
        Command::Transfer { plan, kind } => cmd_transfer(plan, *kind),
        Command::Defend { plan } => cmd_defend(plan),
        Command::BuildDataset(args) => cmd_build_dataset(args),
        Command::Report { dir } => cmd_report(dir),
        Command::Validate { plan } => cmd_validate(plan),
    }
}

// ---------------------------------------------------------------------------
// Plan loading
// ---------------------------------------------------------------------------

/// Turns a `--model` argument into a full descriptor: builtin specs (and
/// the bare `toy` / `toy-inpaint` shorthands) become toy editors, anything
/// else is treated as a checkpoint path.
fn model_descriptor_from_spec(spec: &str) -> Result<ModelDescriptor, CliError> {
    let expanded = match spec {
        "toy" => "toy:0:4:2",
        "toy-inpaint" => "toy-inpaint:0:4:2",
        other => other,
    };
    match models::parse_builtin(expanded) {
        Some(Ok(builtin)) => builtin
            .descriptor()
            .map_err(|e| CliError::Validation(e.to_string())),
        Some(Err(e)) => Err(CliError::Validation(e.to_string())),
        None => {
            let model_id = Path::new(spec)
                .file_name()
                .map_or_else(|| spec.to_string(), |n| n.to_string_lossy().into_owned());
            let kind = if spec.contains("inpaint") {
                ModelKind::Inpainting
            } else {
                ModelKind::Variation
            };
            Ok(ModelDescriptor {
                model_id,
                kind,
                weights: spec.to_string(),
                revision: String::new(),
            })
        }
    }
}

fn set_field(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    root.as_object_mut()
        .ok_or_else(|| CliError::Validation("plan root must be a JSON object".to_string()))?
        .insert(key.to_string(), value);
    Ok(())
}

/// Loads the plan file and applies sugar flags, then `--set` overrides, in
/// that order. Unknown keys fail here, before any work starts.
fn load_plan(args: &PlanArgs) -> Result<ExperimentPlan, CliError> {
    let mut root =
        plan::load_plan_value(&args.plan).map_err(|e| CliError::Validation(e.to_string()))?;
    if let Some(spec) = &args.model {
        let descriptor = model_descriptor_from_spec(spec)?;
        let value = serde_json::to_value(&descriptor)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        set_field(&mut root, "source_model", value)?;
    }
    if let Some(seed) = args.seed {
        set_field(&mut root, "seed", json!(seed))?;
    }
    if let Some(eval_seed) = args.eval_seed {
        set_field(&mut root, "eval_seed", json!(eval_seed))?;
    }
    if let Some(workers) = args.workers {
        set_field(&mut root, "workers", json!(workers))?;
    }
    if let Some(output) = &args.output {
        set_field(&mut root, "output_dir", json!(output.to_string_lossy()))?;
    }
    for assignment in &args.set {
        plan::apply_override(&mut root, assignment)
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    plan::plan_from_value(root).map_err(|e| CliError::Validation(e.to_string()))
}

fn module_from_name(name: &str) -> Result<ModuleTarget, CliError> {
    serde_json::from_value(Value::String(name.to_string())).map_err(|_| {
        CliError::Validation(format!(
            "unknown module '{name}' (modules: encoder, quant, resnet, self-attn, \
             cross-attn, feed-forward, post-quant, decoder; groups: encoding, unet, decoding)"
        ))
    })
}

fn footer(runner: &Runner) -> [String; 2] {
    [
        format!("output directory: {}", runner.out_dir().display()),
        format!("plan hash: {}", runner.plan_hash()),
    ]
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_attack(args: &PlanArgs, module: &str, item: Option<u64>) -> Result<Outcome, CliError> {
    let module = module_from_name(module)?;
    let plan = load_plan(args)?;
    let runner = Runner::new(plan).map_err(classify)?;
    let item_id = match item {
        Some(id) => id,
        None => runner.items()[0].row.image_id,
    };
    log::info!("crafting {} adversary for item {item_id}", module.name());
    let (path, sidecar) = runner
        .run_single_attack(module, item_id)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let [dir_line, hash_line] = footer(&runner);
    Ok(Outcome {
        payload: json!({
            "command": "attack",
            "artifact": path.to_string_lossy(),
            "sidecar": sidecar,
            "output_dir": runner.out_dir().to_string_lossy(),
            "plan_hash": runner.plan_hash(),
        }),
        human: vec![
            format!("adversarial example: {}", path.display()),
            format!("condition: {} (item {})", sidecar.condition, sidecar.item_id),
            format!("linf: {}", sidecar.linf_norm),
            dir_line,
            hash_line,
        ],
    })
}

fn cmd_sweep(args: &PlanArgs) -> Result<Outcome, CliError> {
    let plan = load_plan(args)?;
    let runner = Runner::new(plan).map_err(classify)?;
    log::info!(
        "white-box sweep: {} modules over {} items",
        runner.plan().modules.len(),
        runner.items().len()
    );
    let results = runner.whitebox_sweep().map_err(classify)?;
    let [dir_line, hash_line] = footer(&runner);
    Ok(Outcome {
        payload: json!({
            "command": "sweep",
            "conditions": results
                .iter()
                .map(|r| json!({
                    "condition": r.display_label,
                    "items": r.items.len(),
                    "clip": r.report.clip,
                }))
                .collect::<Vec<_>>(),
            "report": runner.out_dir().join("report.md").to_string_lossy(),
            "output_dir": runner.out_dir().to_string_lossy(),
            "plan_hash": runner.plan_hash(),
        }),
        human: vec![
            format!(
                "white-box sweep: {} conditions over {} items",
                results.len(),
                runner.items().len()
            ),
            format!("report: {}", runner.out_dir().join("report.md").display()),
            dir_line,
            hash_line,
        ],
    })
}

fn cmd_transfer(args: &PlanArgs, kind: TransferKind) -> Result<Outcome, CliError> {
    let plan = load_plan(args)?;
    let distinct_models = {
        let mut labels = vec![models::model_label(&plan.source_model)];
        for target in &plan.target_models {
            let label = models::model_label(target);
            if !labels.contains(&label) {
                labels.push(label);
            }
        }
        labels.len()
    };
    if kind == TransferKind::Model && distinct_models < 2 {
        return Err(CliError::Validation(
            "model transfer needs target_models distinct from the source model".to_string(),
        ));
    }
    let runner = Runner::new(plan).map_err(classify)?;
    let mut human = Vec::new();
    let mut payload = json!({
        "command": "transfer",
        "output_dir": runner.out_dir().to_string_lossy(),
        "plan_hash": runner.plan_hash(),
    });

    if matches!(kind, TransferKind::Prompt | TransferKind::Both) {
        log::info!("prompt-transfer circulation over {} items", runner.items().len());
        let results = runner.prompt_transfer_eval().map_err(classify)?;
        payload["prompt_transfer"] = json!({
            "conditions": results.len(),
            "report": runner.out_dir().join("report.md").to_string_lossy(),
        });
        human.push(format!(
            "prompt transfer: {} conditions, report {}",
            results.len(),
            runner.out_dir().join("report.md").display()
        ));
    }
    if matches!(kind, TransferKind::Model | TransferKind::Both) {
        if distinct_models < 2 {
            payload["model_transfer"] =
                json!({ "skipped": "no target models distinct from the source" });
            human.push(
                "model transfer skipped: no target models distinct from the source".to_string(),
            );
        } else {
            log::info!("model-transfer matrix over {distinct_models} models");
            let matrix = runner.model_transfer_eval().map_err(classify)?;
            payload["model_transfer"] = json!({
                "models": matrix.eval_models,
                "cells": matrix.cells.len(),
                "matrix": runner.out_dir().join("transfer.md").to_string_lossy(),
            });
            human.push(format!(
                "model transfer: {} cells, matrix {}",
                matrix.cells.len(),
                runner.out_dir().join("transfer.md").display()
            ));
        }
    }

    let [dir_line, hash_line] = footer(&runner);
    human.push(dir_line);
    human.push(hash_line);
    Ok(Outcome { payload, human })
}

fn cmd_defend(args: &PlanArgs) -> Result<Outcome, CliError> {
    let plan = load_plan(args)?;
    if plan.defenses.is_empty() {
        return Err(CliError::Validation(
            "the plan lists no defenses; add entries like \
             {\"variant\": \"jpeg\", \"params\": {\"quality\": 65}}"
                .to_string(),
        ));
    }
    let runner = Runner::new(plan).map_err(classify)?;
    log::info!(
        "defended evaluation: {} defenses over {} items",
        runner.plan().defenses.len(),
        runner.items().len()
    );
    let results = runner.defense_eval().map_err(classify)?;
    let [dir_line, hash_line] = footer(&runner);
    Ok(Outcome {
        payload: json!({
            "command": "defend",
            "conditions": results.len(),
            "report": runner.out_dir().join("report.md").to_string_lossy(),
            "output_dir": runner.out_dir().to_string_lossy(),
            "plan_hash": runner.plan_hash(),
        }),
        human: vec![
            format!(
                "defended evaluation: {} defenses, {} conditions",
                runner.plan().defenses.len(),
                results.len()
            ),
            format!("report: {}", runner.out_dir().join("report.md").display()),
            dir_line,
            hash_line,
        ],
    })
}

fn cmd_build_dataset(args: &BuildDatasetArgs) -> Result<Outcome, CliError> {
    if let Some(n) = args.synthesize {
        if n == 0 {
            return Err(CliError::Validation(
                "--synthesize needs at least 1 image".to_string(),
            ));
        }
        log::info!("synthesizing a {n}-image corpus into {}", args.corpus.display());
        synthesize_corpus(&args.corpus, n, args.seed)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let paths = CorpusPaths::under(&args.corpus);
    let corpus = load_coco_corpus(&paths).map_err(|e| CliError::Validation(e.to_string()))?;
    log::info!("loaded {} corpus records", corpus.len());

    let mut scorer = crate::clients::build_scorer(&args.scorer)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let mut llm = crate::clients::build_llm(&args.llm, args.llm_cache.as_deref())
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let descriptor = model_descriptor_from_spec(&args.model)?;
    let mut generator =
        models::load_model(&descriptor).map_err(|e| CliError::Validation(e.to_string()))?;

    let defaults = PipelineConfig::default();
    let mut crop = defaults.crop;
    if let Some(size) = args.crop_size {
        crop.output_size = size;
    }
    let config = PipelineConfig {
        image_fraction: args.fraction.unwrap_or(defaults.image_fraction),
        captions_per_image: args.captions_per_image.unwrap_or(defaults.captions_per_image),
        final_prompts: args.final_prompts.unwrap_or(defaults.final_prompts),
        rank_seed: args.seed,
        rank_steps: args.rank_steps.unwrap_or(defaults.rank_steps),
        crop,
    };
    config
        .validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;

    let items = match args.mode {
        DatasetMode::Variation => {
            let pairs = build_variation_dataset(
                &corpus,
                scorer.as_mut(),
                llm.as_mut(),
                generator.as_mut(),
                &config,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            manifest::write_variation_manifest(&args.out, &pairs, &corpus, &config)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            pairs.len()
        }
        DatasetMode::Inpainting => {
            let triplets = build_inpainting_dataset(
                &corpus,
                scorer.as_mut(),
                llm.as_mut(),
                generator.as_mut(),
                &config,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            manifest::write_inpainting_manifest(&args.out, &triplets, &config)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            triplets.len()
        }
    };

    let mut approved = None;
    if let Some(review) = &args.review {
        approved = Some(
            import_review(&args.out, review).map_err(|e| CliError::Runtime(e.to_string()))?,
        );
    }

    let manifest_path = args.out.join(MANIFEST_FILE);
    let mut human = vec![
        format!("manifest: {} ({items} items)", manifest_path.display()),
        format!("pipeline config hash: {}", manifest::config_hash(&config)),
    ];
    if let Some(count) = approved {
        human.push(format!("review import: {count} items approved"));
    }
    Ok(Outcome {
        payload: json!({
            "command": "build-dataset",
            "manifest": manifest_path.to_string_lossy(),
            "items": items,
            "config_hash": manifest::config_hash(&config),
            "approved": approved,
        }),
        human,
    })
}

fn cmd_report(dir: &Path) -> Result<Outcome, CliError> {
    let source = dir.join("report.json");
    let text = std::fs::read_to_string(&source)
        .map_err(|e| CliError::Validation(format!("{}: {e}", source.display())))?;
    let parsed = report::parse_json(&text).map_err(|e| CliError::Validation(e.to_string()))?;
    report::render_report(dir, &parsed).map_err(|e| CliError::Runtime(e.to_string()))?;
    let files: Vec<String> = ["report.csv", "report.json", "report.md"]
        .iter()
        .map(|n| dir.join(n).to_string_lossy().into_owned())
        .collect();
    Ok(Outcome {
        payload: json!({
            "command": "report",
            "sections": parsed.sections.len(),
            "files": files,
            "plan_hash": parsed.plan_hash,
        }),
        human: vec![
            format!(
                "re-rendered {} sections: {}",
                parsed.sections.len(),
                files.join(", ")
            ),
        ],
    })
}

fn cmd_validate(args: &PlanArgs) -> Result<Outcome, CliError> {
    let plan = load_plan(args)?;
    let mut checks = vec!["plan: fields and invariants ok".to_string()];

    let items = crate::manifest::load_manifest(Path::new(&plan.dataset))
        .map_err(|e| CliError::Validation(format!("dataset: {e}")))?;
    if items.is_empty() {
        return Err(CliError::Validation(format!(
            "dataset: `{}` has no items",
            plan.dataset
        )));
    }
    checks.push(format!("dataset: {} items at {}", items.len(), plan.dataset));

    models::load_model(&plan.source_model)
        .map_err(|e| CliError::Validation(format!("source model: {e}")))?;
    checks.push(format!(
        "source model: {} loads",
        models::model_label(&plan.source_model)
    ));
    let mut unavailable = Vec::new();
    for target in &plan.target_models {
        match models::load_model(target) {
            Ok(_) => checks.push(format!("target model: {} loads", models::model_label(target))),
            Err(e) => {
                checks.push(format!("target model: {} UNAVAILABLE ({e})", target.model_id));
                unavailable.push(target.model_id.clone());
            }
        }
    }

    crate::clients::build_scorer(&plan.scorer)
        .map_err(|e| CliError::Validation(format!("scorer: {e}")))?;
    crate::clients::build_extractor(&plan.extractor)
        .map_err(|e| CliError::Validation(format!("extractor: {e}")))?;
    crate::clients::build_classifier(&plan.classifier)
        .map_err(|e| CliError::Validation(format!("classifier: {e}")))?;
    checks.push(format!(
        "clients: {}, {}, {} resolve",
        plan.scorer, plan.extractor, plan.classifier
    ));

    let hash = plan.hash();
    let mut human = checks.clone();
    human.push(format!("plan hash: {hash}"));
    Ok(Outcome {
        payload: json!({
            "command": "validate",
            "checks": checks,
            "unavailable_targets": unavailable,
            "items": items.len(),
            "plan_hash": hash,
        }),
        human,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldmrb_core::dataset::DataPair;
    use crate::corpus::synthetic_records;
    use crate::manifest::write_variation_manifest;

    /// Writes a dataset and a matching plan file; returns the plan path.
    fn write_fixture(dir: &Path) -> PathBuf {
        let records = synthetic_records(2, 33);
        let pairs: Vec<DataPair> = records
            .iter()
            .map(|r| DataPair {
                image_id: r.image_id,
                file_name: r.file_name.clone(),
                prompts: r.captions.clone(),
                human_approved: false,
            })
            .collect();
        let dataset = dir.join("dataset");
        write_variation_manifest(&dataset, &pairs, &records, &PipelineConfig::default()).unwrap();

        let plan = json!({
            "dataset": dataset.to_string_lossy(),
            "source_model": {
                "model_id": "toy-var-s3-c3",
                "kind": "variation",
                "weights": "toy:3:3:2",
                "revision": "",
            },
            "modules": ["encoder"],
            "attack": { "iterations": 2, "attack_diffusion_steps": 2 },
            "inference_steps": 2,
            "output_dir": dir.join("out").to_string_lossy(),
        });
        let path = dir.join("plan.json");
        std::fs::write(&path, serde_json::to_string_pretty(&plan).unwrap()).unwrap();
        path
    }

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("ldmrb").chain(args.iter().copied()))
    }

    #[test]
    fn validate_passes_a_good_plan_and_rejects_a_bad_override() {
        let dir = tempfile::tempdir().unwrap();
        let plan = write_fixture(dir.path());
        let plan_s = plan.to_string_lossy();

        assert_eq!(run_args(&["validate", "--plan", &plan_s]), 0);
        // The AttackConfig invariant: ε outside [0, 1] is a validation error.
        assert_eq!(
            run_args(&["validate", "--plan", &plan_s, "--set", "attack.epsilon=1.5"]),
            1
        );
        // Unknown override keys are rejected before any work starts.
        assert_eq!(
            run_args(&["validate", "--plan", &plan_s, "--set", "atack.epsilon=0.2"]),
            1
        );
        // Unknown plan files are validation errors too.
        assert_eq!(run_args(&["validate", "--plan", "/nonexistent/plan.json"]), 1);
    }

    #[test]
    fn sweep_runs_end_to_end_and_seed_override_changes_the_hash() {
        let dir = tempfile::tempdir().unwrap();
        let plan = write_fixture(dir.path());
        let plan_s = plan.to_string_lossy();

        assert_eq!(run_args(&["sweep", "--plan", &plan_s]), 0);
        let out = dir.path().join("out");
        assert!(out.join("report.md").is_file());
        let first_hash = std::fs::read_to_string(out.join("plan_hash.txt")).unwrap();

        // Same plan, same hash; an overridden seed re-keys the whole run.
        assert_eq!(run_args(&["sweep", "--plan", &plan_s]), 0);
        assert_eq!(
            std::fs::read_to_string(out.join("plan_hash.txt")).unwrap(),
            first_hash
        );
        let out2 = dir.path().join("out2");
        assert_eq!(
            run_args(&[
                "sweep",
                "--plan",
                &plan_s,
                "--seed",
                "9",
                "--output",
                out2.to_str().unwrap(),
            ]),
            0
        );
        let second_hash = std::fs::read_to_string(out2.join("plan_hash.txt")).unwrap();
        assert_ne!(first_hash, second_hash);
    }

    #[test]
    fn identical_invocations_reproduce_reports_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        let plan = write_fixture(dir.path());
        let plan_s = plan.to_string_lossy();
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        for out in [&out_a, &out_b] {
            assert_eq!(
                run_args(&[
                    "sweep",
                    "--plan",
                    &plan_s,
                    "--seed",
                    "4",
                    "--output",
                    out.to_str().unwrap(),
                ]),
                0
            );
        }
        // Different directories, same seed: identical outputs.
        assert_eq!(
            std::fs::read(out_a.join("report.csv")).unwrap(),
            std::fs::read(out_b.join("report.csv")).unwrap()
        );
        assert_eq!(
            std::fs::read(out_a.join("report.md")).unwrap(),
            std::fs::read(out_b.join("report.md")).unwrap()
        );
    }

    #[test]
    fn attack_crafts_one_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let plan = write_fixture(dir.path());
        let plan_s = plan.to_string_lossy();
        assert_eq!(
            run_args(&["attack", "--plan", &plan_s, "--module", "decoder"]),
            0
        );
        assert!(dir
            .path()
            .join("out/adv/toy-var-s3-c3/decoder-p0/item_000001.png")
            .is_file());
        // Unknown module names fail validation.
        assert_eq!(
            run_args(&["attack", "--plan", &plan_s, "--module", "mlp"]),
            1
        );
    }

    #[test]
    fn transfer_model_kind_requires_targets() {
        let dir = tempfile::tempdir().unwrap();
        let plan = write_fixture(dir.path());
        let plan_s = plan.to_string_lossy();
        assert_eq!(
            run_args(&["transfer", "--plan", &plan_s, "--kind", "model"]),
            1
        );
        // `both` still runs the prompt leg and reports the skipped matrix.
        assert_eq!(run_args(&["transfer", "--plan", &plan_s, "--kind", "both"]), 0);
        assert!(dir.path().join("out/report.md").is_file());
        assert!(!dir.path().join("out/transfer.md").exists());
    }

    #[test]
    fn defend_requires_defenses_and_runs_with_them() {
        let dir = tempfile::tempdir().unwrap();
        let plan = write_fixture(dir.path());
        let plan_s = plan.to_string_lossy();
        assert_eq!(run_args(&["defend", "--plan", &plan_s]), 1);
        assert_eq!(
            run_args(&[
                "defend",
                "--plan",
                &plan_s,
                "--set",
                "defenses=[{\"variant\": \"jpeg\"}]",
            ]),
            0
        );
        let md = std::fs::read_to_string(dir.path().join("out/report.md")).unwrap();
        assert!(md.contains("## JPEG"));
    }

    #[test]
    fn build_dataset_synthesizes_builds_and_imports_review() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        let out = dir.path().join("bench");
        let corpus_s = corpus.to_string_lossy();
        let out_s = out.to_string_lossy();
        assert_eq!(
            run_args(&[
                "build-dataset",
                "--corpus",
                &corpus_s,
                "--mode",
                "variation",
                "--out",
                &out_s,
                "--synthesize",
                "6",
                "--fraction",
                "0.5",
                "--rank-steps",
                "2",
                "--model",
                "toy:0:3:2",
            ]),
            0
        );
        let manifest_path = out.join(MANIFEST_FILE);
        let first = std::fs::read(&manifest_path).unwrap();
        assert!(!first.is_empty());

        // Reruns are byte-identical.
        assert_eq!(
            run_args(&[
                "build-dataset",
                "--corpus",
                &corpus_s,
                "--mode",
                "variation",
                "--out",
                &out_s,
                "--synthesize",
                "6",
                "--fraction",
                "0.5",
                "--rank-steps",
                "2",
                "--model",
                "toy:0:3:2",
            ]),
            0
        );
        assert_eq!(std::fs::read(&manifest_path).unwrap(), first);

        // Review import flips the approval flags.
        let ids: Vec<u64> = std::fs::read_to_string(&manifest_path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["image_id"].as_u64().unwrap())
            .collect();
        let review = dir.path().join("review.json");
        std::fs::write(&review, json!({ "approved": [ids[0]] }).to_string()).unwrap();
        assert_eq!(
            run_args(&[
                "build-dataset",
                "--corpus",
                &corpus_s,
                "--mode",
                "variation",
                "--out",
                &out_s,
                "--fraction",
                "0.5",
                "--rank-steps",
                "2",
                "--model",
                "toy:0:3:2",
                "--review",
                review.to_str().unwrap(),
            ]),
            0
        );
        let text = std::fs::read_to_string(&manifest_path).unwrap();
        let approved: Vec<bool> = text
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["human_approved"].as_bool().unwrap())
            .collect();
        assert_eq!(approved.iter().filter(|a| **a).count(), 1);
    }

    #[test]
    fn report_rerenders_from_json() {
        let dir = tempfile::tempdir().unwrap();
        let plan = write_fixture(dir.path());
        let plan_s = plan.to_string_lossy();
        assert_eq!(run_args(&["sweep", "--plan", &plan_s]), 0);
        let out = dir.path().join("out");
        let md_before = std::fs::read(out.join("report.md")).unwrap();
        std::fs::remove_file(out.join("report.md")).unwrap();
        assert_eq!(run_args(&["report", "--dir", out.to_str().unwrap()]), 0);
        assert_eq!(std::fs::read(out.join("report.md")).unwrap(), md_before);
        // A directory without report.json is a validation error.
        assert_eq!(
            run_args(&["report", "--dir", dir.path().join("nope").to_str().unwrap()]),
            1
        );
    }

    #[test]
    fn bare_toy_model_shorthand_expands() {
        let descriptor = model_descriptor_from_spec("toy").unwrap();
        assert_eq!(descriptor.weights, "toy:0:4:2");
        assert_eq!(descriptor.kind, ModelKind::Variation);
        let descriptor = model_descriptor_from_spec("toy-inpaint").unwrap();
        assert_eq!(descriptor.kind, ModelKind::Inpainting);
        assert!(model_descriptor_from_spec("toy:0:1:1").is_err());
        let external = model_descriptor_from_spec("/weights/sd-inpaint-v1").unwrap();
        assert_eq!(external.model_id, "sd-inpaint-v1");
        assert_eq!(external.kind, ModelKind::Inpainting);
    }
}
