//! The four experiment protocols over one plan: white-box module sweep,
//! prompt-transfer circulation, model-transfer matrix, and defended
//! evaluation.
//!
//! A [`Runner`] loads the plan's manifest once and stamps every output
//! with the plan hash. Crafted adversarial examples live under
//! `adv/<model>/<condition>-p<prompt>/` as quantised PNGs with audit
//! sidecars; crafting is cache-first, so rerunning a plan with existing
//! outputs skips completed items and reproduces the final reports byte for
//! byte. Consumers always evaluate the *stored* PNG — never the in-memory
//! float image — which is what makes fresh and resumed runs identical.
//!
//! Per-item failures are recorded as skips, not run aborts; when the
//! skipped fraction of planned (condition, item) cells exceeds the plan's
//! threshold, the run fails after writing everything it has.
//!
//! Item-level parallelism uses a bounded worker pool with one model pool
//! per worker; results are keyed and sorted by item id, so the output is
//! identical regardless of schedule. Aggregation keeps per-item edits in
//! memory, which is fine at benchmark scale (hundreds of small images).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ldmrb_core::adapter::{DiffusionModel, EditRequest, ModelDescriptor, ModuleTarget};
use ldmrb_core::attack::{gaussian_baseline, pgd_attack};
use ldmrb_core::defense::{apply_defense, DefenseSpec};
use ldmrb_core::image::RgbImage;
use ldmrb_core::metrics::{
    evaluate_condition_with_reference, msssim, psnr, psnr_serde, ssim, ConditionLabels,
    FeatureExtractor, MetricsReport, ProbClassifier, ScorerClient,
};
use ldmrb_core::rng::{derive_seed, derive_seed_indexed};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{self, AdvSidecar, ArtifactError, AttackDetail};
use crate::clients;
use crate::codec::ImageJpegCodec;
use crate::imageio::{self, IoError};
use crate::manifest::{load_manifest, ManifestError, ManifestItem};
use crate::models::{self, ModelLoadError};
use crate::plan::{DefenseEntry, ExperimentPlan, FidReference, PlanError, PromptTransferLegs};
use crate::report::{self, Report, ReportError, ReportRow, ReportSection};

/// Errors from protocol runs.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Model(#[from] ModelLoadError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("metrics client: {0}")]
    Client(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("dataset `{0}` has no items")]
    EmptyDataset(String),
    #[error(
        "skipped {skipped} of {total} evaluation cells ({fraction:.1}%), over the {threshold:.1}% threshold"
    )]
    SkipThreshold {
        skipped: usize,
        total: usize,
        fraction: f64,
        threshold: f64,
    },
    #[error("harness: {0}")]
    Runtime(String),
}

/// Table row label for a module, as in the published tables.
#[must_use]
pub fn display_label(module: ModuleTarget) -> &'static str {
    match module {
        ModuleTarget::Encoder => "Encoder",
        ModuleTarget::Quant => "Quant",
        ModuleTarget::Resnet => "Resnet",
        ModuleTarget::SelfAttn => "Self Attn",
        ModuleTarget::CrossAttn => "Cross Attn",
        ModuleTarget::FeedForward => "FF",
        ModuleTarget::PostQuant => "Post Quant",
        ModuleTarget::Decoder => "Decoder",
        ModuleTarget::Encoding => "Encoding",
        ModuleTarget::Unet => "Unet",
        ModuleTarget::Decoding => "Decoding",
    }
}

/// Collapses a label into a filesystem-safe slug.
#[must_use]
pub fn sanitize_slug(label: &str) -> String {
    let mut slug: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    while slug.contains("--") {
        slug = slug.replace("--", "-");
    }
    slug.trim_matches('-').to_string()
}

/// One evaluated (condition, item, leg) cell, written to the per-condition
/// JSON-Lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRecord {
    pub item_id: u64,
    pub craft_prompt_index: usize,
    pub eval_prompt_index: usize,
    pub eval_seed: u64,
    /// Feature-distortion loss of the crafted example; absent for
    /// baselines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
    pub ssim: f64,
    pub msssim: f64,
    pub clip: f64,
    /// L∞ distance of the stored adversarial input to its original.
    pub linf: f64,
    pub plan_hash: String,
}

/// One report row with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    /// Human-facing row label (`Self Attn`, `Gaussian`, ...).
    pub display_label: String,
    /// Machine condition slug used in file names.
    pub condition: String,
    pub report: MetricsReport,
    pub items: Vec<ItemRecord>,
}

/// A recorded per-item failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub condition: String,
    pub item_id: u64,
    pub reason: String,
}

/// One cell of the model-transfer matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub module: String,
    pub craft_model: String,
    pub eval_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<MetricsReport>,
    /// Why the cell is empty (model unavailable, all items skipped).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unavailable: Option<String>,
}

/// The full source × target grid, per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub plan_hash: String,
    pub dataset: String,
    pub modules: Vec<String>,
    pub craft_models: Vec<String>,
    pub eval_models: Vec<String>,
    pub cells: Vec<TransferCell>,
}

impl TransferMatrix {
    /// Looks up one cell.
    #[must_use]
    pub fn cell(&self, module: &str, craft: &str, eval: &str) -> Option<&TransferCell> {
        self.cells.iter().find(|c| {
            c.module == module && c.craft_model == craft && c.eval_model == eval
        })
    }
}

// ---------------------------------------------------------------------------
// Model pool
// ---------------------------------------------------------------------------

/// Per-worker cache of loaded models, keyed by descriptor id. Model
/// handles are not shared across threads; each worker builds its own.
#[derive(Default)]
pub struct ModelPool {
    models: BTreeMap<String, Box<dyn DiffusionModel>>,
}

impl ModelPool {
    #[must_use]
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads (or reuses) the model for a descriptor.
    pub fn get(
        &mut self,
        descriptor: &ModelDescriptor,
    ) -> Result<&mut Box<dyn DiffusionModel>, String> {
        if !self.models.contains_key(&descriptor.model_id) {
            let model = models::load_model(descriptor).map_err(|e| e.to_string())?;
            self.models.insert(descriptor.model_id.clone(), model);
        }
        Ok(self
            .models
            .get_mut(&descriptor.model_id)
            .expect("inserted above"))
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

struct CraftOutput {
    /// The stored, quantised adversarial input.
    image: RgbImage,
    linf: f64,
    final_loss: Option<f64>,
}

/// Executes protocols for one plan.
pub struct Runner {
    plan: ExperimentPlan,
    plan_hash: String,
    out_dir: PathBuf,
    items: Vec<ManifestItem>,
    source_label: String,
}

impl Runner {
    /// Validates the plan, loads the manifest, and stamps the output
    /// directory with `plan.json` and `plan_hash.txt`.
    pub fn new(plan: ExperimentPlan) -> Result<Self, HarnessError> {
        plan.validate()?;
        let mut items = load_manifest(Path::new(&plan.dataset))?;
        if items.is_empty() {
            return Err(HarnessError::EmptyDataset(plan.dataset.clone()));
        }
        items.sort_by_key(|item| item.row.image_id);

        let plan_hash = plan.hash();
        let out_dir = plan.resolve_output_dir();
        fs::create_dir_all(&out_dir).map_err(|e| IoError::file(&out_dir, e))?;
        let plan_path = out_dir.join("plan.json");
        let mut plan_json =
            serde_json::to_string_pretty(&plan).expect("plans always serialize");
        plan_json.push('\n');
        fs::write(&plan_path, plan_json).map_err(|e| IoError::file(&plan_path, e))?;
        let hash_path = out_dir.join("plan_hash.txt");
        fs::write(&hash_path, format!("{plan_hash}\n"))
            .map_err(|e| IoError::file(&hash_path, e))?;

        let source_label = models::model_label(&plan.source_model);
        Ok(Self {
            plan,
            plan_hash,
            out_dir,
            items,
            source_label,
        })
    }

    #[must_use]
    pub fn plan(&self) -> &ExperimentPlan {
        &self.plan
    }

    #[must_use]
    pub fn plan_hash(&self) -> &str {
        &self.plan_hash
    }

    #[must_use]
    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    #[must_use]
    pub fn items(&self) -> &[ManifestItem] {
        &self.items
    }

    // -- seeds ------------------------------------------------------------

    fn attack_seed(&self, item_id: u64, craft_idx: usize) -> u64 {
        derive_seed_indexed(
            derive_seed_indexed(self.plan.seed, "attack-item", item_id),
            "craft-prompt",
            craft_idx as u64,
        )
    }

    fn eval_seed(&self, item_id: u64, leg: usize) -> u64 {
        derive_seed_indexed(
            derive_seed_indexed(self.plan.effective_eval_seed(), "eval-item", item_id),
            "eval-leg",
            leg as u64,
        )
    }

    fn gaussian_seed(&self, item_id: u64) -> u64 {
        derive_seed_indexed(derive_seed(self.plan.seed, "gaussian-baseline"), "item", item_id)
    }

    fn defense_seed(entry: &DefenseEntry, item_id: u64) -> u64 {
        derive_seed_indexed(
            derive_seed(entry.seed, &entry.variant),
            "defense-item",
            item_id,
        )
    }

    // -- crafting ---------------------------------------------------------

    fn craft_dir(&self, model_label: &str, condition: &str, craft_idx: usize) -> PathBuf {
        self.out_dir
            .join("adv")
            .join(sanitize_slug(model_label))
            .join(format!("{condition}-p{craft_idx}"))
    }

    fn base_request(&self, item: &ManifestItem, prompt: &str, seed: u64) -> EditRequest {
        let mut request = EditRequest::new(item.image.clone(), prompt)
            .with_steps(self.plan.inference_steps)
            .with_strength(self.plan.strength)
            .with_guidance(self.plan.guidance)
            .with_seed(seed);
        if let Some(mask) = &item.mask {
            request = request.with_mask(mask.clone());
        }
        request
    }

    /// Loads a cached adversarial example or crafts and stores it. The
    /// returned image is always the stored (quantised) PNG content, and it
    /// is always re-validated against the budget.
    fn craft_module(
        &self,
        model: &mut dyn DiffusionModel,
        model_label: &str,
        item: &ManifestItem,
        module: ModuleTarget,
        craft_idx: usize,
    ) -> Result<CraftOutput, String> {
        let item_id = item.row.image_id;
        let dir = self.craft_dir(model_label, module.name(), craft_idx);
        if let Some((image, sidecar)) =
            artifact::load_artifact(&dir, item_id).map_err(|e| e.to_string())?
        {
            if sidecar.plan_hash == self.plan_hash {
                let linf =
                    artifact::revalidate_budget(&item.image, &image, self.plan.attack.epsilon, item_id)
                        .map_err(|e| e.to_string())?;
                return Ok(CraftOutput {
                    image,
                    linf,
                    final_loss: sidecar.attack.as_ref().map(|a| a.final_loss),
                });
            }
        }

        let prompt = item
            .row
            .prompts
            .get(craft_idx)
            .ok_or_else(|| format!("item {item_id} has no prompt {craft_idx}"))?;
        let seed = self.attack_seed(item_id, craft_idx);
        let request = self.base_request(item, prompt, seed);
        let adv = pgd_attack(model, &request, module, &self.plan.attack)
            .map_err(|e| e.to_string())?;

        let quantised = imageio::quantize_image(&adv.adversarial);
        let linf = item
            .image
            .linf_distance(&quantised)
            .map_err(|e| e.to_string())?;
        let sidecar = AdvSidecar {
            plan_hash: self.plan_hash.clone(),
            model_id: model_label.to_string(),
            item_id,
            condition: module.name().to_string(),
            prompt: prompt.clone(),
            craft_prompt_index: craft_idx,
            seed,
            linf_norm: linf,
            attack: Some(AttackDetail {
                config: self.plan.attack.clone(),
                trace: adv.trace,
                final_loss: adv.final_loss,
            }),
        };
        let stored =
            artifact::save_artifact(&dir, &quantised, &sidecar).map_err(|e| e.to_string())?;
        let linf = artifact::revalidate_budget(&item.image, &stored, self.plan.attack.epsilon, item_id)
            .map_err(|e| e.to_string())?;
        Ok(CraftOutput {
            image: stored,
            linf,
            final_loss: Some(adv.final_loss),
        })
    }

    /// The Gaussian noise baseline, cached like a crafted condition.
    fn craft_gaussian(&self, item: &ManifestItem) -> Result<CraftOutput, String> {
        let item_id = item.row.image_id;
        let dir = self.craft_dir(&self.source_label, "gaussian", 0);
        if let Some((image, sidecar)) =
            artifact::load_artifact(&dir, item_id).map_err(|e| e.to_string())?
        {
            if sidecar.plan_hash == self.plan_hash {
                let linf =
                    artifact::revalidate_budget(&item.image, &image, self.plan.attack.epsilon, item_id)
                        .map_err(|e| e.to_string())?;
                return Ok(CraftOutput {
                    image,
                    linf,
                    final_loss: None,
                });
            }
        }
        let seed = self.gaussian_seed(item_id);
        let noisy = gaussian_baseline(&item.image, self.plan.attack.epsilon, seed);
        let quantised = imageio::quantize_image(&noisy);
        let linf = item
            .image
            .linf_distance(&quantised)
            .map_err(|e| e.to_string())?;
        let sidecar = AdvSidecar {
            plan_hash: self.plan_hash.clone(),
            model_id: self.source_label.clone(),
            item_id,
            condition: "gaussian".to_string(),
            prompt: String::new(),
            craft_prompt_index: 0,
            seed,
            linf_norm: linf,
            attack: None,
        };
        let stored =
            artifact::save_artifact(&dir, &quantised, &sidecar).map_err(|e| e.to_string())?;
        let linf = artifact::revalidate_budget(&item.image, &stored, self.plan.attack.epsilon, item_id)
            .map_err(|e| e.to_string())?;
        Ok(CraftOutput {
            image: stored,
            linf,
            final_loss: None,
        })
    }

    fn edit(
        &self,
        model: &mut dyn DiffusionModel,
        item: &ManifestItem,
        input: &RgbImage,
        prompt: &str,
        seed: u64,
    ) -> Result<RgbImage, String> {
        let request = self.base_request(item, prompt, seed).with_image(input.clone());
        model
            .run_edit(&request, &[])
            .map(|output| output.image)
            .map_err(|e| e.to_string())
    }

    // -- worker pool ------------------------------------------------------

    /// Runs `worker` over every item, in parallel when the plan asks for
    /// more than one worker. Results come back sorted by item id; an `Err`
    /// value is a per-item skip reason, not a run failure.
    fn run_items<R, F>(&self, worker: F) -> Result<Vec<(u64, Result<R, String>)>, HarnessError>
    where
        R: Send,
        F: Fn(&mut ModelPool, &ManifestItem) -> Result<R, String> + Sync,
    {
        let workers = self.plan.workers.min(self.items.len()).max(1);
        let mut results: Vec<(u64, Result<R, String>)> = if workers == 1 {
            let mut pool = ModelPool::new();
            self.items
                .iter()
                .map(|item| (item.row.image_id, worker(&mut pool, item)))
                .collect()
        } else {
            let chunks: Result<Vec<_>, HarnessError> = std::thread::scope(|scope| {
                let worker = &worker;
                let items = &self.items;
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        scope.spawn(move || {
                            let mut pool = ModelPool::new();
                            items
                                .iter()
                                .enumerate()
                                .filter(|(i, _)| i % workers == w)
                                .map(|(_, item)| (item.row.image_id, worker(&mut pool, item)))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                let mut all = Vec::new();
                for handle in handles {
                    all.extend(handle.join().map_err(|_| {
                        HarnessError::Runtime("worker thread panicked".to_string())
                    })?);
                }
                Ok(all)
            });
            chunks?
        };
        results.sort_by_key(|(id, _)| *id);
        Ok(results)
    }

    // -- aggregation ------------------------------------------------------

    fn clients(
        &self,
    ) -> Result<
        (
            Box<dyn ScorerClient>,
            Box<dyn FeatureExtractor>,
            Box<dyn ProbClassifier>,
        ),
        HarnessError,
    > {
        let scorer = clients::build_scorer(&self.plan.scorer)
            .map_err(|e| HarnessError::Client(e.to_string()))?;
        let extractor = clients::build_extractor(&self.plan.extractor)
            .map_err(|e| HarnessError::Client(e.to_string()))?;
        let classifier = clients::build_classifier(&self.plan.classifier)
            .map_err(|e| HarnessError::Client(e.to_string()))?;
        Ok((scorer, extractor, classifier))
    }

    fn labels(&self, model: &str, condition: &str) -> ConditionLabels {
        ConditionLabels {
            model: model.to_string(),
            condition: condition.to_string(),
            dataset: self.plan.dataset.clone(),
        }
    }

    /// Evaluates one condition: aggregate metrics plus per-item records.
    #[allow(clippy::too_many_arguments)]
    fn aggregate(
        &self,
        samples: &[ConditionSample],
        originals: &[RgbImage],
        labels: ConditionLabels,
        display: &str,
        condition_slug: &str,
        scorer: &mut dyn ScorerClient,
        extractor: &mut dyn FeatureExtractor,
        classifier: &mut dyn ProbClassifier,
    ) -> Result<ConditionResult, HarnessError> {
        let benign: Vec<RgbImage> = samples.iter().map(|s| s.benign.clone()).collect();
        let adversarial: Vec<RgbImage> = samples.iter().map(|s| s.adversarial.clone()).collect();
        let prompts: Vec<String> = samples.iter().map(|s| s.eval_prompt.clone()).collect();
        let reference: &[RgbImage] = match self.plan.fid_reference {
            FidReference::BenignGenerations => &benign,
            FidReference::SourceImages => originals,
        };
        let report = evaluate_condition_with_reference(
            &benign,
            &adversarial,
            &prompts,
            reference,
            scorer,
            extractor,
            classifier,
            labels,
        )
        .map_err(|e| HarnessError::Metrics(e.to_string()))?;

        let mut items = Vec::with_capacity(samples.len());
        for sample in samples {
            let clip = 100.0
                * scorer
                    .score(&sample.adversarial, &sample.eval_prompt)
                    .map_err(|e| HarnessError::Client(e.to_string()))?;
            items.push(ItemRecord {
                item_id: sample.item_id,
                craft_prompt_index: sample.craft_prompt_index,
                eval_prompt_index: sample.eval_prompt_index,
                eval_seed: sample.eval_seed,
                final_loss: sample.final_loss,
                psnr: psnr(&sample.benign, &sample.adversarial)
                    .map_err(|e| HarnessError::Metrics(e.to_string()))?,
                ssim: ssim(&sample.benign, &sample.adversarial)
                    .map_err(|e| HarnessError::Metrics(e.to_string()))?,
                msssim: msssim(&sample.benign, &sample.adversarial)
                    .map_err(|e| HarnessError::Metrics(e.to_string()))?,
                clip,
                linf: sample.linf,
                plan_hash: self.plan_hash.clone(),
            });
        }
        Ok(ConditionResult {
            display_label: display.to_string(),
            condition: condition_slug.to_string(),
            report,
            items,
        })
    }

    // -- output files -----------------------------------------------------

    fn write_condition_items(
        &self,
        slug: &str,
        records: &[ItemRecord],
    ) -> Result<(), HarnessError> {
        let path = self
            .out_dir
            .join("conditions")
            .join(format!("{}.jsonl", sanitize_slug(slug)));
        imageio::ensure_parent(&path)?;
        let mut buf = Vec::new();
        for record in records {
            serde_json::to_writer(&mut buf, record)
                .map_err(|e| HarnessError::Runtime(e.to_string()))?;
            buf.push(b'\n');
        }
        fs::write(&path, buf).map_err(|e| IoError::file(&path, e))?;
        Ok(())
    }

    /// Rewrites `skips.jsonl`, replacing the rows owned by this protocol
    /// (those whose condition starts with `prefix`) and keeping the rest,
    /// then enforces the skip threshold over this run's cells.
    fn finalize(
        &self,
        skips: &[SkipRecord],
        total_cells: usize,
        prefix: &str,
    ) -> Result<(), HarnessError> {
        let path = self.out_dir.join("skips.jsonl");
        let mut lines: Vec<String> = Vec::new();
        if path.is_file() {
            let text = fs::read_to_string(&path).map_err(|e| IoError::file(&path, e))?;
            for line in text.lines() {
                match serde_json::from_str::<SkipRecord>(line) {
                    Ok(record) if record.condition.starts_with(prefix) => {}
                    _ => lines.push(line.to_string()),
                }
            }
        }
        for skip in skips {
            lines.push(
                serde_json::to_string(skip).map_err(|e| HarnessError::Runtime(e.to_string()))?,
            );
        }
        let body = if lines.is_empty() {
            String::new()
        } else {
            lines.join("\n") + "\n"
        };
        fs::write(&path, body).map_err(|e| IoError::file(&path, e))?;

        if total_cells == 0 {
            return Ok(());
        }
        let fraction = skips.len() as f64 / total_cells as f64;
        if fraction > self.plan.skip_threshold {
            return Err(HarnessError::SkipThreshold {
                skipped: skips.len(),
                total: total_cells,
                fraction: fraction * 100.0,
                threshold: self.plan.skip_threshold * 100.0,
            });
        }
        Ok(())
    }

    /// Redraws loss plots from the sidecars in the given `adv/` condition
    /// directories. Purely derived from stored artifacts, so plots are
    /// identical across fresh and resumed runs.
    fn regenerate_plots(&self, craft_dirs: &[(String, String)]) -> Result<(), HarnessError> {
        for (model_slug, condition_dir) in craft_dirs {
            let adv_dir = self.out_dir.join("adv").join(model_slug).join(condition_dir);
            let plot_dir = self
                .out_dir
                .join("plots")
                .join(model_slug)
                .join(condition_dir);
            for item in &self.items {
                let item_id = item.row.image_id;
                if let Some((_, sidecar)) = artifact::load_artifact(&adv_dir, item_id)? {
                    if let Some(attack) = &sidecar.attack {
                        report::write_loss_plot(
                            &plot_dir.join(format!("item_{item_id:06}.png")),
                            &attack.trace.losses,
                        )?;
                    }
                }
            }
        }
        Ok(())
    }

    fn results_to_section(title: &str, results: &[ConditionResult]) -> ReportSection {
        ReportSection {
            title: title.to_string(),
            rows: results
                .iter()
                .map(|r| ReportRow {
                    condition: r.display_label.clone(),
                    clip: r.report.clip,
                    psnr: r.report.psnr,
                    ssim: r.report.ssim,
                    msssim: r.report.msssim,
                    fid: r.report.fid,
                    is_score: r.report.inception,
                })
                .collect(),
        }
    }

    /// Renders `report.{csv,json,md}`. Sections from an earlier protocol
    /// run of the *same* plan survive: same-titled sections are replaced
    /// in place, new ones are appended, so running e.g. the sweep and then
    /// the defended evaluation into one directory yields one report.
    fn write_report(&self, sections: Vec<ReportSection>) -> Result<(), HarnessError> {
        let path = self.out_dir.join("report.json");
        let mut fresh = sections;
        let mut merged: Vec<ReportSection> = Vec::new();
        if path.is_file() {
            let text = fs::read_to_string(&path).map_err(|e| IoError::file(&path, e))?;
            if let Ok(existing) = report::parse_json(&text) {
                if existing.plan_hash.as_deref() == Some(self.plan_hash.as_str()) {
                    for old in existing.sections {
                        match fresh.iter().position(|s| s.title == old.title) {
                            Some(pos) => merged.push(fresh.remove(pos)),
                            None => merged.push(old),
                        }
                    }
                }
            }
        }
        merged.extend(fresh);
        let report = Report {
            plan_hash: Some(self.plan_hash.clone()),
            sections: merged,
        };
        report::render_report(&self.out_dir, &report)?;
        Ok(())
    }

    // -- protocols --------------------------------------------------------

    /// White-box sweep: one row per module, plus Gaussian and Benign.
    pub fn whitebox_sweep(&self) -> Result<Vec<ConditionResult>, HarnessError> {
        let descriptor = self.plan.source_model.clone();
        let model_label = self.source_label.clone();
        let modules = self.plan.modules.clone();

        struct WbCond {
            adv_edit: RgbImage,
            linf: f64,
            final_loss: Option<f64>,
        }
        struct WbItem {
            benign_edit: RgbImage,
            eval_prompt: String,
            conds: Vec<WbCond>,
            gaussian_edit: RgbImage,
            gaussian_linf: f64,
        }

        let outputs = self.run_items(|pool, item| -> Result<WbItem, String> {
            let prompt = item
                .row
                .prompts
                .first()
                .ok_or_else(|| format!("item {} has no prompts", item.row.image_id))?
                .clone();
            let eval_seed = self.eval_seed(item.row.image_id, 0);

            let mut crafted = Vec::with_capacity(modules.len());
            {
                let model = pool.get(&descriptor)?;
                for &module in &modules {
                    crafted.push(self.craft_module(model.as_mut(), &model_label, item, module, 0)?);
                }
            }
            let gaussian = self.craft_gaussian(item)?;

            let model = pool.get(&descriptor)?;
            let benign_edit = self.edit(model.as_mut(), item, &item.image, &prompt, eval_seed)?;
            let mut conds = Vec::with_capacity(modules.len());
            for craft in &crafted {
                let adv_edit =
                    self.edit(model.as_mut(), item, &craft.image, &prompt, eval_seed)?;
                conds.push(WbCond {
                    adv_edit,
                    linf: craft.linf,
                    final_loss: craft.final_loss,
                });
            }
            let gaussian_edit =
                self.edit(model.as_mut(), item, &gaussian.image, &prompt, eval_seed)?;
            Ok(WbItem {
                benign_edit,
                eval_prompt: prompt,
                conds,
                gaussian_edit,
                gaussian_linf: gaussian.linf,
            })
        })?;

        let conditions_per_item = modules.len() + 2;
        let mut skips = Vec::new();
        let mut ok_items: Vec<(u64, WbItem)> = Vec::new();
        for (item_id, result) in outputs {
            match result {
                Ok(output) => ok_items.push((item_id, output)),
                Err(reason) => {
                    for &module in &modules {
                        skips.push(SkipRecord {
                            condition: format!("whitebox-{}", module.name()),
                            item_id,
                            reason: reason.clone(),
                        });
                    }
                    for condition in ["whitebox-gaussian", "whitebox-benign"] {
                        skips.push(SkipRecord {
                            condition: condition.to_string(),
                            item_id,
                            reason: reason.clone(),
                        });
                    }
                }
            }
        }

        let originals: Vec<RgbImage> = ok_items
            .iter()
            .map(|(id, _)| {
                self.items
                    .iter()
                    .find(|it| it.row.image_id == *id)
                    .expect("ok item came from the manifest")
                    .image
                    .clone()
            })
            .collect();

        let (mut scorer, mut extractor, mut classifier) = self.clients()?;
        let mut results = Vec::new();
        if !ok_items.is_empty() {
            for (idx, &module) in modules.iter().enumerate() {
                let samples: Vec<ConditionSample> = ok_items
                    .iter()
                    .map(|(id, out)| {
                        let cond = &out.conds[idx];
                        ConditionSample {
                            item_id: *id,
                            benign: out.benign_edit.clone(),
                            adversarial: cond.adv_edit.clone(),
                            eval_prompt: out.eval_prompt.clone(),
                            craft_prompt_index: 0,
                            eval_prompt_index: 0,
                            eval_seed: self.eval_seed(*id, 0),
                            final_loss: cond.final_loss,
                            linf: cond.linf,
                        }
                    })
                    .collect();
                results.push(self.aggregate(
                    &samples,
                    &originals,
                    self.labels(&self.source_label, module.name()),
                    display_label(module),
                    &format!("whitebox-{}", module.name()),
                    scorer.as_mut(),
                    extractor.as_mut(),
                    classifier.as_mut(),
                )?);
            }

            let gaussian_samples: Vec<ConditionSample> = ok_items
                .iter()
                .map(|(id, out)| ConditionSample {
                    item_id: *id,
                    benign: out.benign_edit.clone(),
                    adversarial: out.gaussian_edit.clone(),
                    eval_prompt: out.eval_prompt.clone(),
                    craft_prompt_index: 0,
                    eval_prompt_index: 0,
                    eval_seed: self.eval_seed(*id, 0),
                    final_loss: None,
                    linf: out.gaussian_linf,
                })
                .collect();
            results.push(self.aggregate(
                &gaussian_samples,
                &originals,
                self.labels(&self.source_label, "gaussian"),
                "Gaussian",
                "whitebox-gaussian",
                scorer.as_mut(),
                extractor.as_mut(),
                classifier.as_mut(),
            )?);

            let benign_samples: Vec<ConditionSample> = ok_items
                .iter()
                .map(|(id, out)| ConditionSample {
                    item_id: *id,
                    benign: out.benign_edit.clone(),
                    adversarial: out.benign_edit.clone(),
                    eval_prompt: out.eval_prompt.clone(),
                    craft_prompt_index: 0,
                    eval_prompt_index: 0,
                    eval_seed: self.eval_seed(*id, 0),
                    final_loss: None,
                    linf: 0.0,
                })
                .collect();
            results.push(self.aggregate(
                &benign_samples,
                &originals,
                self.labels(&self.source_label, "benign"),
                "Benign",
                "whitebox-benign",
                scorer.as_mut(),
                extractor.as_mut(),
                classifier.as_mut(),
            )?);
        }

        for result in &results {
            self.write_condition_items(&result.condition, &result.items)?;
        }
        if !results.is_empty() {
            self.write_report(vec![Self::results_to_section("whitebox", &results)])?;
        }
        let source_slug = sanitize_slug(&self.source_label);
        let craft_dirs: Vec<(String, String)> = modules
            .iter()
            .map(|m| (source_slug.clone(), format!("{}-p0", m.name())))
            .collect();
        self.regenerate_plots(&craft_dirs)?;
        self.finalize(&skips, self.items.len() * conditions_per_item, "whitebox-")?;
        Ok(results)
    }

    /// Prompt-transfer circulation: craft with prompt `i`, evaluate the
    /// edit guided by prompt `i+1` (mod the item's prompt count).
    pub fn prompt_transfer_eval(&self) -> Result<Vec<ConditionResult>, HarnessError> {
        let descriptor = self.plan.source_model.clone();
        let model_label = self.source_label.clone();
        let modules = self.plan.modules.clone();

        struct PtLeg {
            craft_idx: usize,
            eval_idx: usize,
            eval_seed: u64,
            eval_prompt: String,
            benign_edit: RgbImage,
            module_edits: Vec<(RgbImage, f64, Option<f64>)>,
            gaussian_edit: RgbImage,
            gaussian_linf: f64,
        }
        struct PtItem {
            legs: Vec<PtLeg>,
        }

        let legs_mode = self.plan.prompt_transfer_legs;
        let outputs = self.run_items(|pool, item| -> Result<PtItem, String> {
            let item_id = item.row.image_id;
            let prompt_count = item.row.prompts.len();
            if prompt_count < 2 {
                return Err(format!(
                    "prompt transfer needs at least 2 prompts, item {item_id} has {prompt_count}"
                ));
            }
            let leg_indices: Vec<usize> = match legs_mode {
                PromptTransferLegs::All => (0..prompt_count).collect(),
                PromptTransferLegs::FirstOnly => vec![0],
            };

            // Craft every (module, leg) plus the prompt-independent
            // Gaussian baseline, then run all the edits.
            let mut crafted: Vec<Vec<CraftOutput>> = Vec::with_capacity(leg_indices.len());
            {
                let model = pool.get(&descriptor)?;
                for &leg in &leg_indices {
                    let mut per_module = Vec::with_capacity(modules.len());
                    for &module in &modules {
                        per_module.push(self.craft_module(
                            model.as_mut(),
                            &model_label,
                            item,
                            module,
                            leg,
                        )?);
                    }
                    crafted.push(per_module);
                }
            }
            let gaussian = self.craft_gaussian(item)?;

            let model = pool.get(&descriptor)?;
            let mut legs = Vec::with_capacity(leg_indices.len());
            for (&leg, per_module) in leg_indices.iter().zip(&crafted) {
                let eval_idx = (leg + 1) % prompt_count;
                let eval_prompt = item.row.prompts[eval_idx].clone();
                let eval_seed = self.eval_seed(item_id, leg);
                let benign_edit =
                    self.edit(model.as_mut(), item, &item.image, &eval_prompt, eval_seed)?;
                let mut module_edits = Vec::with_capacity(modules.len());
                for craft in per_module {
                    let adv_edit =
                        self.edit(model.as_mut(), item, &craft.image, &eval_prompt, eval_seed)?;
                    module_edits.push((adv_edit, craft.linf, craft.final_loss));
                }
                let gaussian_edit =
                    self.edit(model.as_mut(), item, &gaussian.image, &eval_prompt, eval_seed)?;
                legs.push(PtLeg {
                    craft_idx: leg,
                    eval_idx,
                    eval_seed,
                    eval_prompt,
                    benign_edit,
                    module_edits,
                    gaussian_edit,
                    gaussian_linf: gaussian.linf,
                });
            }
            Ok(PtItem { legs })
        })?;

        let conditions_per_item = modules.len() + 1;
        let mut skips = Vec::new();
        let mut ok_items: Vec<(u64, PtItem)> = Vec::new();
        for (item_id, result) in outputs {
            match result {
                Ok(output) => ok_items.push((item_id, output)),
                Err(reason) => {
                    for &module in &modules {
                        skips.push(SkipRecord {
                            condition: format!("prompt-transfer-{}", module.name()),
                            item_id,
                            reason: reason.clone(),
                        });
                    }
                    skips.push(SkipRecord {
                        condition: "prompt-transfer-gaussian".to_string(),
                        item_id,
                        reason,
                    });
                }
            }
        }

        let originals: Vec<RgbImage> = ok_items
            .iter()
            .flat_map(|(id, out)| {
                let image = &self
                    .items
                    .iter()
                    .find(|it| it.row.image_id == *id)
                    .expect("ok item came from the manifest")
                    .image;
                std::iter::repeat_with(|| image.clone()).take(out.legs.len())
            })
            .collect();

        let (mut scorer, mut extractor, mut classifier) = self.clients()?;
        let mut results = Vec::new();
        if !ok_items.is_empty() {
            for (idx, &module) in modules.iter().enumerate() {
                let samples: Vec<ConditionSample> = ok_items
                    .iter()
                    .flat_map(|(id, out)| {
                        out.legs.iter().map(move |leg| {
                            let (adv_edit, linf, final_loss) = &leg.module_edits[idx];
                            ConditionSample {
                                item_id: *id,
                                benign: leg.benign_edit.clone(),
                                adversarial: adv_edit.clone(),
                                eval_prompt: leg.eval_prompt.clone(),
                                craft_prompt_index: leg.craft_idx,
                                eval_prompt_index: leg.eval_idx,
                                eval_seed: leg.eval_seed,
                                final_loss: *final_loss,
                                linf: *linf,
                            }
                        })
                    })
                    .collect();
                results.push(self.aggregate(
                    &samples,
                    &originals,
                    self.labels(
                        &self.source_label,
                        &format!("prompt-transfer-{}", module.name()),
                    ),
                    display_label(module),
                    &format!("prompt-transfer-{}", module.name()),
                    scorer.as_mut(),
                    extractor.as_mut(),
                    classifier.as_mut(),
                )?);
            }

            let gaussian_samples: Vec<ConditionSample> = ok_items
                .iter()
                .flat_map(|(id, out)| {
                    out.legs.iter().map(move |leg| ConditionSample {
                        item_id: *id,
                        benign: leg.benign_edit.clone(),
                        adversarial: leg.gaussian_edit.clone(),
                        eval_prompt: leg.eval_prompt.clone(),
                        craft_prompt_index: leg.craft_idx,
                        eval_prompt_index: leg.eval_idx,
                        eval_seed: leg.eval_seed,
                        final_loss: None,
                        linf: leg.gaussian_linf,
                    })
                })
                .collect();
            results.push(self.aggregate(
                &gaussian_samples,
                &originals,
                self.labels(&self.source_label, "prompt-transfer-gaussian"),
                "Gaussian",
                "prompt-transfer-gaussian",
                scorer.as_mut(),
                extractor.as_mut(),
                classifier.as_mut(),
            )?);
        }

        for result in &results {
            self.write_condition_items(&result.condition, &result.items)?;
        }
        if !results.is_empty() {
            self.write_report(vec![Self::results_to_section("prompt-transfer", &results)])?;
        }
        let source_slug = sanitize_slug(&self.source_label);
        let max_legs = match legs_mode {
            PromptTransferLegs::All => self
                .items
                .iter()
                .map(|i| i.row.prompts.len())
                .max()
                .unwrap_or(1),
            PromptTransferLegs::FirstOnly => 1,
        };
        let mut craft_dirs = Vec::new();
        for module in &modules {
            for leg in 0..max_legs {
                craft_dirs.push((source_slug.clone(), format!("{}-p{leg}", module.name())));
            }
        }
        self.regenerate_plots(&craft_dirs)?;
        self.finalize(&skips, self.items.len() * conditions_per_item, "prompt-transfer-")?;
        Ok(results)
    }

    /// Model transfer: craft once per (model, module, item), evaluate the
    /// stored examples on every model. Diagonal cells reuse the white-box
    /// artifacts byte for byte.
    pub fn model_transfer_eval(&self) -> Result<TransferMatrix, HarnessError> {
        // Dedup by label: the source plus each distinct target.
        let mut descriptors: Vec<(ModelDescriptor, String)> = Vec::new();
        for descriptor in std::iter::once(&self.plan.source_model).chain(&self.plan.target_models)
        {
            let label = models::model_label(descriptor);
            if !descriptors.iter().any(|(_, l)| *l == label) {
                descriptors.push((descriptor.clone(), label));
            }
        }
        if descriptors.len() < 2 {
            return Err(HarnessError::Runtime(
                "model transfer needs at least 2 distinct models (source + targets)".to_string(),
            ));
        }

        // Probe availability once, in the driver thread.
        let mut unavailable: BTreeMap<String, String> = BTreeMap::new();
        for (descriptor, label) in &descriptors {
            if let Err(e) = models::load_model(descriptor) {
                unavailable.insert(label.clone(), e.to_string());
            }
        }
        let available: Vec<(ModelDescriptor, String)> = descriptors
            .iter()
            .filter(|(_, label)| !unavailable.contains_key(label))
            .cloned()
            .collect();
        let modules = self.plan.modules.clone();

        struct TrCell {
            craft_label: String,
            module: ModuleTarget,
            eval_label: String,
            adv_edit: RgbImage,
            linf: f64,
            final_loss: Option<f64>,
        }
        struct TrItem {
            eval_prompt: String,
            eval_seed: u64,
            benign_edits: BTreeMap<String, RgbImage>,
            cells: Vec<Result<TrCell, (String, String)>>,
        }

        let available_ref = &available;
        let outputs = self.run_items(|pool, item| -> Result<TrItem, String> {
            let item_id = item.row.image_id;
            let eval_prompt = item
                .row
                .prompts
                .first()
                .ok_or_else(|| format!("item {item_id} has no prompts"))?
                .clone();
            let eval_seed = self.eval_seed(item_id, 0);

            // Craft on every available model.
            let mut crafted: Vec<(String, ModuleTarget, CraftOutput)> = Vec::new();
            for (descriptor, label) in available_ref {
                let model = pool.get(descriptor)?;
                for &module in &modules {
                    let craft = self.craft_module(model.as_mut(), label, item, module, 0)?;
                    crafted.push((label.clone(), module, craft));
                }
            }

            // Evaluate everything on every available model.
            let mut benign_edits = BTreeMap::new();
            let mut cells = Vec::new();
            for (descriptor, eval_label) in available_ref {
                let model = pool.get(descriptor)?;
                let benign =
                    self.edit(model.as_mut(), item, &item.image, &eval_prompt, eval_seed)?;
                benign_edits.insert(eval_label.clone(), benign);
                for (craft_label, module, craft) in &crafted {
                    match self.edit(model.as_mut(), item, &craft.image, &eval_prompt, eval_seed) {
                        Ok(adv_edit) => cells.push(Ok(TrCell {
                            craft_label: craft_label.clone(),
                            module: *module,
                            eval_label: eval_label.clone(),
                            adv_edit,
                            linf: craft.linf,
                            final_loss: craft.final_loss,
                        })),
                        Err(reason) => cells.push(Err((
                            format!(
                                "transfer-{}-{}-{}",
                                module.name(),
                                sanitize_slug(craft_label),
                                sanitize_slug(eval_label)
                            ),
                            reason,
                        ))),
                    }
                }
            }
            Ok(TrItem {
                eval_prompt,
                eval_seed,
                benign_edits,
                cells,
            })
        })?;

        let cells_per_item = modules.len() * available.len() * available.len();
        let mut skips = Vec::new();
        let mut ok_items: Vec<(u64, TrItem)> = Vec::new();
        for (item_id, result) in outputs {
            match result {
                Ok(mut output) => {
                    // Per-cell edit failures inside an otherwise good item.
                    for cell in std::mem::take(&mut output.cells) {
                        match cell {
                            Ok(c) => output.cells.push(Ok(c)),
                            Err((condition, reason)) => {
                                skips.push(SkipRecord {
                                    condition,
                                    item_id,
                                    reason,
                                });
                            }
                        }
                    }
                    ok_items.push((item_id, output));
                }
                Err(reason) => {
                    for &module in &modules {
                        for (_, craft_label) in available_ref {
                            for (_, eval_label) in available_ref {
                                skips.push(SkipRecord {
                                    condition: format!(
                                        "transfer-{}-{}-{}",
                                        module.name(),
                                        sanitize_slug(craft_label),
                                        sanitize_slug(eval_label)
                                    ),
                                    item_id,
                                    reason: reason.clone(),
                                });
                            }
                        }
                    }
                }
            }
        }

        let (mut scorer, mut extractor, mut classifier) = self.clients()?;
        let mut cells = Vec::new();
        let all_labels: Vec<String> = descriptors.iter().map(|(_, l)| l.clone()).collect();
        for &module in &modules {
            for craft_label in &all_labels {
                for eval_label in &all_labels {
                    if let Some(reason) = unavailable
                        .get(craft_label)
                        .or_else(|| unavailable.get(eval_label))
                    {
                        cells.push(TransferCell {
                            module: module.name().to_string(),
                            craft_model: craft_label.clone(),
                            eval_model: eval_label.clone(),
                            report: None,
                            unavailable: Some(reason.clone()),
                        });
                        continue;
                    }
                    let mut samples = Vec::new();
                    for (item_id, output) in &ok_items {
                        let benign = output.benign_edits.get(eval_label);
                        let cell = output.cells.iter().flatten().find(|c| {
                            c.craft_label == *craft_label
                                && c.module == module
                                && c.eval_label == *eval_label
                        });
                        if let (Some(benign), Some(cell)) = (benign, cell) {
                            samples.push(ConditionSample {
                                item_id: *item_id,
                                benign: benign.clone(),
                                adversarial: cell.adv_edit.clone(),
                                eval_prompt: output.eval_prompt.clone(),
                                craft_prompt_index: 0,
                                eval_prompt_index: 0,
                                eval_seed: output.eval_seed,
                                final_loss: cell.final_loss,
                                linf: cell.linf,
                            });
                        }
                    }
                    if samples.is_empty() {
                        cells.push(TransferCell {
                            module: module.name().to_string(),
                            craft_model: craft_label.clone(),
                            eval_model: eval_label.clone(),
                            report: None,
                            unavailable: Some("all items skipped".to_string()),
                        });
                        continue;
                    }
                    let originals: Vec<RgbImage> = samples
                        .iter()
                        .map(|s| {
                            self.items
                                .iter()
                                .find(|it| it.row.image_id == s.item_id)
                                .expect("sample came from the manifest")
                                .image
                                .clone()
                        })
                        .collect();
                    let slug = format!(
                        "transfer-{}-{}-{}",
                        module.name(),
                        sanitize_slug(craft_label),
                        sanitize_slug(eval_label)
                    );
                    let result = self.aggregate(
                        &samples,
                        &originals,
                        self.labels(eval_label, module.name()),
                        display_label(module),
                        &slug,
                        scorer.as_mut(),
                        extractor.as_mut(),
                        classifier.as_mut(),
                    )?;
                    self.write_condition_items(&result.condition, &result.items)?;
                    cells.push(TransferCell {
                        module: module.name().to_string(),
                        craft_model: craft_label.clone(),
                        eval_model: eval_label.clone(),
                        report: Some(result.report),
                        unavailable: None,
                    });
                }
            }
        }

        let matrix = TransferMatrix {
            plan_hash: self.plan_hash.clone(),
            dataset: self.plan.dataset.clone(),
            modules: modules.iter().map(|m| m.name().to_string()).collect(),
            craft_models: all_labels.clone(),
            eval_models: all_labels,
            cells,
        };
        self.write_transfer_outputs(&matrix)?;
        let craft_dirs: Vec<(String, String)> = available
            .iter()
            .flat_map(|(_, label)| {
                let slug = sanitize_slug(label);
                modules
                    .iter()
                    .map(move |m| (slug.clone(), format!("{}-p0", m.name())))
            })
            .collect();
        self.regenerate_plots(&craft_dirs)?;
        self.finalize(&skips, self.items.len() * cells_per_item, "transfer-")?;
        Ok(matrix)
    }

    fn write_transfer_outputs(&self, matrix: &TransferMatrix) -> Result<(), HarnessError> {
        let json_path = self.out_dir.join("transfer.json");
        let mut json = serde_json::to_string_pretty(matrix)
            .map_err(|e| HarnessError::Runtime(e.to_string()))?;
        json.push('\n');
        fs::write(&json_path, json).map_err(|e| IoError::file(&json_path, e))?;

        let mut csv = String::from("module,craft_model,eval_model,CLIP\n");
        for cell in &matrix.cells {
            let value = cell
                .report
                .as_ref()
                .map_or_else(|| "n/a".to_string(), |r| format!("{}", r.clip));
            csv.push_str(&format!(
                "{},{},{},{}\n",
                cell.module, cell.craft_model, cell.eval_model, value
            ));
        }
        let csv_path = self.out_dir.join("transfer.csv");
        fs::write(&csv_path, csv).map_err(|e| IoError::file(&csv_path, e))?;

        let mut md = format!("Plan: {}\n", matrix.plan_hash);
        for module in &matrix.modules {
            md.push_str(&format!("\n## transfer {module}\n\n"));
            md.push_str("| craft \\ eval |");
            for eval in &matrix.eval_models {
                md.push_str(&format!(" {eval} |"));
            }
            md.push_str("\n| --- |");
            md.push_str(&" --- |".repeat(matrix.eval_models.len()));
            md.push('\n');
            for craft in &matrix.craft_models {
                md.push_str(&format!("| {craft} |"));
                for eval in &matrix.eval_models {
                    let text = matrix
                        .cell(module, craft, eval)
                        .and_then(|c| c.report.as_ref())
                        .map_or_else(|| "n/a".to_string(), |r| format!("{}", r.clip));
                    md.push_str(&format!(" {text} |"));
                }
                md.push('\n');
            }
        }
        let md_path = self.out_dir.join("transfer.md");
        fs::write(&md_path, md).map_err(|e| IoError::file(&md_path, e))?;
        Ok(())
    }

    /// Defended evaluation: apply each defense to the stored adversarial
    /// examples, re-edit, and compare against the *undefended* benign
    /// edits; a defended-benign baseline row shows the defense's own cost.
    pub fn defense_eval(&self) -> Result<Vec<ConditionResult>, HarnessError> {
        if self.plan.defenses.is_empty() {
            return Err(HarnessError::Runtime(
                "defense evaluation needs at least one defense in the plan".to_string(),
            ));
        }
        let descriptor = self.plan.source_model.clone();
        let model_label = self.source_label.clone();
        let modules = self.plan.modules.clone();
        let entries = self.plan.defenses.clone();
        let specs: Vec<DefenseSpec> = entries
            .iter()
            .map(DefenseEntry::spec)
            .collect::<Result<_, _>>()?;

        struct DefPerDefense {
            benign_defended_edit: RgbImage,
            module_edits: Vec<(RgbImage, f64, Option<f64>)>,
        }
        struct DefItem {
            eval_prompt: String,
            eval_seed: u64,
            benign_edit: RgbImage,
            defenses: Vec<DefPerDefense>,
        }

        let codec = ImageJpegCodec;
        let entries_ref = &entries;
        let specs_ref = &specs;
        let outputs = self.run_items(|pool, item| -> Result<DefItem, String> {
            let item_id = item.row.image_id;
            let eval_prompt = item
                .row
                .prompts
                .first()
                .ok_or_else(|| format!("item {item_id} has no prompts"))?
                .clone();
            let eval_seed = self.eval_seed(item_id, 0);

            let mut crafted = Vec::with_capacity(modules.len());
            {
                let model = pool.get(&descriptor)?;
                for &module in &modules {
                    crafted.push(self.craft_module(model.as_mut(), &model_label, item, module, 0)?);
                }
            }

            let model = pool.get(&descriptor)?;
            let benign_edit =
                self.edit(model.as_mut(), item, &item.image, &eval_prompt, eval_seed)?;

            let mut defenses = Vec::with_capacity(entries_ref.len());
            for (entry, spec) in entries_ref.iter().zip(specs_ref) {
                let defense_seed = Self::defense_seed(entry, item_id);
                let defended_benign =
                    apply_defense(&item.image, spec, defense_seed, Some(&codec))
                        .map_err(|e| e.to_string())?;
                let benign_defended_edit = self.edit(
                    model.as_mut(),
                    item,
                    &defended_benign,
                    &eval_prompt,
                    eval_seed,
                )?;
                let mut module_edits = Vec::with_capacity(modules.len());
                for craft in &crafted {
                    let defended_adv =
                        apply_defense(&craft.image, spec, defense_seed, Some(&codec))
                            .map_err(|e| e.to_string())?;
                    let adv_edit = self.edit(
                        model.as_mut(),
                        item,
                        &defended_adv,
                        &eval_prompt,
                        eval_seed,
                    )?;
                    module_edits.push((adv_edit, craft.linf, craft.final_loss));
                }
                defenses.push(DefPerDefense {
                    benign_defended_edit,
                    module_edits,
                });
            }
            Ok(DefItem {
                eval_prompt,
                eval_seed,
                benign_edit,
                defenses,
            })
        })?;

        // Section titles: display names, uniquified when a variant repeats.
        let mut titles = Vec::with_capacity(entries.len());
        for (idx, entry) in entries.iter().enumerate() {
            let base = match entry.variant.as_str() {
                "resize-pad" => "R&P",
                "jpeg" => "JPEG",
                "gaussian-noise" => "Gaussian",
                other => other,
            };
            let repeats = entries[..idx]
                .iter()
                .filter(|e| e.variant == entry.variant)
                .count();
            titles.push(if repeats == 0 {
                base.to_string()
            } else {
                format!("{base} ({})", repeats + 1)
            });
        }

        let conditions_per_item = entries.len() * (modules.len() + 1);
        let mut skips = Vec::new();
        let mut ok_items: Vec<(u64, DefItem)> = Vec::new();
        for (item_id, result) in outputs {
            match result {
                Ok(output) => ok_items.push((item_id, output)),
                Err(reason) => {
                    for (entry_idx, entry) in entries.iter().enumerate() {
                        let prefix = format!("defended-{}-{entry_idx}", entry.variant);
                        for &module in &modules {
                            skips.push(SkipRecord {
                                condition: format!("{prefix}-{}", module.name()),
                                item_id,
                                reason: reason.clone(),
                            });
                        }
                        skips.push(SkipRecord {
                            condition: format!("{prefix}-benign"),
                            item_id,
                            reason: reason.clone(),
                        });
                    }
                }
            }
        }

        let originals: Vec<RgbImage> = ok_items
            .iter()
            .map(|(id, _)| {
                self.items
                    .iter()
                    .find(|it| it.row.image_id == *id)
                    .expect("ok item came from the manifest")
                    .image
                    .clone()
            })
            .collect();

        let (mut scorer, mut extractor, mut classifier) = self.clients()?;
        let mut results = Vec::new();
        let mut sections = Vec::new();
        if !ok_items.is_empty() {
            for (entry_idx, (entry, title)) in entries.iter().zip(&titles).enumerate() {
                let mut section_results = Vec::new();
                let prefix = format!("defended-{}-{entry_idx}", entry.variant);
                for (module_idx, &module) in modules.iter().enumerate() {
                    let samples: Vec<ConditionSample> = ok_items
                        .iter()
                        .map(|(id, out)| {
                            let (adv_edit, linf, final_loss) =
                                &out.defenses[entry_idx].module_edits[module_idx];
                            ConditionSample {
                                item_id: *id,
                                benign: out.benign_edit.clone(),
                                adversarial: adv_edit.clone(),
                                eval_prompt: out.eval_prompt.clone(),
                                craft_prompt_index: 0,
                                eval_prompt_index: 0,
                                eval_seed: out.eval_seed,
                                final_loss: *final_loss,
                                linf: *linf,
                            }
                        })
                        .collect();
                    let slug = format!("{prefix}-{}", module.name());
                    section_results.push(self.aggregate(
                        &samples,
                        &originals,
                        self.labels(&self.source_label, &slug),
                        display_label(module),
                        &slug,
                        scorer.as_mut(),
                        extractor.as_mut(),
                        classifier.as_mut(),
                    )?);
                }

                let benign_samples: Vec<ConditionSample> = ok_items
                    .iter()
                    .map(|(id, out)| ConditionSample {
                        item_id: *id,
                        benign: out.benign_edit.clone(),
                        adversarial: out.defenses[entry_idx].benign_defended_edit.clone(),
                        eval_prompt: out.eval_prompt.clone(),
                        craft_prompt_index: 0,
                        eval_prompt_index: 0,
                        eval_seed: out.eval_seed,
                        final_loss: None,
                        linf: 0.0,
                    })
                    .collect();
                let slug = format!("{prefix}-benign");
                section_results.push(self.aggregate(
                    &benign_samples,
                    &originals,
                    self.labels(&self.source_label, &slug),
                    "Benign",
                    &slug,
                    scorer.as_mut(),
                    extractor.as_mut(),
                    classifier.as_mut(),
                )?);

                sections.push(Self::results_to_section(title, &section_results));
                results.extend(section_results);
            }
        }

        for result in &results {
            self.write_condition_items(&result.condition, &result.items)?;
        }
        if !sections.is_empty() {
            self.write_report(sections)?;
        }
        let source_slug = sanitize_slug(&self.source_label);
        let craft_dirs: Vec<(String, String)> = modules
            .iter()
            .map(|m| (source_slug.clone(), format!("{}-p0", m.name())))
            .collect();
        self.regenerate_plots(&craft_dirs)?;
        self.finalize(&skips, self.items.len() * conditions_per_item, "defended-")?;
        Ok(results)
    }

    /// Crafts (or loads) one adversarial example and returns its stored
    /// path and sidecar.
    pub fn run_single_attack(
        &self,
        module: ModuleTarget,
        item_id: u64,
    ) -> Result<(PathBuf, AdvSidecar), HarnessError> {
        let item = self
            .items
            .iter()
            .find(|it| it.row.image_id == item_id)
            .ok_or_else(|| {
                HarnessError::Runtime(format!("item {item_id} is not in the manifest"))
            })?;
        let mut pool = ModelPool::new();
        let model = pool
            .get(&self.plan.source_model)
            .map_err(HarnessError::Runtime)?;
        self.craft_module(model.as_mut(), &self.source_label.clone(), item, module, 0)
            .map_err(HarnessError::Runtime)?;
        let dir = self.craft_dir(&self.source_label, module.name(), 0);
        let (_, sidecar) = artifact::load_artifact(&dir, item_id)?
            .expect("artifact was just crafted");
        Ok((dir.join(format!("item_{item_id:06}.png")), sidecar))
    }
}

/// One (item, leg) evaluation sample inside a condition.
struct ConditionSample {
    item_id: u64,
    benign: RgbImage,
    adversarial: RgbImage,
    eval_prompt: String,
    craft_prompt_index: usize,
    eval_prompt_index: usize,
    eval_seed: u64,
    final_loss: Option<f64>,
    linf: f64,
}
