//! One-shot pipeline orchestration: ingest → extract → ground → render →
//! adapt, with per-stage output files, resumability, and structured logs.
//!
//! Stage outputs are named `<stem>.<stage>.jsonl` inside the work
//! directory. A stage whose output file already exists is loaded instead
//! of recomputed, so interrupted runs continue where they stopped.

use crate::adapt::{adapt_text, TemplateSet};
use crate::config::PipelineConfig;
use crate::entities::{extract_gazetteer, ExtractionError, Gazetteer, LlmClient};
use crate::grounding::{ground, GroundingClient, HttpGroundingClient, StubClient};
use crate::ingest::{ingest, IngestOptions};
use crate::manifest::{read_manifest, write_manifest, Manifest};
use crate::render::{render_record, PromptStyle};
use crate::types::{PipelineRecord, Stage};
use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Structured JSON-lines log event on stderr. Logs are diagnostics, not
/// outputs; reruns may differ here while artifacts stay byte-identical.
pub fn log_event(stage: &str, record_id: Option<&str>, msg: &str) {
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let line = serde_json::json!({
        "ts": ts,
        "level": "info",
        "stage": stage,
        "record_id": record_id,
        "msg": msg,
    });
    eprintln!("{line}");
}

/// A stage failure. Each stage maps to its own process exit code so
/// scripted callers can tell failures apart.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: anyhow::Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        exit_code_for(self.stage)
    }
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {:#}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

pub fn exit_code_for(stage: Stage) -> i32 {
    match stage {
        Stage::Ingested => 10,
        Stage::Extracted => 11,
        Stage::Grounded => 12,
        Stage::Rendered => 13,
        Stage::Adapted => 14,
    }
}

/// Paths of all pipeline artifacts for one run.
pub struct PipelinePaths {
    pub stem: String,
    pub work_dir: PathBuf,
    pub images_dir: PathBuf,
}

impl PipelinePaths {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        let work_dir = PathBuf::from(&cfg.out_dir);
        PipelinePaths {
            stem: format!("{}_{}", cfg.dataset, cfg.split),
            images_dir: work_dir.join("images"),
            work_dir,
        }
    }

    pub fn stage_file(&self, stage: Stage) -> PathBuf {
        self.work_dir.join(format!("{}.{}.jsonl", self.stem, stage))
    }
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub final_manifest: PathBuf,
    pub stages_run: Vec<Stage>,
    pub stages_skipped: Vec<Stage>,
}

fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .context("building worker pool")
}

/// Run the extract stage over a manifest.
pub fn stage_extract(manifest: &Manifest, cfg: &PipelineConfig) -> Result<Manifest> {
    let mut gazetteer = Gazetteer::builtin();
    if let Some(path) = &cfg.gazetteer_file {
        gazetteer.extend_from_file(Path::new(path))?;
    }
    let llm = cfg
        .llm_endpoint
        .as_ref()
        .map(|url| LlmClient::new(url, &cfg.llm_model, None, cfg.retries));

    let pool = thread_pool(cfg.parallelism)?;
    let records: Vec<Result<PipelineRecord>> = pool.install(|| {
        manifest
            .records
            .par_iter()
            .map(|rec| {
                let mut rec = rec.clone();
                let entities = match &llm {
                    None => extract_gazetteer(&rec.base.question, &gazetteer),
                    Some(client) => match client.extract(&rec.base.question) {
                        Ok(entities) => entities,
                        Err(ExtractionError::Unparseable { raw }) if cfg.llm_fallback => {
                            log_event(
                                "extract",
                                Some(rec.id()),
                                &format!(
                                    "unparseable LLM reply, falling back to gazetteer: {raw:?}"
                                ),
                            );
                            extract_gazetteer(&rec.base.question, &gazetteer)
                        }
                        Err(e) => {
                            return Err(anyhow::Error::new(e)
                                .context(format!("extracting entities for record {}", rec.id())))
                        }
                    },
                };
                rec.entities = Some(entities);
                Ok(rec)
            })
            .collect()
    });

    let mut out = manifest.clone();
    out.stage = Stage::Extracted;
    out.records = records.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(out)
}

/// Run the ground stage over a manifest. Records flagged as missing their
/// image are skipped deterministically (empty box list).
pub fn stage_ground(
    manifest: &Manifest,
    cfg: &PipelineConfig,
    images_root: &Path,
) -> Result<Manifest> {
    let client: Box<dyn GroundingClient + Sync> = match (&cfg.stub_rules, &cfg.grounding_endpoint) {
        (Some(rules), _) => Box::new(StubClient::from_file(Path::new(rules))?),
        (None, Some(url)) => Box::new(HttpGroundingClient::new(
            url,
            cfg.image_as_base64,
            cfg.retries,
        )),
        (None, None) => bail!("ground stage needs either a grounding endpoint or stub rules"),
    };

    let pool = thread_pool(cfg.parallelism)?;
    let records: Vec<Result<PipelineRecord>> = pool.install(|| {
        manifest
            .records
            .par_iter()
            .map(|rec| {
                let mut rec = rec.clone();
                if rec.base.missing_image {
                    rec.boxes = Some(Vec::new());
                    return Ok(rec);
                }
                let entities = rec.entities.clone().unwrap_or_default();
                if entities.is_empty() {
                    rec.boxes = Some(Vec::new());
                    return Ok(rec);
                }
                let image_path = images_root.join(&rec.base.image_path);
                let dims = image::image_dimensions(&image_path)
                    .with_context(|| format!("reading dimensions of {}", image_path.display()))?;
                let boxes = ground(
                    client.as_ref(),
                    &image_path,
                    &crate::grounding::image_id_for(&rec.base.image_path),
                    dims,
                    &entities,
                    cfg.score_threshold,
                    cfg.top_k,
                )
                .with_context(|| format!("grounding record {}", rec.id()))?;
                if boxes.is_empty() {
                    log_event("ground", Some(rec.id()), "no boxes above threshold");
                }
                rec.boxes = Some(boxes);
                Ok(rec)
            })
            .collect()
    });

    let mut out = manifest.clone();
    out.stage = Stage::Grounded;
    out.records = records.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(out)
}

/// Run the render stage: one marker per box, blended and written as PNG.
pub fn stage_render(
    manifest: &Manifest,
    style: &PromptStyle,
    images_root: &Path,
    images_out: &Path,
    parallelism: usize,
) -> Result<Manifest> {
    let pool = thread_pool(parallelism)?;
    let records: Vec<Result<PipelineRecord>> = pool.install(|| {
        manifest
            .records
            .par_iter()
            .map(|rec| {
                let (rendered, warnings) = render_record(rec, images_root, images_out, style)?;
                for w in warnings {
                    log_event("render", Some(rec.id()), &w);
                }
                if let Some(err) = &rendered.render_error {
                    log_event("render", Some(rec.id()), &format!("skipped: {err}"));
                }
                Ok(rendered)
            })
            .collect()
    });
    let mut out = manifest.clone();
    out.stage = Stage::Rendered;
    out.records = records.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(out)
}

/// Run the adapt stage. Rejects manifests that are already adapted (or not
/// yet rendered), so instruction text is never double-wrapped.
pub fn stage_adapt(manifest: &Manifest, templates: &TemplateSet) -> Result<Manifest> {
    if manifest.stage == Stage::Adapted {
        bail!("manifest is already adapted");
    }
    if manifest.stage != Stage::Rendered {
        bail!(
            "adapt needs a rendered manifest, got stage {}",
            manifest.stage
        );
    }
    let mut out = manifest.clone();
    out.stage = Stage::Adapted;
    for rec in out.records.iter_mut() {
        rec.instruction_text = Some(adapt_text(rec, templates)?);
    }
    Ok(out)
}

fn load_templates(cfg: &PipelineConfig) -> Result<TemplateSet> {
    match &cfg.templates_dir {
        Some(dir) => TemplateSet::load(Path::new(dir)),
        None => Ok(TemplateSet::default()),
    }
}

/// Run the full pipeline. Completed stage files are reused unless `resume`
/// is false; `dry_run` only reports the plan and touches nothing.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    resume: bool,
    dry_run: bool,
) -> std::result::Result<PipelineOutcome, StageError> {
    let paths = PipelinePaths::from_config(cfg);
    let images_root = PathBuf::from(&cfg.root);
    let fail = |stage: Stage, error: anyhow::Error| StageError { stage, error };

    if dry_run {
        for stage in Stage::ALL {
            let file = paths.stage_file(stage);
            let state = if resume && file.exists() {
                "skip (exists)"
            } else {
                "run"
            };
            log_event(
                "plan",
                None,
                &format!("{stage}: {state} -> {}", file.display()),
            );
        }
        return Ok(PipelineOutcome {
            final_manifest: paths.stage_file(Stage::Adapted),
            stages_run: Vec::new(),
            stages_skipped: Stage::ALL.to_vec(),
        });
    }

    let mut stages_run = Vec::new();
    let mut stages_skipped = Vec::new();
    let stamp = |m: &mut Manifest| {
        m.master_seed = cfg.master_seed;
        m.config = Some(cfg.clone());
    };

    // Each stage: reuse the output file when resuming, else compute from
    // the previous stage's manifest and persist.
    let run_stage = |stage: Stage,
                     prev: Option<&Manifest>,
                     stages_run: &mut Vec<Stage>,
                     stages_skipped: &mut Vec<Stage>|
     -> std::result::Result<Manifest, StageError> {
        let file = paths.stage_file(stage);
        if resume && file.exists() {
            log_event(
                stage.name(),
                None,
                &format!("skipping, output exists: {}", file.display()),
            );
            stages_skipped.push(stage);
            return read_manifest(&file).map_err(|e| fail(stage, e));
        }
        let mut manifest = match stage {
            Stage::Ingested => {
                let opts = IngestOptions {
                    master_seed: cfg.master_seed,
                    lang: cfg.lang.clone(),
                };
                ingest(cfg.dataset, &images_root, cfg.split, &opts).map_err(|e| fail(stage, e))?
            }
            Stage::Extracted => stage_extract(prev.unwrap(), cfg).map_err(|e| fail(stage, e))?,
            Stage::Grounded => {
                stage_ground(prev.unwrap(), cfg, &images_root).map_err(|e| fail(stage, e))?
            }
            Stage::Rendered => stage_render(
                prev.unwrap(),
                &cfg.style,
                &images_root,
                &paths.images_dir,
                cfg.parallelism,
            )
            .map_err(|e| fail(stage, e))?,
            Stage::Adapted => {
                let templates = load_templates(cfg).map_err(|e| fail(stage, e))?;
                stage_adapt(prev.unwrap(), &templates).map_err(|e| fail(stage, e))?
            }
        };
        stamp(&mut manifest);
        write_manifest(&manifest, &file).map_err(|e| fail(stage, e))?;
        log_event(
            stage.name(),
            None,
            &format!(
                "wrote {} records to {}",
                manifest.records.len(),
                file.display()
            ),
        );
        stages_run.push(stage);
        Ok(manifest)
    };

    let ingested = run_stage(Stage::Ingested, None, &mut stages_run, &mut stages_skipped)?;
    let extracted = run_stage(
        Stage::Extracted,
        Some(&ingested),
        &mut stages_run,
        &mut stages_skipped,
    )?;
    let grounded = run_stage(
        Stage::Grounded,
        Some(&extracted),
        &mut stages_run,
        &mut stages_skipped,
    )?;
    let rendered = run_stage(
        Stage::Rendered,
        Some(&grounded),
        &mut stages_run,
        &mut stages_skipped,
    )?;
    let _adapted = run_stage(
        Stage::Adapted,
        Some(&rendered),
        &mut stages_run,
        &mut stages_skipped,
    )?;

    Ok(PipelineOutcome {
        final_manifest: paths.stage_file(Stage::Adapted),
        stages_run,
        stages_skipped,
    })
}
