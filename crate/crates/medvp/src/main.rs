//! medvp command-line interface.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use medvp::adapt::{lint, TemplateSet, DEFAULT_TINY_AREA_RATIO};
use medvp::colormap::heatmap_overlay;
use medvp::config::PipelineConfig;
use medvp::grounding::{eval_grounding, read_gold_boxes};
use medvp::harness::{
    compare, dropout_sample, read_predictions, restrict_shape, score, strip_prompts, Prediction,
    ScoreReport, ShapeChoice,
};
use medvp::ingest::{ingest, validate, IngestOptions};
use medvp::manifest::{read_manifest, read_manifest_lenient, write_manifest};
use medvp::pipeline::{
    exit_code_for, log_event, run_pipeline, stage_adapt, stage_extract, stage_ground, stage_render,
};
use medvp::render::{rerender_from_prompts, PromptStyle};
use medvp::seed::derive_seed;
use medvp::types::{DatasetKind, PaletteColor, Shape, Split, Stage};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "medvp",
    version,
    about = "Visual-prompt dataset pipeline and evaluation harness for medical VQA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonConfig {
    /// Config file (TOML or JSON); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a dataset split into a normalized manifest.
    Ingest {
        #[arg(long)]
        dataset: DatasetKind,
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Master seed records derive their seeds from.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep only this language (bilingual sources).
        #[arg(long)]
        lang: Option<String>,
    },
    /// Report record/image counts and invariant violations.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Write the report as JSON here as well.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Extract region-level entities from questions.
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Chat-completion endpoint; gazetteer-only when omitted.
        #[arg(long)]
        llm_endpoint: Option<String>,
        #[arg(long, default_value = "default")]
        model: String,
        /// Extra gazetteer file (surface or "surface = canonical" lines).
        #[arg(long)]
        gazetteer: Option<PathBuf>,
        /// Fall back to the gazetteer when the LLM reply cannot be parsed.
        #[arg(long)]
        fallback: bool,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long, default_value_t = 3)]
        retries: u32,
    },
    /// Ground entities to bounding boxes via a detector service or stub.
    Ground {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset root the record image paths are relative to.
        #[arg(long)]
        images_root: PathBuf,
        /// Detector service endpoint.
        #[arg(long)]
        endpoint: Option<String>,
        /// Offline stub rule file (JSON map image id -> entity -> boxes).
        #[arg(long)]
        stub: Option<PathBuf>,
        #[arg(long, default_value_t = medvp::config::DEFAULT_SCORE_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = medvp::config::DEFAULT_TOP_K)]
        top_k: usize,
        /// Send images as base64 instead of by path.
        #[arg(long)]
        base64: bool,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long, default_value_t = 3)]
        retries: u32,
    },
    /// Evaluate grounded boxes against gold boxes (mean IoU/GIoU, hit rate).
    EvalGrounding {
        #[arg(long = "in")]
        input: PathBuf,
        /// Gold boxes: JSON map record id -> [{entity, x_min, ...}].
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rasterize markers and composite them onto images.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images_root: PathBuf,
        /// Directory for the prompted PNGs.
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated shape set, e.g. scribble,rectangle,ellipse.
        #[arg(long, value_delimiter = ',')]
        shapes: Option<Vec<Shape>>,
        /// Comma-separated palette subset, e.g. red,green.
        #[arg(long, value_delimiter = ',')]
        colors: Option<Vec<PaletteColor>>,
        /// Override the master seed (re-derives record seeds).
        #[arg(long)]
        seed: Option<u64>,
        /// Fix marker alpha to one value instead of sampling from a range.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
    },
    /// Rewrite instruction text so it names each marker.
    Adapt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory holding templates.json.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Write the built-in template set to the given directory and exit.
        #[arg(long)]
        emit_templates: Option<PathBuf>,
    },
    /// Check records against the error taxonomy.
    Lint {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Marker-area fraction below which a prompt is tiny.
        #[arg(long, default_value_t = DEFAULT_TINY_AREA_RATIO)]
        tiny_ratio: f64,
    },
    /// Randomly keep a fraction of all prompt instances (dropout protocol).
    Sample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        keep_ratio: f64,
        #[arg(long)]
        seed: u64,
        /// Re-render surviving markers into this directory (needs
        /// --images-root); manifest-only when omitted.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        images_root: Option<PathBuf>,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Re-render every marker with a single forced shape (or mix).
    Restrict {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// scribble, rectangle, ellipse, or mix.
        #[arg(long)]
        shape: ShapeChoice,
        /// Master seed for re-sampling (mix + original seed reproduces the
        /// original render).
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        images_root: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Remove all markers; images and instructions revert to originals.
    Strip {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Score predictions: token recall (open) and exact match (closed).
    Score {
        /// Predictions JSONL: {"id": ..., "answer": ...} per line.
        #[arg(long)]
        pred: PathBuf,
        /// Reference manifest.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        label: Option<String>,
    },
    /// Tabulate two or more score reports side by side.
    Compare {
        /// Score report JSON files.
        reports: Vec<PathBuf>,
        /// Write the markdown table here (stdout always gets it too).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Blend an attention grid over an image.
    OverlayAttn {
        #[arg(long)]
        image: PathBuf,
        /// JSON 2D array of nonnegative attention values.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Run ingest -> extract -> ground -> render -> adapt in one go.
    Pipeline {
        #[command(flatten)]
        common: CommonConfig,
        #[arg(long)]
        dataset: Option<DatasetKind>,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        stub: Option<PathBuf>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        llm_endpoint: Option<String>,
        #[arg(long)]
        lang: Option<String>,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long)]
        parallelism: Option<usize>,
        /// Recompute every stage even when its output exists.
        #[arg(long)]
        no_resume: bool,
        /// Print the plan; touch nothing.
        #[arg(long)]
        dry_run: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn stage_exit(stage: Stage, result: Result<ExitCode>) -> Result<ExitCode> {
    match result {
        Err(e) => {
            eprintln!("error: stage {stage} failed: {e:#}");
            Ok(ExitCode::from(exit_code_for(stage) as u8))
        }
        ok => ok,
    }
}

fn load_templates(dir: &Option<PathBuf>) -> Result<TemplateSet> {
    match dir {
        Some(dir) => TemplateSet::load(dir),
        None => Ok(TemplateSet::default()),
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Ingest {
            dataset,
            root,
            split,
            out,
            seed,
            lang,
        } => stage_exit(
            Stage::Ingested,
            (|| {
                let opts = IngestOptions {
                    master_seed: seed,
                    lang,
                };
                let manifest = ingest(dataset, &root, split, &opts)?;
                write_manifest(&manifest, &out)?;
                log_event(
                    "ingest",
                    None,
                    &format!("{} records -> {}", manifest.records.len(), out.display()),
                );
                Ok(ExitCode::SUCCESS)
            })(),
        ),

        Command::Validate { input, report } => {
            let (manifest, violations) = read_manifest_lenient(&input)?;
            let result = validate(&manifest, &violations);
            println!("{result}");
            if let Some(path) = report {
                write_json(&result, &path)?;
            }
            Ok(if result.ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }

        Command::Extract {
            input,
            out,
            llm_endpoint,
            model,
            gazetteer,
            fallback,
            parallelism,
            retries,
        } => stage_exit(
            Stage::Extracted,
            (|| {
                let manifest = read_manifest(&input)?;
                let mut cfg = manifest.config.clone().unwrap_or_default();
                cfg.apply_env();
                if llm_endpoint.is_some() {
                    cfg.llm_endpoint = llm_endpoint;
                }
                cfg.llm_model = model;
                cfg.gazetteer_file = gazetteer.map(|p| p.to_string_lossy().into_owned());
                cfg.llm_fallback = fallback;
                cfg.parallelism = parallelism;
                cfg.retries = retries;
                let out_manifest = stage_extract(&manifest, &cfg)?;
                write_manifest(&out_manifest, &out)?;
                Ok(ExitCode::SUCCESS)
            })(),
        ),

        Command::Ground {
            input,
            out,
            images_root,
            endpoint,
            stub,
            threshold,
            top_k,
            base64,
            parallelism,
            retries,
        } => stage_exit(
            Stage::Grounded,
            (|| {
                let manifest = read_manifest(&input)?;
                let mut cfg = manifest.config.clone().unwrap_or_default();
                cfg.stub_rules = stub.map(|p| p.to_string_lossy().into_owned());
                if cfg.stub_rules.is_none() {
                    cfg.apply_env();
                }
                if endpoint.is_some() {
                    cfg.grounding_endpoint = endpoint;
                }
                cfg.score_threshold = threshold;
                cfg.top_k = top_k;
                cfg.image_as_base64 = base64;
                cfg.parallelism = parallelism;
                cfg.retries = retries;
                let out_manifest = stage_ground(&manifest, &cfg, &images_root)?;
                write_manifest(&out_manifest, &out)?;
                Ok(ExitCode::SUCCESS)
            })(),
        ),

        Command::EvalGrounding {
            input,
            gold,
            report,
        } => {
            let manifest = read_manifest(&input)?;
            let gold = read_gold_boxes(&gold)?;
            let result = eval_grounding(&manifest, &gold)?;
            println!(
                "mean IoU {:.4}  mean GIoU {:.4}  hit@0.5 {:.4}  ({} pairs, {} matched)",
                result.mean_iou,
                result.mean_giou,
                result.hit_rate_at_50,
                result.pairs,
                result.matched
            );
            if let Some(path) = report {
                write_json(&result, &path)?;
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Render {
            input,
            out,
            images_root,
            out_dir,
            shapes,
            colors,
            seed,
            alpha,
            parallelism,
        } => stage_exit(
            Stage::Rendered,
            (|| {
                let mut manifest = read_manifest(&input)?;
                let mut cfg = manifest.config.clone().unwrap_or_default();
                if let Some(shapes) = shapes {
                    cfg.style.shapes = shapes;
                }
                if let Some(colors) = colors {
                    cfg.style.palette = colors;
                }
                if let Some(a) = alpha {
                    cfg.style.alpha_range = (a, a);
                }
                if let Some(master) = seed {
                    cfg.master_seed = master;
                    manifest.master_seed = master;
                    for rec in manifest.records.iter_mut() {
                        rec.seed = derive_seed(master, &rec.base.id);
                    }
                }
                let mut rendered =
                    stage_render(&manifest, &cfg.style, &images_root, &out_dir, parallelism)?;
                rendered.config = Some(cfg);
                write_manifest(&rendered, &out)?;
                Ok(ExitCode::SUCCESS)
            })(),
        ),

        Command::Adapt {
            input,
            out,
            templates,
            emit_templates,
        } => stage_exit(
            Stage::Adapted,
            (|| {
                if let Some(dir) = emit_templates {
                    TemplateSet::default().save(&dir)?;
                    println!("wrote built-in templates to {}", dir.display());
                    return Ok(ExitCode::SUCCESS);
                }
                let manifest = read_manifest(&input)?;
                let templates = load_templates(&templates)?;
                let adapted = stage_adapt(&manifest, &templates)?;
                write_manifest(&adapted, &out)?;
                Ok(ExitCode::SUCCESS)
            })(),
        ),

        Command::Lint {
            input,
            report,
            tiny_ratio,
        } => {
            let manifest = read_manifest(&input)?;
            if manifest.stage < Stage::Rendered {
                bail!(
                    "lint needs a rendered or adapted manifest, got stage {}",
                    manifest.stage
                );
            }
            let mut warnings = Vec::new();
            for rec in &manifest.records {
                warnings.extend(lint(rec, tiny_ratio));
            }
            let mut counts = std::collections::BTreeMap::new();
            for w in &warnings {
                *counts.entry(w.category.to_string()).or_insert(0usize) += 1;
            }
            let payload = serde_json::json!({
                "records": manifest.records.len(),
                "warnings": warnings,
                "counts": counts,
            });
            write_json(&payload, &report)?;
            println!(
                "{} warnings over {} records -> {}",
                warnings.len(),
                manifest.records.len(),
                report.display()
            );
            for (cat, n) in counts {
                println!("  {cat}: {n}");
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Sample {
            input,
            out,
            keep_ratio,
            seed,
            out_dir,
            images_root,
            templates,
        } => {
            let manifest = read_manifest(&input)?;
            let templates = load_templates(&templates)?;
            let mut sampled = dropout_sample(&manifest, keep_ratio, seed, &templates)?;
            match (out_dir, images_root) {
                (Some(out_dir), Some(images_root)) => {
                    for (i, rec) in sampled.records.clone().iter().enumerate() {
                        let changed = rec.prompts != manifest.records[i].prompts;
                        let has_prompts = rec.prompts.as_ref().is_some_and(|p| !p.is_empty());
                        if changed && has_prompts {
                            sampled.records[i] =
                                rerender_from_prompts(rec, &images_root, &out_dir)?;
                        }
                    }
                }
                (None, None) => log_event(
                    "sample",
                    None,
                    "manifest-only dropout; pass --out-dir and --images-root to re-render images",
                ),
                _ => bail!("--out-dir and --images-root must be given together"),
            }
            write_manifest(&sampled, &out)?;
            Ok(ExitCode::SUCCESS)
        }

        Command::Restrict {
            input,
            out,
            shape,
            seed,
            images_root,
            out_dir,
            templates,
        } => {
            let manifest = read_manifest(&input)?;
            let templates = load_templates(&templates)?;
            let style = manifest
                .config
                .as_ref()
                .map(|c| c.style.clone())
                .unwrap_or_else(PromptStyle::default);
            let restricted = restrict_shape(
                &manifest,
                shape,
                seed,
                &style,
                &images_root,
                &out_dir,
                &templates,
            )?;
            write_manifest(&restricted, &out)?;
            Ok(ExitCode::SUCCESS)
        }

        Command::Strip {
            input,
            out,
            templates,
        } => {
            let manifest = read_manifest(&input)?;
            let templates = load_templates(&templates)?;
            let stripped = strip_prompts(&manifest, &templates)?;
            write_manifest(&stripped, &out)?;
            Ok(ExitCode::SUCCESS)
        }

        Command::Score {
            pred,
            reference,
            report,
            label,
        } => {
            let predictions: Vec<Prediction> = read_predictions(&pred)?;
            let manifest = read_manifest(&reference)?;
            let label = label.unwrap_or_else(|| {
                pred.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "predictions".to_string())
            });
            let result = score(&predictions, &manifest, &label)?;
            result.save(&report)?;
            println!(
                "open recall {:.4} ({} records)  closed accuracy {:.4} ({} records)  missing {}",
                result.open_recall,
                result.open_count,
                result.closed_accuracy,
                result.closed_count,
                result.missing_predictions.len()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Compare { reports, out, json } => {
            let loaded: Vec<ScoreReport> = reports
                .iter()
                .map(|p| ScoreReport::load(p))
                .collect::<Result<_>>()?;
            let table = compare(&loaded)?;
            let md = table.markdown();
            print!("{md}");
            if let Some(path) = out {
                std::fs::write(&path, &md)?;
            }
            if let Some(path) = json {
                write_json(&table, &path)?;
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::OverlayAttn {
            image,
            grid,
            out,
            alpha,
        } => {
            let img = image::open(&image)
                .with_context(|| format!("reading {}", image.display()))?
                .to_rgb8();
            let grid_text = std::fs::read_to_string(&grid)
                .with_context(|| format!("reading {}", grid.display()))?;
            let grid: Vec<Vec<f64>> = serde_json::from_str(&grid_text)
                .with_context(|| format!("parsing {} as a 2D number array", grid.display()))?;
            let overlaid = heatmap_overlay(&img, &grid, alpha)?;
            overlaid
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            Ok(ExitCode::SUCCESS)
        }

        Command::Pipeline {
            common,
            dataset,
            root,
            split,
            out_dir,
            seed,
            stub,
            endpoint,
            llm_endpoint,
            lang,
            templates,
            parallelism,
            no_resume,
            dry_run,
        } => {
            let mut cfg = match &common.config {
                Some(path) => PipelineConfig::load(path)?,
                None => PipelineConfig::default(),
            };
            cfg.apply_env();
            if let Some(v) = dataset {
                cfg.dataset = v;
            }
            if let Some(v) = root {
                cfg.root = v.to_string_lossy().into_owned();
            }
            if let Some(v) = split {
                cfg.split = v;
            }
            if let Some(v) = out_dir {
                cfg.out_dir = v.to_string_lossy().into_owned();
            }
            if let Some(v) = seed {
                cfg.master_seed = v;
            }
            if let Some(v) = stub {
                cfg.stub_rules = Some(v.to_string_lossy().into_owned());
            }
            if let Some(v) = endpoint {
                cfg.grounding_endpoint = Some(v);
            }
            if let Some(v) = llm_endpoint {
                cfg.llm_endpoint = Some(v);
            }
            if let Some(v) = lang {
                cfg.lang = Some(v);
            }
            if let Some(v) = templates {
                cfg.templates_dir = Some(v.to_string_lossy().into_owned());
            }
            if let Some(v) = parallelism {
                cfg.parallelism = v;
            }
            if cfg.root.is_empty() {
                bail!("pipeline needs --root (or a config file setting `root`)");
            }
            match run_pipeline(&cfg, !no_resume, dry_run) {
                Ok(outcome) => {
                    log_event(
                        "pipeline",
                        None,
                        &format!(
                            "done: {} (ran {:?}, skipped {:?})",
                            outcome.final_manifest.display(),
                            outcome
                                .stages_run
                                .iter()
                                .map(|s| s.name())
                                .collect::<Vec<_>>(),
                            outcome
                                .stages_skipped
                                .iter()
                                .map(|s| s.name())
                                .collect::<Vec<_>>(),
                        ),
                    );
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Ok(ExitCode::from(e.exit_code() as u8))
                }
            }
        }
    }
}
