//! Ablation protocols and prediction scoring.
//!
//! Dropout keeps an exact floor(ratio * N) of the prompt instances pooled
//! across all records; shape restriction re-renders every marker with one
//! forced shape; strip removes markers entirely. Scoring reports token-set
//! recall for open questions and normalized exact match for closed ones.

use crate::adapt::{adapt_text, TemplateSet};
use crate::manifest::Manifest;
use crate::render::{render_record, PromptStyle};
use crate::seed::derive_seed;
use crate::types::{AnswerType, PipelineRecord, Shape, Stage};
use anyhow::{bail, ensure, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// One model answer keyed by record id. Prediction files are JSONL with
/// one of these per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub answer: String,
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading predictions {}", path.display()))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line)
            .with_context(|| format!("{}: line {}: malformed prediction", path.display(), i + 1))?;
        ensure!(
            seen.insert(p.id.clone()),
            "duplicate prediction id '{}'",
            p.id
        );
        out.push(p);
    }
    Ok(out)
}

/// Number of prompts kept by dropout: floor(ratio * total). The small
/// epsilon absorbs binary-representation error in ratio * total (e.g.
/// 0.6 * 10 must keep 6, not 5).
pub fn dropout_keep_count(total: usize, keep_ratio: f64) -> usize {
    ((keep_ratio * total as f64) + 1e-9).floor() as usize
}

/// Keep exactly floor(keep_ratio * N) of the N prompt instances pooled
/// across all records, selected by a seeded global shuffle. Records that
/// lose every prompt revert their instruction text to the no-prompt
/// template and their image path to the original; records whose prompts
/// all survive are untouched. Pure manifest transformation: prompted
/// images of partially-affected records must be re-rendered afterwards
/// (see `render::rerender_from_prompts`).
pub fn dropout_sample(
    manifest: &Manifest,
    keep_ratio: f64,
    seed: u64,
    templates: &TemplateSet,
) -> Result<Manifest> {
    ensure!(
        keep_ratio > 0.0 && keep_ratio <= 1.0,
        "keep ratio {keep_ratio} outside (0, 1]"
    );

    // Pool prompt instances in manifest order.
    let mut pool = Vec::new();
    for (ri, rec) in manifest.records.iter().enumerate() {
        for pi in 0..rec.prompts.as_deref().unwrap_or(&[]).len() {
            pool.push((ri, pi));
        }
    }
    let n_keep = dropout_keep_count(pool.len(), keep_ratio);

    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let kept: BTreeSet<usize> = order.into_iter().take(n_keep).collect();

    let mut kept_per_record: HashMap<usize, Vec<usize>> = HashMap::new();
    for (pool_idx, &(ri, pi)) in pool.iter().enumerate() {
        if kept.contains(&pool_idx) {
            kept_per_record.entry(ri).or_default().push(pi);
        }
    }

    let mut out = manifest.clone();
    for (ri, rec) in out.records.iter_mut().enumerate() {
        let Some(prompts) = rec.prompts.clone() else {
            continue;
        };
        if prompts.is_empty() {
            continue;
        }
        let keep_indices = kept_per_record.remove(&ri).unwrap_or_default();
        if keep_indices.len() == prompts.len() {
            continue; // untouched, keeps r = 1.0 an identity
        }
        let surviving: Vec<_> = keep_indices.iter().map(|&pi| prompts[pi].clone()).collect();
        let now_empty = surviving.is_empty();
        rec.prompts = Some(surviving);
        if now_empty {
            rec.prompted_image_path = Some(rec.base.image_path.clone());
        }
        if rec.instruction_text.is_some() {
            rec.instruction_text = Some(adapt_text(rec, templates)?);
        }
    }
    Ok(out)
}

/// Shape condition for restriction runs: a single forced shape or the
/// original mixed sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeChoice {
    Single(Shape),
    Mix,
}

impl fmt::Display for ShapeChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeChoice::Single(s) => write!(f, "{s}"),
            ShapeChoice::Mix => write!(f, "mix"),
        }
    }
}

impl FromStr for ShapeChoice {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "mix" {
            Ok(ShapeChoice::Mix)
        } else {
            Ok(ShapeChoice::Single(s.parse()?))
        }
    }
}

/// Re-render every record with the shape set forced to one shape (`mix`
/// keeps the style's own set, reproducing the original render for the
/// original master seed). Source boxes are untouched; instruction text is
/// re-adapted where present.
#[allow(clippy::too_many_arguments)]
pub fn restrict_shape(
    manifest: &Manifest,
    choice: ShapeChoice,
    master_seed: u64,
    style: &PromptStyle,
    images_root: &Path,
    out_dir: &Path,
    templates: &TemplateSet,
) -> Result<Manifest> {
    ensure!(
        manifest.stage >= Stage::Rendered,
        "shape restriction needs a rendered manifest, got stage {}",
        manifest.stage
    );
    let forced = match choice {
        ShapeChoice::Single(s) => style.with_shapes(vec![s]),
        ShapeChoice::Mix => style.clone(),
    };
    let mut out = manifest.clone();
    out.master_seed = master_seed;
    for rec in out.records.iter_mut() {
        let mut reseeded = rec.clone();
        reseeded.seed = derive_seed(master_seed, rec.id());
        let (mut rendered, _) = render_record(&reseeded, images_root, out_dir, &forced)?;
        if rec.instruction_text.is_some() {
            rendered.instruction_text = Some(adapt_text(&rendered, templates)?);
        }
        *rec = rendered;
    }
    Ok(out)
}

/// Remove all markers: images revert to the originals, instruction text to
/// the no-prompt template. Boxes stay for provenance. Idempotent.
pub fn strip_prompts(manifest: &Manifest, templates: &TemplateSet) -> Result<Manifest> {
    ensure!(
        manifest.stage >= Stage::Rendered,
        "strip needs a rendered manifest, got stage {}",
        manifest.stage
    );
    let mut out = manifest.clone();
    for rec in out.records.iter_mut() {
        if rec.prompts.is_some() {
            rec.prompts = Some(Vec::new());
        }
        if rec.prompted_image_path.is_some() {
            rec.prompted_image_path = Some(rec.base.image_path.clone());
        }
        if rec.instruction_text.is_some() {
            rec.instruction_text = Some(adapt_text(rec, templates)?);
        }
    }
    Ok(out)
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercase alphanumeric runs.
pub fn answer_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Closed-answer normalization: lowercase, punctuation stripped, articles
/// dropped, single-spaced.
pub fn normalize_answer(text: &str) -> String {
    answer_tokens(text)
        .into_iter()
        .filter(|t| !ARTICLES.contains(&t.as_str()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Token-set recall of the prediction against the ground truth:
/// |GT ∩ pred| / |GT| over deduplicated token sets. An empty ground-truth
/// token set scores 1.0 (nothing to recall).
pub fn open_recall(gold: &str, prediction: &str) -> f64 {
    let gt: BTreeSet<String> = answer_tokens(gold).into_iter().collect();
    if gt.is_empty() {
        return 1.0;
    }
    let pred: BTreeSet<String> = answer_tokens(prediction).into_iter().collect();
    gt.intersection(&pred).count() as f64 / gt.len() as f64
}

fn option_letter(index: usize) -> String {
    ((b'A' + index as u8) as char).to_string().to_lowercase()
}

/// Index of the gold option for a multiple-choice record, resolved from
/// the provenance letter, a letter-valued answer, or the answer text.
fn gold_option_index(rec: &PipelineRecord, options: &[String]) -> Option<usize> {
    if let Some(letter) = &rec.base.answer_letter {
        let letter = letter.trim().to_uppercase();
        if letter.len() == 1 {
            let idx = (letter.as_bytes()[0].wrapping_sub(b'A')) as usize;
            if idx < options.len() {
                return Some(idx);
            }
        }
    }
    let answer = rec.base.answer.trim();
    if answer.len() == 1 && answer.chars().next().unwrap().is_ascii_alphabetic() {
        let idx = (answer.to_uppercase().as_bytes()[0] - b'A') as usize;
        if idx < options.len() {
            return Some(idx);
        }
    }
    let norm = normalize_answer(answer);
    options.iter().position(|o| normalize_answer(o) == norm)
}

/// Closed-question match: normalized exact match; multiple-choice records
/// also accept the option letter or "letter + text".
pub fn closed_match(rec: &PipelineRecord, prediction: &str) -> bool {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(&rec.base.answer);
    if pred == gold {
        return true;
    }
    let options = rec.base.options.as_deref().unwrap_or(&[]);
    if options.is_empty() {
        return false;
    }
    if let Some(idx) = gold_option_index(rec, options) {
        let letter = option_letter(idx);
        let text = normalize_answer(&options[idx]);
        return pred == letter
            || pred == text
            || (!text.is_empty() && pred == format!("{letter} {text}"));
    }
    false
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordScore {
    pub id: String,
    pub answer_type: AnswerType,
    /// Recall in [0,1] for open records, 0/1 accuracy for closed ones.
    pub value: f64,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
}

/// Scoring report: means over per-record values per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub label: String,
    pub open_recall: f64,
    pub closed_accuracy: f64,
    pub open_count: usize,
    pub closed_count: usize,
    /// Reference ids with no prediction; these count as wrong.
    pub missing_predictions: Vec<String>,
    pub rows: Vec<RecordScore>,
}

impl ScoreReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading report {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// Score predictions against a reference manifest. Every prediction id
/// must exist in the reference; reference records without a prediction
/// count as wrong and are listed. Scoring reads answers only, never
/// images, so stripped and prompted manifests score identically.
pub fn score(predictions: &[Prediction], reference: &Manifest, label: &str) -> Result<ScoreReport> {
    let ids: HashSet<&str> = reference.records.iter().map(|r| r.id()).collect();
    let unknown: Vec<&str> = predictions
        .iter()
        .map(|p| p.id.as_str())
        .filter(|id| !ids.contains(id))
        .collect();
    if !unknown.is_empty() {
        bail!("predictions for unknown ids: {}", unknown.join(", "));
    }
    let by_id: HashMap<&str, &str> = predictions
        .iter()
        .map(|p| (p.id.as_str(), p.answer.as_str()))
        .collect();

    let mut rows = Vec::with_capacity(reference.records.len());
    let mut missing = Vec::new();
    let (mut open_sum, mut open_n) = (0.0, 0usize);
    let (mut closed_sum, mut closed_n) = (0.0, 0usize);
    for rec in &reference.records {
        let predicted = by_id.get(rec.id()).copied();
        if predicted.is_none() {
            missing.push(rec.id().to_string());
        }
        let value = match rec.base.answer_type {
            AnswerType::Open => predicted.map_or(0.0, |p| open_recall(&rec.base.answer, p)),
            AnswerType::Closed => {
                predicted.map_or(0.0, |p| if closed_match(rec, p) { 1.0 } else { 0.0 })
            }
        };
        match rec.base.answer_type {
            AnswerType::Open => {
                open_sum += value;
                open_n += 1;
            }
            AnswerType::Closed => {
                closed_sum += value;
                closed_n += 1;
            }
        }
        rows.push(RecordScore {
            id: rec.id().to_string(),
            answer_type: rec.base.answer_type,
            value,
            gold: rec.base.answer.clone(),
            predicted: predicted.map(String::from),
        });
    }

    Ok(ScoreReport {
        label: label.to_string(),
        open_recall: if open_n > 0 {
            open_sum / open_n as f64
        } else {
            0.0
        },
        closed_accuracy: if closed_n > 0 {
            closed_sum / closed_n as f64
        } else {
            0.0
        },
        open_count: open_n,
        closed_count: closed_n,
        missing_predictions: missing,
        rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub open_recall: f64,
    pub closed_accuracy: f64,
    /// Deltas against the first row (after sorting by label).
    pub delta_open: f64,
    pub delta_closed: f64,
}

/// Side-by-side ablation table over two or more score reports, rows sorted
/// by label.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

pub fn compare(reports: &[ScoreReport]) -> Result<Comparison> {
    ensure!(reports.len() >= 2, "compare needs at least 2 reports");
    let mut sorted: Vec<&ScoreReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.label.cmp(&b.label));
    let base = sorted[0];
    let rows = sorted
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            open_recall: r.open_recall,
            closed_accuracy: r.closed_accuracy,
            delta_open: r.open_recall - base.open_recall,
            delta_closed: r.closed_accuracy - base.closed_accuracy,
        })
        .collect();
    Ok(Comparison { rows })
}

impl Comparison {
    pub fn markdown(&self) -> String {
        let mut out = String::from("| condition | open | closed | Δ open | Δ closed |\n");
        out.push_str("|---|---|---|---|---|\n");
        for row in &self.rows {
            out.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:+.4} | {:+.4} |\n",
                row.label, row.open_recall, row.closed_accuracy, row.delta_open, row.delta_closed
            ));
        }
        out
    }
}
