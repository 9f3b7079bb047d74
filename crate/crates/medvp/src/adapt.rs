//! Instruction-text adaptation and record linting.
//!
//! Adaptation rewrites the question into an instruction that names each
//! marker by its two key attributes (color, shape) so the language side
//! knows the markers exist. Templates ship as editable config, not
//! constants; the defaults below are the built-in version 1 set.

use crate::types::{AnswerType, PipelineRecord};
use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// Lint thresholds are tunable; this is the default marker-area fraction
/// below which a prompt counts as too small to perceive.
pub const DEFAULT_TINY_AREA_RATIO: f64 = 0.001;

/// Templates for one prompt state, per answer type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTemplates {
    pub open: String,
    pub closed: String,
    pub multiple_choice: String,
}

/// The full template set. `prompted` templates must use `{markers}` and
/// `{question}`; `plain` templates only `{question}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub version: u32,
    /// Phrase for one marker; slots `{color}` and `{shape}`.
    pub marker_phrase: String,
    pub prompted: StageTemplates,
    pub plain: StageTemplates,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            version: 1,
            marker_phrase: "the {color} {shape}".to_string(),
            prompted: StageTemplates {
                open: "Carefully observe the area marked by {markers} in the image and answer the question. {question}".to_string(),
                closed: "Carefully observe the area marked by {markers} in the image and answer the question with a short answer. {question}".to_string(),
                multiple_choice: "Carefully observe the area marked by {markers} in the image and choose the correct option for the question. {question}".to_string(),
            },
            plain: StageTemplates {
                open: "Answer the question based on the image. {question}".to_string(),
                closed: "Answer the question based on the image with a short answer. {question}".to_string(),
                multiple_choice: "Choose the correct option for the question based on the image. {question}".to_string(),
            },
        }
    }
}

impl TemplateSet {
    /// Load `templates.json` from a directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("templates.json");
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading templates {}", path.display()))?;
        let set: TemplateSet =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("templates.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    /// Every slot must be resolvable: reject unknown `{slot}` names and
    /// require the mandatory slots per template kind.
    pub fn validate(&self) -> Result<()> {
        check_slots(
            "marker_phrase",
            &self.marker_phrase,
            &["color", "shape"],
            &["color", "shape"],
        )?;
        for (name, text) in [
            ("prompted.open", &self.prompted.open),
            ("prompted.closed", &self.prompted.closed),
            ("prompted.multiple_choice", &self.prompted.multiple_choice),
        ] {
            check_slots(
                name,
                text,
                &["markers", "question"],
                &["markers", "question"],
            )?;
        }
        for (name, text) in [
            ("plain.open", &self.plain.open),
            ("plain.closed", &self.plain.closed),
            ("plain.multiple_choice", &self.plain.multiple_choice),
        ] {
            check_slots(name, text, &["question"], &["question"])?;
        }
        Ok(())
    }
}

/// Scan `{slot}` tokens in a template; unknown slots are unresolvable and
/// rejected by name, required slots must appear.
fn check_slots(name: &str, template: &str, allowed: &[&str], required: &[&str]) -> Result<()> {
    let mut rest = template;
    let mut seen = Vec::new();
    while let Some(start) = rest.find('{') {
        let Some(len) = rest[start + 1..].find('}') else {
            bail!("template {name}: unterminated slot");
        };
        let slot = &rest[start + 1..start + 1 + len];
        if !allowed.contains(&slot) {
            bail!("template {name}: unresolvable slot {{{slot}}}");
        }
        seen.push(slot.to_string());
        rest = &rest[start + 1 + len + 1..];
    }
    for req in required {
        ensure!(
            seen.iter().any(|s| s == req),
            "template {name}: missing required slot {{{req}}}"
        );
    }
    Ok(())
}

/// "the red rectangle" / "a and b" / "a, b, and c" phrasing.
fn join_markers(phrases: &[String]) -> String {
    match phrases.len() {
        0 => String::new(),
        1 => phrases[0].clone(),
        2 => format!("{} and {}", phrases[0], phrases[1]),
        n => {
            let head = phrases[..n - 1].join(", ");
            format!("{head}, and {}", phrases[n - 1])
        }
    }
}

/// Fixed "A. ... B. ..." option block appended to multiple-choice
/// instructions, one option per line.
fn options_block(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, opt)| format!("{}. {}", (b'A' + i as u8) as char, opt))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Build the instruction text for a rendered record. Markers are named in
/// prompt order; the original question always appears verbatim.
pub fn adapt_text(record: &PipelineRecord, templates: &TemplateSet) -> Result<String> {
    templates.validate()?;
    let prompts = record.prompts.as_deref().unwrap_or(&[]);
    let options = record.base.options.as_deref().unwrap_or(&[]);
    let is_mc = record.base.answer_type == AnswerType::Closed && !options.is_empty();

    let group = if prompts.is_empty() {
        &templates.plain
    } else {
        &templates.prompted
    };
    let template = if is_mc {
        &group.multiple_choice
    } else {
        match record.base.answer_type {
            AnswerType::Open => &group.open,
            AnswerType::Closed => &group.closed,
        }
    };

    let mut text = template.clone();
    if !prompts.is_empty() {
        let phrases: Vec<String> = prompts
            .iter()
            .map(|p| {
                templates
                    .marker_phrase
                    .replace("{color}", p.color.name())
                    .replace("{shape}", p.shape.name())
            })
            .collect();
        text = text.replace("{markers}", &join_markers(&phrases));
    }
    // Question substitution last, so braces inside the question survive.
    text = text.replace("{question}", &record.base.question);
    if is_mc {
        text.push('\n');
        text.push_str(&options_block(options));
    }
    Ok(text)
}

/// Known ways markers mislead a model; lint flags records that fit one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LintCategory {
    /// Marker footprint below the area threshold; easily missed.
    TinyPrompt,
    /// Counting question; the number of markers itself can bias the count.
    CountQuestion,
    /// Existence question with at least one marker; a marker suggests "yes".
    ExistenceQuestion,
    /// Question or entity mentions left/right; a misplaced marker flips sides.
    Laterality,
}

impl fmt::Display for LintCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LintCategory::TinyPrompt => "TINY_PROMPT",
            LintCategory::CountQuestion => "COUNT_QUESTION",
            LintCategory::ExistenceQuestion => "EXISTENCE_QUESTION",
            LintCategory::Laterality => "LATERALITY",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LintWarning {
    pub record_id: String,
    pub category: LintCategory,
    pub detail: String,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

fn is_existence_question(question_lower: &str, tokens: &[String]) -> bool {
    if question_lower.contains("is there") || question_lower.contains("are there") {
        return true;
    }
    // "does ... contain"
    if let Some(does_at) = tokens.iter().position(|t| t == "does" || t == "do") {
        if tokens[does_at..].iter().any(|t| t.starts_with("contain")) {
            return true;
        }
    }
    // "any ...?"
    tokens.iter().any(|t| t == "any") && question_lower.contains('?')
}

/// Check one rendered+adapted record against the error taxonomy. Warnings
/// never mutate the record; downstream decides what to do with them.
pub fn lint(record: &PipelineRecord, tiny_area_ratio: f64) -> Vec<LintWarning> {
    let mut warnings = Vec::new();
    let id = record.id().to_string();
    let prompts = record.prompts.as_deref().unwrap_or(&[]);
    let question_lower = record.base.question.to_lowercase();
    let tokens = words(&record.base.question);

    if let (Some(w), Some(h)) = (record.image_width, record.image_height) {
        let image_area = f64::from(w) * f64::from(h);
        if image_area > 0.0 {
            for (i, p) in prompts.iter().enumerate() {
                let ratio = p.source_box.area() as f64 / image_area;
                if ratio < tiny_area_ratio {
                    warnings.push(LintWarning {
                        record_id: id.clone(),
                        category: LintCategory::TinyPrompt,
                        detail: format!(
                            "prompt {i} covers {:.5}% of the image (threshold {:.3}%)",
                            ratio * 100.0,
                            tiny_area_ratio * 100.0
                        ),
                    });
                }
            }
        }
    }

    if question_lower.contains("how many") || question_lower.contains("number of") {
        warnings.push(LintWarning {
            record_id: id.clone(),
            category: LintCategory::CountQuestion,
            detail: "counting question; marker count can bias the answer".to_string(),
        });
    }

    if !prompts.is_empty() && is_existence_question(&question_lower, &tokens) {
        warnings.push(LintWarning {
            record_id: id.clone(),
            category: LintCategory::ExistenceQuestion,
            detail: "existence question with a marker present".to_string(),
        });
    }

    let lateral_in_question = tokens.iter().any(|t| t == "left" || t == "right");
    let lateral_in_entities = record
        .entities
        .as_deref()
        .unwrap_or(&[])
        .iter()
        .flat_map(|e| words(e))
        .any(|t| t == "left" || t == "right");
    if lateral_in_question || lateral_in_entities {
        warnings.push(LintWarning {
            record_id: id,
            category: LintCategory::Laterality,
            detail: "question or entity mentions laterality; a misplaced marker flips sides"
                .to_string(),
        });
    }

    warnings
}
