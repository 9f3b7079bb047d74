//! Domain types shared by every pipeline stage.
//!
//! All coordinates are absolute integer pixels in the image coordinate
//! system (origin top-left). Boxes are half-open: a pixel `(x, y)` belongs
//! to a box iff `x_min <= x < x_max` and `y_min <= y < y_max`, so
//! `area = (x_max - x_min) * (y_max - y_min)`.

use anyhow::{bail, ensure, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Open questions take free-text answers, closed questions a fixed choice
/// (yes/no or one of the listed options).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    Open,
    Closed,
}

impl fmt::Display for AnswerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnswerType::Open => write!(f, "open"),
            AnswerType::Closed => write!(f, "closed"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Slake,
    VqaRad,
    PmcVqa,
    Generic,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetKind::Slake => write!(f, "slake"),
            DatasetKind::VqaRad => write!(f, "vqa_rad"),
            DatasetKind::PmcVqa => write!(f, "pmc_vqa"),
            DatasetKind::Generic => write!(f, "generic"),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slake" => Ok(DatasetKind::Slake),
            "vqa_rad" | "vqa-rad" => Ok(DatasetKind::VqaRad),
            "pmc_vqa" | "pmc-vqa" => Ok(DatasetKind::PmcVqa),
            "generic" => Ok(DatasetKind::Generic),
            other => bail!(
                "unknown dataset kind '{other}' (expected slake, vqa_rad, pmc_vqa or generic)"
            ),
        }
    }
}

/// Dataset split. The pipeline only distinguishes train and test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl FromStr for Split {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => bail!("unknown split '{other}' (expected train or test)"),
        }
    }
}

/// Pipeline stages in execution order. `Ord` follows that order, which is
/// what lets manifest readers check that the stage only ever advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingested,
    Extracted,
    Grounded,
    Rendered,
    Adapted,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Ingested,
        Stage::Extracted,
        Stage::Grounded,
        Stage::Rendered,
        Stage::Adapted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingested => "ingested",
            Stage::Extracted => "extracted",
            Stage::Grounded => "grounded",
            Stage::Rendered => "rendered",
            Stage::Adapted => "adapted",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Marker shapes drawn onto images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Scribble,
    Rectangle,
    Ellipse,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Scribble, Shape::Rectangle, Shape::Ellipse];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Scribble => "scribble",
            Shape::Rectangle => "rectangle",
            Shape::Ellipse => "ellipse",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl FromStr for Shape {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scribble" => Ok(Shape::Scribble),
            "rectangle" => Ok(Shape::Rectangle),
            "ellipse" => Ok(Shape::Ellipse),
            other => bail!("unknown shape '{other}' (expected scribble, rectangle or ellipse)"),
        }
    }
}

/// Fixed marker palette. Serialized as both the name and the RGB triple so
/// manifests are self-describing; the mapping below is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ColorRepr", into = "ColorRepr")]
pub enum PaletteColor {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl PaletteColor {
    pub const ALL: [PaletteColor; 6] = [
        PaletteColor::Red,
        PaletteColor::Green,
        PaletteColor::Blue,
        PaletteColor::Yellow,
        PaletteColor::Magenta,
        PaletteColor::Cyan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PaletteColor::Red => "red",
            PaletteColor::Green => "green",
            PaletteColor::Blue => "blue",
            PaletteColor::Yellow => "yellow",
            PaletteColor::Magenta => "magenta",
            PaletteColor::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            PaletteColor::Red => [255, 0, 0],
            PaletteColor::Green => [0, 255, 0],
            PaletteColor::Blue => [0, 0, 255],
            PaletteColor::Yellow => [255, 255, 0],
            PaletteColor::Magenta => [255, 0, 255],
            PaletteColor::Cyan => [0, 255, 255],
        }
    }
}

impl fmt::Display for PaletteColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

impl FromStr for PaletteColor {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        PaletteColor::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| anyhow::anyhow!("unknown palette color '{s}'"))
    }
}

/// Wire representation of a palette color: name plus RGB triple.
#[derive(Serialize, Deserialize)]
struct ColorRepr {
    name: String,
    rgb: [u8; 3],
}

impl From<PaletteColor> for ColorRepr {
    fn from(c: PaletteColor) -> Self {
        ColorRepr {
            name: c.name().to_string(),
            rgb: c.rgb(),
        }
    }
}

impl TryFrom<ColorRepr> for PaletteColor {
    type Error = anyhow::Error;
    fn try_from(repr: ColorRepr) -> Result<Self> {
        let color = repr.name.parse::<PaletteColor>()?;
        ensure!(
            color.rgb() == repr.rgb,
            "color '{}' carries rgb {:?}, palette defines {:?}",
            repr.name,
            repr.rgb,
            color.rgb()
        );
        Ok(color)
    }
}

/// One normalized question/answer item bound to an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VQARecord {
    /// Unique, stable id within a manifest.
    pub id: String,
    /// Image path relative to the dataset root.
    pub image_path: String,
    pub question: String,
    pub answer: String,
    pub answer_type: AnswerType,
    /// Choice texts for multiple-choice datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub dataset: DatasetKind,
    /// Original option letter ("A".."D") kept for provenance when the
    /// source answer was a letter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_letter: Option<String>,
    /// Question language where the source provides one (SLAKE is bilingual).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
    /// Set at ingest when the referenced image file does not exist. Flagged
    /// records are carried through but skipped by image-touching stages.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub missing_image: bool,
}

impl VQARecord {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.id.is_empty(), "record id must be non-empty");
        ensure!(
            !self.image_path.is_empty(),
            "record {}: image_path must be non-empty",
            self.id
        );
        if self.answer_type == AnswerType::Closed {
            if let Some(options) = &self.options {
                if !options.is_empty() {
                    let answer = self.answer.trim();
                    let is_option = options.iter().any(|o| o.trim() == answer);
                    let is_letter = answer.len() == 1
                        && answer
                            .chars()
                            .next()
                            .map(|c| {
                                c.is_ascii_alphabetic()
                                    && (c.to_ascii_uppercase() as usize - 'A' as usize)
                                        < options.len()
                            })
                            .unwrap_or(false);
                    ensure!(
                        is_option || is_letter,
                        "record {}: closed answer '{}' is neither an option nor an option letter",
                        self.id,
                        self.answer
                    );
                }
            }
        }
        Ok(())
    }
}

/// Pixel-space axis-aligned region with the detector confidence and the
/// entity text that produced it. Half-open on both axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    /// Detector confidence in [0, 1].
    pub score: f64,
    /// Entity text this box grounds.
    pub entity: String,
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32, score: f64, entity: &str) -> Self {
        BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
            score,
            entity: entity.to_string(),
        }
    }

    pub fn width(&self) -> u32 {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> u32 {
        self.y_max.saturating_sub(self.y_min)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.x_min < self.x_max && self.y_min < self.y_max,
            "degenerate box [{},{},{},{}] for entity '{}'",
            self.x_min,
            self.y_min,
            self.x_max,
            self.y_max,
            self.entity
        );
        ensure!(
            (0.0..=1.0).contains(&self.score),
            "box score {} outside [0,1] for entity '{}'",
            self.score,
            self.entity
        );
        Ok(())
    }
}

/// Shape-specific geometry of a marker. Rectangles and ellipses are defined
/// by the box they stroke / are inscribed in; scribbles by their ordered
/// control points (continuous pixel coordinates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptGeometry {
    Rectangle {
        x_min: u32,
        y_min: u32,
        x_max: u32,
        y_max: u32,
    },
    Ellipse {
        x_min: u32,
        y_min: u32,
        x_max: u32,
        y_max: u32,
    },
    Scribble {
        points: Vec<[f64; 2]>,
    },
}

/// A renderable marker derived from a bounding box. The `(color, shape)`
/// pair is exactly what the instruction adapter mentions in text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualPrompt {
    pub shape: Shape,
    pub color: PaletteColor,
    /// Marker opacity in [0, 1] used for alpha blending.
    pub alpha: f64,
    /// Stroke thickness in pixels, >= 1.
    pub thickness: u32,
    pub geometry: PromptGeometry,
    pub source_box: BoundingBox,
}

impl VisualPrompt {
    pub fn validate(&self) -> Result<()> {
        self.source_box.validate()?;
        ensure!(
            (0.0..=1.0).contains(&self.alpha),
            "prompt alpha {} outside [0,1]",
            self.alpha
        );
        ensure!(self.thickness >= 1, "prompt thickness must be >= 1");
        let b = &self.source_box;
        match &self.geometry {
            PromptGeometry::Rectangle {
                x_min,
                y_min,
                x_max,
                y_max,
            }
            | PromptGeometry::Ellipse {
                x_min,
                y_min,
                x_max,
                y_max,
            } => {
                ensure!(
                    *x_min >= b.x_min
                        && *x_max <= b.x_max
                        && *y_min >= b.y_min
                        && *y_max <= b.y_max,
                    "prompt geometry [{x_min},{y_min},{x_max},{y_max}] outside source box"
                );
                ensure!(x_min < x_max && y_min < y_max, "degenerate prompt geometry");
            }
            PromptGeometry::Scribble { points } => {
                ensure!(!points.is_empty(), "scribble has no control points");
                for p in points {
                    ensure!(
                        p[0] >= f64::from(b.x_min)
                            && p[0] <= f64::from(b.x_max)
                            && p[1] >= f64::from(b.y_min)
                            && p[1] <= f64::from(b.y_max),
                        "scribble control point ({}, {}) outside source box",
                        p[0],
                        p[1]
                    );
                }
            }
        }
        Ok(())
    }
}

/// One manifest line: a VQA record plus whatever later stages have added.
/// Fields for stages that have not run yet are absent (`None`), which is
/// distinct from a stage that ran and produced nothing (`Some(vec![])`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRecord {
    pub base: VQARecord,
    /// Per-record seed; a pure function of (master seed, record id).
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BoundingBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<Vec<VisualPrompt>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompted_image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_text: Option<String>,
    /// Image dimensions captured at render time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_height: Option<u32>,
    /// Set when the render stage could not read the image; such records are
    /// carried through with no prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render_error: Option<String>,
}

impl PipelineRecord {
    pub fn new(base: VQARecord, seed: u64) -> Self {
        PipelineRecord {
            base,
            seed,
            entities: None,
            boxes: None,
            prompts: None,
            prompted_image_path: None,
            instruction_text: None,
            image_width: None,
            image_height: None,
            render_error: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.base.id
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if let Some(boxes) = &self.boxes {
            for b in boxes {
                b.validate()?;
            }
        }
        if let Some(prompts) = &self.prompts {
            let boxes = self.boxes.as_deref().unwrap_or(&[]);
            ensure!(
                prompts.len() <= boxes.len(),
                "record {}: {} prompts exceed {} boxes",
                self.base.id,
                prompts.len(),
                boxes.len()
            );
            for p in prompts {
                p.validate()?;
                ensure!(
                    boxes.contains(&p.source_box),
                    "record {}: prompt source box is not one of the record's boxes",
                    self.base.id
                );
            }
        }
        Ok(())
    }
}
