//! Prompt sampling and record rendering.
//!
//! Every marker is sampled from a record-keyed RNG, so the same (box,
//! seed, style) always yields the same prompt and the rendered image set
//! is a pure function of (manifest, master seed, config).

use crate::raster::{alpha_blend, rasterize};
use crate::seed::derive_seed;
use crate::types::{
    BoundingBox, PaletteColor, PipelineRecord, PromptGeometry, Shape, VisualPrompt,
};
use anyhow::{ensure, Context, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Marker sampling style: which shapes and colors are enabled and the
/// ranges attributes are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptStyle {
    pub shapes: Vec<Shape>,
    pub palette: Vec<PaletteColor>,
    /// Marker opacity sampling range. Kept high by default so markers stay
    /// clearly visible.
    pub alpha_range: (f64, f64),
    /// Stroke thickness choices in pixels at `reference_size`; the sampled
    /// value is scaled by `min(image_w, image_h) / reference_size` and
    /// clamped to at least 1.
    pub thickness_choices: Vec<u32>,
    pub reference_size: u32,
}

impl Default for PromptStyle {
    fn default() -> Self {
        PromptStyle {
            shapes: Shape::ALL.to_vec(),
            palette: PaletteColor::ALL.to_vec(),
            alpha_range: (0.6, 0.9),
            thickness_choices: vec![2, 3, 4, 5],
            reference_size: 512,
        }
    }
}

impl PromptStyle {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.shapes.is_empty(), "no shapes enabled");
        ensure!(!self.palette.is_empty(), "empty palette");
        ensure!(
            0.0 <= self.alpha_range.0
                && self.alpha_range.0 <= self.alpha_range.1
                && self.alpha_range.1 <= 1.0,
            "alpha range {:?} invalid",
            self.alpha_range
        );
        ensure!(!self.thickness_choices.is_empty(), "no thickness choices");
        ensure!(
            self.thickness_choices.iter().all(|&t| t >= 1),
            "thickness choices must be >= 1"
        );
        ensure!(self.reference_size >= 1, "reference size must be >= 1");
        Ok(())
    }

    /// Style with the shape set replaced (used by shape-restriction runs).
    pub fn with_shapes(&self, shapes: Vec<Shape>) -> Self {
        PromptStyle {
            shapes,
            ..self.clone()
        }
    }
}

/// Number of scribble control points.
const SCRIBBLE_POINTS: usize = 5;
/// Scribble control points are confined to the box inset by this fraction
/// of its width/height on every side.
const SCRIBBLE_INSET: f64 = 0.1;

/// Sample a visual prompt for a box. Deterministic: identical
/// `(box, seed, style, image_dims)` yield identical prompts. Returns the
/// prompt plus any warnings (currently: thickness reduced to fit a small
/// box).
pub fn sample_prompt(
    source_box: &BoundingBox,
    seed: u64,
    style: &PromptStyle,
    image_dims: (u32, u32),
) -> (VisualPrompt, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();

    // Draw order is frozen: shape, color, alpha, thickness, then geometry.
    let shape = style.shapes[rng.gen_range(0..style.shapes.len())];
    let color = style.palette[rng.gen_range(0..style.palette.len())];
    let (alo, ahi) = style.alpha_range;
    let alpha = if alo < ahi {
        rng.gen_range(alo..=ahi)
    } else {
        alo
    };
    let base_t = style.thickness_choices[rng.gen_range(0..style.thickness_choices.len())];

    let min_dim = image_dims.0.min(image_dims.1).max(1);
    let scaled = ((u64::from(base_t) * u64::from(min_dim) + u64::from(style.reference_size) / 2)
        / u64::from(style.reference_size))
    .max(1) as u32;

    let (bw, bh) = (source_box.width(), source_box.height());
    let max_fit = (bw.min(bh) / 2).max(1);
    let thickness = if 2 * scaled > bw || 2 * scaled > bh {
        let reduced = scaled.min(max_fit);
        warnings.push(format!(
            "box {}x{} smaller than 2x thickness {scaled}; reduced to {reduced}",
            bw, bh
        ));
        reduced
    } else {
        scaled
    };

    let geometry = match shape {
        Shape::Rectangle => PromptGeometry::Rectangle {
            x_min: source_box.x_min,
            y_min: source_box.y_min,
            x_max: source_box.x_max,
            y_max: source_box.y_max,
        },
        Shape::Ellipse => PromptGeometry::Ellipse {
            x_min: source_box.x_min,
            y_min: source_box.y_min,
            x_max: source_box.x_max,
            y_max: source_box.y_max,
        },
        Shape::Scribble => {
            let fx0 = f64::from(source_box.x_min) + SCRIBBLE_INSET * f64::from(bw);
            let fx1 = f64::from(source_box.x_max) - SCRIBBLE_INSET * f64::from(bw);
            let fy0 = f64::from(source_box.y_min) + SCRIBBLE_INSET * f64::from(bh);
            let fy1 = f64::from(source_box.y_max) - SCRIBBLE_INSET * f64::from(bh);
            let cell = (fx1 - fx0) / SCRIBBLE_POINTS as f64;
            let points = (0..SCRIBBLE_POINTS)
                .map(|i| {
                    let lo = fx0 + cell * i as f64;
                    let hi = fx0 + cell * (i + 1) as f64;
                    let px = if lo < hi { rng.gen_range(lo..hi) } else { lo };
                    let py = if fy0 < fy1 {
                        rng.gen_range(fy0..fy1)
                    } else {
                        (fy0 + fy1) / 2.0
                    };
                    [px, py]
                })
                .collect();
            PromptGeometry::Scribble { points }
        }
    };

    (
        VisualPrompt {
            shape,
            color,
            alpha,
            thickness,
            geometry,
            source_box: source_box.clone(),
        },
        warnings,
    )
}

/// Replace characters that are unsafe in file names.
pub fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Output PNG path for a record.
pub fn prompted_image_path(out_dir: &Path, record_id: &str) -> PathBuf {
    out_dir.join(format!("{}.png", sanitize_id(record_id)))
}

/// Render one record: sample a prompt per box, rasterize, blend and write
/// the PNG. Records whose image is missing or unreadable are flagged and
/// carried through without prompts instead of failing the stage.
pub fn render_record(
    record: &PipelineRecord,
    images_root: &Path,
    out_dir: &Path,
    style: &PromptStyle,
) -> Result<(PipelineRecord, Vec<String>)> {
    style.validate()?;
    let mut rec = record.clone();
    let mut warnings = Vec::new();

    if rec.base.missing_image {
        rec.prompts = Some(Vec::new());
        rec.prompted_image_path = None;
        rec.render_error = Some("image missing at ingest".to_string());
        return Ok((rec, warnings));
    }

    let src = images_root.join(&rec.base.image_path);
    let img = match image::open(&src) {
        Ok(img) => img.to_rgb8(),
        Err(e) => {
            rec.prompts = Some(Vec::new());
            rec.prompted_image_path = None;
            rec.render_error = Some(format!("unreadable image {}: {e}", src.display()));
            return Ok((rec, warnings));
        }
    };
    let (w, h) = (img.width(), img.height());
    rec.image_width = Some(w);
    rec.image_height = Some(h);

    // Boxes were clipped at grounding time; clip again against the actual
    // decode dimensions and drop anything degenerate.
    let boxes: Vec<BoundingBox> = rec
        .boxes
        .clone()
        .unwrap_or_default()
        .into_iter()
        .filter_map(|mut b| {
            b.x_max = b.x_max.min(w);
            b.y_max = b.y_max.min(h);
            if b.x_min < b.x_max && b.y_min < b.y_max {
                Some(b)
            } else {
                warnings.push(format!(
                    "record {}: dropped box outside {}x{} image",
                    rec.base.id, w, h
                ));
                None
            }
        })
        .collect();

    let mut out = img;
    let mut prompts = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let prompt_seed = derive_seed(rec.seed, &format!("prompt/{i}"));
        let (prompt, mut warns) = sample_prompt(b, prompt_seed, style, (w, h));
        warnings.append(&mut warns);
        let layer = rasterize(&prompt, w, h)?;
        out = alpha_blend(&out, &layer, prompt.alpha)?;
        prompts.push(prompt);
    }

    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let dest = prompted_image_path(out_dir, &rec.base.id);
    out.save(&dest)
        .with_context(|| format!("writing {}", dest.display()))?;

    rec.boxes = Some(boxes);
    rec.prompts = Some(prompts);
    rec.prompted_image_path = Some(dest.to_string_lossy().into_owned());
    rec.render_error = None;
    Ok((rec, warnings))
}

/// Re-rasterize stored prompts and re-blend the record's image without any
/// re-sampling. Used after prompt-set edits (dropout) where the surviving
/// markers must keep their exact geometry and attributes.
pub fn rerender_from_prompts(
    record: &PipelineRecord,
    images_root: &Path,
    out_dir: &Path,
) -> Result<PipelineRecord> {
    let mut rec = record.clone();
    if rec.base.missing_image || rec.render_error.is_some() {
        return Ok(rec);
    }
    let src = images_root.join(&rec.base.image_path);
    let img = image::open(&src)
        .with_context(|| format!("reading {}", src.display()))?
        .to_rgb8();
    let (w, h) = (img.width(), img.height());

    let mut out = img;
    for prompt in rec.prompts.as_deref().unwrap_or(&[]) {
        let layer = rasterize(prompt, w, h)?;
        out = alpha_blend(&out, &layer, prompt.alpha)?;
    }
    std::fs::create_dir_all(out_dir)?;
    let dest = prompted_image_path(out_dir, &rec.base.id);
    out.save(&dest)
        .with_context(|| format!("writing {}", dest.display()))?;
    rec.prompted_image_path = Some(dest.to_string_lossy().into_owned());
    rec.image_width = Some(w);
    rec.image_height = Some(h);
    Ok(rec)
}
