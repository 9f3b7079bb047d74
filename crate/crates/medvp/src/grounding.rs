//! Entity grounding: clients for an open-vocabulary detector, an offline
//! stub oracle, and box metrics (IoU / GIoU) for evaluating grounding
//! quality.
//!
//! The detector is isolated behind an HTTP service boundary; the wire
//! format is JSON. An offline stub backed by a rule file serves tests and
//! air-gapped runs.

use crate::types::BoundingBox;
use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

/// One raw detection as returned by a detector, before clipping and
/// integer conversion. Coordinates may be fractional or out of bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
}

/// Request body sent to a grounding service. The image travels either by
/// server-visible path or inline as base64, flag-selected.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundingRequest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_base64: Option<String>,
    pub entities: Vec<String>,
    pub threshold: f64,
}

/// Response body: per-entity detections.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundingResponse {
    pub detections: BTreeMap<String, Vec<RawDetection>>,
}

/// Something that can ground entities on an image.
pub trait GroundingClient {
    /// Raw per-entity detections for one image. `image_id` is the
    /// record-relative image path without its extension (used by the
    /// stub); `image_path` the resolvable file.
    fn detect(
        &self,
        image_path: &Path,
        image_id: &str,
        entities: &[String],
        threshold: f64,
    ) -> Result<BTreeMap<String, Vec<RawDetection>>>;
}

/// Offline oracle: a JSON map `image id -> entity -> [detections]`.
/// Image ids are relative image paths without their extension
/// ("imgs/xmlab1/source"); the basename alone ("source") also matches
/// when unambiguous rule files prefer short keys.
pub struct StubClient {
    rules: HashMap<String, HashMap<String, Vec<RawDetection>>>,
}

impl StubClient {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading stub rules {}", path.display()))?;
        let rules = serde_json::from_str(&text)
            .with_context(|| format!("parsing stub rules {}", path.display()))?;
        Ok(StubClient { rules })
    }

    pub fn from_rules(rules: HashMap<String, HashMap<String, Vec<RawDetection>>>) -> Self {
        StubClient { rules }
    }
}

impl GroundingClient for StubClient {
    fn detect(
        &self,
        _image_path: &Path,
        image_id: &str,
        entities: &[String],
        _threshold: f64,
    ) -> Result<BTreeMap<String, Vec<RawDetection>>> {
        let mut out = BTreeMap::new();
        let per_image = self.rules.get(image_id).or_else(|| {
            image_id
                .rsplit('/')
                .next()
                .and_then(|stem| self.rules.get(stem))
        });
        for entity in entities {
            let boxes = per_image
                .and_then(|m| m.get(entity))
                .cloned()
                .unwrap_or_default();
            out.insert(entity.clone(), boxes);
        }
        Ok(out)
    }
}

/// HTTP client for a grounding service.
pub struct HttpGroundingClient {
    endpoint: String,
    send_base64: bool,
    retries: u32,
    backoff_ms: u64,
    http: reqwest::blocking::Client,
}

impl HttpGroundingClient {
    pub fn new(endpoint: &str, send_base64: bool, retries: u32) -> Self {
        HttpGroundingClient {
            endpoint: endpoint.to_string(),
            send_base64,
            retries,
            backoff_ms: 250,
            http: reqwest::blocking::Client::new(),
        }
    }

    /// Shrink the retry backoff; test hook.
    pub fn with_backoff_ms(mut self, ms: u64) -> Self {
        self.backoff_ms = ms;
        self
    }
}

impl GroundingClient for HttpGroundingClient {
    fn detect(
        &self,
        image_path: &Path,
        _image_id: &str,
        entities: &[String],
        threshold: f64,
    ) -> Result<BTreeMap<String, Vec<RawDetection>>> {
        let request = if self.send_base64 {
            let bytes = std::fs::read(image_path)
                .with_context(|| format!("reading {}", image_path.display()))?;
            GroundingRequest {
                image_path: None,
                image_base64: Some(base64_encode(&bytes)),
                entities: entities.to_vec(),
                threshold,
            }
        } else {
            GroundingRequest {
                image_path: Some(image_path.to_string_lossy().into_owned()),
                image_base64: None,
                entities: entities.to_vec(),
                threshold,
            }
        };

        let mut last_err = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                let wait = self.backoff_ms.saturating_mul(1 << (attempt - 1).min(6));
                std::thread::sleep(std::time::Duration::from_millis(wait.min(10_000)));
            }
            match self.http.post(&self.endpoint).json(&request).send() {
                Ok(resp) if resp.status().is_success() => {
                    let body: GroundingResponse =
                        resp.json().context("decoding grounding response")?;
                    return Ok(body.detections);
                }
                Ok(resp) => {
                    last_err = Some(anyhow::anyhow!(
                        "grounding service returned {}",
                        resp.status()
                    ));
                }
                Err(e) => last_err = Some(e.into()),
            }
        }
        Err(last_err
            .unwrap_or_else(|| anyhow::anyhow!("grounding request failed"))
            .context(format!("after {} retries", self.retries)))
    }
}

// Minimal standard base64; avoids pulling a dependency for one call site.
fn base64_encode(data: &[u8]) -> String {
    const TABLE: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(data.len().div_ceil(3) * 4);
    for chunk in data.chunks(3) {
        let b = [
            chunk[0],
            *chunk.get(1).unwrap_or(&0),
            *chunk.get(2).unwrap_or(&0),
        ];
        let n = (u32::from(b[0]) << 16) | (u32::from(b[1]) << 8) | u32::from(b[2]);
        let chars = [
            TABLE[(n >> 18) as usize & 63],
            TABLE[(n >> 12) as usize & 63],
            TABLE[(n >> 6) as usize & 63],
            TABLE[n as usize & 63],
        ];
        let keep = chunk.len() + 1;
        for (i, &c) in chars.iter().enumerate() {
            out.push(if i < keep { c as char } else { '=' });
        }
    }
    out
}

/// Clip a raw detection to image bounds and convert to integer pixels
/// (floor the min corner, ceil the max corner). Returns None when the
/// clipped box is degenerate.
fn clip_detection(d: &RawDetection, entity: &str, width: u32, height: u32) -> Option<BoundingBox> {
    let x_min = d.x_min.max(0.0).floor() as i64;
    let y_min = d.y_min.max(0.0).floor() as i64;
    let x_max = (d.x_max.min(f64::from(width)).ceil() as i64).min(i64::from(width));
    let y_max = (d.y_max.min(f64::from(height)).ceil() as i64).min(i64::from(height));
    if x_min >= x_max || y_min >= y_max {
        return None;
    }
    Some(BoundingBox::new(
        x_min as u32,
        y_min as u32,
        x_max as u32,
        y_max as u32,
        d.score.clamp(0.0, 1.0),
        entity,
    ))
}

/// Ground a list of entities on one image. `image_id` is the
/// record-relative image path without its extension; it keys stub rules
/// and stays stable across machines (unlike absolute paths).
///
/// Per entity: detections are clipped to the image, filtered by
/// `score >= threshold`, sorted by descending score with ties broken by
/// `(y_min, x_min)`, and truncated to `top_k`. The flattened result keeps
/// the entity order of the input; an empty entity list short-circuits to
/// an empty box list. An entity with zero surviving boxes is simply
/// absent from the output (not an error).
pub fn ground(
    client: &dyn GroundingClient,
    image_path: &Path,
    image_id: &str,
    image_dims: (u32, u32),
    entities: &[String],
    threshold: f64,
    top_k: usize,
) -> Result<Vec<BoundingBox>> {
    if entities.is_empty() {
        return Ok(Vec::new());
    }
    let detections = client.detect(image_path, image_id, entities, threshold)?;

    let (w, h) = image_dims;
    let mut out = Vec::new();
    for entity in entities {
        let mut boxes: Vec<BoundingBox> = detections
            .get(entity)
            .map(|ds| {
                ds.iter()
                    .filter(|d| d.score >= threshold)
                    .filter_map(|d| clip_detection(d, entity, w, h))
                    .collect()
            })
            .unwrap_or_default();
        boxes.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.y_min.cmp(&b.y_min))
                .then(a.x_min.cmp(&b.x_min))
        });
        boxes.truncate(top_k);
        out.extend(boxes);
    }
    Ok(out)
}

/// Stub/grounding key for a record-relative image path: the path with
/// its extension dropped and separators normalized to '/'.
pub fn image_id_for(relative_path: &str) -> String {
    let normalized = relative_path.replace('\\', "/");
    match normalized.rsplit_once('.') {
        Some((head, ext)) if !ext.contains('/') && !head.is_empty() => head.to_string(),
        _ => normalized,
    }
}

/// Intersection over union of two (half-open, integer) boxes. Symmetric,
/// in [0, 1], and 1.0 exactly for identical boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = overlap(a.x_min, a.x_max, b.x_min, b.x_max);
    let iy = overlap(a.y_min, a.y_max, b.y_min, b.y_max);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Generalized IoU: `IoU - |C \ (A u B)| / |C|` where `C` is the smallest
/// enclosing box. Range (-1, 1]; equals IoU when the enclosing box adds
/// no area.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = overlap(a.x_min, a.x_max, b.x_min, b.x_max);
    let iy = overlap(a.y_min, a.y_max, b.y_min, b.y_max);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    let cw = u64::from(a.x_max.max(b.x_max) - a.x_min.min(b.x_min));
    let ch = u64::from(a.y_max.max(b.y_max) - a.y_min.min(b.y_min));
    let enclosing = cw * ch;
    let iou = inter as f64 / union as f64;
    iou - (enclosing - union) as f64 / enclosing as f64
}

fn overlap(a_lo: u32, a_hi: u32, b_lo: u32, b_hi: u32) -> u64 {
    let lo = a_lo.max(b_lo);
    let hi = a_hi.min(b_hi);
    u64::from(hi.saturating_sub(lo))
}

/// Gold boxes for grounding evaluation: record id -> labelled boxes.
pub type GoldBoxes = BTreeMap<String, Vec<GoldBox>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldBox {
    pub entity: String,
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl GoldBox {
    fn as_box(&self) -> BoundingBox {
        BoundingBox::new(
            self.x_min,
            self.y_min,
            self.x_max,
            self.y_max,
            1.0,
            &self.entity,
        )
    }
}

pub fn read_gold_boxes(path: &Path) -> Result<GoldBoxes> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading gold boxes {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, Serialize)]
pub struct GroundingEvalRow {
    pub id: String,
    pub entity: String,
    pub iou: f64,
    /// Absent when the prediction has no box for this entity.
    pub giou: Option<f64>,
    pub hit: bool,
}

/// Grounding quality report: means over all gold items (an unmatched gold
/// box counts as IoU 0 and a miss; GIoU is averaged over matched pairs).
#[derive(Debug, Clone, Serialize)]
pub struct GroundingReport {
    pub mean_iou: f64,
    pub mean_giou: f64,
    pub hit_rate_at_50: f64,
    pub pairs: usize,
    pub matched: usize,
    pub rows: Vec<GroundingEvalRow>,
}

/// Compare grounded predictions against gold boxes. The top-scoring
/// predicted box for each (record, entity) is evaluated against each gold
/// box of that entity.
pub fn eval_grounding(
    manifest: &crate::manifest::Manifest,
    gold: &GoldBoxes,
) -> Result<GroundingReport> {
    let by_id: HashMap<&str, &crate::types::PipelineRecord> =
        manifest.records.iter().map(|r| (r.id(), r)).collect();
    let missing: Vec<&String> = gold
        .keys()
        .filter(|id| !by_id.contains_key(id.as_str()))
        .collect();
    if !missing.is_empty() {
        bail!(
            "gold ids not present in manifest: {}",
            missing
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        );
    }

    let mut rows = Vec::new();
    for (id, gold_boxes) in gold {
        let record = by_id[id.as_str()];
        let predicted = record.boxes.as_deref().unwrap_or(&[]);
        for gb in gold_boxes {
            let gold_box = gb.as_box();
            // Predictions are already sorted best-first per entity.
            let best = predicted.iter().find(|p| p.entity == gb.entity);
            let (iou_v, giou_v) = match best {
                Some(p) => (iou(p, &gold_box), Some(giou(p, &gold_box))),
                None => (0.0, None),
            };
            rows.push(GroundingEvalRow {
                id: id.clone(),
                entity: gb.entity.clone(),
                iou: iou_v,
                giou: giou_v,
                hit: iou_v >= 0.5,
            });
        }
    }
    ensure!(!rows.is_empty(), "no gold boxes to evaluate");

    let pairs = rows.len();
    let matched = rows.iter().filter(|r| r.giou.is_some()).count();
    let mean_iou = rows.iter().map(|r| r.iou).sum::<f64>() / pairs as f64;
    let mean_giou = if matched > 0 {
        rows.iter().filter_map(|r| r.giou).sum::<f64>() / matched as f64
    } else {
        0.0
    };
    let hit_rate = rows.iter().filter(|r| r.hit).count() as f64 / pairs as f64;
    Ok(GroundingReport {
        mean_iou,
        mean_giou,
        hit_rate_at_50: hit_rate,
        pairs,
        matched,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Manifest;
    use crate::types::{AnswerType, DatasetKind, PipelineRecord, Stage, VQARecord};
    use proptest::prelude::*;

    fn bx(x0: u32, y0: u32, x1: u32, y1: u32) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1, 1.0, "e")
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bx(3, 4, 10, 12);
        assert_eq!(iou(&a, &a), 1.0);
        let far = bx(100, 100, 120, 130);
        assert_eq!(iou(&a, &far), 0.0);
    }

    // Area arithmetic oracle: intersection 1, union 4 + 4 - 1 = 7.
    #[test]
    fn iou_overlapping_unit_example() {
        let a = bx(0, 0, 2, 2);
        let b = bx(1, 1, 3, 3);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }

    #[test]
    fn giou_identity() {
        let a = bx(5, 5, 9, 9);
        assert_eq!(giou(&a, &a), 1.0);
    }

    // Enclosing-box oracle: touching unit boxes -> C area 2 = union -> 0.
    #[test]
    fn giou_touching_boxes_is_zero() {
        let a = bx(0, 0, 1, 1);
        let b = bx(1, 0, 2, 1);
        assert_eq!(giou(&a, &b), 0.0);
    }

    // Gap of one pixel: C area 3, union 2 -> 0 - 1/3.
    #[test]
    fn giou_gap_boxes_negative_third() {
        let a = bx(0, 0, 1, 1);
        let b = bx(2, 0, 3, 1);
        assert!((giou(&a, &b) - (-1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(giou(&a, &b), giou(&b, &a));
    }

    fn arb_bx() -> impl Strategy<Value = BoundingBox> {
        (0u32..200, 0u32..200, 1u32..100, 1u32..100).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn giou_never_exceeds_iou(a in arb_bx(), b in arb_bx()) {
            let (i, g) = (iou(&a, &b), giou(&a, &b));
            prop_assert!(g <= i + 1e-12);
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!((-1.0..=1.0).contains(&g));
        }

        #[test]
        fn metrics_are_symmetric(a in arb_bx(), b in arb_bx()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(giou(&a, &b), giou(&b, &a));
        }

        // When one box contains the other, the enclosing box is the outer
        // box itself, so giou == iou.
        #[test]
        fn giou_equals_iou_under_containment(inner in arb_bx(), pad in 0u32..20) {
            let outer = bx(
                inner.x_min.saturating_sub(pad),
                inner.y_min.saturating_sub(pad),
                inner.x_max + pad,
                inner.y_max + pad,
            );
            prop_assert!((giou(&inner, &outer) - iou(&inner, &outer)).abs() < 1e-12);
        }
    }

    fn stub_with(image_id: &str, entity: &str, dets: Vec<RawDetection>) -> StubClient {
        let mut per_entity = HashMap::new();
        per_entity.insert(entity.to_string(), dets);
        let mut rules = HashMap::new();
        rules.insert(image_id.to_string(), per_entity);
        StubClient::from_rules(rules)
    }

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> RawDetection {
        RawDetection {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
            score,
        }
    }

    #[test]
    fn stub_passthrough_single_box() {
        let stub = stub_with("img1", "liver", vec![det(40.0, 60.0, 200.0, 180.0, 0.9)]);
        let boxes = ground(
            &stub,
            Path::new("img1.png"),
            "img1",
            (512, 512),
            &["liver".to_string()],
            0.2,
            1,
        )
        .unwrap();
        assert_eq!(
            boxes,
            vec![BoundingBox::new(40, 60, 200, 180, 0.9, "liver")]
        );
    }

    // Filter-then-sort oracle: 0.15 fails the 0.2 threshold, 0.25 survives.
    #[test]
    fn threshold_filters_before_top_k() {
        let stub = stub_with(
            "img1",
            "liver",
            vec![
                det(0.0, 0.0, 10.0, 10.0, 0.15),
                det(20.0, 20.0, 30.0, 30.0, 0.25),
            ],
        );
        let boxes = ground(
            &stub,
            Path::new("img1.png"),
            "img1",
            (64, 64),
            &["liver".to_string()],
            0.2,
            1,
        )
        .unwrap();
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].score, 0.25);
        assert_eq!(boxes[0].x_min, 20);
    }

    #[test]
    fn empty_entities_short_circuit() {
        let stub = StubClient::from_rules(HashMap::new());
        let boxes = ground(&stub, Path::new("x.png"), "x", (64, 64), &[], 0.2, 1).unwrap();
        assert!(boxes.is_empty());
    }

    #[test]
    fn ties_break_on_y_then_x() {
        let stub = stub_with(
            "img1",
            "liver",
            vec![
                det(30.0, 10.0, 40.0, 20.0, 0.5),
                det(10.0, 10.0, 20.0, 20.0, 0.5),
                det(10.0, 5.0, 20.0, 15.0, 0.5),
            ],
        );
        let boxes = ground(
            &stub,
            Path::new("img1.png"),
            "img1",
            (64, 64),
            &["liver".to_string()],
            0.2,
            3,
        )
        .unwrap();
        let mins: Vec<(u32, u32)> = boxes.iter().map(|b| (b.y_min, b.x_min)).collect();
        assert_eq!(mins, vec![(5, 10), (10, 10), (10, 30)]);
    }

    #[test]
    fn clipping_rejects_degenerate_boxes() {
        let stub = stub_with(
            "img1",
            "liver",
            vec![
                det(-5.0, -5.0, 100.0, 100.0, 0.9),
                det(70.0, 70.0, 90.0, 90.0, 0.8),
            ],
        );
        let boxes = ground(
            &stub,
            Path::new("img1.png"),
            "img1",
            (64, 64),
            &["liver".to_string()],
            0.2,
            5,
        )
        .unwrap();
        // Second detection lies fully outside the 64x64 image -> dropped.
        assert_eq!(boxes.len(), 1);
        assert_eq!(
            (
                boxes[0].x_min,
                boxes[0].y_min,
                boxes[0].x_max,
                boxes[0].y_max
            ),
            (0, 0, 64, 64)
        );
    }

    #[test]
    fn entity_order_only_regroups_output() {
        let mut per_entity = HashMap::new();
        per_entity.insert("liver".to_string(), vec![det(0.0, 0.0, 10.0, 10.0, 0.9)]);
        per_entity.insert("kidney".to_string(), vec![det(20.0, 20.0, 30.0, 30.0, 0.8)]);
        let mut rules = HashMap::new();
        rules.insert("img1".to_string(), per_entity);
        let stub = StubClient::from_rules(rules);

        let ab = ground(
            &stub,
            Path::new("img1.png"),
            "img1",
            (64, 64),
            &["liver".to_string(), "kidney".to_string()],
            0.2,
            1,
        )
        .unwrap();
        let ba = ground(
            &stub,
            Path::new("img1.png"),
            "img1",
            (64, 64),
            &["kidney".to_string(), "liver".to_string()],
            0.2,
            1,
        )
        .unwrap();
        let mut ab_sorted = ab.clone();
        ab_sorted.sort_by(|a, b| a.entity.cmp(&b.entity));
        let mut ba_sorted = ba;
        ba_sorted.sort_by(|a, b| a.entity.cmp(&b.entity));
        assert_eq!(ab_sorted, ba_sorted);
        assert_ne!(ab[0].entity, "kidney");
    }

    fn manifest_with_boxes(pairs: Vec<(&str, Vec<BoundingBox>)>) -> Manifest {
        let mut m = Manifest::new(Stage::Grounded, 0);
        for (id, boxes) in pairs {
            let base = VQARecord {
                id: id.to_string(),
                image_path: format!("{id}.png"),
                question: "q".into(),
                answer: "a".into(),
                answer_type: AnswerType::Open,
                options: None,
                dataset: DatasetKind::Generic,
                answer_letter: None,
                lang: None,
                missing_image: false,
            };
            let mut rec = PipelineRecord::new(base, 0);
            rec.boxes = Some(boxes);
            m.records.push(rec);
        }
        m
    }

    fn gold_of(id: &str, entity: &str, b: (u32, u32, u32, u32)) -> GoldBoxes {
        let mut gold = GoldBoxes::new();
        gold.insert(
            id.to_string(),
            vec![GoldBox {
                entity: entity.to_string(),
                x_min: b.0,
                y_min: b.1,
                x_max: b.2,
                y_max: b.3,
            }],
        );
        gold
    }

    #[test]
    fn eval_identical_predictions_score_one() {
        let m = manifest_with_boxes(vec![(
            "r1",
            vec![BoundingBox::new(4, 4, 20, 20, 0.9, "liver")],
        )]);
        let gold = gold_of("r1", "liver", (4, 4, 20, 20));
        let report = eval_grounding(&m, &gold).unwrap();
        assert_eq!(report.mean_iou, 1.0);
        assert_eq!(report.hit_rate_at_50, 1.0);
        assert_eq!(report.mean_giou, 1.0);
    }

    #[test]
    fn eval_disjoint_predictions_score_zero() {
        let m = manifest_with_boxes(vec![(
            "r1",
            vec![BoundingBox::new(40, 40, 60, 60, 0.9, "liver")],
        )]);
        let gold = gold_of("r1", "liver", (0, 0, 10, 10));
        let report = eval_grounding(&m, &gold).unwrap();
        assert_eq!(report.mean_iou, 0.0);
        assert_eq!(report.hit_rate_at_50, 0.0);
    }

    #[test]
    fn eval_single_pair_seventh() {
        let m = manifest_with_boxes(vec![(
            "r1",
            vec![BoundingBox::new(0, 0, 2, 2, 0.9, "liver")],
        )]);
        let gold = gold_of("r1", "liver", (1, 1, 3, 3));
        let report = eval_grounding(&m, &gold).unwrap();
        assert!((report.mean_iou - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(report.hit_rate_at_50, 0.0);
    }

    #[test]
    fn eval_mismatched_ids_error_lists_them() {
        let m = manifest_with_boxes(vec![("r1", vec![])]);
        let gold = gold_of("ghost", "liver", (0, 0, 2, 2));
        let err = format!("{:#}", eval_grounding(&m, &gold).unwrap_err());
        assert!(err.contains("ghost"), "error was: {err}");
    }

    #[test]
    fn image_id_strips_extension_keeps_directories() {
        assert_eq!(image_id_for("imgs/xmlab1/source.jpg"), "imgs/xmlab1/source");
        assert_eq!(image_id_for("fx000.png"), "fx000");
        assert_eq!(image_id_for("no_extension"), "no_extension");
        assert_eq!(image_id_for("dir.v2/plain"), "dir.v2/plain");
    }

    #[test]
    fn stub_falls_back_to_basename_key() {
        let stub = stub_with("source", "liver", vec![det(1.0, 1.0, 9.0, 9.0, 0.9)]);
        // Full path id first (misses), then the basename key matches.
        let boxes = ground(
            &stub,
            Path::new("imgs/xmlab1/source.jpg"),
            "imgs/xmlab1/source",
            (32, 32),
            &["liver".to_string()],
            0.2,
            1,
        )
        .unwrap();
        assert_eq!(boxes.len(), 1);
        // An exact path key shadows the basename fallback.
        let scoped = stub_with(
            "imgs/xmlab2/source",
            "liver",
            vec![det(2.0, 2.0, 8.0, 8.0, 0.9)],
        );
        let boxes = ground(
            &scoped,
            Path::new("imgs/xmlab2/source.jpg"),
            "imgs/xmlab2/source",
            (32, 32),
            &["liver".to_string()],
            0.2,
            1,
        )
        .unwrap();
        assert_eq!(boxes[0].x_min, 2);
    }

    #[test]
    fn base64_matches_known_vectors() {
        assert_eq!(base64_encode(b""), "");
        assert_eq!(base64_encode(b"f"), "Zg==");
        assert_eq!(base64_encode(b"fo"), "Zm8=");
        assert_eq!(base64_encode(b"foo"), "Zm9v");
        assert_eq!(base64_encode(b"foobar"), "Zm9vYmFy");
    }
}
