//! Dataset adapters: parse the source layouts into normalized records.
//!
//! Each adapter freezes the source-format field mapping in one place:
//!
//! SLAKE        root/<split>.json, array of objects
//!              qid -> id "slake-<qid>"       img_name -> "imgs/<img_name>"
//!              question -> question          answer -> answer
//!              answer_type OPEN|CLOSED -> open|closed    q_lang -> lang
//!
//! VQA-RAD      root/"VQA_RAD Dataset Public.json", single array for both
//!              splits; phrase_type starting with "test" marks test items
//!              qid -> id "vqa_rad-<qid>"     image_name -> "VQA_RAD Image Folder/<image_name>"
//!              question/answer as-is         answer_type OPEN|CLOSED
//!
//! PMC-VQA      root/<split>.csv with columns Figure_path, Question,
//!              Choice A..D, Answer_label (optional: index)
//!              id "pmc_vqa-<index|row>"      Figure_path -> "images/<Figure_path>"
//!              options = cleaned choices     answer = choice named by
//!              Answer_label, letter kept in answer_letter; always closed
//!
//! generic      a manifest JSONL file (or root/<split>.jsonl) in this
//!              tool's own schema
//!
//! Missing image files flag the record (`missing_image: true`) instead of
//! dropping it; output is sorted by id so ingest is order-deterministic.

use crate::manifest::{read_manifest, Manifest};
use crate::seed::derive_seed;
use crate::types::{AnswerType, DatasetKind, PipelineRecord, Split, Stage, VQARecord};
use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

#[derive(Default)]
pub struct IngestOptions {
    pub master_seed: u64,
    /// Keep only records whose language matches (SLAKE is bilingual);
    /// records without a language tag are kept.
    pub lang: Option<String>,
}

/// Parse one dataset split into an `ingested`-stage manifest.
pub fn ingest(
    kind: DatasetKind,
    root: &Path,
    split: Split,
    opts: &IngestOptions,
) -> Result<Manifest> {
    ensure!(
        root.exists(),
        "dataset root {} does not exist",
        root.display()
    );
    let mut records = match kind {
        DatasetKind::Slake => ingest_slake(root, split)?,
        DatasetKind::VqaRad => ingest_vqa_rad(root, split)?,
        DatasetKind::PmcVqa => ingest_pmc_vqa(root, split)?,
        DatasetKind::Generic => ingest_generic(root, split)?,
    };
    if let Some(lang) = &opts.lang {
        let lang = lang.to_lowercase();
        records.retain(|r| match &r.lang {
            Some(l) => l.to_lowercase() == lang,
            None => true,
        });
    }
    if records.is_empty() {
        bail!("no records found in {} for split {split}", root.display());
    }

    let mut seen = HashSet::new();
    for r in &records {
        r.validate()?;
        ensure!(
            seen.insert(r.id.clone()),
            "duplicate record id '{}' in source",
            r.id
        );
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));

    let mut manifest = Manifest::new(Stage::Ingested, opts.master_seed);
    manifest.records = records
        .into_iter()
        .map(|base| {
            let seed = derive_seed(opts.master_seed, &base.id);
            PipelineRecord::new(base, seed)
        })
        .collect();
    Ok(manifest)
}

fn parse_answer_type(raw: &str, context: &str) -> Result<AnswerType> {
    match raw.to_uppercase().as_str() {
        "OPEN" => Ok(AnswerType::Open),
        "CLOSED" => Ok(AnswerType::Closed),
        other => bail!("unknown answer_type '{other}' in {context}"),
    }
}

fn flag_missing(root: &Path, record: &mut VQARecord) {
    record.missing_image = !root.join(&record.image_path).exists();
}

// SLAKE row; extra source fields are ignored.
#[derive(Deserialize)]
struct SlakeRow {
    qid: serde_json::Value,
    img_name: String,
    question: String,
    answer: serde_json::Value,
    answer_type: String,
    #[serde(default)]
    q_lang: Option<String>,
}

fn value_to_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn ingest_slake(root: &Path, split: Split) -> Result<Vec<VQARecord>> {
    let path = root.join(format!("{split}.json"));
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<SlakeRow> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let id = format!("slake-{}", value_to_string(&row.qid));
        let answer_type = parse_answer_type(&row.answer_type, &id)?;
        let mut rec = VQARecord {
            id,
            image_path: format!("imgs/{}", row.img_name),
            question: row.question,
            answer: value_to_string(&row.answer),
            answer_type,
            options: None,
            dataset: DatasetKind::Slake,
            answer_letter: None,
            lang: row.q_lang,
            missing_image: false,
        };
        flag_missing(root, &mut rec);
        out.push(rec);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct VqaRadRow {
    qid: serde_json::Value,
    image_name: String,
    question: String,
    answer: serde_json::Value,
    answer_type: String,
    phrase_type: String,
}

fn ingest_vqa_rad(root: &Path, split: Split) -> Result<Vec<VQARecord>> {
    let path = root.join("VQA_RAD Dataset Public.json");
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<VqaRadRow> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut out = Vec::new();
    for row in rows {
        let is_test = row.phrase_type.to_lowercase().starts_with("test");
        let keep = match split {
            Split::Test => is_test,
            Split::Train => !is_test,
        };
        if !keep {
            continue;
        }
        let id = format!("vqa_rad-{}", value_to_string(&row.qid));
        let answer_type = parse_answer_type(&row.answer_type, &id)?;
        let mut rec = VQARecord {
            id,
            image_path: format!("VQA_RAD Image Folder/{}", row.image_name),
            question: row.question,
            answer: value_to_string(&row.answer),
            answer_type,
            options: None,
            dataset: DatasetKind::VqaRad,
            answer_letter: None,
            lang: None,
            missing_image: false,
        };
        flag_missing(root, &mut rec);
        out.push(rec);
    }
    Ok(out)
}

/// Strip a leading option-letter marker like "A:", "B." or "C)" from a
/// choice cell.
fn clean_choice(cell: &str) -> String {
    let t = cell.trim();
    let bytes = t.as_bytes();
    if bytes.len() >= 2 && bytes[0].is_ascii_alphabetic() && matches!(bytes[1], b':' | b'.' | b')')
    {
        t[2..].trim().to_string()
    } else {
        t.to_string()
    }
}

fn ingest_pmc_vqa(root: &Path, split: Split) -> Result<Vec<VQARecord>> {
    let path = root.join(format!("{split}.csv"));
    let mut reader =
        csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .with_context(|| format!("{}: missing column '{name}'", path.display()))
    };
    let c_figure = col("Figure_path")?;
    let c_question = col("Question")?;
    let c_choices = [
        col("Choice A")?,
        col("Choice B")?,
        col("Choice C")?,
        col("Choice D")?,
    ];
    let c_label = col("Answer_label")?;
    let c_index = headers.iter().position(|h| h.trim() == "index");

    let mut out = Vec::new();
    for (rowno, row) in reader.records().enumerate() {
        let row = row.with_context(|| format!("{}: csv row {}", path.display(), rowno + 2))?;
        let idx = c_index
            .and_then(|c| row.get(c))
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| rowno.to_string());
        let id = format!("pmc_vqa-{idx}");

        let options: Vec<String> = c_choices
            .iter()
            .map(|&c| clean_choice(row.get(c).unwrap_or_default()))
            .collect();
        let letter = row.get(c_label).unwrap_or_default().trim().to_uppercase();
        ensure!(
            letter.len() == 1 && ("A".."E").contains(&letter.as_str()),
            "{id}: Answer_label '{letter}' is not one of A-D"
        );
        let answer_idx = (letter.as_bytes()[0] - b'A') as usize;
        let answer = options[answer_idx].clone();

        let mut rec = VQARecord {
            id,
            image_path: format!("images/{}", row.get(c_figure).unwrap_or_default().trim()),
            question: row.get(c_question).unwrap_or_default().trim().to_string(),
            answer,
            answer_type: AnswerType::Closed,
            options: Some(options),
            dataset: DatasetKind::PmcVqa,
            answer_letter: Some(letter),
            lang: None,
            missing_image: false,
        };
        flag_missing(root, &mut rec);
        out.push(rec);
    }
    Ok(out)
}

fn ingest_generic(root: &Path, split: Split) -> Result<Vec<VQARecord>> {
    let path = if root.is_file() {
        root.to_path_buf()
    } else {
        let candidate = root.join(format!("{split}.jsonl"));
        if candidate.exists() {
            candidate
        } else {
            root.join("records.jsonl")
        }
    };
    let manifest = read_manifest(&path)?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    Ok(manifest
        .records
        .into_iter()
        .map(|r| {
            let mut base = r.base;
            flag_missing(base_dir, &mut base);
            base
        })
        .collect())
}

/// Summary counts plus invariant violations for a manifest at any stage.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub stage: Stage,
    pub records: usize,
    /// Distinct source images referenced.
    pub images: usize,
    pub open: usize,
    pub closed: usize,
    pub missing_images: usize,
    pub with_prompts: usize,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "stage:          {}", self.stage)?;
        writeln!(f, "records:        {}", self.records)?;
        writeln!(f, "images:         {}", self.images)?;
        writeln!(f, "open:           {}", self.open)?;
        writeln!(f, "closed:         {}", self.closed)?;
        writeln!(f, "missing images: {}", self.missing_images)?;
        writeln!(f, "with prompts:   {}", self.with_prompts)?;
        if self.violations.is_empty() {
            write!(f, "violations:     none")
        } else {
            writeln!(f, "violations:     {}", self.violations.len())?;
            for v in &self.violations {
                writeln!(f, "  - {v}")?;
            }
            Ok(())
        }
    }
}

/// Count records, images, the open/closed split and missing files; list
/// invariant violations (its own plus any the caller collected while
/// reading leniently).
pub fn validate(manifest: &Manifest, extra_violations: &[String]) -> ValidationReport {
    let mut images = HashSet::new();
    let mut open = 0;
    let mut closed = 0;
    let mut missing = 0;
    let mut with_prompts = 0;
    for r in &manifest.records {
        images.insert(r.base.image_path.clone());
        match r.base.answer_type {
            AnswerType::Open => open += 1,
            AnswerType::Closed => closed += 1,
        }
        if r.base.missing_image {
            missing += 1;
        }
        if r.prompts.as_ref().is_some_and(|p| !p.is_empty()) {
            with_prompts += 1;
        }
    }
    let mut violations = manifest.violations();
    violations.extend(extra_violations.iter().cloned());
    violations.sort();
    violations.dedup();
    ValidationReport {
        stage: manifest.stage,
        records: manifest.records.len(),
        images: images.len(),
        open,
        closed,
        missing_images: missing,
        with_prompts,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write_slake_fixture(root: &Path) {
        std::fs::create_dir_all(root.join("imgs/xmlab1")).unwrap();
        // One real image file; xmlab9 is left missing on purpose.
        image::RgbImage::new(8, 8)
            .save(root.join("imgs/xmlab1/source.jpg"))
            .unwrap();
        let rows = json!([
            {"qid": 9835, "img_name": "xmlab1/source.jpg", "question": "Does the picture contain liver?",
             "answer": "Yes", "answer_type": "CLOSED", "q_lang": "en", "location": "Abdomen"},
            {"qid": 9836, "img_name": "xmlab1/source.jpg", "question": "What modality is used?",
             "answer": "MRI", "answer_type": "OPEN", "q_lang": "en"},
            {"qid": 9901, "img_name": "xmlab9/source.jpg", "question": "这是什么器官?",
             "answer": "肝脏", "answer_type": "OPEN", "q_lang": "zh"}
        ]);
        std::fs::write(root.join("test.json"), rows.to_string()).unwrap();
    }

    #[test]
    fn slake_field_mapping() {
        let dir = tempfile::tempdir().unwrap();
        write_slake_fixture(dir.path());
        let m = ingest(
            DatasetKind::Slake,
            dir.path(),
            Split::Test,
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(m.records.len(), 3);
        let r = &m.records[0].base;
        assert_eq!(r.id, "slake-9835");
        assert_eq!(r.image_path, "imgs/xmlab1/source.jpg");
        assert_eq!(r.question, "Does the picture contain liver?");
        assert_eq!(r.answer, "Yes");
        assert_eq!(r.answer_type, AnswerType::Closed);
        assert_eq!(r.lang.as_deref(), Some("en"));
        assert_eq!(r.dataset, DatasetKind::Slake);
        assert!(!r.missing_image);
    }

    #[test]
    fn slake_missing_image_flagged_not_dropped() {
        let dir = tempfile::tempdir().unwrap();
        write_slake_fixture(dir.path());
        let m = ingest(
            DatasetKind::Slake,
            dir.path(),
            Split::Test,
            &IngestOptions::default(),
        )
        .unwrap();
        let missing: Vec<&str> = m
            .records
            .iter()
            .filter(|r| r.base.missing_image)
            .map(|r| r.id())
            .collect();
        assert_eq!(missing, vec!["slake-9901"]);
    }

    #[test]
    fn slake_lang_filter() {
        let dir = tempfile::tempdir().unwrap();
        write_slake_fixture(dir.path());
        let opts = IngestOptions {
            lang: Some("en".into()),
            ..IngestOptions::default()
        };
        let m = ingest(DatasetKind::Slake, dir.path(), Split::Test, &opts).unwrap();
        assert_eq!(m.records.len(), 2);
        assert!(m
            .records
            .iter()
            .all(|r| r.base.lang.as_deref() == Some("en")));
    }

    #[test]
    fn slake_unknown_answer_type_is_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("imgs")).unwrap();
        let rows = json!([{"qid": 1, "img_name": "a.jpg", "question": "q", "answer": "a",
                           "answer_type": "HALF_OPEN"}]);
        std::fs::write(dir.path().join("test.json"), rows.to_string()).unwrap();
        let err = ingest(
            DatasetKind::Slake,
            dir.path(),
            Split::Test,
            &IngestOptions::default(),
        )
        .unwrap_err();
        assert!(format!("{err:#}").contains("HALF_OPEN"));
    }

    fn write_vqa_rad_fixture(root: &Path) {
        std::fs::create_dir_all(root.join("VQA_RAD Image Folder")).unwrap();
        image::RgbImage::new(8, 8)
            .save(root.join("VQA_RAD Image Folder/synpic1.jpg"))
            .unwrap();
        let rows = json!([
            {"qid": 1, "image_name": "synpic1.jpg", "question": "Is there a fracture?",
             "answer": "No", "answer_type": "CLOSED", "phrase_type": "test_freeform"},
            {"qid": 2, "image_name": "synpic1.jpg", "question": "Which organ is largest?",
             "answer": "liver", "answer_type": "OPEN", "phrase_type": "test_para"},
            {"qid": 3, "image_name": "synpic1.jpg", "question": "What plane is this?",
             "answer": "axial", "answer_type": "OPEN", "phrase_type": "freeform"}
        ]);
        std::fs::write(root.join("VQA_RAD Dataset Public.json"), rows.to_string()).unwrap();
    }

    #[test]
    fn vqa_rad_split_and_mapping() {
        let dir = tempfile::tempdir().unwrap();
        write_vqa_rad_fixture(dir.path());
        let test = ingest(
            DatasetKind::VqaRad,
            dir.path(),
            Split::Test,
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(test.records.len(), 2);
        assert_eq!(test.records[0].base.id, "vqa_rad-1");
        assert_eq!(
            test.records[0].base.image_path,
            "VQA_RAD Image Folder/synpic1.jpg"
        );
        let train = ingest(
            DatasetKind::VqaRad,
            dir.path(),
            Split::Train,
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(train.records.len(), 1);
        assert_eq!(train.records[0].base.id, "vqa_rad-3");
    }

    fn write_pmc_fixture(root: &Path) {
        std::fs::create_dir_all(root.join("images")).unwrap();
        image::RgbImage::new(8, 8)
            .save(root.join("images/fig1.jpg"))
            .unwrap();
        let csv = "\
index,Figure_path,Question,Choice A,Choice B,Choice C,Choice D,Answer_label
3,fig1.jpg,What does the arrow indicate?,A:Axial view,B:A lesion,C:The aorta,D:A rib,B
7,fig2.jpg,Which modality is shown?,A:CT,B:MRI,C:Ultrasound,D:X-ray,A
";
        std::fs::write(root.join("test.csv"), csv).unwrap();
    }

    #[test]
    fn pmc_vqa_options_and_letter_normalization() {
        let dir = tempfile::tempdir().unwrap();
        write_pmc_fixture(dir.path());
        let m = ingest(
            DatasetKind::PmcVqa,
            dir.path(),
            Split::Test,
            &IngestOptions::default(),
        )
        .unwrap();
        assert_eq!(m.records.len(), 2);
        let r = &m.records[0].base;
        assert_eq!(r.id, "pmc_vqa-3");
        assert_eq!(r.image_path, "images/fig1.jpg");
        assert_eq!(r.answer_type, AnswerType::Closed);
        assert_eq!(
            r.options.as_deref().unwrap(),
            ["Axial view", "A lesion", "The aorta", "A rib"]
        );
        // Letter normalized to option text, original letter kept.
        assert_eq!(r.answer, "A lesion");
        assert_eq!(r.answer_letter.as_deref(), Some("B"));
        assert!(!r.missing_image);
        assert!(m.records[1].base.missing_image);
    }

    #[test]
    fn empty_directory_is_no_records_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("test.json"), "[]").unwrap();
        let err = ingest(
            DatasetKind::Slake,
            dir.path(),
            Split::Test,
            &IngestOptions::default(),
        )
        .unwrap_err();
        assert!(format!("{err:#}").contains("no records found"));
    }

    #[test]
    fn ingest_is_idempotent_and_sorted() {
        let dir = tempfile::tempdir().unwrap();
        write_slake_fixture(dir.path());
        let opts = IngestOptions {
            master_seed: 42,
            lang: None,
        };
        let a = ingest(DatasetKind::Slake, dir.path(), Split::Test, &opts).unwrap();
        let b = ingest(DatasetKind::Slake, dir.path(), Split::Test, &opts).unwrap();
        assert_eq!(a, b);
        let ids: Vec<&str> = a.records.iter().map(|r| r.id()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn seeds_derive_from_master_seed_and_id() {
        let dir = tempfile::tempdir().unwrap();
        write_slake_fixture(dir.path());
        let opts = IngestOptions {
            master_seed: 7,
            lang: None,
        };
        let m = ingest(DatasetKind::Slake, dir.path(), Split::Test, &opts).unwrap();
        for r in &m.records {
            assert_eq!(r.seed, derive_seed(7, r.id()));
        }
    }

    #[test]
    fn validate_counts_open_closed() {
        let dir = tempfile::tempdir().unwrap();
        write_slake_fixture(dir.path());
        let m = ingest(
            DatasetKind::Slake,
            dir.path(),
            Split::Test,
            &IngestOptions::default(),
        )
        .unwrap();
        let report = validate(&m, &[]);
        assert_eq!(report.records, 3);
        assert_eq!(report.open, 2);
        assert_eq!(report.closed, 1);
        assert_eq!(report.images, 2);
        assert_eq!(report.missing_images, 1);
        assert!(report.ok());
    }

    #[test]
    fn validate_lists_box_violation() {
        use crate::types::BoundingBox;
        let dir = tempfile::tempdir().unwrap();
        write_slake_fixture(dir.path());
        let mut m = ingest(
            DatasetKind::Slake,
            dir.path(),
            Split::Test,
            &IngestOptions::default(),
        )
        .unwrap();
        m.records[0].boxes = Some(vec![BoundingBox::new(9, 3, 4, 8, 0.5, "liver")]);
        let report = validate(&m, &[]);
        assert!(!report.ok());
        assert!(report.violations[0].contains("degenerate box"));
    }
}
