//! The JSONL manifest model.
//!
//! A manifest is one header line followed by one record per line, all
//! UTF-8 JSON. Field order is fixed by the struct declarations, so
//! writing the same manifest always produces the same bytes and
//! `write(read(f)) == f` for files this tool wrote.

use crate::config::PipelineConfig;
use crate::types::{PipelineRecord, Stage};
use crate::TOOL_VERSION;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

/// First line of every manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub stage: Stage,
    pub master_seed: u64,
    pub tool_version: String,
    /// Effective pipeline config, recorded for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<PipelineConfig>,
}

/// An ordered collection of records at one pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub stage: Stage,
    pub master_seed: u64,
    pub tool_version: String,
    pub config: Option<PipelineConfig>,
    pub records: Vec<PipelineRecord>,
}

impl Manifest {
    pub fn new(stage: Stage, master_seed: u64) -> Self {
        Manifest {
            stage,
            master_seed,
            tool_version: TOOL_VERSION.to_string(),
            config: None,
            records: Vec::new(),
        }
    }

    fn header(&self) -> ManifestHeader {
        ManifestHeader {
            schema_version: SCHEMA_VERSION,
            stage: self.stage,
            master_seed: self.master_seed,
            tool_version: self.tool_version.clone(),
            config: self.config.clone(),
        }
    }

    /// Serialize to the canonical JSONL byte form.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header())?;
        out.push('\n');
        for record in &self.records {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Semantic invariant violations across all records: per-record type
    /// invariants plus id uniqueness. Returns human-readable descriptions.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for record in &self.records {
            if let Err(e) = record.validate() {
                out.push(format!("record {}: {e:#}", record.id()));
            }
            if !seen.insert(record.id().to_string()) {
                out.push(format!("duplicate record id '{}'", record.id()));
            }
        }
        out
    }
}

/// Write a manifest as JSONL. The byte output is canonical: re-writing an
/// unchanged manifest reproduces the file exactly.
pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    let file =
        File::create(path).with_context(|| format!("creating manifest {}", path.display()))?;
    let mut w = BufWriter::new(file);
    w.write_all(manifest.to_jsonl()?.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Read a manifest, rejecting records that violate type invariants.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let (manifest, violations) = read_manifest_lenient(path)?;
    if let Some(first) = violations.first() {
        bail!(
            "{}: {first}{}",
            path.display(),
            if violations.len() > 1 {
                format!(" (+{} more violations)", violations.len() - 1)
            } else {
                String::new()
            }
        );
    }
    Ok(manifest)
}

/// Read a manifest but report semantic invariant violations instead of
/// failing, so `validate` can describe broken files. Malformed JSON is
/// still a hard error carrying the line number.
pub fn read_manifest_lenient(path: &Path) -> Result<(Manifest, Vec<String>)> {
    let file = File::open(path).with_context(|| format!("opening manifest {}", path.display()))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header: ManifestHeader = match lines.next() {
        None => {
            // A zero-byte file is an empty manifest.
            return Ok((Manifest::new(Stage::Ingested, 0), Vec::new()));
        }
        Some((_, line)) => {
            let line = line.context("reading manifest header")?;
            serde_json::from_str(&line)
                .with_context(|| format!("{}: line 1: malformed header", path.display()))?
        }
    };
    if header.schema_version != SCHEMA_VERSION {
        bail!(
            "{}: unsupported schema_version {} (tool supports {})",
            path.display(),
            header.schema_version,
            SCHEMA_VERSION
        );
    }

    let mut manifest = Manifest {
        stage: header.stage,
        master_seed: header.master_seed,
        tool_version: header.tool_version,
        config: header.config,
        records: Vec::new(),
    };
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.with_context(|| format!("reading line {lineno}"))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PipelineRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {lineno}: malformed record", path.display()))?;
        manifest.records.push(record);
    }

    let mut violations = manifest.violations();
    // Name the duplicate explicitly, as required by the read contract.
    violations.sort();
    violations.dedup();
    Ok((manifest, violations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{
        AnswerType, BoundingBox, DatasetKind, PaletteColor, PromptGeometry, Shape, VQARecord,
        VisualPrompt,
    };
    use proptest::prelude::*;

    fn sample_record(id: &str) -> PipelineRecord {
        let base = VQARecord {
            id: id.to_string(),
            image_path: format!("imgs/{id}.png"),
            question: "Does the picture contain liver?".into(),
            answer: "yes".into(),
            answer_type: AnswerType::Closed,
            options: None,
            dataset: DatasetKind::Slake,
            answer_letter: None,
            lang: Some("en".into()),
            missing_image: false,
        };
        PipelineRecord::new(base, crate::seed::derive_seed(0, id))
    }

    #[test]
    fn empty_file_reads_as_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "").unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.records.len(), 0);
    }

    #[test]
    fn three_record_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut m = Manifest::new(Stage::Ingested, 3);
        m.records = vec![sample_record("a"), sample_record("b"), sample_record("c")];
        write_manifest(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let again = read_manifest(&path).unwrap();
        assert_eq!(again, m);
        let path2 = dir.path().join("m2.jsonl");
        write_manifest(&again, &path2).unwrap();
        assert_eq!(std::fs::read(&path2).unwrap(), bytes);
    }

    #[test]
    fn truncated_line_cites_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut m = Manifest::new(Stage::Ingested, 0);
        m.records = vec![sample_record("a")];
        let mut text = m.to_jsonl().unwrap();
        // Truncate the second line (the record).
        text.truncate(text.len() - 10);
        std::fs::write(&path, text).unwrap();
        let err = format!("{:#}", read_manifest(&path).unwrap_err());
        assert!(err.contains("line 2"), "error was: {err}");
    }

    #[test]
    fn duplicate_id_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut m = Manifest::new(Stage::Ingested, 0);
        m.records = vec![sample_record("dup"), sample_record("dup")];
        std::fs::write(&path, m.to_jsonl().unwrap()).unwrap();
        let err = format!("{:#}", read_manifest(&path).unwrap_err());
        assert!(err.contains("dup"), "error was: {err}");
    }

    #[test]
    fn invalid_box_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut rec = sample_record("a");
        rec.boxes = Some(vec![BoundingBox::new(5, 5, 5, 9, 0.5, "liver")]);
        let mut m = Manifest::new(Stage::Grounded, 0);
        m.records = vec![rec];
        std::fs::write(&path, m.to_jsonl().unwrap()).unwrap();
        assert!(read_manifest(&path).is_err());
        let (_, violations) = read_manifest_lenient(&path).unwrap();
        assert_eq!(violations.len(), 1);
    }

    fn arb_id() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_-]{0,11}"
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0u32..100, 0u32..100, 1u32..64, 1u32..64, 0u32..=1000).prop_map(|(x, y, w, h, s)| {
            BoundingBox::new(x, y, x + w, y + h, f64::from(s) / 1000.0, "liver")
        })
    }

    fn arb_record(id: String) -> impl Strategy<Value = PipelineRecord> {
        (
            any::<u64>(),
            "[ -~]{0,40}",
            "[ -~]{0,20}",
            prop::option::of(prop::collection::vec(arb_box(), 0..3)),
            prop::bool::ANY,
        )
            .prop_map(move |(seed, question, answer, boxes, open)| {
                let base = VQARecord {
                    id: id.clone(),
                    image_path: format!("imgs/{id}.png"),
                    question,
                    answer,
                    answer_type: if open {
                        AnswerType::Open
                    } else {
                        AnswerType::Closed
                    },
                    options: None,
                    dataset: DatasetKind::Generic,
                    answer_letter: None,
                    lang: None,
                    missing_image: false,
                };
                let mut rec = PipelineRecord::new(base, seed);
                // Give records with boxes a prompt so prompts round-trip too.
                if let Some(boxes) = &boxes {
                    if let Some(first) = boxes.first() {
                        rec.prompts = Some(vec![VisualPrompt {
                            shape: Shape::Rectangle,
                            color: PaletteColor::Cyan,
                            alpha: 0.75,
                            thickness: 2,
                            geometry: PromptGeometry::Rectangle {
                                x_min: first.x_min,
                                y_min: first.y_min,
                                x_max: first.x_max,
                                y_max: first.y_max,
                            },
                            source_box: first.clone(),
                        }]);
                    }
                }
                rec.boxes = boxes;
                rec
            })
    }

    fn arb_records() -> impl Strategy<Value = Vec<PipelineRecord>> {
        prop::collection::btree_set(arb_id(), 0..6).prop_flat_map(|ids| {
            ids.into_iter()
                .map(|id| arb_record(id).boxed())
                .collect::<Vec<_>>()
        })
    }

    proptest! {
        #[test]
        fn round_trip_identity_for_arbitrary_records(
            records in arb_records(),
            seed in any::<u64>(),
        ) {
            let mut m = Manifest::new(Stage::Grounded, seed);
            m.records = records;

            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.jsonl");
            write_manifest(&m, &path).unwrap();
            let bytes = std::fs::read(&path).unwrap();
            let back = read_manifest(&path).unwrap();
            prop_assert_eq!(&back, &m);
            let path2 = dir.path().join("m2.jsonl");
            write_manifest(&back, &path2).unwrap();
            prop_assert_eq!(std::fs::read(&path2).unwrap(), bytes);
        }
    }
}
