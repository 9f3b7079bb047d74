//! Shared fixture builders for integration tests.
#![allow(dead_code)] // each test binary uses a different subset

use medvp::config::PipelineConfig;
use medvp::grounding::RawDetection;
use medvp::manifest::{write_manifest, Manifest};
use medvp::types::{AnswerType, DatasetKind, PipelineRecord, Split, Stage, VQARecord};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// Deterministic synthetic test image.
pub fn write_test_image(path: &Path, w: u32, h: u32, salt: u32) {
    let mut img = image::RgbImage::new(w, h);
    for (x, y, px) in img.enumerate_pixels_mut() {
        px.0 = [
            ((x * 2 + salt) % 256) as u8,
            ((y * 3 + salt * 7) % 256) as u8,
            ((x + y + salt * 13) % 256) as u8,
        ];
    }
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    img.save(path).unwrap();
}

pub fn base_record(id: &str, question: &str, answer: &str, at: AnswerType) -> VQARecord {
    VQARecord {
        id: id.to_string(),
        image_path: format!("imgs/{id}.png"),
        question: question.to_string(),
        answer: answer.to_string(),
        answer_type: at,
        options: None,
        dataset: DatasetKind::Generic,
        answer_letter: None,
        lang: None,
        missing_image: false,
    }
}

/// A synthetic generic dataset with `n` records, images on disk, and stub
/// grounding rules covering every (image, entity) pair. Returns a pipeline
/// config pointing at it.
pub fn write_pipeline_fixture(dir: &Path, n: usize) -> PipelineConfig {
    let data = dir.join("data");
    let mut manifest = Manifest::new(Stage::Ingested, 0);
    let mut rules: HashMap<String, HashMap<String, Vec<RawDetection>>> = HashMap::new();
    for i in 0..n {
        let id = format!("fx{i:03}");
        write_test_image(&data.join(format!("imgs/{id}.png")), 96, 96, i as u32);
        let (question, answer, at) = if i % 2 == 0 {
            ("Does the picture contain liver?", "yes", AnswerType::Closed)
        } else {
            (
                "Which organ is marked near the kidney?",
                "kidney",
                AnswerType::Open,
            )
        };
        manifest.records.push(PipelineRecord::new(
            base_record(&id, question, answer, at),
            0,
        ));
        let entity = if i % 2 == 0 { "liver" } else { "kidney" };
        let mut per_entity = HashMap::new();
        per_entity.insert(
            entity.to_string(),
            vec![RawDetection {
                x_min: 8.0 + i as f64,
                y_min: 10.0,
                x_max: 60.0 + (i % 3) as f64 * 5.0,
                y_max: 70.0,
                score: 0.9,
            }],
        );
        rules.insert(id, per_entity);
    }
    write_manifest(&manifest, &data.join("test.jsonl")).unwrap();
    std::fs::write(
        dir.join("rules.json"),
        serde_json::to_string_pretty(&rules).unwrap(),
    )
    .unwrap();

    PipelineConfig {
        master_seed: 42,
        dataset: DatasetKind::Generic,
        root: data.to_string_lossy().into_owned(),
        split: Split::Test,
        out_dir: dir.join("work").to_string_lossy().into_owned(),
        stub_rules: Some(dir.join("rules.json").to_string_lossy().into_owned()),
        parallelism: 2,
        ..PipelineConfig::default()
    }
}

/// All files under a directory, relative paths sorted.
pub fn dir_files(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        if !dir.exists() {
            return;
        }
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Assert two directory trees are byte-identical.
pub fn assert_trees_identical(a: &Path, b: &Path) {
    let files_a = dir_files(a);
    let files_b = dir_files(b);
    assert_eq!(files_a, files_b, "file sets differ between {a:?} and {b:?}");
    for rel in files_a {
        let ba = std::fs::read(a.join(&rel)).unwrap();
        let bb = std::fs::read(b.join(&rel)).unwrap();
        assert_eq!(ba, bb, "bytes differ for {rel:?}");
    }
}
