//! Pipeline configuration.
//!
//! Precedence when assembling the effective config: command-line flags,
//! then environment variables, then the config file, then the defaults
//! below. The effective config is serialized into every output manifest
//! header so each artifact records how it was produced. Credentials are
//! read from the environment only and never written to manifests.

use crate::render::PromptStyle;
use crate::types::{DatasetKind, Split};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ENV_LLM_URL: &str = "MEDVP_LLM_URL";
pub const ENV_LLM_KEY: &str = "MEDVP_LLM_KEY";
pub const ENV_GROUND_URL: &str = "MEDVP_GROUND_URL";

/// Default detector prediction score threshold.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.2;
/// Default number of boxes kept per entity. Kept low on purpose: extra
/// markers bias counting questions, so fewer high-confidence prompts are
/// safer.
pub const DEFAULT_TOP_K: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Master seed all record seeds derive from.
    pub master_seed: u64,
    pub dataset: DatasetKind,
    /// Dataset root directory (or manifest file for `generic`).
    pub root: String,
    pub split: Split,
    /// Working directory for stage manifests and rendered images.
    pub out_dir: String,
    /// Marker sampling style (shape set, palette, alpha range, thickness).
    pub style: PromptStyle,
    /// Minimum detector score for a box to be kept.
    pub score_threshold: f64,
    /// Boxes kept per entity.
    pub top_k: usize,
    /// Keep only records in this language when the source is bilingual.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
    /// Extra gazetteer entries loaded on top of the built-in vocabulary.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gazetteer_file: Option<String>,
    /// Chat-completion endpoint for LLM entity extraction. When unset the
    /// gazetteer extractor is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm_endpoint: Option<String>,
    pub llm_model: String,
    /// Fall back to the gazetteer when the LLM reply cannot be parsed.
    pub llm_fallback: bool,
    /// Grounding service endpoint. Exactly one of this or `stub_rules` must
    /// be set for the ground stage.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grounding_endpoint: Option<String>,
    /// Offline stub rule file mapping (image id, entity) to fixed boxes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stub_rules: Option<String>,
    /// Send images to the grounding service as base64 instead of by path.
    pub image_as_base64: bool,
    /// Directory holding `templates.json`; built-in defaults when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<String>,
    /// Worker pool width for per-record stages and service calls.
    pub parallelism: usize,
    /// Retry count for service calls (capped exponential backoff).
    pub retries: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            master_seed: 0,
            dataset: DatasetKind::Generic,
            root: String::new(),
            split: Split::Test,
            out_dir: "medvp_out".to_string(),
            style: PromptStyle::default(),
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            top_k: DEFAULT_TOP_K,
            lang: None,
            gazetteer_file: None,
            llm_endpoint: None,
            llm_model: "default".to_string(),
            llm_fallback: false,
            grounding_endpoint: None,
            stub_rules: None,
            image_as_base64: false,
            templates_dir: None,
            parallelism: 4,
            retries: 3,
        }
    }
}

impl PipelineConfig {
    /// Load a config file; TOML or JSON is selected by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => {
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
            }
            Some("json") => {
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
            }
            other => bail!(
                "unsupported config extension {:?} for {} (expected .toml or .json)",
                other,
                path.display()
            ),
        }
    }

    /// Overlay endpoint settings from the environment (flags still win; the
    /// caller applies them after this).
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(ENV_LLM_URL) {
            if !url.is_empty() {
                self.llm_endpoint = Some(url);
            }
        }
        if let Ok(url) = std::env::var(ENV_GROUND_URL) {
            if !url.is_empty() {
                self.grounding_endpoint = Some(url);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_preserves_config() {
        let mut cfg = PipelineConfig {
            master_seed: 7,
            dataset: DatasetKind::Slake,
            root: "/data/slake".into(),
            stub_rules: Some("rules.json".into()),
            ..PipelineConfig::default()
        };
        cfg.style.alpha_range = (0.7, 0.8);
        let text = toml::to_string(&cfg).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg: PipelineConfig = toml::from_str("master_seed = 5\n").unwrap();
        assert_eq!(cfg.master_seed, 5);
        assert_eq!(cfg.score_threshold, DEFAULT_SCORE_THRESHOLD);
        assert_eq!(cfg.top_k, 1);
    }

    #[test]
    fn json_config_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"master_seed": 9, "dataset": "vqa_rad"}"#).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.master_seed, 9);
        assert_eq!(cfg.dataset, DatasetKind::VqaRad);
    }
}
