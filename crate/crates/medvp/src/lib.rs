//! medvp — dataset tooling for visual-prompted medical VQA.
//!
//! Converts VQA-style datasets into visual-prompt-augmented datasets
//! (entity extraction → grounding → shape rasterization → alpha-blended
//! compositing → instruction adaptation) and drives the evaluation and
//! ablation protocols on top of them: prompt dropout, shape restriction,
//! prompt stripping, open-recall/closed-accuracy scoring, and attention
//! heatmap overlays.
//!
//! The pipeline is deterministic end to end: every record carries a seed
//! derived from the pipeline master seed and the record id, so reruns and
//! parallel execution produce byte-identical manifests and images.

pub mod adapt;
pub mod colormap;
pub mod config;
pub mod entities;
pub mod grounding;
pub mod harness;
pub mod ingest;
pub mod manifest;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod seed;
pub mod types;

/// Version string stamped into manifest headers for provenance.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
