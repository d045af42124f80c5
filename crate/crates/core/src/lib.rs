//! Data-pipeline and evaluation toolkit for point-based mitotic-figure
//! detection.
//!
//! The crate covers everything around the neural detector, which stays
//! behind the pluggable [`detector::Detector`] contract:
//!
//! * [`catalog`] - the corpus data model (datasets, slides, patches, point
//!   annotations) with JSON-lines manifest ingestion and atomic merges;
//! * [`sampler`] - three-level balanced sampling (dataset, slide, class)
//!   with alias-method batch draws;
//! * [`splitter`] - grouped, stratified k-fold assignment at slide level;
//! * [`evaluator`] - greedy point matching and micro-averaged
//!   precision/recall/F1 reports;
//! * [`ema`] - multi-rate exponential moving averages of checkpoint tensors
//!   and lowest-validation-loss ensemble export;
//! * [`mining`] - hard-negative mining over negatives-only tissue;
//! * [`tta`] - invertible view algebra, HSV jitter, and multi-view fusion;
//! * [`detector`] - the detector contract, a deterministic mock oracle, and
//!   an adapter for externally produced detections;
//! * [`synthetic`] - seeded corpus generation for benches and tests.

pub mod catalog;
pub mod detector;
pub mod ema;
pub mod error;
pub mod evaluator;
pub mod mining;
pub mod sampler;
pub mod splitter;
pub mod synthetic;
pub mod tta;

pub use catalog::{
    ingest_manifest, ingest_manifest_str, Annotation, AnnotationSource, CatalogBuilder,
    ClassLabel, CorpusCatalog, CountsSummary, DatasetKind, DatasetRecord, ManifestFormat,
    PatchRecord, SlideRecord,
};
pub use detector::{BatchOutcome, BatchStats, Detector, MockOracleDetector, MockParams};
pub use ema::{CheckpointSnapshot, EmaTracker, TensorData};
pub use error::{Error, ErrorClass, Result};
pub use evaluator::{Counts, Detection, DetectionSet, EvalReport, IDENTITY_TRANSFORM};
pub use sampler::{BatchSpec, SamplingPlan};
pub use splitter::FoldAssignment;
pub use tta::{FusionConfig, FusionMethod, GeomTransform, HsvJitter, TransformKind};
