//! Pluggable detector contract and test doubles.
//!
//! The trained network itself is out of scope; everything downstream
//! (evaluation, TTA fusion, mining) consumes detectors through [`Detector`].
//! Two implementations ship here:
//!
//! * [`MockOracleDetector`] - a deterministic oracle built from the
//!   catalog's ground truth, with tunable simulated recall, false-positive
//!   rate, positional jitter and confidence bands. With
//!   `recall_sim = 1, fp_rate = 0, jitter_px = 0` it reproduces the truth
//!   exactly at confidence 1.0.
//! * [`ExternalDetections`] - an adapter over a detection JSON-lines file,
//!   so predictions of a real model flow through the same pipeline.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::catalog::{ClassLabel, CorpusCatalog, PatchRecord};
use crate::error::{Error, Result};
use crate::evaluator::{read_detections, Detection, DetectionSet, IDENTITY_TRANSFORM};
use crate::tta::{GeomTransform, TransformKind};

/// Behavioral contract of a point detector.
///
/// `detect` evaluates a patch in canonical coordinates. `detect_view`
/// evaluates the patch under a geometric view and returns detections in the
/// view's frame (`transform_id` = view id); implementations that cannot
/// render views only support the identity view.
pub trait Detector: Sync {
    fn model_id(&self) -> &str;

    fn detect(&self, patch: &PatchRecord) -> Result<DetectionSet>;

    fn detect_view(&self, patch: &PatchRecord, view: &GeomTransform) -> Result<DetectionSet> {
        if view.kind == TransformKind::Identity {
            self.detect(patch)
        } else {
            Err(Error::ViewUnsupported {
                model_id: self.model_id().to_string(),
                view: view.id(),
            })
        }
    }
}

/// Beta-distribution parameters for confidence assignment: matched
/// detections draw from a high band, false positives from a low band, so
/// threshold sweeps are meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfBands {
    /// (alpha, beta) for matched detections; defaults to Beta(8, 2).
    pub matched: (f64, f64),
    /// (alpha, beta) for false positives; defaults to Beta(2, 5).
    pub false_positive: (f64, f64),
}

impl Default for ConfBands {
    fn default() -> Self {
        Self {
            matched: (8.0, 2.0),
            false_positive: (2.0, 5.0),
        }
    }
}

/// Mock behavior knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockParams {
    /// Probability that a true MF is emitted.
    pub recall_sim: f64,
    /// Expected false detections per patch (Poisson).
    pub fp_rate: f64,
    /// Std-dev of Gaussian positional noise, in pixels.
    pub jitter_px: f64,
    /// Confidence bands; `None` assigns confidence 1.0 to everything.
    pub conf_bands: Option<ConfBands>,
}

impl Default for MockParams {
    fn default() -> Self {
        Self::oracle()
    }
}

impl MockParams {
    /// Exact-oracle configuration: detections equal the MF ground truth.
    pub fn oracle() -> Self {
        Self {
            recall_sim: 1.0,
            fp_rate: 0.0,
            jitter_px: 0.0,
            conf_bands: None,
        }
    }

    /// A miss/false-alarm simulation with the default confidence bands.
    pub fn calibrated(recall_sim: f64, fp_rate: f64, jitter_px: f64) -> Self {
        Self {
            recall_sim,
            fp_rate,
            jitter_px,
            conf_bands: Some(ConfBands::default()),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.recall_sim) {
            return Err(Error::InvalidParam {
                name: "recall_sim",
                msg: format!("{} outside [0, 1]", self.recall_sim),
            });
        }
        if !(self.fp_rate >= 0.0) || !self.fp_rate.is_finite() {
            return Err(Error::InvalidParam {
                name: "fp_rate",
                msg: format!("{} must be >= 0", self.fp_rate),
            });
        }
        if !(self.jitter_px >= 0.0) || !self.jitter_px.is_finite() {
            return Err(Error::InvalidParam {
                name: "jitter_px",
                msg: format!("{} must be >= 0", self.jitter_px),
            });
        }
        Ok(())
    }
}

/// Deterministic ground-truth-backed detector. The per-patch RNG stream is
/// derived from `(seed, patch id, view id)`, so detection files are
/// byte-identical for identical `(catalog, params, seed)` and safe to
/// produce from concurrent calls.
pub struct MockOracleDetector {
    model_id: String,
    params: MockParams,
    seed: u64,
    truth: BTreeMap<String, Vec<(i64, i64)>>,
    sizes: BTreeMap<String, (u32, u32)>,
}

impl MockOracleDetector {
    pub fn new(
        catalog: &CorpusCatalog,
        params: MockParams,
        seed: u64,
        model_id: impl Into<String>,
    ) -> Result<Self> {
        params.validate()?;
        let mut truth: BTreeMap<String, Vec<(i64, i64)>> = BTreeMap::new();
        let mut sizes = BTreeMap::new();
        for patch in catalog.patches() {
            sizes.insert(patch.id.clone(), patch.size_wh);
            truth.insert(patch.id.clone(), catalog.mf_centers_of_patch(&patch.id));
        }
        Ok(Self {
            model_id: model_id.into(),
            params,
            seed,
            truth,
            sizes,
        })
    }

    fn rng_for(&self, patch_id: &str, view_id: &str) -> ChaCha8Rng {
        // FNV-1a over (patch id, view id), mixed with the run seed.
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for byte in patch_id.bytes().chain([0u8]).chain(view_id.bytes()) {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(self.seed ^ hash)
    }

    fn confidence<R: Rng>(&self, rng: &mut R, matched: bool) -> f64 {
        match self.params.conf_bands {
            None => 1.0,
            Some(bands) => {
                let (a, b) = if matched {
                    bands.matched
                } else {
                    bands.false_positive
                };
                Beta::new(a, b).expect("valid beta parameters").sample(rng)
            }
        }
    }
}

impl Detector for MockOracleDetector {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn detect(&self, patch: &PatchRecord) -> Result<DetectionSet> {
        self.detect_view(patch, &GeomTransform::identity(patch.size_wh))
    }

    fn detect_view(&self, patch: &PatchRecord, view: &GeomTransform) -> Result<DetectionSet> {
        let Some(centers) = self.truth.get(&patch.id) else {
            return Err(Error::UnknownPatch {
                id: patch.id.clone(),
            });
        };
        let view_id = view.id();
        let mut rng = self.rng_for(&patch.id, &view_id);
        let (vw, vh) = view.output_size();
        let clamp = |value: f64, limit: u32| value.clamp(0.0, f64::from(limit) - 1.0);
        let mut detections = Vec::new();

        for &(cx, cy) in centers {
            if !rng.random_bool(self.params.recall_sim) {
                continue;
            }
            let (mut x, mut y) = view.apply((cx as f64, cy as f64));
            if self.params.jitter_px > 0.0 {
                let noise = Normal::new(0.0, self.params.jitter_px).expect("valid sigma");
                x += noise.sample(&mut rng);
                y += noise.sample(&mut rng);
            }
            detections.push(Detection {
                patch_id: patch.id.clone(),
                x: clamp(x, vw),
                y: clamp(y, vh),
                confidence: self.confidence(&mut rng, true),
                model_id: self.model_id.clone(),
                transform_id: view_id.clone(),
            });
        }

        if self.params.fp_rate > 0.0 {
            let count = Poisson::new(self.params.fp_rate)
                .expect("valid lambda")
                .sample(&mut rng) as usize;
            for _ in 0..count {
                detections.push(Detection {
                    patch_id: patch.id.clone(),
                    x: rng.random_range(0.0..f64::from(vw)),
                    y: rng.random_range(0.0..f64::from(vh)),
                    confidence: self.confidence(&mut rng, false),
                    model_id: self.model_id.clone(),
                    transform_id: view_id.clone(),
                });
            }
        }

        DetectionSet::new(patch.id.clone(), detections)
    }
}

/// Adapter exposing externally produced detections (a JSON-lines file)
/// through the detector contract. Lookup is by `(patch, transform)`; a
/// patch without recorded detections yields an empty set.
pub struct ExternalDetections {
    model_id: String,
    by_key: BTreeMap<(String, String), Vec<Detection>>,
}

impl ExternalDetections {
    pub fn from_detections(model_id: impl Into<String>, detections: Vec<Detection>) -> Self {
        let mut by_key: BTreeMap<(String, String), Vec<Detection>> = BTreeMap::new();
        for det in detections {
            by_key
                .entry((det.patch_id.clone(), det.transform_id.clone()))
                .or_default()
                .push(det);
        }
        Self {
            model_id: model_id.into(),
            by_key,
        }
    }

    pub fn read_jsonl(path: &Path, model_id: impl Into<String>) -> Result<Self> {
        Ok(Self::from_detections(model_id, read_detections(path)?))
    }
}

impl Detector for ExternalDetections {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn detect(&self, patch: &PatchRecord) -> Result<DetectionSet> {
        self.detect_view(patch, &GeomTransform::identity(patch.size_wh))
    }

    fn detect_view(&self, patch: &PatchRecord, view: &GeomTransform) -> Result<DetectionSet> {
        let key = (patch.id.clone(), view.id());
        let detections = self.by_key.get(&key).cloned().unwrap_or_default();
        DetectionSet::new(patch.id.clone(), detections)
    }
}

/// Latency statistics of a batch run (milliseconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub patches: usize,
    pub wall_ms: f64,
    pub mean_patch_ms: f64,
    pub max_patch_ms: f64,
    pub patches_per_sec: f64,
}

impl BatchStats {
    fn from_latencies(wall: Duration, latencies: &[Duration]) -> Self {
        let wall_ms = wall.as_secs_f64() * 1e3;
        let patches = latencies.len();
        let sum_ms: f64 = latencies.iter().map(|d| d.as_secs_f64() * 1e3).sum();
        let max_ms = latencies
            .iter()
            .map(|d| d.as_secs_f64() * 1e3)
            .fold(0.0, f64::max);
        Self {
            patches,
            wall_ms,
            mean_patch_ms: if patches > 0 { sum_ms / patches as f64 } else { 0.0 },
            max_patch_ms: max_ms,
            patches_per_sec: if wall_ms > 0.0 {
                patches as f64 / (wall_ms / 1e3)
            } else {
                0.0
            },
        }
    }
}

/// Outcome of a (possibly parallel) batch run: successful sets in input
/// order, per-patch failures, and timing.
#[derive(Debug)]
pub struct BatchOutcome {
    pub sets: Vec<DetectionSet>,
    pub failures: Vec<(String, String)>,
    pub stats: BatchStats,
}

/// Run a detector over many patches. Results are canonicalized to input
/// order, so any parallelism degree produces identical detection sets;
/// failures are collected per patch and the run continues.
pub fn batch_detect(
    detector: &dyn Detector,
    patches: &[&PatchRecord],
    parallelism: usize,
) -> Result<BatchOutcome> {
    if parallelism == 0 {
        return Err(Error::InvalidParam {
            name: "parallelism",
            msg: "parallelism must be >= 1".into(),
        });
    }
    let started = Instant::now();
    let results: Vec<(std::result::Result<DetectionSet, String>, Duration)> = if parallelism == 1 {
        patches
            .iter()
            .map(|patch| {
                let t0 = Instant::now();
                let result = detector.detect(patch).map_err(|e| e.to_string());
                (result, t0.elapsed())
            })
            .collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::InvalidParam {
                name: "parallelism",
                msg: e.to_string(),
            })?;
        pool.install(|| {
            patches
                .par_iter()
                .map(|patch| {
                    let t0 = Instant::now();
                    let result = detector.detect(patch).map_err(|e| e.to_string());
                    (result, t0.elapsed())
                })
                .collect()
        })
    };

    let mut sets = Vec::with_capacity(patches.len());
    let mut failures = Vec::new();
    let mut latencies = Vec::with_capacity(patches.len());
    for (patch, (result, latency)) in patches.iter().zip(results) {
        latencies.push(latency);
        match result {
            Ok(set) => sets.push(set),
            Err(msg) => failures.push((patch.id.clone(), msg)),
        }
    }
    Ok(BatchOutcome {
        sets,
        failures,
        stats: BatchStats::from_latencies(started.elapsed(), &latencies),
    })
}
