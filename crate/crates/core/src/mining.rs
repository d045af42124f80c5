//! Hard-negative mining over negatives-only tissue.
//!
//! A detector is run over patches of the targeted dataset kinds (necrosis
//! and debris sources, which by construction contain no true MF); every
//! detection at or above the confidence floor becomes an NMF annotation at
//! the detection center, ready to merge into the training pool. Mining is
//! idempotent: candidates whose deduplication key - patch, center quantized
//! to a 4 px grid, model - already exists are skipped, so re-running a
//! seeded detector adds nothing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{
    Annotation, AnnotationSource, ClassLabel, CorpusCatalog, DatasetKind,
};
use crate::detector::Detector;
use crate::error::{Error, Result};

/// Side length of the center-quantization grid used for deduplication.
pub const DEDUP_GRID_PX: i64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Detections below this confidence are ignored (inclusive floor).
    pub confidence_floor: f64,
    /// Dataset kinds whose patches are mined.
    pub target_kinds: BTreeSet<DatasetKind>,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            confidence_floor: 0.25,
            target_kinds: BTreeSet::from([DatasetKind::NegativeOnly]),
        }
    }
}

impl MiningConfig {
    fn validate(&self) -> Result<()> {
        if !self.confidence_floor.is_finite()
            || !(0.0..1.0).contains(&self.confidence_floor)
            || self.confidence_floor == 0.0
        {
            return Err(Error::InvalidParam {
                name: "confidence_floor",
                msg: format!("{} outside (0, 1)", self.confidence_floor),
            });
        }
        Ok(())
    }
}

/// A mined annotation with the detection confidence that produced it (the
/// confidence feeds reports; the annotation alone enters the catalog).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedAnnotation {
    pub annotation: Annotation,
    pub confidence: f64,
    pub model_id: String,
}

/// Mining run result: annotations in canonical (patch, center) order plus
/// per-patch detector failures (the run continues past them).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MiningOutcome {
    pub mined: Vec<MinedAnnotation>,
    pub failures: Vec<(String, String)>,
}

fn dedup_key(patch_id: &str, center: (i64, i64), model_id: &str) -> (String, i64, i64, String) {
    let q = |v: i64| {
        // Round to the nearest grid cell.
        let half = DEDUP_GRID_PX / 2;
        (v + half).div_euclid(DEDUP_GRID_PX)
    };
    (
        patch_id.to_string(),
        q(center.0),
        q(center.1),
        model_id.to_string(),
    )
}

fn mined_annotation_id(key: &(String, i64, i64, String)) -> String {
    format!("mined:{}:{}:{}:{}", key.0, key.3, key.1, key.2)
}

/// Run the detector over every patch of the targeted dataset kinds and turn
/// confident detections into NMF hard-negative annotations.
pub fn mine_hard_negatives(
    catalog: &CorpusCatalog,
    detector: &dyn Detector,
    config: &MiningConfig,
) -> Result<MiningOutcome> {
    config.validate()?;

    // Keys already present in the catalog (from earlier mining rounds).
    let mut seen: BTreeSet<(String, i64, i64, String)> = catalog
        .annotations()
        .filter(|a| a.source == AnnotationSource::MinedHardNegative)
        .filter_map(|a| {
            a.id.strip_prefix("mined:").map(|_| {
                let model = mined_model_of(&a.id).unwrap_or_default();
                dedup_key(&a.patch_id, a.center_xy, &model)
            })
        })
        .collect();

    let mut outcome = MiningOutcome::default();
    let mut candidates: Vec<MinedAnnotation> = Vec::new();
    for patch in catalog.patches() {
        let dataset = catalog
            .dataset_of_patch(&patch.id)
            .expect("catalog integrity");
        if !config.target_kinds.contains(&dataset.kind) {
            continue;
        }
        let set = match detector.detect(patch) {
            Ok(set) => set,
            Err(err) => {
                outcome.failures.push((patch.id.clone(), err.to_string()));
                continue;
            }
        };
        for det in &set.detections {
            if det.confidence < config.confidence_floor {
                continue;
            }
            let (w, h) = patch.size_wh;
            let center = (
                (det.x.round() as i64).clamp(0, i64::from(w) - 1),
                (det.y.round() as i64).clamp(0, i64::from(h) - 1),
            );
            candidates.push(MinedAnnotation {
                annotation: Annotation {
                    id: String::new(), // assigned after dedup
                    patch_id: patch.id.clone(),
                    center_xy: center,
                    label: ClassLabel::Nmf,
                    source: AnnotationSource::MinedHardNegative,
                },
                confidence: det.confidence,
                model_id: det.model_id.clone(),
            });
        }
    }

    // Canonical order, highest confidence first within a key so dedup keeps
    // the strongest representative.
    candidates.sort_by(|a, b| {
        (&a.annotation.patch_id, a.annotation.center_xy)
            .cmp(&(&b.annotation.patch_id, b.annotation.center_xy))
            .then_with(|| b.confidence.total_cmp(&a.confidence))
    });
    for mut cand in candidates {
        let key = dedup_key(
            &cand.annotation.patch_id,
            cand.annotation.center_xy,
            &cand.model_id,
        );
        if !seen.insert(key.clone()) {
            continue;
        }
        cand.annotation.id = mined_annotation_id(&key);
        outcome.mined.push(cand);
    }
    Ok(outcome)
}

fn mined_model_of(id: &str) -> Option<String> {
    // mined:<patch>:<model>:<qx>:<qy>
    let mut parts = id.split(':');
    let _tag = parts.next()?;
    let _patch = parts.next()?;
    parts.next().map(str::to_string)
}

/// Histogram bucket over [lo, hi).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBucket {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub total: u64,
    pub per_dataset: BTreeMap<String, u64>,
    /// Ten equal confidence buckets over [0, 1]; the last is inclusive.
    pub confidence_histogram: Vec<HistBucket>,
    pub failures: u64,
}

/// Summarize a mining run against the catalog it targeted.
pub fn mining_report(outcome: &MiningOutcome, catalog: &CorpusCatalog) -> Result<MiningReport> {
    let mut per_dataset: BTreeMap<String, u64> = BTreeMap::new();
    let mut histogram: Vec<HistBucket> = (0..10)
        .map(|i| HistBucket {
            lo: i as f64 / 10.0,
            hi: (i + 1) as f64 / 10.0,
            count: 0,
        })
        .collect();
    for mined in &outcome.mined {
        let dataset = catalog
            .dataset_of_patch(&mined.annotation.patch_id)
            .ok_or_else(|| Error::UnknownPatch {
                id: mined.annotation.patch_id.clone(),
            })?;
        *per_dataset.entry(dataset.id.clone()).or_insert(0) += 1;
        let bucket = ((mined.confidence * 10.0).floor() as usize).min(9);
        histogram[bucket].count += 1;
    }
    Ok(MiningReport {
        total: outcome.mined.len() as u64,
        per_dataset,
        confidence_histogram: histogram,
        failures: outcome.failures.len() as u64,
    })
}

/// Write mined annotations in the catalog's annotation JSON-lines schema.
pub fn write_mined_annotations(path: &Path, mined: &[MinedAnnotation]) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in mined {
        let record = crate::catalog::ManifestRecord::Annotation(m.annotation.clone());
        serde_json::to_writer(&mut file, &record)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{ingest_manifest_str, PatchRecord};
    use crate::detector::{Detector, MockOracleDetector, MockParams};
    use crate::evaluator::{Detection, DetectionSet, IDENTITY_TRANSFORM};

    fn mixed_catalog() -> CorpusCatalog {
        let mut m = String::from(
            "{\"kind\":\"dataset\",\"id\":\"neg\",\"name\":\"necrosis\",\"dataset_kind\":\"negative_only\"}\n{\"kind\":\"dataset\",\"id\":\"pos\",\"name\":\"annotated\",\"dataset_kind\":\"mf_annotated\"}\n{\"kind\":\"slide\",\"id\":\"ns\",\"dataset_id\":\"neg\"}\n{\"kind\":\"slide\",\"id\":\"ps\",\"dataset_id\":\"pos\"}\n",
        );
        for p in 0..6 {
            m.push_str(&format!(
                "{{\"kind\":\"patch\",\"id\":\"np{p}\",\"slide_id\":\"ns\"}}\n"
            ));
        }
        m.push_str("{\"kind\":\"patch\",\"id\":\"pp0\",\"slide_id\":\"ps\"}\n");
        m.push_str("{\"kind\":\"annotation\",\"id\":\"pa0\",\"patch_id\":\"pp0\",\"center_xy\":[10,10],\"label\":\"MF\"}\n");
        ingest_manifest_str(&m).unwrap()
    }

    /// Scripted detector: fixed detections per patch.
    struct Scripted {
        sets: BTreeMap<String, Vec<(f64, f64, f64)>>,
        fail_on: Option<String>,
    }

    impl Detector for Scripted {
        fn model_id(&self) -> &str {
            "scripted"
        }

        fn detect(&self, patch: &PatchRecord) -> crate::error::Result<DetectionSet> {
            if self.fail_on.as_deref() == Some(patch.id.as_str()) {
                return Err(Error::UnknownPatch {
                    id: patch.id.clone(),
                });
            }
            let detections = self
                .sets
                .get(&patch.id)
                .map(|points| {
                    points
                        .iter()
                        .map(|&(x, y, confidence)| Detection {
                            patch_id: patch.id.clone(),
                            x,
                            y,
                            confidence,
                            model_id: "scripted".into(),
                            transform_id: IDENTITY_TRANSFORM.into(),
                        })
                        .collect()
                })
                .unwrap_or_default();
            DetectionSet::new(patch.id.clone(), detections)
        }
    }

    #[test]
    fn confident_detection_becomes_nmf_annotation() {
        let catalog = mixed_catalog();
        let detector = Scripted {
            sets: BTreeMap::from([("np0".to_string(), vec![(100.0, 100.0, 0.30)])]),
            fail_on: None,
        };
        let outcome =
            mine_hard_negatives(&catalog, &detector, &MiningConfig::default()).unwrap();
        assert_eq!(outcome.mined.len(), 1);
        let mined = &outcome.mined[0];
        assert_eq!(mined.annotation.label, ClassLabel::Nmf);
        assert_eq!(
            mined.annotation.source,
            AnnotationSource::MinedHardNegative
        );
        assert_eq!(mined.annotation.center_xy, (100, 100));
    }

    #[test]
    fn sub_floor_detection_ignored() {
        let catalog = mixed_catalog();
        let detector = Scripted {
            sets: BTreeMap::from([("np0".to_string(), vec![(100.0, 100.0, 0.20)])]),
            fail_on: None,
        };
        let outcome =
            mine_hard_negatives(&catalog, &detector, &MiningConfig::default()).unwrap();
        assert!(outcome.mined.is_empty());
    }

    #[test]
    fn floor_is_inclusive() {
        let catalog = mixed_catalog();
        let detector = Scripted {
            sets: BTreeMap::from([("np0".to_string(), vec![(5.0, 5.0, 0.25)])]),
            fail_on: None,
        };
        let outcome =
            mine_hard_negatives(&catalog, &detector, &MiningConfig::default()).unwrap();
        assert_eq!(outcome.mined.len(), 1);
    }

    #[test]
    fn annotated_datasets_not_mined() {
        let catalog = mixed_catalog();
        let detector = Scripted {
            sets: BTreeMap::from([
                ("pp0".to_string(), vec![(50.0, 50.0, 0.99)]),
                ("np1".to_string(), vec![(60.0, 60.0, 0.90)]),
            ]),
            fail_on: None,
        };
        let outcome =
            mine_hard_negatives(&catalog, &detector, &MiningConfig::default()).unwrap();
        assert_eq!(outcome.mined.len(), 1);
        assert_eq!(outcome.mined[0].annotation.patch_id, "np1");
    }

    #[test]
    fn detector_failure_skips_patch_and_continues() {
        let catalog = mixed_catalog();
        let detector = Scripted {
            sets: BTreeMap::from([
                ("np0".to_string(), vec![(10.0, 10.0, 0.5)]),
                ("np2".to_string(), vec![(20.0, 20.0, 0.5)]),
            ]),
            fail_on: Some("np1".to_string()),
        };
        let outcome =
            mine_hard_negatives(&catalog, &detector, &MiningConfig::default()).unwrap();
        assert_eq!(outcome.mined.len(), 2);
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.failures[0].0, "np1");
    }

    #[test]
    fn mock_detector_count_matches_seeded_output() {
        // Counting oracle: the mock's detections at/above the floor over the
        // target patches must equal the mined count exactly.
        let catalog = mixed_catalog();
        let params = MockParams::calibrated(1.0, 2.0, 0.0);
        let mock = MockOracleDetector::new(&catalog, params, 99, "mock").unwrap();
        let config = MiningConfig::default();
        let mut expected = 0usize;
        for patch in catalog.patches() {
            let dataset = catalog.dataset_of_patch(&patch.id).unwrap();
            if dataset.kind != DatasetKind::NegativeOnly {
                continue;
            }
            expected += mock
                .detect(patch)
                .unwrap()
                .detections
                .iter()
                .filter(|d| d.confidence >= config.confidence_floor)
                .count();
        }
        let outcome = mine_hard_negatives(&catalog, &mock, &config).unwrap();
        // Dedup can only reduce the count if two detections quantize to the
        // same 4 px cell; with uniform positions over 1920x1280 that is not
        // the case for this seed.
        assert_eq!(outcome.mined.len(), expected);
        assert!(expected > 0);
    }

    #[test]
    fn remining_is_idempotent() {
        let catalog = mixed_catalog();
        let params = MockParams::calibrated(1.0, 3.0, 0.0);
        let mock = MockOracleDetector::new(&catalog, params, 7, "mock").unwrap();
        let config = MiningConfig::default();
        let first = mine_hard_negatives(&catalog, &mock, &config).unwrap();
        assert!(!first.mined.is_empty());
        let merged = catalog
            .merge_annotations(
                &first
                    .mined
                    .iter()
                    .map(|m| m.annotation.clone())
                    .collect::<Vec<_>>(),
            )
            .unwrap();
        let second = mine_hard_negatives(&merged, &mock, &config).unwrap();
        assert!(
            second.mined.is_empty(),
            "re-mining with the same seed must add nothing, got {}",
            second.mined.len()
        );
    }

    #[test]
    fn mined_annotations_always_nmf_and_confident() {
        let catalog = mixed_catalog();
        let params = MockParams::calibrated(1.0, 4.0, 1.0);
        let mock = MockOracleDetector::new(&catalog, params, 13, "mock").unwrap();
        let config = MiningConfig::default();
        let outcome = mine_hard_negatives(&catalog, &mock, &config).unwrap();
        for m in &outcome.mined {
            assert_eq!(m.annotation.label, ClassLabel::Nmf);
            assert!(m.confidence >= config.confidence_floor);
        }
    }

    #[test]
    fn empty_run_yields_empty_report() {
        let catalog = mixed_catalog();
        let outcome = MiningOutcome::default();
        let report = mining_report(&outcome, &catalog).unwrap();
        assert_eq!(report.total, 0);
        assert!(report.per_dataset.is_empty());
        assert!(report.confidence_histogram.iter().all(|b| b.count == 0));
    }

    #[test]
    fn histogram_buckets_reflect_confidences() {
        let catalog = mixed_catalog();
        let detector = Scripted {
            sets: BTreeMap::from([(
                "np0".to_string(),
                vec![(10.0, 10.0, 0.3), (500.0, 500.0, 0.9)],
            )]),
            fail_on: None,
        };
        let outcome =
            mine_hard_negatives(&catalog, &detector, &MiningConfig::default()).unwrap();
        let report = mining_report(&outcome, &catalog).unwrap();
        assert_eq!(report.total, 2);
        assert_eq!(report.confidence_histogram[3].count, 1);
        assert_eq!(report.confidence_histogram[9].count, 1);
        assert_eq!(report.per_dataset["neg"], 2);
    }

    #[test]
    fn report_reconciles_with_merge_recount() {
        let catalog = mixed_catalog();
        let params = MockParams::calibrated(1.0, 2.5, 0.0);
        let mock = MockOracleDetector::new(&catalog, params, 21, "mock").unwrap();
        let outcome =
            mine_hard_negatives(&catalog, &mock, &MiningConfig::default()).unwrap();
        let report = mining_report(&outcome, &catalog).unwrap();
        let annotations: Vec<Annotation> =
            outcome.mined.iter().map(|m| m.annotation.clone()).collect();
        let merged = catalog.merge_annotations(&annotations).unwrap();
        let delta = merged.num_annotations() - catalog.num_annotations();
        assert_eq!(report.total as usize, delta);
        assert_eq!(merged.counts(), &merged.recount());
    }
}
