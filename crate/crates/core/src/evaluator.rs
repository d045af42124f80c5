//! Point-detection evaluation: greedy matching, precision/recall/F1, and
//! report aggregation.
//!
//! Matching pairs detections with MF ground-truth points inside an explicit
//! radius. The matcher is greedy over candidate pairs ordered by descending
//! confidence with nearest-first tie-breaks; it is deterministic, O(n log n)
//! per patch, and never beats a brute-force optimal assignment on true
//! positives (the optimal matcher is kept as a test oracle). Aggregation is
//! micro: counts are pooled across patches, then the metrics are computed.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::ops::Add;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{Annotation, ClassLabel, CorpusCatalog};
use crate::error::{Error, Result};
use crate::splitter::FoldAssignment;

/// Canonical id of the untransformed coordinate frame.
pub const IDENTITY_TRANSFORM: &str = "identity";

/// One point detection, mirroring the JSON-lines wire format
/// `{patch_id, x, y, confidence, model_id, transform_id}`.
///
/// Detections are MF candidates by definition; `transform_id` names the
/// coordinate frame the point is currently expressed in (`identity` once a
/// TTA view has been folded back).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub patch_id: String,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub model_id: String,
    pub transform_id: String,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !self.confidence.is_finite() || !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::BadConfidence {
                value: self.confidence,
            });
        }
        Ok(())
    }
}

/// Detections of a single patch, typically from one (model, view) source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub patch_id: String,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(patch_id: impl Into<String>, detections: Vec<Detection>) -> Result<Self> {
        let patch_id = patch_id.into();
        for d in &detections {
            if d.patch_id != patch_id {
                return Err(Error::MixedPatchIds {
                    a: patch_id,
                    b: d.patch_id.clone(),
                });
            }
            d.validate()?;
        }
        let mut set = Self {
            patch_id,
            detections,
        };
        set.canonicalize();
        Ok(set)
    }

    /// Sort detections into the documented total order so serialized output
    /// is independent of production order.
    pub fn canonicalize(&mut self) {
        self.detections.sort_by(|a, b| {
            a.x.total_cmp(&b.x)
                .then_with(|| a.y.total_cmp(&b.y))
                .then_with(|| b.confidence.total_cmp(&a.confidence))
                .then_with(|| a.model_id.cmp(&b.model_id))
                .then_with(|| a.transform_id.cmp(&b.transform_id))
        });
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }
}

/// Read a detection JSON-lines file. Confidence bounds are checked; parse
/// errors carry the line number.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let display = path.display().to_string();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let det: Detection = serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
            path: display.clone(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        det.validate()?;
        out.push(det);
    }
    Ok(out)
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for det in detections {
        serde_json::to_writer(&mut file, det)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Matched/unmatched tallies. `fn` is serialized under its conventional name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Add for Counts {
    type Output = Counts;

    fn add(self, other: Counts) -> Counts {
        Counts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }
}

impl Counts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Result of matching one patch: counts plus the accepted pairing
/// (detection index into the input slice, annotation id).
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub counts: Counts,
    pub pairing: Vec<(usize, String)>,
}

/// Greedily match detections against the MF annotations of one patch.
///
/// Candidate (detection, truth) pairs within `radius` are ordered by
/// confidence descending, then distance ascending, then detection position
/// and truth id; pairs are accepted while both sides are unmatched. NMF
/// annotations never match and are not counted as misses.
pub fn match_detections(
    detections: &[Detection],
    truths: &[Annotation],
    radius: f64,
) -> Result<MatchOutcome> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidParam {
            name: "radius",
            msg: format!("matching radius must be positive, got {radius}"),
        });
    }
    let mut patch_id: Option<&str> = None;
    for item in detections.iter().map(|d| d.patch_id.as_str()).chain(
        truths.iter().map(|t| t.patch_id.as_str()),
    ) {
        match patch_id {
            None => patch_id = Some(item),
            Some(p) if p != item => {
                return Err(Error::MixedPatchIds {
                    a: p.to_string(),
                    b: item.to_string(),
                })
            }
            _ => {}
        }
    }
    for d in detections {
        d.validate()?;
    }

    let mf_truths: Vec<&Annotation> = truths
        .iter()
        .filter(|t| t.label == ClassLabel::Mf)
        .collect();

    struct Candidate<'a> {
        det: usize,
        truth: &'a str,
        truth_idx: usize,
        dist: f64,
    }
    let mut candidates = Vec::new();
    for (di, det) in detections.iter().enumerate() {
        for (ti, truth) in mf_truths.iter().enumerate() {
            let dx = det.x - truth.center_xy.0 as f64;
            let dy = det.y - truth.center_xy.1 as f64;
            let dist = (dx * dx + dy * dy).sqrt();
            if dist <= radius {
                candidates.push(Candidate {
                    det: di,
                    truth: &truth.id,
                    truth_idx: ti,
                    dist,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        let da = &detections[a.det];
        let db = &detections[b.det];
        db.confidence
            .total_cmp(&da.confidence)
            .then_with(|| a.dist.total_cmp(&b.dist))
            .then_with(|| da.x.total_cmp(&db.x))
            .then_with(|| da.y.total_cmp(&db.y))
            .then_with(|| a.truth.cmp(b.truth))
    });

    let mut det_taken = vec![false; detections.len()];
    let mut truth_taken = vec![false; mf_truths.len()];
    let mut pairing = Vec::new();
    for c in candidates {
        if !det_taken[c.det] && !truth_taken[c.truth_idx] {
            det_taken[c.det] = true;
            truth_taken[c.truth_idx] = true;
            pairing.push((c.det, c.truth.to_string()));
        }
    }

    let tp = pairing.len() as u64;
    Ok(MatchOutcome {
        counts: Counts {
            tp,
            fp: detections.len() as u64 - tp,
            fn_: mf_truths.len() as u64 - tp,
        },
        pairing,
    })
}

/// Counts plus derived metrics, one aggregation cell of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<Counts> for Scored {
    fn from(counts: Counts) -> Self {
        Scored {
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        }
    }
}

/// Micro-averaged evaluation report with per-slide, per-dataset and
/// (optionally) per-fold breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Scored,
    pub per_slide: BTreeMap<String, Scored>,
    pub per_dataset: BTreeMap<String, Scored>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_fold: Option<BTreeMap<String, Scored>>,
    pub threshold_used: f64,
    pub radius_used: f64,
}

/// Pool per-patch counts into a report. Aggregation is micro: counts add,
/// metrics are computed from the pooled counts at every granularity.
pub fn score(
    per_patch: &BTreeMap<String, Counts>,
    catalog: &CorpusCatalog,
    folds: Option<&FoldAssignment>,
    threshold: f64,
    radius: f64,
) -> Result<EvalReport> {
    let mut overall = Counts::default();
    let mut per_slide: BTreeMap<String, Counts> = BTreeMap::new();
    let mut per_dataset: BTreeMap<String, Counts> = BTreeMap::new();
    let mut per_fold: BTreeMap<String, Counts> = BTreeMap::new();
    for (patch_id, &counts) in per_patch {
        let Some(patch) = catalog.patch(patch_id) else {
            return Err(Error::UnknownPatch {
                id: patch_id.clone(),
            });
        };
        let slide_id = patch.slide_id.clone();
        let dataset_id = catalog
            .slide(&slide_id)
            .expect("catalog integrity")
            .dataset_id
            .clone();
        overall = overall + counts;
        let slot = per_slide.entry(slide_id.clone()).or_default();
        *slot = *slot + counts;
        let slot = per_dataset.entry(dataset_id).or_default();
        *slot = *slot + counts;
        if let Some(assignment) = folds {
            if let Some(&fold) = assignment.fold_of_slide.get(&slide_id) {
                let slot = per_fold.entry(fold.to_string()).or_default();
                *slot = *slot + counts;
            }
        }
    }
    Ok(EvalReport {
        overall: overall.into(),
        per_slide: per_slide.into_iter().map(|(k, v)| (k, v.into())).collect(),
        per_dataset: per_dataset
            .into_iter()
            .map(|(k, v)| (k, v.into()))
            .collect(),
        per_fold: folds.map(|_| per_fold.into_iter().map(|(k, v)| (k, v.into())).collect()),
        threshold_used: threshold,
        radius_used: radius,
    })
}

/// Match and score a full detection collection against a catalog.
///
/// Detections below `threshold` are dropped (inclusive cutoff: a detection
/// at exactly the threshold is kept). Every patch of the catalog counts:
/// patches without detections contribute their MF annotations as misses.
pub fn evaluate(
    catalog: &CorpusCatalog,
    detections: &[Detection],
    radius: f64,
    threshold: f64,
    folds: Option<&FoldAssignment>,
) -> Result<EvalReport> {
    let mut by_patch: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for det in detections {
        det.validate()?;
        let Some(patch) = catalog.patch(&det.patch_id) else {
            return Err(Error::UnknownPatch {
                id: det.patch_id.clone(),
            });
        };
        let (w, h) = patch.size_wh;
        if det.x < 0.0 || det.y < 0.0 || det.x >= f64::from(w) || det.y >= f64::from(h) {
            return Err(Error::CenterOutOfBounds {
                id: format!("detection@({}, {})", det.x, det.y),
                patch_id: det.patch_id.clone(),
                x: det.x.floor() as i64,
                y: det.y.floor() as i64,
                w,
                h,
            });
        }
        if det.confidence >= threshold {
            by_patch
                .entry(det.patch_id.clone())
                .or_default()
                .push(det.clone());
        }
    }

    let mut per_patch: BTreeMap<String, Counts> = BTreeMap::new();
    for patch in catalog.patches() {
        let truths: Vec<Annotation> = catalog.annotations_of_patch(&patch.id).cloned().collect();
        let dets = by_patch.remove(&patch.id).unwrap_or_default();
        if truths.is_empty() && dets.is_empty() {
            continue;
        }
        let outcome = match_detections(&dets, &truths, radius)?;
        per_patch.insert(patch.id.clone(), outcome.counts);
    }
    score(&per_patch, catalog, folds, threshold, radius)
}

/// Evaluate at every threshold of an ascending list.
pub fn sweep_threshold(
    catalog: &CorpusCatalog,
    detections: &[Detection],
    radius: f64,
    thresholds: &[f64],
    folds: Option<&FoldAssignment>,
) -> Result<Vec<(f64, EvalReport)>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidParam {
            name: "thresholds",
            msg: "thresholds must be sorted ascending".into(),
        });
    }
    thresholds
        .iter()
        .map(|&t| Ok((t, evaluate(catalog, detections, radius, t, folds)?)))
        .collect()
}

/// Flatten a report into CSV rows (`level,key,tp,fp,fn,precision,recall,f1`).
pub fn report_to_csv(report: &EvalReport) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["level", "key", "tp", "fp", "fn", "precision", "recall", "f1"])?;
    let mut write_row = |level: &str, key: &str, s: &Scored| -> Result<()> {
        writer.write_record([
            level,
            key,
            &s.counts.tp.to_string(),
            &s.counts.fp.to_string(),
            &s.counts.fn_.to_string(),
            &format!("{:.6}", s.precision),
            &format!("{:.6}", s.recall),
            &format!("{:.6}", s.f1),
        ])?;
        Ok(())
    };
    write_row("overall", "", &report.overall)?;
    for (k, s) in &report.per_dataset {
        write_row("dataset", k, s)?;
    }
    for (k, s) in &report.per_slide {
        write_row("slide", k, s)?;
    }
    if let Some(folds) = &report.per_fold {
        for (k, s) in folds {
            write_row("fold", k, s)?;
        }
    }
    let bytes = writer.into_inner().map_err(|e| Error::InvalidParam {
        name: "csv",
        msg: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
