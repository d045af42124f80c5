//! Corpus data model: datasets, slides, patches, and point annotations.
//!
//! The catalog is the sampling universe. It is ingested from a JSON-lines
//! manifest (one record per line, discriminated by a `kind` field; see
//! `schemas/manifest.schema.json`, which every record is validated against),
//! kept immutable after construction, and queried by every other module.
//!
//! Patches are pre-extracted, manifest-declared records: slide decoding is
//! out of scope, so a patch is identified by its slide, origin and size, and
//! optionally points at a flat RGB file with its pixels.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patch-level class: a patch is `MF` iff it holds at least one MF annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "MF")]
    Mf,
    #[serde(rename = "NMF")]
    Nmf,
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassLabel::Mf => "MF",
            ClassLabel::Nmf => "NMF",
        })
    }
}

/// Whether a dataset carries MF annotations or is a negatives-only source
/// (necrosis/debris collections used for hard-negative mining).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    MfAnnotated,
    NegativeOnly,
}

/// Provenance of an annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    #[default]
    Original,
    MinedHardNegative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub name: String,
    /// Serialized as `dataset_kind`: `kind` is the manifest's record
    /// discriminator.
    #[serde(rename = "dataset_kind")]
    pub kind: DatasetKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub id: String,
    pub dataset_id: String,
    /// Free-form strata labels (tumor type, scanner, species), matched by
    /// prefix when stratifying splits.
    #[serde(default)]
    pub domain_tags: Vec<String>,
}

pub const DEFAULT_PATCH_SIZE: (u32, u32) = (1920, 1280);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub id: String,
    pub slide_id: String,
    /// Top-left corner in slide space.
    pub origin_xy: (i64, i64),
    pub size_wh: (u32, u32),
    pub class_label: ClassLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_source: Option<String>,
}

impl PatchRecord {
    /// True when an integer point in patch-local coordinates lies inside
    /// the patch.
    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < i64::from(self.size_wh.0) && y < i64::from(self.size_wh.1)
    }
}

/// A point annotation in patch-local pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub patch_id: String,
    pub center_xy: (i64, i64),
    pub label: ClassLabel,
    #[serde(default)]
    pub source: AnnotationSource,
}

/// Brute-force count summary: patches per dataset (`|d|`), annotations per
/// slide (`|m|`) and patches per class (`N_c`).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CountsSummary {
    pub patches_per_dataset: BTreeMap<String, u64>,
    pub annotations_per_slide: BTreeMap<String, u64>,
    pub patches_per_class: BTreeMap<ClassLabel, u64>,
}

/// Immutable registry of datasets, slides, patches and annotations.
///
/// All mutating operations return a new catalog value; a catalog can be
/// shared read-only across threads.
#[derive(Debug, Clone, Default)]
pub struct CorpusCatalog {
    datasets: BTreeMap<String, DatasetRecord>,
    slides: BTreeMap<String, SlideRecord>,
    patches: BTreeMap<String, PatchRecord>,
    annotations: BTreeMap<String, Annotation>,
    // Derived indexes and cached counts, rebuilt on every construction.
    slides_per_dataset: BTreeMap<String, Vec<String>>,
    patches_per_slide: BTreeMap<String, Vec<String>>,
    annotations_per_patch: BTreeMap<String, Vec<String>>,
    counts: CountsSummary,
}

/// One line of a JSON-lines manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestRecord {
    Dataset(DatasetRecord),
    Slide(SlideRecord),
    Patch(ManifestPatch),
    Annotation(Annotation),
}

/// Patch record as written in manifests. `class_label` may be omitted, in
/// which case it is derived from the patch's annotations; when declared it
/// is checked against them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestPatch {
    pub id: String,
    pub slide_id: String,
    #[serde(default)]
    pub origin_xy: (i64, i64),
    #[serde(default = "default_patch_size")]
    pub size_wh: (u32, u32),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<ClassLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_source: Option<String>,
}

fn default_patch_size() -> (u32, u32) {
    DEFAULT_PATCH_SIZE
}

/// Supported manifest encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestFormat {
    JsonLines,
}

static MANIFEST_SCHEMA: LazyLock<jsonschema::Validator> = LazyLock::new(|| {
    let schema: serde_json::Value =
        serde_json::from_str(include_str!("../../../schemas/manifest.schema.json"))
            .expect("manifest schema is valid JSON");
    jsonschema::validator_for(&schema).expect("manifest schema compiles")
});

/// Accumulates records and validates the whole set on [`CatalogBuilder::build`].
///
/// Duplicate ids are rejected as records are added; referential integrity,
/// geometry bounds and class-label consistency are checked at build time.
#[derive(Debug, Default)]
pub struct CatalogBuilder {
    datasets: BTreeMap<String, DatasetRecord>,
    slides: BTreeMap<String, SlideRecord>,
    patches: BTreeMap<String, ManifestPatch>,
    annotations: BTreeMap<String, Annotation>,
}

impl CatalogBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dataset(&mut self, record: DatasetRecord) -> Result<&mut Self> {
        if self.datasets.contains_key(&record.id) {
            return Err(Error::DuplicateId {
                kind: "dataset",
                id: record.id,
            });
        }
        self.datasets.insert(record.id.clone(), record);
        Ok(self)
    }

    pub fn slide(&mut self, record: SlideRecord) -> Result<&mut Self> {
        if self.slides.contains_key(&record.id) {
            return Err(Error::DuplicateId {
                kind: "slide",
                id: record.id,
            });
        }
        self.slides.insert(record.id.clone(), record);
        Ok(self)
    }

    pub fn patch(&mut self, record: ManifestPatch) -> Result<&mut Self> {
        if self.patches.contains_key(&record.id) {
            return Err(Error::DuplicateId {
                kind: "patch",
                id: record.id,
            });
        }
        self.patches.insert(record.id.clone(), record);
        Ok(self)
    }

    pub fn annotation(&mut self, record: Annotation) -> Result<&mut Self> {
        if self.annotations.contains_key(&record.id) {
            return Err(Error::DuplicateId {
                kind: "annotation",
                id: record.id,
            });
        }
        self.annotations.insert(record.id.clone(), record);
        Ok(self)
    }

    pub fn record(&mut self, record: ManifestRecord) -> Result<&mut Self> {
        match record {
            ManifestRecord::Dataset(r) => self.dataset(r),
            ManifestRecord::Slide(r) => self.slide(r),
            ManifestRecord::Patch(r) => self.patch(r),
            ManifestRecord::Annotation(r) => self.annotation(r),
        }
    }

    pub fn build(self) -> Result<CorpusCatalog> {
        for slide in self.slides.values() {
            if !self.datasets.contains_key(&slide.dataset_id) {
                return Err(Error::DanglingRef {
                    kind: "dataset",
                    id: slide.dataset_id.clone(),
                    referrer: format!("slide `{}`", slide.id),
                });
            }
        }
        for patch in self.patches.values() {
            if !self.slides.contains_key(&patch.slide_id) {
                return Err(Error::DanglingRef {
                    kind: "slide",
                    id: patch.slide_id.clone(),
                    referrer: format!("patch `{}`", patch.id),
                });
            }
        }

        let mut annotations_per_patch: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for ann in self.annotations.values() {
            let Some(patch) = self.patches.get(&ann.patch_id) else {
                return Err(Error::DanglingRef {
                    kind: "patch",
                    id: ann.patch_id.clone(),
                    referrer: format!("annotation `{}`", ann.id),
                });
            };
            let (w, h) = patch.size_wh;
            let (x, y) = ann.center_xy;
            if x < 0 || y < 0 || x >= i64::from(w) || y >= i64::from(h) {
                return Err(Error::CenterOutOfBounds {
                    id: ann.id.clone(),
                    patch_id: patch.id.clone(),
                    x,
                    y,
                    w,
                    h,
                });
            }
            if ann.label == ClassLabel::Mf {
                let slide = &self.slides[&patch.slide_id];
                let dataset = &self.datasets[&slide.dataset_id];
                if dataset.kind == DatasetKind::NegativeOnly {
                    return Err(Error::MfInNegativeOnly {
                        annotation_id: ann.id.clone(),
                        dataset_id: dataset.id.clone(),
                    });
                }
            }
            annotations_per_patch
                .entry(ann.patch_id.clone())
                .or_default()
                .push(ann.id.clone());
        }

        // Derive (or check) patch class labels: MF iff >= 1 MF annotation.
        let mut patches = BTreeMap::new();
        for (id, p) in self.patches {
            let derived = annotations_per_patch
                .get(&id)
                .map(|ids| ids.iter().any(|a| self.annotations[a].label == ClassLabel::Mf))
                .unwrap_or(false);
            let derived = if derived { ClassLabel::Mf } else { ClassLabel::Nmf };
            if let Some(declared) = p.class_label {
                if declared != derived {
                    return Err(Error::ClassLabelMismatch {
                        id,
                        declared,
                        derived,
                    });
                }
            }
            patches.insert(
                id.clone(),
                PatchRecord {
                    id,
                    slide_id: p.slide_id,
                    origin_xy: p.origin_xy,
                    size_wh: p.size_wh,
                    class_label: derived,
                    pixel_source: p.pixel_source,
                },
            );
        }

        let mut catalog = CorpusCatalog {
            datasets: self.datasets,
            slides: self.slides,
            patches,
            annotations: self.annotations,
            ..Default::default()
        };
        catalog.rebuild_indexes();
        Ok(catalog)
    }
}

impl CorpusCatalog {
    fn rebuild_indexes(&mut self) {
        self.slides_per_dataset.clear();
        self.patches_per_slide.clear();
        self.annotations_per_patch.clear();
        for d in self.datasets.keys() {
            self.slides_per_dataset.insert(d.clone(), Vec::new());
        }
        for s in self.slides.values() {
            self.slides_per_dataset
                .get_mut(&s.dataset_id)
                .expect("validated")
                .push(s.id.clone());
            self.patches_per_slide.insert(s.id.clone(), Vec::new());
        }
        for p in self.patches.values() {
            self.patches_per_slide
                .get_mut(&p.slide_id)
                .expect("validated")
                .push(p.id.clone());
        }
        for a in self.annotations.values() {
            self.annotations_per_patch
                .entry(a.patch_id.clone())
                .or_default()
                .push(a.id.clone());
        }
        self.counts = self.recount();
    }

    /// Brute-force tally over the collections. The cached [`Self::counts`]
    /// must always equal this.
    pub fn recount(&self) -> CountsSummary {
        let mut summary = CountsSummary::default();
        for d in self.datasets.keys() {
            summary.patches_per_dataset.insert(d.clone(), 0);
        }
        for s in self.slides.keys() {
            summary.annotations_per_slide.insert(s.clone(), 0);
        }
        for p in self.patches.values() {
            let dataset_id = &self.slides[&p.slide_id].dataset_id;
            *summary
                .patches_per_dataset
                .get_mut(dataset_id)
                .expect("validated") += 1;
            *summary.patches_per_class.entry(p.class_label).or_insert(0) += 1;
        }
        for a in self.annotations.values() {
            let slide_id = &self.patches[&a.patch_id].slide_id;
            *summary
                .annotations_per_slide
                .get_mut(slide_id)
                .expect("validated") += 1;
        }
        summary
    }

    /// Cached counts, kept coherent with [`Self::recount`] by construction.
    pub fn counts(&self) -> &CountsSummary {
        &self.counts
    }

    pub fn datasets(&self) -> impl Iterator<Item = &DatasetRecord> {
        self.datasets.values()
    }

    pub fn slides(&self) -> impl Iterator<Item = &SlideRecord> {
        self.slides.values()
    }

    pub fn patches(&self) -> impl Iterator<Item = &PatchRecord> {
        self.patches.values()
    }

    pub fn annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.values()
    }

    pub fn dataset(&self, id: &str) -> Option<&DatasetRecord> {
        self.datasets.get(id)
    }

    pub fn slide(&self, id: &str) -> Option<&SlideRecord> {
        self.slides.get(id)
    }

    pub fn patch(&self, id: &str) -> Option<&PatchRecord> {
        self.patches.get(id)
    }

    pub fn annotation(&self, id: &str) -> Option<&Annotation> {
        self.annotations.get(id)
    }

    pub fn num_datasets(&self) -> usize {
        self.datasets.len()
    }

    pub fn num_slides(&self) -> usize {
        self.slides.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patches.len()
    }

    pub fn num_annotations(&self) -> usize {
        self.annotations.len()
    }

    /// Dataset owning a patch (through its slide).
    pub fn dataset_of_patch(&self, patch_id: &str) -> Option<&DatasetRecord> {
        let patch = self.patches.get(patch_id)?;
        let slide = self.slides.get(&patch.slide_id)?;
        self.datasets.get(&slide.dataset_id)
    }

    pub fn slide_ids_of_dataset(&self, dataset_id: &str) -> &[String] {
        self.slides_per_dataset
            .get(dataset_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn patch_ids_of_slide(&self, slide_id: &str) -> &[String] {
        self.patches_per_slide
            .get(slide_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn annotations_of_patch(&self, patch_id: &str) -> impl Iterator<Item = &Annotation> {
        self.annotations_per_patch
            .get(patch_id)
            .into_iter()
            .flatten()
            .map(|id| &self.annotations[id])
    }

    /// Centers of the MF annotations of a patch (the detection ground truth).
    pub fn mf_centers_of_patch(&self, patch_id: &str) -> Vec<(i64, i64)> {
        self.annotations_of_patch(patch_id)
            .filter(|a| a.label == ClassLabel::Mf)
            .map(|a| a.center_xy)
            .collect()
    }

    /// Add annotations, returning a new catalog. All-or-nothing: if any new
    /// annotation is invalid the original catalog is left untouched and no
    /// partial state escapes. Patches gaining an MF annotation flip to class
    /// MF; patches receiving only NMF annotations keep their class.
    pub fn merge_annotations(&self, new: &[Annotation]) -> Result<CorpusCatalog> {
        let mut seen = BTreeMap::new();
        for ann in new {
            if self.annotations.contains_key(&ann.id) || seen.insert(&ann.id, ()).is_some() {
                return Err(Error::DuplicateId {
                    kind: "annotation",
                    id: ann.id.clone(),
                });
            }
            let Some(patch) = self.patches.get(&ann.patch_id) else {
                return Err(Error::DanglingRef {
                    kind: "patch",
                    id: ann.patch_id.clone(),
                    referrer: format!("annotation `{}`", ann.id),
                });
            };
            let (x, y) = ann.center_xy;
            if !patch.contains(x, y) {
                return Err(Error::CenterOutOfBounds {
                    id: ann.id.clone(),
                    patch_id: patch.id.clone(),
                    x,
                    y,
                    w: patch.size_wh.0,
                    h: patch.size_wh.1,
                });
            }
            if ann.label == ClassLabel::Mf {
                let dataset = self.dataset_of_patch(&ann.patch_id).expect("validated");
                if dataset.kind == DatasetKind::NegativeOnly {
                    return Err(Error::MfInNegativeOnly {
                        annotation_id: ann.id.clone(),
                        dataset_id: dataset.id.clone(),
                    });
                }
            }
        }

        let mut next = self.clone();
        for ann in new {
            next.annotations.insert(ann.id.clone(), ann.clone());
            if ann.label == ClassLabel::Mf {
                next.patches
                    .get_mut(&ann.patch_id)
                    .expect("validated")
                    .class_label = ClassLabel::Mf;
            }
        }
        next.rebuild_indexes();
        Ok(next)
    }

    /// Canonical JSON-lines serialization: datasets, slides, patches, then
    /// annotations, each group in id order. Round-trips through
    /// [`ingest_manifest_str`] to an equal catalog.
    pub fn to_manifest_string(&self) -> String {
        let mut out = String::new();
        for d in self.datasets.values() {
            out.push_str(&serde_json::to_string(&ManifestRecord::Dataset(d.clone())).unwrap());
            out.push('\n');
        }
        for s in self.slides.values() {
            out.push_str(&serde_json::to_string(&ManifestRecord::Slide(s.clone())).unwrap());
            out.push('\n');
        }
        for p in self.patches.values() {
            let rec = ManifestRecord::Patch(ManifestPatch {
                id: p.id.clone(),
                slide_id: p.slide_id.clone(),
                origin_xy: p.origin_xy,
                size_wh: p.size_wh,
                class_label: Some(p.class_label),
                pixel_source: p.pixel_source.clone(),
            });
            out.push_str(&serde_json::to_string(&rec).unwrap());
            out.push('\n');
        }
        for a in self.annotations.values() {
            out.push_str(&serde_json::to_string(&ManifestRecord::Annotation(a.clone())).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(self.to_manifest_string().as_bytes())?;
        file.flush()?;
        Ok(())
    }
}

impl PartialEq for CorpusCatalog {
    fn eq(&self, other: &Self) -> bool {
        self.datasets == other.datasets
            && self.slides == other.slides
            && self.patches == other.patches
            && self.annotations == other.annotations
    }
}

fn parse_line(path: &str, line_no: usize, line: &str) -> Result<ManifestRecord> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::ManifestParse {
            path: path.to_string(),
            line: line_no,
            msg: e.to_string(),
        })?;
    if let Err(err) = MANIFEST_SCHEMA.validate(&value) {
        return Err(Error::SchemaViolation {
            path: path.to_string(),
            line: line_no,
            msg: err.to_string(),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::ManifestParse {
        path: path.to_string(),
        line: line_no,
        msg: e.to_string(),
    })
}

/// Ingest a manifest file into a validated catalog.
pub fn ingest_manifest(path: &Path, format: ManifestFormat) -> Result<CorpusCatalog> {
    let ManifestFormat::JsonLines = format;
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let display = path.display().to_string();
    let mut builder = CatalogBuilder::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        builder.record(parse_line(&display, idx + 1, &line)?)?;
    }
    builder.build()
}

/// [`ingest_manifest`] over an in-memory string (used by tests and round-trip
/// checks).
pub fn ingest_manifest_str(manifest: &str) -> Result<CorpusCatalog> {
    let mut builder = CatalogBuilder::new();
    for (idx, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        builder.record(parse_line("<memory>", idx + 1, line)?)?;
    }
    builder.build()
}
