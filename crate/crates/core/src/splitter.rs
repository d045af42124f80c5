//! Grouped, stratified k-fold assignment at slide granularity.
//!
//! Grouping is structural: folds are assigned per slide, so every patch of a
//! slide lands in the same fold and no slide can leak between train and
//! validation. Stratification keys a slide by `(dataset, selected tag)` and
//! deals each stratum's slides round-robin over the folds, so per-stratum
//! fold sizes never differ by more than one slide.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::CorpusCatalog;
use crate::error::{Error, Result};

/// Fold assignment for every slide of a catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Tag prefix that selected the stratum tag, if any.
    pub strata_key: Option<String>,
    pub fold_of_slide: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn slides_of_fold(&self, fold: usize) -> Vec<&str> {
        self.fold_of_slide
            .iter()
            .filter(|&(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let assignment: Self = serde_json::from_str(&text).map_err(|e| Error::FileFormat {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Ok(assignment)
    }

    /// Check that this assignment covers exactly the slides of `catalog`.
    pub fn validate_against(&self, catalog: &CorpusCatalog) -> Result<()> {
        for slide in catalog.slides() {
            let Some(&fold) = self.fold_of_slide.get(&slide.id) else {
                return Err(Error::DanglingRef {
                    kind: "slide",
                    id: slide.id.clone(),
                    referrer: "fold assignment".into(),
                });
            };
            if fold >= self.k {
                return Err(Error::FoldOutOfRange { fold, k: self.k });
            }
        }
        for slide_id in self.fold_of_slide.keys() {
            if catalog.slide(slide_id).is_none() {
                return Err(Error::DanglingRef {
                    kind: "slide",
                    id: slide_id.clone(),
                    referrer: "fold assignment".into(),
                });
            }
        }
        Ok(())
    }
}

/// Stratum of a slide: its dataset plus the first domain tag matching the
/// selector prefix (empty when the selector is absent or nothing matches).
fn stratum_of(catalog: &CorpusCatalog, slide_id: &str, strata_key: Option<&str>) -> (String, String) {
    let slide = catalog.slide(slide_id).expect("catalog integrity");
    let tag = strata_key
        .and_then(|prefix| {
            slide
                .domain_tags
                .iter()
                .find(|t| t.starts_with(prefix))
                .cloned()
        })
        .unwrap_or_default();
    (slide.dataset_id.clone(), tag)
}

/// Assign every slide to one of `k` folds, stratified by
/// `(dataset, selected domain tag)`.
///
/// Strata are processed largest first; slides are shuffled within their
/// stratum with the seeded RNG and dealt onto folds by a cursor that keeps
/// rotating across strata, which bounds both per-stratum and overall fold
/// size spread by one.
pub fn grouped_stratified_split(
    catalog: &CorpusCatalog,
    k: usize,
    strata_key: Option<&str>,
    seed: u64,
) -> Result<FoldAssignment> {
    let slide_count = catalog.num_slides();
    if k < 2 || k > slide_count {
        return Err(Error::BadFoldCount {
            k,
            slides: slide_count,
        });
    }

    let mut strata: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for slide in catalog.slides() {
        strata
            .entry(stratum_of(catalog, &slide.id, strata_key))
            .or_default()
            .push(slide.id.clone());
    }
    let mut ordered: Vec<((String, String), Vec<String>)> = strata.into_iter().collect();
    ordered.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then_with(|| a.0.cmp(&b.0)));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of_slide = BTreeMap::new();
    let mut cursor = 0usize;
    for (_, mut slides) in ordered {
        slides.shuffle(&mut rng);
        for slide in slides {
            fold_of_slide.insert(slide, cursor % k);
            cursor += 1;
        }
    }

    Ok(FoldAssignment {
        k,
        seed,
        strata_key: strata_key.map(str::to_string),
        fold_of_slide,
    })
}

/// Split a catalog into `(train, validation)` sub-catalogs for one fold.
/// The validation side holds exactly the slides assigned to `fold`; the two
/// patch sets partition the catalog.
pub fn fold_view(
    catalog: &CorpusCatalog,
    assignment: &FoldAssignment,
    fold: usize,
) -> Result<(CorpusCatalog, CorpusCatalog)> {
    if fold >= assignment.k {
        return Err(Error::FoldOutOfRange {
            fold,
            k: assignment.k,
        });
    }
    assignment.validate_against(catalog)?;
    let validation = subset_by_slides(catalog, |s| assignment.fold_of_slide[s] == fold)?;
    let train = subset_by_slides(catalog, |s| assignment.fold_of_slide[s] != fold)?;
    Ok((train, validation))
}

/// Sub-catalog restricted to slides matching `keep`. Datasets without any
/// retained slide are dropped so that downstream weight formulas never see
/// an empty dataset.
fn subset_by_slides<F: Fn(&str) -> bool>(
    catalog: &CorpusCatalog,
    keep: F,
) -> Result<CorpusCatalog> {
    let mut builder = crate::catalog::CatalogBuilder::new();
    let kept: Vec<_> = catalog.slides().filter(|s| keep(&s.id)).collect();
    let mut datasets_seen = std::collections::BTreeSet::new();
    for slide in &kept {
        datasets_seen.insert(slide.dataset_id.clone());
    }
    for dataset in catalog.datasets() {
        if datasets_seen.contains(&dataset.id) {
            builder.dataset(dataset.clone())?;
        }
    }
    for slide in &kept {
        builder.slide((*slide).clone())?;
        for patch_id in catalog.patch_ids_of_slide(&slide.id) {
            let patch = catalog.patch(patch_id).expect("catalog integrity");
            builder.patch(crate::catalog::ManifestPatch {
                id: patch.id.clone(),
                slide_id: patch.slide_id.clone(),
                origin_xy: patch.origin_xy,
                size_wh: patch.size_wh,
                class_label: Some(patch.class_label),
                pixel_source: patch.pixel_source.clone(),
            })?;
            for ann in catalog.annotations_of_patch(patch_id) {
                builder.annotation(ann.clone())?;
            }
        }
    }
    builder.build()
}
