//! Seeded synthetic corpus generation for benchmarks and pipeline tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{
    Annotation, AnnotationSource, CatalogBuilder, ClassLabel, CorpusCatalog, DatasetKind,
    DatasetRecord, ManifestPatch, SlideRecord, DEFAULT_PATCH_SIZE,
};
use crate::error::Result;

/// Shape of one synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub id: String,
    pub kind: DatasetKind,
    pub slides: usize,
    pub patches_per_slide: usize,
    /// MF patches per slide (each carries exactly one MF annotation).
    /// Must be 0 for negatives-only datasets.
    pub mf_per_slide: usize,
    /// Extra NMF point annotations per slide, spread over NMF patches.
    pub nmf_annotations_per_slide: usize,
    /// Domain tags cycled over slides (slide i gets tag i mod len).
    pub tag_cycle: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogSpec {
    pub datasets: Vec<DatasetSpec>,
    pub patch_size: (u32, u32),
}

impl CatalogSpec {
    pub fn new(datasets: Vec<DatasetSpec>) -> Self {
        Self {
            datasets,
            patch_size: DEFAULT_PATCH_SIZE,
        }
    }
}

/// Generate a catalog. Ids, geometry and annotation placement are all
/// functions of `(spec, seed)`.
pub fn generate_catalog(spec: &CatalogSpec, seed: u64) -> Result<CorpusCatalog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = spec.patch_size;
    let mut builder = CatalogBuilder::new();
    for ds in &spec.datasets {
        assert!(
            ds.kind != DatasetKind::NegativeOnly || ds.mf_per_slide == 0,
            "negatives-only datasets cannot hold MF patches"
        );
        assert!(
            ds.mf_per_slide <= ds.patches_per_slide,
            "more MF patches than patches"
        );
        builder.dataset(DatasetRecord {
            id: ds.id.clone(),
            name: ds.id.clone(),
            kind: ds.kind,
        })?;
        for s in 0..ds.slides {
            let slide_id = format!("{}-s{s:03}", ds.id);
            let tags = if ds.tag_cycle.is_empty() {
                vec![]
            } else {
                vec![ds.tag_cycle[s % ds.tag_cycle.len()].clone()]
            };
            builder.slide(SlideRecord {
                id: slide_id.clone(),
                dataset_id: ds.id.clone(),
                domain_tags: tags,
            })?;
            for p in 0..ds.patches_per_slide {
                let patch_id = format!("{slide_id}-p{p:04}");
                builder.patch(ManifestPatch {
                    id: patch_id.clone(),
                    slide_id: slide_id.clone(),
                    origin_xy: (
                        i64::from(w) * (p as i64 % 8),
                        i64::from(h) * (p as i64 / 8),
                    ),
                    size_wh: spec.patch_size,
                    class_label: None,
                    pixel_source: None,
                })?;
                if p < ds.mf_per_slide {
                    builder.annotation(Annotation {
                        id: format!("{patch_id}-mf"),
                        patch_id: patch_id.clone(),
                        center_xy: (
                            rng.random_range(0..i64::from(w)),
                            rng.random_range(0..i64::from(h)),
                        ),
                        label: ClassLabel::Mf,
                        source: AnnotationSource::Original,
                    })?;
                }
            }
            // NMF annotations go onto the NMF patches, round-robin.
            let nmf_patches = ds.patches_per_slide - ds.mf_per_slide;
            for a in 0..ds.nmf_annotations_per_slide {
                if nmf_patches == 0 {
                    break;
                }
                let p = ds.mf_per_slide + (a % nmf_patches);
                builder.annotation(Annotation {
                    id: format!("{slide_id}-nmf{a:03}"),
                    patch_id: format!("{slide_id}-p{p:04}"),
                    center_xy: (
                        rng.random_range(0..i64::from(w)),
                        rng.random_range(0..i64::from(h)),
                    ),
                    label: ClassLabel::Nmf,
                    source: AnnotationSource::Original,
                })?;
            }
        }
    }
    builder.build()
}

/// Six-source corpus with unequal dataset sizes and a constant per-slide MF
/// fraction of 1/4, which makes the expected class marginal under the
/// three-level weighting exactly 1/2.
pub fn six_dataset_spec() -> CatalogSpec {
    let shapes: [(usize, usize, usize); 6] = [
        // (slides, patches_per_slide, nmf annotations per slide)
        (12, 40, 9),
        (6, 16, 3),
        (5, 24, 5),
        (8, 8, 2),
        (10, 32, 0),
        (4, 48, 7),
    ];
    let tags = ["tumor:breast", "tumor:mast-cell", "tumor:lung"];
    CatalogSpec::new(
        shapes
            .iter()
            .enumerate()
            .map(|(i, &(slides, pps, nmf))| DatasetSpec {
                id: format!("d{i}"),
                kind: DatasetKind::MfAnnotated,
                slides,
                patches_per_slide: pps,
                mf_per_slide: pps / 4,
                nmf_annotations_per_slide: nmf,
                tag_cycle: tags.iter().map(|t| t.to_string()).collect(),
            })
            .collect(),
    )
}
