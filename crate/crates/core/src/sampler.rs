//! Three-level balanced sampling.
//!
//! Every patch receives a combined weight
//!
//! ```text
//! w(x_i) = w_D(d_i) . w_I(m_i) . w_C(c_i)
//! ```
//!
//! built from three factors:
//!
//! * dataset level: `w_D(d) = (1/|d|) / sum_j (1/|d_j|)` with `|d|` the
//!   number of patches in dataset `d`;
//! * image level: `w_I(m) = (1/|m|) / sum_k (1/|m_k|)` with `|m|` the number
//!   of annotations on slide `m`, normalized over all slides of the corpus
//!   (per-dataset normalization is available behind
//!   [`ImageWeightNorm::PerDataset`]); slides with zero annotations are
//!   floored to `|m| = 1`;
//! * class level: `w_C(c) = 1/N_c` with `N_c` the number of patches of
//!   class `c` (unnormalized).
//!
//! Draws are multinomial over the normalized combined weights, O(1) per draw
//! through an alias table built once per plan. Class balance (the "roughly
//! 1:1" MF/NMF mix) is achieved in expectation, not by per-batch quotas.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{ClassLabel, CorpusCatalog};
use crate::error::{Error, Result};

/// Walker/Vose alias table for O(1) weighted index sampling.
#[derive(Debug, Clone)]
pub struct AliasTable {
    accept: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    /// Build from non-negative weights. Weights are normalized internally,
    /// so any positive rescaling of the input yields the same table.
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParam {
                name: "weights",
                msg: "alias table needs at least one weight".into(),
            });
        }
        let mut sum = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidWeight {
                    what: "alias",
                    id: i.to_string(),
                    value: w,
                });
            }
            sum += w;
        }
        if sum <= 0.0 {
            return Err(Error::InvalidParam {
                name: "weights",
                msg: "alias table weights sum to zero".into(),
            });
        }

        let n = weights.len();
        let mut scaled: Vec<f64> = weights.iter().map(|w| w / sum * n as f64).collect();
        let mut accept = vec![1.0; n];
        let mut alias: Vec<usize> = (0..n).collect();
        let mut small: Vec<usize> = Vec::new();
        let mut large: Vec<usize> = Vec::new();
        for (i, &s) in scaled.iter().enumerate() {
            if s < 1.0 {
                small.push(i);
            } else {
                large.push(i);
            }
        }
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            accept[s] = scaled[s];
            alias[s] = l;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // Leftovers on either stack are numerically 1.
        Ok(Self { accept, alias })
    }

    pub fn len(&self) -> usize {
        self.accept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accept.is_empty()
    }

    #[inline]
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let cell = rng.random_range(0..self.accept.len());
        let coin: f64 = rng.random();
        if coin < self.accept[cell] {
            cell
        } else {
            self.alias[cell]
        }
    }
}

/// How Eq.-style image weights are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageWeightNorm {
    /// Normalize over all slides of the corpus, as the formula is written.
    #[default]
    Global,
    /// Normalize within each dataset (sums to 1 per dataset). Composes
    /// arguably better with the dataset factor; provided as an option.
    PerDataset,
}

/// `w_D(d) = (1/|d|) / sum_j (1/|d_j|)` over patch counts.
pub fn dataset_weights(catalog: &CorpusCatalog) -> Result<BTreeMap<String, f64>> {
    let counts = catalog.counts();
    let mut inv = BTreeMap::new();
    for (id, &n) in &counts.patches_per_dataset {
        if n == 0 {
            return Err(Error::EmptyDataset { id: id.clone() });
        }
        inv.insert(id.clone(), 1.0 / n as f64);
    }
    let denom: f64 = inv.values().sum();
    Ok(inv.into_iter().map(|(id, w)| (id, w / denom)).collect())
}

/// `w_I(m) = (1/|m|) / sum_k (1/|m_k|)` over annotation counts, with
/// zero-annotation slides floored to a count of 1 so that negatives-only
/// sources are drawable before mining has produced any annotations.
pub fn image_weights(
    catalog: &CorpusCatalog,
    norm: ImageWeightNorm,
) -> BTreeMap<String, f64> {
    let counts = catalog.counts();
    let inv = |n: u64| 1.0 / (n.max(1) as f64);
    match norm {
        ImageWeightNorm::Global => {
            let denom: f64 = counts.annotations_per_slide.values().map(|&n| inv(n)).sum();
            counts
                .annotations_per_slide
                .iter()
                .map(|(id, &n)| (id.clone(), inv(n) / denom))
                .collect()
        }
        ImageWeightNorm::PerDataset => {
            let mut out = BTreeMap::new();
            for dataset in catalog.datasets() {
                let slides = catalog.slide_ids_of_dataset(&dataset.id);
                let denom: f64 = slides
                    .iter()
                    .map(|s| inv(counts.annotations_per_slide[s]))
                    .sum();
                for s in slides {
                    out.insert(s.clone(), inv(counts.annotations_per_slide[s]) / denom);
                }
            }
            out
        }
    }
}

/// `w_C(c) = 1/N_c`. Both classes must be populated: the weight of an empty
/// class is undefined (1/0), so sampling such a catalog is rejected.
pub fn class_weights(catalog: &CorpusCatalog) -> Result<BTreeMap<ClassLabel, f64>> {
    let counts = catalog.counts();
    for class in [ClassLabel::Mf, ClassLabel::Nmf] {
        if counts.patches_per_class.get(&class).copied().unwrap_or(0) == 0 {
            return Err(Error::EmptyClass { class });
        }
    }
    Ok(counts
        .patches_per_class
        .iter()
        .map(|(&c, &n)| (c, 1.0 / n as f64))
        .collect())
}

/// One patch of a sampling plan with its combined weight and grouping keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub patch_id: String,
    pub dataset_id: String,
    pub slide_id: String,
    pub class: ClassLabel,
    pub weight: f64,
}

/// Batch request: size, replacement mode and RNG seed. Identical
/// `(plan, spec)` pairs produce identical batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub with_replacement: bool,
    pub seed: u64,
}

impl BatchSpec {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        Self {
            batch_size,
            with_replacement: true,
            seed,
        }
    }
}

/// Serializable view of a plan: the three factor tables plus the combined
/// per-patch weights, for audit and `sample --dump-plan`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanExport {
    pub dataset_weights: BTreeMap<String, f64>,
    pub image_weights: BTreeMap<String, f64>,
    pub class_weights: BTreeMap<ClassLabel, f64>,
    pub combined: BTreeMap<String, f64>,
}

/// Expected draw probabilities grouped by dataset and class; the closed-form
/// counterpart of a Monte Carlo frequency measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub per_dataset: BTreeMap<String, f64>,
    pub per_class: BTreeMap<ClassLabel, f64>,
}

/// Immutable sampling plan: factor tables, combined weights in canonical
/// (patch-id) order, and the alias table used for draws.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    dataset_weights: BTreeMap<String, f64>,
    image_weights: BTreeMap<String, f64>,
    class_weights: BTreeMap<ClassLabel, f64>,
    entries: Vec<PlanEntry>,
    /// Normalized probabilities, same order as `entries`.
    probabilities: Vec<f64>,
    alias: AliasTable,
}

impl SamplingPlan {
    /// Compose a plan from the catalog's own factor tables (the default
    /// pipeline path).
    pub fn build(catalog: &CorpusCatalog) -> Result<Self> {
        Self::build_with(catalog, ImageWeightNorm::Global)
    }

    pub fn build_with(catalog: &CorpusCatalog, norm: ImageWeightNorm) -> Result<Self> {
        let wd = dataset_weights(catalog)?;
        let wi = image_weights(catalog, norm);
        let wc = class_weights(catalog)?;
        Self::from_factors(catalog, wd, wi, wc)
    }

    /// Compose a plan from explicit factor tables. Every patch must have all
    /// three factors; factors must be finite and non-negative. This is also
    /// the route for plans over single-class catalogs, where Eq.-style class
    /// weights cannot be derived but an explicit table is still meaningful.
    pub fn from_factors(
        catalog: &CorpusCatalog,
        dataset_weights: BTreeMap<String, f64>,
        image_weights: BTreeMap<String, f64>,
        class_weights: BTreeMap<ClassLabel, f64>,
    ) -> Result<Self> {
        for (what, table) in [("dataset", &dataset_weights), ("image", &image_weights)] {
            for (id, &w) in table {
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::InvalidWeight {
                        what,
                        id: id.clone(),
                        value: w,
                    });
                }
            }
        }
        for (&class, &w) in &class_weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidWeight {
                    what: "class",
                    id: class.to_string(),
                    value: w,
                });
            }
        }

        let mut entries = Vec::with_capacity(catalog.num_patches());
        for patch in catalog.patches() {
            let slide_id = &patch.slide_id;
            let dataset_id = &catalog
                .slide(slide_id)
                .expect("catalog integrity")
                .dataset_id;
            let wd = *dataset_weights.get(dataset_id).ok_or(Error::MissingWeight {
                what: "dataset",
                id: dataset_id.clone(),
            })?;
            let wi = *image_weights.get(slide_id).ok_or(Error::MissingWeight {
                what: "image",
                id: slide_id.clone(),
            })?;
            let wc = *class_weights
                .get(&patch.class_label)
                .ok_or(Error::MissingWeight {
                    what: "class",
                    id: patch.class_label.to_string(),
                })?;
            // Fixed evaluation order: the combined weight is exactly
            // (w_D * w_I) * w_C for every patch, bit-reproducible per build.
            let weight = (wd * wi) * wc;
            entries.push(PlanEntry {
                patch_id: patch.id.clone(),
                dataset_id: dataset_id.clone(),
                slide_id: slide_id.clone(),
                class: patch.class_label,
                weight,
            });
        }
        if entries.is_empty() {
            return Err(Error::InvalidParam {
                name: "catalog",
                msg: "no patches to sample".into(),
            });
        }

        let weights: Vec<f64> = entries.iter().map(|e| e.weight).collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidParam {
                name: "weights",
                msg: "combined weights sum to zero".into(),
            });
        }
        let probabilities: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let alias = AliasTable::new(&weights)?;
        Ok(Self {
            dataset_weights,
            image_weights,
            class_weights,
            entries,
            probabilities,
            alias,
        })
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn dataset_weights(&self) -> &BTreeMap<String, f64> {
        &self.dataset_weights
    }

    pub fn image_weights(&self) -> &BTreeMap<String, f64> {
        &self.image_weights
    }

    pub fn class_weights(&self) -> &BTreeMap<ClassLabel, f64> {
        &self.class_weights
    }

    pub fn combined_weight(&self, patch_id: &str) -> Option<f64> {
        self.entries
            .binary_search_by(|e| e.patch_id.as_str().cmp(patch_id))
            .ok()
            .map(|i| self.entries[i].weight)
    }

    /// Draw entry indexes. See [`Self::draw_batch`] for the id-level variant.
    pub fn draw_indices(&self, spec: &BatchSpec) -> Result<Vec<usize>> {
        if spec.batch_size == 0 {
            return Err(Error::InvalidParam {
                name: "batch_size",
                msg: "batch size must be >= 1".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        if spec.with_replacement {
            Ok((0..spec.batch_size)
                .map(|_| self.alias.sample(&mut rng))
                .collect())
        } else {
            if spec.batch_size > self.entries.len() {
                return Err(Error::BatchTooLarge {
                    requested: spec.batch_size,
                    population: self.entries.len(),
                });
            }
            // Weighted sampling without replacement (Efraimidis-Spirakis):
            // order by ln(u)/p descending; equivalent to successive draws
            // with the drawn item removed. Uses normalized probabilities so
            // rescaled weights produce identical batches.
            let mut keyed: Vec<(f64, usize)> = self
                .probabilities
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let u: f64 = rng.random();
                    let key = if p > 0.0 { u.ln() / p } else { f64::NEG_INFINITY };
                    (key, i)
                })
                .collect();
            keyed.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then_with(|| self.entries[a.1].patch_id.cmp(&self.entries[b.1].patch_id))
            });
            Ok(keyed
                .into_iter()
                .take(spec.batch_size)
                .map(|(_, i)| i)
                .collect())
        }
    }

    /// Draw a batch of patch ids distributed proportionally to the combined
    /// weights. Pure function of `(plan, spec)`.
    pub fn draw_batch(&self, spec: &BatchSpec) -> Result<Vec<String>> {
        Ok(self
            .draw_indices(spec)?
            .into_iter()
            .map(|i| self.entries[i].patch_id.clone())
            .collect())
    }

    /// Closed-form per-dataset and per-class draw probabilities.
    pub fn expected_marginals(&self) -> Marginals {
        let mut per_dataset: BTreeMap<String, f64> = BTreeMap::new();
        let mut per_class: BTreeMap<ClassLabel, f64> = BTreeMap::new();
        for (entry, &p) in self.entries.iter().zip(&self.probabilities) {
            *per_dataset.entry(entry.dataset_id.clone()).or_insert(0.0) += p;
            *per_class.entry(entry.class).or_insert(0.0) += p;
        }
        Marginals {
            per_dataset,
            per_class,
        }
    }

    pub fn export(&self) -> PlanExport {
        PlanExport {
            dataset_weights: self.dataset_weights.clone(),
            image_weights: self.image_weights.clone(),
            class_weights: self.class_weights.clone(),
            combined: self
                .entries
                .iter()
                .map(|e| (e.patch_id.clone(), e.weight))
                .collect(),
        }
    }
}
