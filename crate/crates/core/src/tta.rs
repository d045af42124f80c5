//! Geometric view algebra, HSV color jitter, and multi-view detection
//! fusion.
//!
//! The invertible view set used at inference is the flip/quarter-rotation
//! family {identity, hflip, vflip, rot90, rot180, rot270}; every element has
//! its inverse in the set and point mappings are exact on the pixel grid.
//! Compositions that stay inside the family (all rotation x rotation and
//! flip x flip products, plus flips with rot180) are provided by
//! [`GeomTransform::then`]; the eight flip x quarter-turn products are
//! diagonal reflections outside the supported set and yield `None`.
//! Small-angle rotations (`rot_deg`, +-15 degrees) are training-augmentation
//! views: invertible as a pair but never composed.
//!
//! Detections produced under a view are folded back into canonical patch
//! coordinates with [`back_transform`]; fusion refuses coordinates that are
//! still in a transformed frame.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{Detection, DetectionSet, IDENTITY_TRANSFORM};

/// The kind of a geometric view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
    /// Rotation about the patch center by a small angle in degrees,
    /// restricted to [-15, +15].
    RotDeg(f64),
}

/// The six exactly invertible members, in canonical order.
pub const EXACT_FAMILY: [TransformKind; 6] = [
    TransformKind::Identity,
    TransformKind::HFlip,
    TransformKind::VFlip,
    TransformKind::Rot90,
    TransformKind::Rot180,
    TransformKind::Rot270,
];

impl TransformKind {
    pub fn is_exact(&self) -> bool {
        !matches!(self, TransformKind::RotDeg(_))
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformKind::Identity => f.write_str("identity"),
            TransformKind::HFlip => f.write_str("hflip"),
            TransformKind::VFlip => f.write_str("vflip"),
            TransformKind::Rot90 => f.write_str("rot90"),
            TransformKind::Rot180 => f.write_str("rot180"),
            TransformKind::Rot270 => f.write_str("rot270"),
            TransformKind::RotDeg(deg) => write!(f, "rot_deg:{deg}"),
        }
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TransformKind::Identity),
            "hflip" => Ok(TransformKind::HFlip),
            "vflip" => Ok(TransformKind::VFlip),
            "rot90" => Ok(TransformKind::Rot90),
            "rot180" => Ok(TransformKind::Rot180),
            "rot270" => Ok(TransformKind::Rot270),
            _ => {
                if let Some(deg) = s.strip_prefix("rot_deg:") {
                    let deg: f64 = deg.parse().map_err(|_| Error::UnknownTransform {
                        id: s.to_string(),
                    })?;
                    GeomTransform::validate_angle(deg)?;
                    Ok(TransformKind::RotDeg(deg))
                } else {
                    Err(Error::UnknownTransform { id: s.to_string() })
                }
            }
        }
    }
}

/// A geometric view anchored to the pixel grid of its input patch.
///
/// `patch_size` is the (width, height) of the domain the transform is
/// applied to. Flips mirror across the pixel-center axes (`hflip` maps
/// `x -> W-1-x`), `rot90` is counterclockwise on image axes
/// (`(x, y) -> (y, W-1-x)` into an HxW patch), and `rot_deg` rotates about
/// the patch center `((W-1)/2, (H-1)/2)` with real-valued output that can
/// leave the patch bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeomTransform {
    pub kind: TransformKind,
    pub patch_size: (u32, u32),
}

impl GeomTransform {
    pub fn new(kind: TransformKind, patch_size: (u32, u32)) -> Result<Self> {
        if patch_size.0 == 0 || patch_size.1 == 0 {
            return Err(Error::InvalidParam {
                name: "patch_size",
                msg: "patch dimensions must be positive".into(),
            });
        }
        if let TransformKind::RotDeg(deg) = kind {
            Self::validate_angle(deg)?;
        }
        Ok(Self { kind, patch_size })
    }

    pub fn identity(patch_size: (u32, u32)) -> Self {
        Self {
            kind: TransformKind::Identity,
            patch_size,
        }
    }

    fn validate_angle(deg: f64) -> Result<()> {
        if !deg.is_finite() || !(-15.0..=15.0).contains(&deg) {
            return Err(Error::InvalidParam {
                name: "rot_deg",
                msg: format!("angle {deg} outside [-15, +15]"),
            });
        }
        Ok(())
    }

    /// Canonical string id, carried in detection provenance.
    pub fn id(&self) -> String {
        self.kind.to_string()
    }

    /// Size of the output domain (quarter rotations swap width and height).
    pub fn output_size(&self) -> (u32, u32) {
        let (w, h) = self.patch_size;
        match self.kind {
            TransformKind::Rot90 | TransformKind::Rot270 => (h, w),
            _ => (w, h),
        }
    }

    /// Map a point. Exact on integer-valued inputs for the flip/rotation
    /// family; real-valued for `rot_deg`.
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (w, h) = self.patch_size;
        let w1 = f64::from(w) - 1.0;
        let h1 = f64::from(h) - 1.0;
        let (x, y) = p;
        match self.kind {
            TransformKind::Identity => (x, y),
            TransformKind::HFlip => (w1 - x, y),
            TransformKind::VFlip => (x, h1 - y),
            TransformKind::Rot90 => (y, w1 - x),
            TransformKind::Rot180 => (w1 - x, h1 - y),
            TransformKind::Rot270 => (h1 - y, x),
            TransformKind::RotDeg(deg) => {
                let (cx, cy) = (w1 / 2.0, h1 / 2.0);
                let theta = deg.to_radians();
                let (sin, cos) = theta.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                // Same orientation as rot90 in the 90-degree limit.
                (cx + dx * cos + dy * sin, cy - dx * sin + dy * cos)
            }
        }
    }

    /// The inverse view, anchored to this view's output domain.
    pub fn inverse(&self) -> GeomTransform {
        let kind = match self.kind {
            TransformKind::Identity => TransformKind::Identity,
            TransformKind::HFlip => TransformKind::HFlip,
            TransformKind::VFlip => TransformKind::VFlip,
            TransformKind::Rot90 => TransformKind::Rot270,
            TransformKind::Rot180 => TransformKind::Rot180,
            TransformKind::Rot270 => TransformKind::Rot90,
            TransformKind::RotDeg(deg) => TransformKind::RotDeg(-deg),
        };
        GeomTransform {
            kind,
            patch_size: self.output_size(),
        }
    }

    /// Compose with a following view: `self` first, then `next` applied to
    /// this view's output. Returns the single equivalent view when the
    /// product stays in the flip/rotation family; the flip x quarter-turn
    /// mixes are diagonal reflections outside the set and give `None`, as
    /// does any composition involving `rot_deg`.
    pub fn then(&self, next: TransformKind) -> Option<GeomTransform> {
        use TransformKind::*;
        let kind = match (self.kind, next) {
            (RotDeg(_), _) | (_, RotDeg(_)) => return None,
            (Identity, k) => k,
            (k, Identity) => k,
            (Rot90, Rot90) => Rot180,
            (Rot90, Rot180) | (Rot180, Rot90) => Rot270,
            (Rot90, Rot270) | (Rot270, Rot90) | (Rot180, Rot180) => Identity,
            (Rot180, Rot270) | (Rot270, Rot180) => Rot90,
            (Rot270, Rot270) => Rot180,
            (HFlip, HFlip) | (VFlip, VFlip) => Identity,
            (HFlip, VFlip) | (VFlip, HFlip) => Rot180,
            (HFlip, Rot180) | (Rot180, HFlip) => VFlip,
            (VFlip, Rot180) | (Rot180, VFlip) => HFlip,
            _ => return None,
        };
        Some(GeomTransform {
            kind,
            patch_size: self.patch_size,
        })
    }

    /// Whether a point lies inside the output domain.
    pub fn in_output_bounds(&self, p: (f64, f64)) -> bool {
        let (w, h) = self.output_size();
        p.0 >= 0.0 && p.1 >= 0.0 && p.0 < f64::from(w) && p.1 < f64::from(h)
    }
}

/// Fold a detection set produced under `view` back into canonical patch
/// coordinates. Every detection must still be in the view's frame.
pub fn back_transform(set: &DetectionSet, view: &GeomTransform) -> Result<DetectionSet> {
    let inverse = view.inverse();
    let view_id = view.id();
    let mut detections = Vec::with_capacity(set.detections.len());
    for det in &set.detections {
        if det.transform_id != view_id {
            return Err(Error::TransformedCoordinates {
                transform_id: det.transform_id.clone(),
            });
        }
        let (x, y) = inverse.apply((det.x, det.y));
        detections.push(Detection {
            x,
            y,
            transform_id: IDENTITY_TRANSFORM.to_string(),
            ..det.clone()
        });
    }
    DetectionSet::new(set.patch_id.clone(), detections)
}

/// Per-image HSV jitter: one hue shift and one saturation/value gain pair
/// sampled per image, deterministic per seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsvJitter {
    /// Max absolute hue shift as a fraction of the hue circle (0.10 = 10%).
    pub hue_delta: f64,
    /// Max relative saturation change (0.20 = +-20%).
    pub sat_scale: f64,
    /// Max relative value/brightness change (0.20 = +-20%).
    pub val_scale: f64,
    pub seed: u64,
}

impl Default for HsvJitter {
    fn default() -> Self {
        Self {
            hue_delta: 0.10,
            sat_scale: 0.20,
            val_scale: 0.20,
            seed: 0,
        }
    }
}

/// Flat 8-bit RGB image buffer (row-major, 3 bytes per pixel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbBuffer {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl RgbBuffer {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::InvalidParam {
                name: "rgb_buffer",
                msg: format!(
                    "buffer holds {} bytes, {}x{} RGB needs {expected}",
                    data.len(),
                    width,
                    height
                ),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Read a headerless flat RGB file; dimensions come from the caller
    /// (normally the patch record).
    pub fn read_raw(path: &Path, width: u32, height: u32) -> Result<Self> {
        let data = std::fs::read(path)?;
        Self::new(width, height, data).map_err(|_| Error::FileFormat {
            path: path.display().to_string(),
            msg: format!(
                "file size does not match {width}x{height} flat RGB"
            ),
        })
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.data)?;
        Ok(())
    }
}

/// RGB (8-bit) to hexcone HSV; hue is a fraction of the circle in [0, 1).
pub fn rgb_to_hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let r = f64::from(r) / 255.0;
    let g = f64::from(g) / 255.0;
    let b = f64::from(b) / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

/// Hexcone HSV back to 8-bit RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let quant = |x: f64| (x * 255.0).round().clamp(0.0, 255.0) as u8;
    if s <= 0.0 {
        let v = quant(v);
        return (v, v, v);
    }
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = (h6.floor() as u32) % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    (quant(r), quant(g), quant(b))
}

/// Apply HSV jitter to an image. The shift and gains are drawn once for the
/// whole image; channels are clamped to the valid range.
pub fn apply_hsv_jitter(buffer: &RgbBuffer, jitter: &HsvJitter) -> Result<RgbBuffer> {
    for (name, value, limit) in [
        ("hue_delta", jitter.hue_delta, 0.5),
        ("sat_scale", jitter.sat_scale, 1.0),
        ("val_scale", jitter.val_scale, 1.0),
    ] {
        if !value.is_finite() || value < 0.0 || value > limit {
            return Err(Error::InvalidParam {
                name,
                msg: format!("{name} {value} outside [0, {limit}]"),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(jitter.seed);
    let draw = |rng: &mut ChaCha8Rng, span: f64| {
        if span == 0.0 {
            0.0
        } else {
            rng.random_range(-span..=span)
        }
    };
    let hue_shift = draw(&mut rng, jitter.hue_delta);
    let sat_gain = 1.0 + draw(&mut rng, jitter.sat_scale);
    let val_gain = 1.0 + draw(&mut rng, jitter.val_scale);

    let mut data = Vec::with_capacity(buffer.data.len());
    for px in buffer.data.chunks_exact(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let h = (h + hue_shift).rem_euclid(1.0);
        let s = (s * sat_gain).clamp(0.0, 1.0);
        let v = (v * val_gain).clamp(0.0, 1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        data.extend_from_slice(&[r, g, b]);
    }
    RgbBuffer::new(buffer.width, buffer.height, data)
}

/// How multi-view/multi-model detections are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Nms,
    #[default]
    ConfidenceAverageCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub method: FusionMethod,
    /// Radius for suppression/clustering, in pixels (default: a quarter of
    /// the 64 px anchor).
    pub cluster_radius: f64,
    /// Minimum number of distinct sources that must contribute to keep a
    /// cluster (confidence-average method only).
    pub min_votes: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            method: FusionMethod::ConfidenceAverageCluster,
            cluster_radius: 16.0,
            min_votes: 1,
        }
    }
}

/// Model id assigned to detections synthesized by cluster averaging.
pub const FUSED_MODEL_ID: &str = "fused";

/// Fuse per-source detection sets of one patch into a single set.
///
/// Every input set is one (model, view) source; all coordinates must already
/// be back-transformed (a detection whose `transform_id` is not `identity`
/// is rejected).
///
/// * `nms`: pool everything, keep the highest-confidence detection, suppress
///   others within `cluster_radius`, repeat. Survivors keep their fields.
/// * `confidence_average_cluster`: single-link clusters within
///   `cluster_radius` become one detection at the confidence-weighted
///   centroid. The fused confidence is the mean over *all* sources of each
///   source's best in-cluster confidence (absent sources contribute zero),
///   so agreement across models and views is rewarded. Clusters backed by
///   fewer than `min_votes` distinct sources are dropped.
pub fn fuse_detections(sets: &[DetectionSet], config: &FusionConfig) -> Result<DetectionSet> {
    if !(config.cluster_radius > 0.0) || !config.cluster_radius.is_finite() {
        return Err(Error::InvalidParam {
            name: "cluster_radius",
            msg: format!("cluster radius must be positive, got {}", config.cluster_radius),
        });
    }
    let Some(first) = sets.first() else {
        return Err(Error::InvalidParam {
            name: "sets",
            msg: "fusion needs at least one detection set".into(),
        });
    };
    let patch_id = first.patch_id.clone();
    let mut pooled: Vec<(usize, Detection)> = Vec::new();
    for (source, set) in sets.iter().enumerate() {
        if set.patch_id != patch_id {
            return Err(Error::MixedPatchIds {
                a: patch_id,
                b: set.patch_id.clone(),
            });
        }
        for det in &set.detections {
            if det.transform_id != IDENTITY_TRANSFORM {
                return Err(Error::TransformedCoordinates {
                    transform_id: det.transform_id.clone(),
                });
            }
            det.validate()?;
            pooled.push((source, det.clone()));
        }
    }

    let fused = match config.method {
        FusionMethod::Nms => nms(pooled, config.cluster_radius),
        FusionMethod::ConfidenceAverageCluster => {
            cluster_average(pooled, sets.len(), config, &patch_id)
        }
    };
    DetectionSet::new(patch_id, fused)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    (dx * dx + dy * dy).sqrt()
}

fn nms(mut pooled: Vec<(usize, Detection)>, radius: f64) -> Vec<Detection> {
    pooled.sort_by(|(_, a), (_, b)| {
        b.confidence
            .total_cmp(&a.confidence)
            .then_with(|| a.x.total_cmp(&b.x))
            .then_with(|| a.y.total_cmp(&b.y))
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for (_, det) in pooled {
        if kept
            .iter()
            .all(|k| dist((k.x, k.y), (det.x, det.y)) > radius)
        {
            kept.push(det);
        }
    }
    kept
}

fn cluster_average(
    pooled: Vec<(usize, Detection)>,
    n_sources: usize,
    config: &FusionConfig,
    patch_id: &str,
) -> Vec<Detection> {
    let n = pooled.len();
    // Single-link clustering via union-find over the radius graph.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&pooled[i].1, &pooled[j].1);
            if dist((a.x, a.y), (b.x, b.y)) <= config.cluster_radius {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }

    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        clusters.entry(root).or_default().push(i);
    }

    let mut fused = Vec::new();
    for members in clusters.values() {
        // Best confidence per contributing source.
        let mut best_per_source: BTreeMap<usize, f64> = BTreeMap::new();
        for &i in members {
            let (source, det) = &pooled[i];
            let slot = best_per_source.entry(*source).or_insert(0.0);
            *slot = slot.max(det.confidence);
        }
        if best_per_source.len() < config.min_votes {
            continue;
        }
        let confidence = best_per_source.values().sum::<f64>() / n_sources as f64;

        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut total = 0.0;
        for &i in members {
            let det = &pooled[i].1;
            cx += det.x * det.confidence;
            cy += det.y * det.confidence;
            total += det.confidence;
        }
        let (cx, cy) = if total > 0.0 {
            (cx / total, cy / total)
        } else {
            // All-zero confidences: plain average.
            let k = members.len() as f64;
            (
                members.iter().map(|&i| pooled[i].1.x).sum::<f64>() / k,
                members.iter().map(|&i| pooled[i].1.y).sum::<f64>() / k,
            )
        };
        fused.push(Detection {
            patch_id: patch_id.to_string(),
            x: cx,
            y: cy,
            confidence,
            model_id: FUSED_MODEL_ID.to_string(),
            transform_id: IDENTITY_TRANSFORM.to_string(),
        });
    }
    fused
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIZE: (u32, u32) = (1920, 1280);

    /// Corner, edge-midpoint and center points of the patch grid.
    fn grid(size: (u32, u32)) -> Vec<(f64, f64)> {
        let xs = [0.0, f64::from(size.0 - 1) / 2.0, f64::from(size.0 - 1)];
        let ys = [0.0, f64::from(size.1 - 1) / 2.0, f64::from(size.1 - 1)];
        let mut out = Vec::new();
        for &x in &xs {
            for &y in &ys {
                out.push((x, y));
            }
        }
        out
    }

    #[test]
    fn identity_maps_points_to_themselves() {
        let t = GeomTransform::identity(SIZE);
        for p in grid(SIZE) {
            assert_eq!(t.apply(p), p);
        }
    }

    #[test]
    fn hflip_is_an_involution() {
        let t = GeomTransform::new(TransformKind::HFlip, SIZE).unwrap();
        for p in grid(SIZE) {
            assert_eq!(t.apply(t.apply(p)), p);
        }
        assert_eq!(t.apply((0.0, 5.0)), (1919.0, 5.0));
    }

    #[test]
    fn rot90_four_times_is_identity() {
        for p in grid(SIZE) {
            let mut q = p;
            let mut size = SIZE;
            for _ in 0..4 {
                let t = GeomTransform::new(TransformKind::Rot90, size).unwrap();
                q = t.apply(q);
                size = t.output_size();
            }
            assert_eq!(q, p);
            assert_eq!(size, SIZE);
        }
    }

    #[test]
    fn inverses_are_exact_for_the_whole_family() {
        for kind in EXACT_FAMILY {
            let t = GeomTransform::new(kind, SIZE).unwrap();
            let inv = t.inverse();
            for p in grid(SIZE) {
                assert_eq!(inv.apply(t.apply(p)), p, "{kind} round trip");
            }
        }
    }

    #[test]
    fn inverse_of_rot90_is_rot270() {
        let t = GeomTransform::new(TransformKind::Rot90, SIZE).unwrap();
        assert_eq!(t.inverse().kind, TransformKind::Rot270);
        assert_eq!(t.inverse().patch_size, (1280, 1920));
        let h = GeomTransform::new(TransformKind::HFlip, SIZE).unwrap();
        assert_eq!(h.inverse().kind, TransformKind::HFlip);
    }

    #[test]
    fn rot_deg_round_trips_within_half_pixel() {
        let t = GeomTransform::new(TransformKind::RotDeg(13.5), SIZE).unwrap();
        let inv = t.inverse();
        assert_eq!(inv.kind, TransformKind::RotDeg(-13.5));
        for p in grid(SIZE) {
            let q = inv.apply(t.apply(p));
            assert!((q.0 - p.0).abs() < 0.5 && (q.1 - p.1).abs() < 0.5);
        }
    }

    #[test]
    fn rot_deg_flags_out_of_bounds() {
        let t = GeomTransform::new(TransformKind::RotDeg(15.0), SIZE).unwrap();
        let corner = t.apply((0.0, 0.0));
        assert!(!t.in_output_bounds(corner));
        let center = t.apply((959.5, 639.5));
        assert!(t.in_output_bounds(center));
    }

    #[test]
    fn composition_table_matches_pointwise_action() {
        // Every defined product equals its pointwise composition; every
        // undefined product is genuinely outside the 6-element family.
        let points = grid(SIZE);
        for a_kind in EXACT_FAMILY {
            let a = GeomTransform::new(a_kind, SIZE).unwrap();
            for b_kind in EXACT_FAMILY {
                let b = GeomTransform::new(b_kind, a.output_size()).unwrap();
                match a.then(b_kind) {
                    Some(c) => {
                        for &p in &points {
                            assert_eq!(
                                c.apply(p),
                                b.apply(a.apply(p)),
                                "{a_kind} then {b_kind} = {:?}",
                                c.kind
                            );
                        }
                    }
                    None => {
                        // The product must differ from every family member
                        // on at least one grid point (it is a diagonal
                        // reflection).
                        for candidate in EXACT_FAMILY {
                            let cand = GeomTransform::new(candidate, SIZE).unwrap();
                            let diverges = points
                                .iter()
                                .any(|&p| cand.apply(p) != b.apply(a.apply(p)));
                            assert!(
                                diverges,
                                "{a_kind} then {b_kind} claimed out-of-family but equals {candidate}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn only_flip_quarter_turn_mixes_leave_the_family() {
        use TransformKind::*;
        let mut escapes = Vec::new();
        for a in EXACT_FAMILY {
            let t = GeomTransform::new(a, SIZE).unwrap();
            for b in EXACT_FAMILY {
                if t.then(b).is_none() {
                    escapes.push((a, b));
                }
            }
        }
        let expected = [
            (HFlip, Rot90),
            (HFlip, Rot270),
            (VFlip, Rot90),
            (VFlip, Rot270),
            (Rot90, HFlip),
            (Rot90, VFlip),
            (Rot270, HFlip),
            (Rot270, VFlip),
        ];
        assert_eq!(escapes.len(), 8);
        for pair in expected {
            assert!(escapes.contains(&pair), "{pair:?} should escape");
        }
    }

    #[test]
    fn transform_ids_round_trip() {
        for kind in EXACT_FAMILY {
            let parsed: TransformKind = kind.to_string().parse().unwrap();
            assert_eq!(parsed, kind);
        }
        let rot: TransformKind = "rot_deg:-7.5".parse().unwrap();
        assert_eq!(rot, TransformKind::RotDeg(-7.5));
        assert!("rot45".parse::<TransformKind>().is_err());
        assert!("rot_deg:90".parse::<TransformKind>().is_err());
    }

    fn checkerboard(width: u32, height: u32) -> RgbBuffer {
        let mut data = Vec::new();
        for y in 0..height {
            for x in 0..width {
                if (x + y) % 2 == 0 {
                    data.extend_from_slice(&[200, 30, 90]);
                } else {
                    data.extend_from_slice(&[10, 180, 220]);
                }
            }
        }
        RgbBuffer::new(width, height, data).unwrap()
    }

    #[test]
    fn zero_delta_jitter_is_byte_identical() {
        let img = checkerboard(16, 12);
        let jitter = HsvJitter {
            hue_delta: 0.0,
            sat_scale: 0.0,
            val_scale: 0.0,
            seed: 3,
        };
        assert_eq!(apply_hsv_jitter(&img, &jitter).unwrap(), img);
    }

    #[test]
    fn hue_shift_leaves_gray_untouched() {
        let mut data = Vec::new();
        for i in 0..64u32 {
            let g = (i * 4) as u8;
            data.extend_from_slice(&[g, g, g]);
        }
        let img = RgbBuffer::new(8, 8, data).unwrap();
        let jitter = HsvJitter {
            hue_delta: 0.10,
            sat_scale: 0.0,
            val_scale: 0.0,
            seed: 9,
        };
        assert_eq!(apply_hsv_jitter(&img, &jitter).unwrap(), img);
    }

    #[test]
    fn jitter_is_deterministic_per_seed() {
        let img = checkerboard(10, 10);
        let jitter = HsvJitter {
            seed: 4,
            ..HsvJitter::default()
        };
        let a = apply_hsv_jitter(&img, &jitter).unwrap();
        let b = apply_hsv_jitter(&img, &jitter).unwrap();
        assert_eq!(a, b);
        let c = apply_hsv_jitter(
            &img,
            &HsvJitter {
                seed: 5,
                ..HsvJitter::default()
            },
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rgb_hsv_round_trip_sampled() {
        // 10^6 seeded colors; exhaustive 2^24 variant lives in the ignored
        // test below.
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..1_000_000 {
            let (r, g, b) = (rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>());
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!(
                (i16::from(r) - i16::from(r2)).abs() <= 1
                    && (i16::from(g) - i16::from(g2)).abs() <= 1
                    && (i16::from(b) - i16::from(b2)).abs() <= 1,
                "({r},{g},{b}) -> ({r2},{g2},{b2})"
            );
        }
    }

    #[test]
    #[ignore = "exhaustive 2^24 sweep; run with --ignored"]
    fn rgb_hsv_round_trip_exhaustive() {
        for r in 0..=255u8 {
            for g in 0..=255u8 {
                for b in 0..=255u8 {
                    let (h, s, v) = rgb_to_hsv(r, g, b);
                    let (r2, g2, b2) = hsv_to_rgb(h, s, v);
                    assert!(
                        (i16::from(r) - i16::from(r2)).abs() <= 1
                            && (i16::from(g) - i16::from(g2)).abs() <= 1
                            && (i16::from(b) - i16::from(b2)).abs() <= 1,
                        "({r},{g},{b}) -> ({r2},{g2},{b2})"
                    );
                }
            }
        }
    }

    fn det(x: f64, y: f64, conf: f64, model: &str) -> Detection {
        Detection {
            patch_id: "p".into(),
            x,
            y,
            confidence: conf,
            model_id: model.into(),
            transform_id: IDENTITY_TRANSFORM.into(),
        }
    }

    fn set(dets: Vec<Detection>) -> DetectionSet {
        DetectionSet::new("p", dets).unwrap()
    }

    #[test]
    fn nms_single_set_passes_through() {
        let input = set(vec![det(10.0, 10.0, 0.9, "m"), det(500.0, 500.0, 0.4, "m")]);
        let config = FusionConfig {
            method: FusionMethod::Nms,
            ..FusionConfig::default()
        };
        let fused = fuse_detections(&[input.clone()], &config).unwrap();
        assert_eq!(fused, input);
    }

    #[test]
    fn nms_suppresses_within_radius() {
        let input = set(vec![det(10.0, 10.0, 0.9, "m"), det(14.0, 10.0, 0.8, "m")]);
        let config = FusionConfig {
            method: FusionMethod::Nms,
            ..FusionConfig::default()
        };
        let fused = fuse_detections(&[input], &config).unwrap();
        assert_eq!(fused.len(), 1);
        assert_eq!(fused.detections[0].confidence, 0.9);
    }

    #[test]
    fn identical_detections_from_two_models_fuse_to_one() {
        let a = set(vec![det(100.0, 200.0, 0.8, "m1")]);
        let b = set(vec![det(100.0, 200.0, 0.8, "m2")]);
        let fused = fuse_detections(&[a, b], &FusionConfig::default()).unwrap();
        assert_eq!(fused.len(), 1);
        let f = &fused.detections[0];
        assert_eq!((f.x, f.y), (100.0, 200.0));
        assert!((f.confidence - 0.8).abs() < 1e-12);
    }

    #[test]
    fn fused_confidence_is_mean_over_all_sources() {
        // 8 sources (4 models x 2 views); 6 carry the detection at 0.9, two
        // miss it: confidence (6 * 0.9 + 0 * 2) / 8 = 0.675, kept at
        // min_votes = 4.
        let mut sets = Vec::new();
        for i in 0..6 {
            sets.push(set(vec![det(50.0, 60.0, 0.9, &format!("m{i}"))]));
        }
        sets.push(set(vec![]));
        sets.push(set(vec![]));
        let config = FusionConfig {
            min_votes: 4,
            ..FusionConfig::default()
        };
        let fused = fuse_detections(&sets, &config).unwrap();
        assert_eq!(fused.len(), 1);
        assert!((fused.detections[0].confidence - 0.675).abs() < 1e-12);

        let strict = FusionConfig {
            min_votes: 7,
            ..FusionConfig::default()
        };
        let dropped = fuse_detections(
            &(0..6)
                .map(|i| set(vec![det(50.0, 60.0, 0.9, &format!("m{i}"))]))
                .chain([set(vec![]), set(vec![])])
                .collect::<Vec<_>>(),
            &strict,
        )
        .unwrap();
        assert!(dropped.is_empty());
    }

    #[test]
    fn fusion_is_permutation_invariant() {
        let sets = vec![
            set(vec![det(10.0, 10.0, 0.5, "a"), det(400.0, 10.0, 0.9, "a")]),
            set(vec![det(12.0, 11.0, 0.7, "b")]),
            set(vec![det(398.0, 12.0, 0.6, "c")]),
        ];
        let fused = fuse_detections(&sets, &FusionConfig::default()).unwrap();
        let mut reordered = sets.clone();
        reordered.reverse();
        let fused_rev = fuse_detections(&reordered, &FusionConfig::default()).unwrap();
        assert_eq!(fused, fused_rev);
    }

    #[test]
    fn fusion_count_and_locality_bounds() {
        let sets = vec![
            set(vec![det(10.0, 10.0, 0.5, "a"), det(40.0, 40.0, 0.9, "a")]),
            set(vec![det(11.0, 11.0, 0.7, "b"), det(41.0, 40.0, 0.8, "b")]),
        ];
        let total: usize = sets.iter().map(DetectionSet::len).sum();
        let config = FusionConfig::default();
        let fused = fuse_detections(&sets, &config).unwrap();
        assert!(fused.len() <= total);
        for f in &fused.detections {
            let near = sets.iter().flat_map(|s| &s.detections).any(|d| {
                dist((d.x, d.y), (f.x, f.y)) <= config.cluster_radius
            });
            assert!(near, "fused center near some input center");
        }
    }

    #[test]
    fn fusion_rejects_unfused_coordinates() {
        let mut d = det(10.0, 10.0, 0.5, "m");
        d.transform_id = "hflip".into();
        let input = DetectionSet {
            patch_id: "p".into(),
            detections: vec![d],
        };
        assert!(matches!(
            fuse_detections(&[input], &FusionConfig::default()),
            Err(Error::TransformedCoordinates { .. })
        ));
    }

    #[test]
    fn back_transform_restores_canonical_coordinates() {
        let view = GeomTransform::new(TransformKind::Rot90, SIZE).unwrap();
        let canonical = (123.0, 456.0);
        let viewed = view.apply(canonical);
        let raw = Detection {
            patch_id: "p".into(),
            x: viewed.0,
            y: viewed.1,
            confidence: 0.9,
            model_id: "m".into(),
            transform_id: view.id(),
        };
        let set = DetectionSet::new("p", vec![raw]).unwrap();
        let back = back_transform(&set, &view).unwrap();
        assert_eq!(back.detections[0].x, canonical.0);
        assert_eq!(back.detections[0].y, canonical.1);
        assert_eq!(back.detections[0].transform_id, IDENTITY_TRANSFORM);
    }

    #[test]
    fn back_transform_rejects_foreign_frames() {
        let view = GeomTransform::new(TransformKind::Rot90, SIZE).unwrap();
        let set = DetectionSet::new("p", vec![det(1.0, 1.0, 0.5, "m")]).unwrap();
        assert!(matches!(
            back_transform(&set, &view),
            Err(Error::TransformedCoordinates { .. })
        ));
    }
}
