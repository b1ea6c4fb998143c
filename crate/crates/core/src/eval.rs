//! Localization and editing metrics: IoU-vs-threshold curves, plus CLIP-score
//! and structure distance through pluggable embedding clients.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::attention::min_max_normalize;
use crate::backend::Image;
use crate::error::{Error, Result};

pub const DEFAULT_IOU_STEPS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUCurve {
    pub thresholds: Vec<f64>,
    pub iou: Vec<f64>,
    pub auc: f64,
}

impl IoUCurve {
    /// IoU at the sweep point closest to `theta`.
    pub fn at(&self, theta: f64) -> f64 {
        let i = self
            .thresholds
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - theta).abs().total_cmp(&(b.1 - theta).abs()))
            .map_or(0, |(i, _)| i);
        self.iou[i]
    }
}

/// IoU of `map >= theta` against `gt`. An empty binarization scores 0.
pub fn iou_at(map: &Array2<f64>, gt: &Array2<bool>, theta: f64) -> f64 {
    let (mut inter, mut union, mut predicted) = (0usize, 0usize, 0usize);
    for (&v, &g) in map.iter().zip(gt) {
        let p = v >= theta;
        predicted += p as usize;
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if predicted == 0 || union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Sweeps `steps` evenly spaced thresholds over `[0, 1]` on the min-max
/// normalized map; area by the trapezoid rule.
pub fn iou_curve(map: &Array2<f64>, gt: &Array2<bool>, steps: usize) -> Result<IoUCurve> {
    if steps < 2 {
        return Err(Error::invalid("an IoU curve needs at least two thresholds"));
    }
    if map.dim() != gt.dim() {
        return Err(Error::invalid(format!("map {:?} and mask {:?} differ in shape", map.dim(), gt.dim())));
    }
    if !gt.iter().any(|&g| g) {
        return Err(Error::degenerate("ground-truth mask is empty"));
    }
    let norm = min_max_normalize(map);
    let thresholds: Vec<f64> = (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect();
    let iou: Vec<f64> = thresholds.iter().map(|&th| iou_at(&norm, gt, th)).collect();
    let auc = thresholds.windows(2).zip(iou.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum();
    Ok(IoUCurve { thresholds, iou, auc })
}

/// Image and text embedding client, e.g. a CLIP server.
pub trait Embedder {
    fn embed_image(&self, image: &Image) -> Result<Array1<f64>>;
    fn embed_text(&self, text: &str) -> Result<Array1<f64>>;
}

/// Patch descriptors of an image (`patches x features`), e.g. DINO keys.
pub trait Featurizer {
    fn patch_features(&self, image: &Image) -> Result<Array2<f64>>;
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    let (na, nb) = (a.dot(a).sqrt(), b.dot(b).sqrt());
    if a.len() != b.len() {
        return Err(Error::invalid("embedding lengths differ"));
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::degenerate("zero embedding"));
    }
    Ok(a.dot(b) / (na * nb))
}

/// `100 * mean max(cos(image, text), 0)`. `None` when the client fails.
pub fn clip_score(images: &[Image], texts: &[String], embedder: &dyn Embedder) -> Option<f64> {
    if images.is_empty() || images.len() != texts.len() {
        log::warn!("clip score needs one text per image");
        return None;
    }
    let pairs = images.iter().zip(texts).map(|(im, tx)| {
        let (a, b) = (embedder.embed_image(im)?, embedder.embed_text(tx)?);
        cosine(&a, &b)
    });
    let mut sum = 0.0;
    for c in pairs {
        match c {
            Ok(c) => sum += c.max(0.0),
            Err(e) => {
                log::warn!("clip score unavailable: {e}");
                return None;
            }
        }
    }
    Some(100.0 * sum / images.len() as f64)
}

/// Cosine self-similarity of patch descriptors.
pub fn self_similarity(features: &Array2<f64>) -> Array2<f64> {
    let norms = features.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect::<Vec<_>>();
    let unit = Array2::from_shape_fn(features.dim(), |(i, j)| features[[i, j]] / norms[i]);
    unit.dot(&unit.t())
}

/// Mean squared difference of the two patch self-similarity matrices.
/// `None` when the client fails.
pub fn structure_dist(a: &Image, b: &Image, featurizer: &dyn Featurizer) -> Option<f64> {
    let run = || -> Result<f64> {
        let (fa, fb) = (featurizer.patch_features(a)?, featurizer.patch_features(b)?);
        if fa.nrows() != fb.nrows() {
            return Err(Error::invalid("images yield different patch counts"));
        }
        let d = self_similarity(&fa) - self_similarity(&fb);
        Ok(d.mapv(|v| v * v).mean().unwrap_or(0.0))
    };
    match run() {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("structure distance unavailable: {e}");
            None
        }
    }
}

/// Raw pixel patches as descriptors: `patch x patch` tiles, all channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelPatchFeaturizer {
    pub patch: usize,
}

impl Featurizer for PixelPatchFeaturizer {
    fn patch_features(&self, image: &Image) -> Result<Array2<f64>> {
        let (c, h, w) = image.data.dim();
        let p = self.patch;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::invalid(format!("patch size {p} does not tile {h}x{w}")));
        }
        let (ph, pw) = (h / p, w / p);
        Ok(Array2::from_shape_fn((ph * pw, c * p * p), |(k, f)| {
            let (pi, pj) = (k / pw, k % pw);
            let (ch, rest) = (f / (p * p), f % (p * p));
            image.data[[ch, pi * p + rest / p, pj * p + rest % p]]
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub clip_score: Option<f64>,
    pub structure_dist: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub clip_score: Option<f64>,
    pub structure_dist: Option<f64>,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    /// Means over the rows that have each metric.
    pub fn from_rows(per_image: Vec<ImageMetrics>) -> Self {
        let mean = |f: fn(&ImageMetrics) -> Option<f64>| {
            let v: Vec<f64> = per_image.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self { clip_score: mean(|r| r.clip_score), structure_dist: mean(|r| r.structure_dist), per_image }
    }
}
