//! Background estimation from self-attention clusters and per-noun
//! cross-attention agreement.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{downsample_area, min_max_normalize, token_map_from, upsample_nearest, TokenAttention};
use crate::error::{Error, Result};
use crate::inversion::InversionAttention;

/// Binary background mask; `true` marks background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackgroundMask {
    pub mask: Array2<bool>,
}

impl BackgroundMask {
    pub fn from_bools(mask: Array2<bool>) -> Result<Self> {
        if mask.nrows() != mask.ncols() || mask.is_empty() {
            return Err(Error::invalid(format!("background mask must be square, got {:?}", mask.dim())));
        }
        Ok(Self { mask })
    }

    /// Binarizes `values` at `threshold` (strictly greater is background).
    pub fn from_values(values: &Array2<f64>, threshold: f64) -> Result<Self> {
        Self::from_bools(values.mapv(|v| v > threshold))
    }

    pub fn resolution(&self) -> usize {
        self.mask.nrows()
    }

    pub fn as_f64(&self) -> Array2<f64> {
        self.mask.mapv(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn popcount(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.popcount() == 0
    }

    /// Area-average to `resolution`, then keep cells that are more than half
    /// background.
    pub fn downsample(&self, resolution: usize) -> Result<Self> {
        Self::from_values(&downsample_area(&self.as_f64(), resolution)?, 0.5)
    }
}

/// Cluster index of every pixel of a square self-attention grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterLabeling {
    pub labels: Array2<usize>,
    pub clusters: usize,
}

impl ClusterLabeling {
    pub fn new(labels: Array2<usize>, clusters: usize) -> Result<Self> {
        let mut seen = vec![false; clusters];
        for &l in &labels {
            if l >= clusters {
                return Err(Error::invalid(format!("label {l} out of range for {clusters} clusters")));
            }
            seen[l] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("every cluster must own at least one pixel"));
        }
        Ok(Self { labels, clusters })
    }

    pub fn resolution(&self) -> usize {
        self.labels.nrows()
    }

    pub fn cluster_mask(&self, v: usize) -> Array2<bool> {
        self.labels.mapv(|l| l == v)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.clusters];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterOptions {
    pub clusters: usize,
    pub seed: u64,
    /// k-means restarts; the lowest-inertia run wins.
    pub restarts: usize,
    pub kmeans_iters: usize,
    pub pca_iters: usize,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self { clusters: 5, seed: 0, restarts: 8, kmeans_iters: 100, pca_iters: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundOptions {
    pub cluster: ClusterOptions,
    /// Agreement threshold below which a cluster counts as background.
    pub threshold: f64,
    /// Rescale each noun map to `[0, 1]` before scoring.
    pub normalize_maps: bool,
}

impl Default for BackgroundOptions {
    fn default() -> Self {
        Self { cluster: ClusterOptions::default(), threshold: 0.2, normalize_maps: true }
    }
}

fn orthonormalize(q: &mut Array2<f64>) {
    // modified Gram-Schmidt over columns
    for j in 0..q.ncols() {
        for k in 0..j {
            let d = q.column(j).dot(&q.column(k));
            let ck = q.column(k).to_owned();
            q.column_mut(j).scaled_add(-d, &ck);
        }
        let n = q.column(j).dot(&q.column(j)).sqrt();
        if n > 1e-300 {
            q.column_mut(j).mapv_inplace(|v| v / n);
        } else {
            q.column_mut(j).fill(0.0);
        }
    }
}

/// Projection of the centred rows of `x` onto their top `k` principal axes.
pub fn pca_project(x: ArrayView2<f64>, k: usize, iters: usize, seed: u64) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
    let centred = &x - &mean;
    let k = k.min(x.ncols()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Array2::from_shape_fn((x.ncols(), k), |_| rng.random::<f64>() - 0.5);
    orthonormalize(&mut q);
    for _ in 0..iters {
        q = centred.t().dot(&centred.dot(&q));
        orthonormalize(&mut q);
    }
    centred.dot(&q)
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations. Returns labels and inertia.
fn kmeans(points: &Array2<f64>, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = points.nrows();
    let mut centres = Array2::zeros((k, points.ncols()));
    centres.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centres.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        };
        centres.row_mut(c).assign(&points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centres.row(c)));
        }
    }

    let mut labels = vec![0; n];
    for it in 0..=iters {
        let mut changed = false;
        for i in 0..n {
            let best = (0..k)
                .map(|c| (c, sq_dist(points.row(i), centres.row(c))))
                .fold((0, f64::INFINITY), |b, x| if x.1 < b.1 { x } else { b })
                .0;
            if best != labels[i] || it == 0 {
                changed |= best != labels[i];
                labels[i] = best;
            }
        }
        if it > 0 && !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centres.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &points.row(i));
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centres.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // re-seed an empty cluster on the point farthest from its centre
                let far = (0..n)
                    .map(|i| (i, sq_dist(points.row(i), centres.row(labels[i]))))
                    .fold((0, -1.0), |b, x| if x.1 > b.1 { x } else { b })
                    .0;
                centres.row_mut(c).assign(&points.row(far));
            }
        }
    }
    let inertia = labels.iter().enumerate().map(|(i, &l)| sq_dist(points.row(i), centres.row(l))).sum();
    (labels, inertia)
}

/// Relabels clusters by first appearance in scan order and drops empty ones.
fn canonical_labels(raw: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let labels = raw
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (labels, map.len())
}

/// Clusters the rows of a `res² x res²` self-attention matrix.
///
/// Returns the labeling and any warnings. Identical rows collapse to a single
/// cluster.
pub fn cluster_self_attention(
    self_attn: ArrayView2<f64>,
    resolution: usize,
    opts: &ClusterOptions,
) -> Result<(ClusterLabeling, Vec<String>)> {
    let n = resolution * resolution;
    if self_attn.dim() != (n, n) {
        return Err(Error::invalid(format!(
            "self-attention is {:?}, expected {n}x{n}",
            self_attn.dim()
        )));
    }
    if opts.clusters < 2 {
        return Err(Error::invalid("cluster count must be at least 2"));
    }
    if !self_attn.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("non-finite self-attention"));
    }
    let mut warnings = Vec::new();
    let first = self_attn.row(0);
    let spread = self_attn
        .rows()
        .into_iter()
        .map(|r| sq_dist(r, first))
        .fold(0.0f64, f64::max);
    if spread <= 1e-24 {
        let msg = "self-attention rows are identical; using a single cluster".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
        return Ok((ClusterLabeling::new(Array2::zeros((resolution, resolution)), 1)?, warnings));
    }

    let points = pca_project(self_attn, opts.clusters, opts.pca_iters, opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..opts.restarts.max(1) {
        let run = kmeans(&points, opts.clusters, opts.kmeans_iters, &mut rng);
        if best.as_ref().map_or(true, |b| run.1 < b.1) {
            best = Some(run);
        }
    }
    let (raw, _) = best.expect("at least one restart");
    let (labels, count) = canonical_labels(&raw);
    if count < opts.clusters {
        let msg = format!("only {count} of {} clusters are populated", opts.clusters);
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let grid = Array2::from_shape_vec((resolution, resolution), labels).expect("n labels");
    Ok((ClusterLabeling::new(grid, count)?, warnings))
}

/// Mean of `map` inside `cluster`: `sum(A * M) / sum(M)`.
pub fn agreement_score(map: &Array2<f64>, cluster: &Array2<bool>) -> Result<f64> {
    if map.dim() != cluster.dim() {
        return Err(Error::invalid(format!(
            "map {:?} and cluster {:?} differ in shape",
            map.dim(),
            cluster.dim()
        )));
    }
    let size = cluster.iter().filter(|&&b| b).count();
    if size == 0 {
        return Err(Error::degenerate("empty cluster"));
    }
    let inside: f64 = map.iter().zip(cluster).filter(|(_, &m)| m).map(|(a, _)| a).sum();
    Ok(inside / size as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundEstimate {
    /// Mask at the clustering resolution.
    pub mask: BackgroundMask,
    /// `scores[n][v]`: agreement of noun `n` with cluster `v`.
    pub scores: Vec<Vec<f64>>,
    pub background_clusters: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Union of the clusters whose agreement is below `threshold` for every noun.
/// Token maps coarser than the clustering are upsampled by nearest neighbour.
pub fn estimate_background(
    clusters: &ClusterLabeling,
    token_maps: &[TokenAttention],
    threshold: f64,
) -> Result<BackgroundEstimate> {
    if token_maps.is_empty() {
        return Err(Error::invalid("background estimation needs at least one noun map"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let res = clusters.resolution();
    let maps = token_maps
        .iter()
        .map(|m| if m.map.nrows() == res { Ok(m.map.clone()) } else { upsample_nearest(&m.map, res) })
        .collect::<Result<Vec<_>>>()?;
    let cluster_masks: Vec<_> = (0..clusters.clusters).map(|v| clusters.cluster_mask(v)).collect();
    let scores = maps
        .iter()
        .map(|a| cluster_masks.iter().map(|m| agreement_score(a, m)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let background_clusters: Vec<usize> =
        (0..clusters.clusters).filter(|&v| scores.iter().all(|row| row[v] < threshold)).collect();
    let mask = clusters.labels.mapv(|l| background_clusters.contains(&l));
    let mut warnings = Vec::new();
    if background_clusters.len() == clusters.clusters {
        let msg = "every cluster was labeled background; check the prompt nouns".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(BackgroundEstimate { mask: BackgroundMask::from_bools(mask)?, scores, background_clusters, warnings })
}

/// Full estimate from inversion-averaged attention: cluster the self map,
/// score each noun's cross map.
pub fn background_from_attention(
    attention: &InversionAttention,
    noun_positions: &[usize],
    opts: &BackgroundOptions,
) -> Result<(ClusterLabeling, BackgroundEstimate)> {
    let (labels, mut warnings) =
        cluster_self_attention(attention.self_attn.view(), attention.self_resolution, &opts.cluster)?;
    let maps = noun_positions
        .iter()
        .map(|&p| {
            let mut m = token_map_from(attention.cross.view(), attention.cross_resolution, p)?;
            if opts.normalize_maps {
                m.map = min_max_normalize(&m.map);
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut est = estimate_background(&labels, &maps, opts.threshold)?;
    warnings.append(&mut est.warnings);
    est.warnings = warnings;
    Ok((labels, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn agreement_hand_case() {
        let a = array![[0.8, 0.8], [0.0, 0.0]];
        let m = Array2::from_elem((2, 2), true);
        assert!((agreement_score(&a, &m).unwrap() - 0.4).abs() < 1e-15);
        assert!(agreement_score(&a, &Array2::from_elem((2, 2), false)).is_err());
    }

    #[test]
    fn downsample_keeps_majority_cells_only() {
        let m = BackgroundMask::from_bools(array![
            [true, true, true, false],
            [true, true, false, false],
            [false, false, false, false],
            [false, false, false, false]
        ])
        .unwrap();
        let d = m.downsample(2).unwrap();
        assert_eq!(d.mask, array![[true, false], [false, false]]);
    }

    #[test]
    fn identical_rows_collapse() {
        let s = Array2::from_elem((16, 16), 1.0 / 16.0);
        let (l, w) = cluster_self_attention(s.view(), 4, &ClusterOptions::default()).unwrap();
        assert_eq!(l.clusters, 1);
        assert_eq!(w.len(), 1);
    }
}
