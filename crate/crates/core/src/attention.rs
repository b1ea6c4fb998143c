//! Attention capture, aggregation and per-token extraction.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionKind {
    Cross,
    SelfAttn,
}

/// Raw attention probabilities of one layer, one matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub kind: AttentionKind,
    pub layer: usize,
    pub resolution: usize,
    pub heads: Vec<Array2<f64>>,
}

impl AttentionRecord {
    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn head_mean(&self) -> Array2<f64> {
        let mut acc = self.heads[0].clone();
        for h in &self.heads[1..] {
            acc += h;
        }
        acc / self.heads.len() as f64
    }
}

/// Cross-attention `A_t`: `[A]_ij` is the weight of token `j` on pixel `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionMap {
    pub values: Array2<f64>,
    pub resolution: usize,
    pub timestep: usize,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionMap {
    pub values: Array2<f64>,
    pub resolution: usize,
    pub timestep: usize,
}

/// The spatial attention of a single token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenAttention {
    pub map: Array2<f64>,
    pub token_position: usize,
}

impl TokenAttention {
    pub fn resolution(&self) -> usize {
        self.map.nrows()
    }

    pub fn flatten(&self) -> Array1<f64> {
        self.map.iter().copied().collect()
    }
}

/// Row-wise numerically stable softmax, in place.
pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `softmax(Q K^T / sqrt(dim))`.
pub fn compute_attention(query: ArrayView2<f64>, key: ArrayView2<f64>, dim: usize) -> Result<Array2<f64>> {
    if dim == 0 {
        return Err(Error::invalid("attention dim must be positive"));
    }
    if query.ncols() != key.ncols() {
        return Err(Error::invalid(format!(
            "query width {} does not match key width {}",
            query.ncols(),
            key.ncols()
        )));
    }
    let mut logits = query.dot(&key.t()) / (dim as f64).sqrt();
    softmax_rows(&mut logits);
    Ok(logits)
}

/// Pulls `dL/dP` back through a row softmax `P` to `dL/dlogits`.
pub fn softmax_rows_vjp(probs: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let dot = (probs * grad).sum_axis(Axis(1));
    let mut out = grad.clone();
    for ((mut row, p), d) in out.rows_mut().into_iter().zip(probs.rows()).zip(dot.iter()) {
        row.zip_mut_with(&p, |g, &pv| *g = pv * (*g - d));
    }
    out
}

/// Uniform mean over heads and over every layer of `kind` at `resolution`.
pub fn aggregate(records: &[AttentionRecord], kind: AttentionKind, resolution: usize) -> Result<Array2<f64>> {
    let mut acc: Option<Array2<f64>> = None;
    let mut count = 0usize;
    for rec in records.iter().filter(|r| r.kind == kind && r.resolution == resolution) {
        for h in &rec.heads {
            match acc.as_mut() {
                Some(a) => *a += h,
                None => acc = Some(h.clone()),
            }
            count += 1;
        }
    }
    acc.map(|a| a / count as f64)
        .ok_or_else(|| Error::NotFound(format!("no {kind:?} attention records at resolution {resolution}")))
}

pub fn aggregate_cross(records: &[AttentionRecord], resolution: usize, timestep: usize) -> Result<CrossAttentionMap> {
    Ok(CrossAttentionMap {
        values: aggregate(records, AttentionKind::Cross, resolution)?,
        resolution,
        timestep,
        normalized: true,
    })
}

pub fn aggregate_self(records: &[AttentionRecord], resolution: usize, timestep: usize) -> Result<SelfAttentionMap> {
    Ok(SelfAttentionMap {
        values: aggregate(records, AttentionKind::SelfAttn, resolution)?,
        resolution,
        timestep,
    })
}

/// Column `position` of a cross-attention map reshaped to `(res, res)`.
pub fn token_map(attn: &CrossAttentionMap, position: usize) -> Result<TokenAttention> {
    token_map_from(attn.values.view(), attn.resolution, position)
}

pub fn token_map_from(values: ArrayView2<f64>, resolution: usize, position: usize) -> Result<TokenAttention> {
    if position >= values.ncols() {
        return Err(Error::invalid(format!(
            "token position {position} out of range for {} tokens",
            values.ncols()
        )));
    }
    if values.nrows() != resolution * resolution {
        return Err(Error::invalid("pixel count does not match resolution"));
    }
    let col = values.column(position);
    let map = Array2::from_shape_fn((resolution, resolution), |(i, j)| col[i * resolution + j]);
    Ok(TokenAttention { map, token_position: position })
}

/// Nearest-neighbour upsampling of a square map by an integer factor.
pub fn upsample_nearest(map: &Array2<f64>, resolution: usize) -> Result<Array2<f64>> {
    let r = map.nrows();
    if r == 0 || resolution % r != 0 || map.ncols() != r {
        return Err(Error::invalid(format!("cannot upsample {r}x{} to {resolution}", map.ncols())));
    }
    let f = resolution / r;
    Ok(Array2::from_shape_fn((resolution, resolution), |(i, j)| map[[i / f, j / f]]))
}

/// Area-average downsampling of a square map by an integer factor.
pub fn downsample_area(map: &Array2<f64>, resolution: usize) -> Result<Array2<f64>> {
    let r = map.nrows();
    if resolution == 0 || r % resolution != 0 || map.ncols() != r {
        return Err(Error::invalid(format!("cannot downsample {r}x{} to {resolution}", map.ncols())));
    }
    let f = r / resolution;
    let mut out = Array2::zeros((resolution, resolution));
    for ((i, j), v) in map.indexed_iter() {
        out[[i / f, j / f]] += v;
    }
    Ok(out / (f * f) as f64)
}

/// Rescales a map to `[0, 1]`. A constant map becomes all zeros.
pub fn min_max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span <= 0.0 || !span.is_finite() {
        return Array2::zeros(map.raw_dim());
    }
    map.mapv(|v| (v - lo) / span)
}

/// Running mean of equally shaped maps.
#[derive(Debug, Clone, Default)]
pub struct MapAverager {
    sum: Option<Array2<f64>>,
    count: usize,
}

impl MapAverager {
    pub fn add(&mut self, map: &Array2<f64>) {
        match self.sum.as_mut() {
            Some(s) => *s += map,
            None => self.sum = Some(map.clone()),
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Option<Array2<f64>> {
        self.sum.as_ref().map(|s| s / self.count as f64)
    }
}

#[cfg(test)]
fn row_sums_close(values: ArrayView2<f64>, tol: f64) -> bool {
    values.rows().into_iter().all(|r| (r.sum() - 1.0).abs() <= tol)
}
