//! Leakage-repair losses on per-token cross-attention maps, with their
//! analytic gradients w.r.t. each map.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::TokenAttention;
use crate::bgmask::BackgroundMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_at: f64,
    pub lambda_dj: f64,
    pub lambda_bg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_at: 1.0, lambda_dj: 0.1, lambda_bg: 0.1 }
    }
}

impl LossWeights {
    pub fn new(lambda_at: f64, lambda_dj: f64, lambda_bg: f64) -> Result<Self> {
        let w = Self { lambda_at, lambda_dj, lambda_bg };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_at, self.lambda_dj, self.lambda_bg];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Normalized Gaussian kernel with replicate padding.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSmoother {
    kernel: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmootherConfig {
    pub size: usize,
    pub sigma: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self { size: 3, sigma: 0.5 }
    }
}

impl GaussianSmoother {
    pub fn new(size: usize, sigma: f64) -> Result<Self> {
        if size % 2 == 0 || !(sigma > 0.0) {
            return Err(Error::invalid("kernel size must be odd and sigma positive"));
        }
        let c = (size / 2) as f64;
        let raw = Array2::from_shape_fn((size, size), |(i, j)| {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
        });
        let sum = raw.sum();
        Ok(Self { kernel: raw / sum })
    }

    pub fn from_config(cfg: &SmootherConfig) -> Result<Self> {
        Self::new(cfg.size, cfg.sigma)
    }

    pub fn kernel(&self) -> &Array2<f64> {
        &self.kernel
    }

    fn taps(&self) -> impl Iterator<Item = (isize, isize, f64)> + '_ {
        let c = (self.kernel.nrows() / 2) as isize;
        self.kernel.indexed_iter().map(move |((i, j), &k)| (i as isize - c, j as isize - c, k))
    }

    pub fn apply(&self, map: &Array2<f64>) -> Array2<f64> {
        let (h, w) = map.dim();
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        Array2::from_shape_fn((h, w), |(y, x)| {
            self.taps()
                .map(|(dy, dx, k)| k * map[[clamp(y as isize + dy, h), clamp(x as isize + dx, w)]])
                .sum()
        })
    }

    /// Transpose of [`apply`](Self::apply).
    pub fn apply_adjoint(&self, grad: &Array2<f64>) -> Array2<f64> {
        let (h, w) = grad.dim();
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut out = Array2::zeros((h, w));
        for ((y, x), &g) in grad.indexed_iter() {
            if g == 0.0 {
                continue;
            }
            for (dy, dx, k) in self.taps() {
                out[[clamp(y as isize + dy, h), clamp(x as isize + dx, w)]] += k * g;
            }
        }
        out
    }
}

fn norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn check_shapes(maps: &[TokenAttention]) -> Result<()> {
    if let Some(first) = maps.first() {
        if maps.iter().any(|m| m.map.dim() != first.map.dim()) {
            return Err(Error::invalid("token maps differ in shape"));
        }
    }
    Ok(())
}

/// Cosine similarity of two flattened maps.
pub fn cosine(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid("cosine of differently shaped maps"));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::degenerate("cosine of a zero-norm map"));
    }
    Ok(dot(a, b) / (na * nb))
}

/// `d cos(a, b) / d a`.
fn cosine_grad(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::degenerate("cosine of a zero-norm map"));
    }
    let c = dot(a, b) / (na * nb);
    Ok(b / (na * nb) - &(a * (c / (na * na))))
}

/// Sum of cosine similarities over all ordered pairs of distinct tokens.
pub fn loss_disjoint(maps: &[TokenAttention]) -> Result<f64> {
    if maps.len() < 2 {
        return Err(Error::invalid("disjoint loss needs at least two token maps"));
    }
    check_shapes(maps)?;
    let mut total = 0.0;
    for i in 0..maps.len() {
        for j in 0..maps.len() {
            if i != j {
                total += cosine(&maps[i].map, &maps[j].map)?;
            }
        }
    }
    Ok(total)
}

fn loss_disjoint_grad(maps: &[TokenAttention]) -> Result<Vec<Array2<f64>>> {
    let mut grads: Vec<Array2<f64>> = maps.iter().map(|m| Array2::zeros(m.map.raw_dim())).collect();
    for i in 0..maps.len() {
        for j in 0..maps.len() {
            if i != j {
                // cos(a_i, a_j) appears twice: as (i, j) and (j, i)
                grads[i] += &(cosine_grad(&maps[i].map, &maps[j].map)? * 2.0);
            }
        }
    }
    Ok(grads)
}

fn mask_as_map(mask: &BackgroundMask, shape: (usize, usize)) -> Result<Array2<f64>> {
    let m = mask.as_f64();
    if m.dim() != shape {
        return Err(Error::invalid(format!(
            "background mask is {:?}, token maps are {:?}",
            m.dim(),
            shape
        )));
    }
    if m.iter().all(|&v| v == 0.0) {
        return Err(Error::degenerate("background mask is empty"));
    }
    Ok(m)
}

/// Sum over tokens of the cosine similarity between the token map and the
/// background mask.
pub fn loss_background(maps: &[TokenAttention], mask: &BackgroundMask) -> Result<f64> {
    check_shapes(maps)?;
    let Some(first) = maps.first() else {
        return Err(Error::invalid("background loss needs at least one token map"));
    };
    let b = mask_as_map(mask, first.map.dim())?;
    maps.iter().map(|m| cosine(&m.map, &b)).sum()
}

fn loss_background_grad(maps: &[TokenAttention], mask: &BackgroundMask) -> Result<Vec<Array2<f64>>> {
    let b = mask_as_map(mask, maps[0].map.dim())?;
    maps.iter().map(|m| cosine_grad(&m.map, &b)).collect()
}

/// `max_k (1 - max F(A_k))`: the deficit of the least-activated token after
/// Gaussian smoothing.
pub fn loss_attention_balance(maps: &[TokenAttention], smoother: &GaussianSmoother) -> Result<f64> {
    Ok(balance_argmax(maps, smoother)?.0)
}

/// Returns `(loss, token index, smoothed argmax pixel)`.
fn balance_argmax(maps: &[TokenAttention], smoother: &GaussianSmoother) -> Result<(f64, usize, (usize, usize))> {
    if maps.is_empty() {
        return Err(Error::invalid("attention balance needs at least one token map"));
    }
    check_shapes(maps)?;
    let mut best: Option<(f64, usize, (usize, usize))> = None;
    for (k, m) in maps.iter().enumerate() {
        let smoothed = smoother.apply(&m.map);
        let (pix, peak) = smoothed
            .indexed_iter()
            .fold(((0, 0), f64::NEG_INFINITY), |acc, (idx, &v)| if v > acc.1 { (idx, v) } else { acc });
        let loss = 1.0 - peak;
        if best.map_or(true, |b| loss > b.0) {
            best = Some((loss, k, pix));
        }
    }
    Ok(best.expect("non-empty"))
}

fn loss_attention_balance_grad(maps: &[TokenAttention], smoother: &GaussianSmoother) -> Result<Vec<Array2<f64>>> {
    let (_, k, pix) = balance_argmax(maps, smoother)?;
    let mut grads: Vec<Array2<f64>> = maps.iter().map(|m| Array2::zeros(m.map.raw_dim())).collect();
    let mut seed = Array2::zeros(maps[k].map.raw_dim());
    seed[pix] = -1.0;
    grads[k] = smoother.apply_adjoint(&seed);
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub at: f64,
    pub dj: f64,
    pub bg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn below(&self, th: &crate::dpl::Thresholds) -> bool {
        self.at < th.at && self.dj < th.dj && self.bg < th.bg
    }
}

/// Weighted loss. With a single token only the background term applies; a
/// missing mask drops the background term. Dropped terms report zero.
pub fn total_loss(
    maps: &[TokenAttention],
    mask: Option<&BackgroundMask>,
    weights: &LossWeights,
    smoother: &GaussianSmoother,
) -> Result<LossBreakdown> {
    if maps.is_empty() {
        return Err(Error::invalid("no token maps"));
    }
    let multi = maps.len() >= 2;
    let at = if multi { loss_attention_balance(maps, smoother)? } else { 0.0 };
    let dj = if multi { loss_disjoint(maps)? } else { 0.0 };
    let bg = match mask {
        Some(m) => loss_background(maps, m)?,
        None => 0.0,
    };
    let total = weights.lambda_at * at + weights.lambda_dj * dj + weights.lambda_bg * bg;
    Ok(LossBreakdown { at, dj, bg, total })
}

/// [`total_loss`] together with `dL/dA_k` for every map.
pub fn total_loss_grad(
    maps: &[TokenAttention],
    mask: Option<&BackgroundMask>,
    weights: &LossWeights,
    smoother: &GaussianSmoother,
) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
    let breakdown = total_loss(maps, mask, weights, smoother)?;
    let mut grads: Vec<Array2<f64>> = maps.iter().map(|m| Array2::zeros(m.map.raw_dim())).collect();
    let mut accumulate = |parts: Vec<Array2<f64>>, w: f64| {
        if w != 0.0 {
            for (g, p) in grads.iter_mut().zip(parts) {
                g.scaled_add(w, &p);
            }
        }
    };
    if maps.len() >= 2 {
        accumulate(loss_attention_balance_grad(maps, smoother)?, weights.lambda_at);
        accumulate(loss_disjoint_grad(maps)?, weights.lambda_dj);
    }
    if let Some(m) = mask {
        accumulate(loss_background_grad(maps, m)?, weights.lambda_bg);
    }
    Ok((breakdown, grads))
}
