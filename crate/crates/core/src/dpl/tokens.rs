use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::losses::{total_loss_grad, GaussianSmoother, LossBreakdown, LossWeights, SmootherConfig};
use super::thresholds::{ThresholdSchedule, Thresholds};
use crate::attention::{token_map_from, TokenAttention};
use crate::backend::{DiffusionBackend, LatentCode, TextEmbeddingSequence};
use crate::bgmask::BackgroundMask;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

/// Learnable input embeddings of the noun slots at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicTokenSet {
    pub tokens: BTreeMap<usize, Array1<f64>>,
    pub timestep: usize,
}

impl DynamicTokenSet {
    /// The stock embeddings of every noun in `seq`.
    pub fn from_stock(seq: &TextEmbeddingSequence, timestep: usize) -> Result<Self> {
        if seq.noun_positions.is_empty() {
            return Err(Error::invalid("prompt has no noun slots"));
        }
        let tokens = seq
            .noun_positions
            .iter()
            .map(|&p| (p, seq.token_embeddings.row(p).to_owned()))
            .collect();
        Ok(Self { tokens, timestep })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.tokens.keys().copied().collect()
    }

    /// `K x embed_dim`, rows in position order.
    pub fn to_matrix(&self) -> Array2<f64> {
        let d = self.tokens.values().next().map_or(0, |v| v.len());
        let mut out = Array2::zeros((self.tokens.len(), d));
        for (i, v) in self.tokens.values().enumerate() {
            out.row_mut(i).assign(v);
        }
        out
    }

    pub fn from_matrix(positions: &[usize], m: &Array2<f64>, timestep: usize) -> Result<Self> {
        if positions.len() != m.nrows() {
            return Err(Error::invalid("token matrix rows do not match noun positions"));
        }
        Ok(Self {
            tokens: positions.iter().zip(m.rows()).map(|(&p, r)| (p, r.to_owned())).collect(),
            timestep,
        })
    }

    fn is_finite(&self) -> bool {
        self.tokens.values().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Raw embeddings of `base` with the noun slots replaced, and their encoding.
pub fn condition_with_tokens<B: DiffusionBackend + ?Sized>(
    backend: &B,
    base: &TextEmbeddingSequence,
    tokens: &DynamicTokenSet,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut raw = base.token_embeddings.clone();
    for (&pos, emb) in &tokens.tokens {
        if !base.noun_positions.contains(&pos) {
            return Err(Error::invalid(format!("token position {pos} is not a noun slot")));
        }
        raw.row_mut(pos).assign(emb);
    }
    let cond = backend.encode_tokens(raw.view());
    Ok((raw, cond))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenOptOptions {
    pub weights: LossWeights,
    pub thresholds: ThresholdSchedule,
    pub smoother: SmootherConfig,
    /// Gradient steps allowed per timestep.
    pub max_iters: usize,
    pub lr: f64,
}

impl Default for TokenOptOptions {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            thresholds: ThresholdSchedule::default(),
            smoother: SmootherConfig::default(),
            max_iters: 20,
            lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStepReport {
    pub t: usize,
    pub iterations: usize,
    pub initial: LossBreakdown,
    #[serde(rename = "final")]
    pub final_losses: LossBreakdown,
    pub thresholds: Thresholds,
    pub hit_cap: bool,
}

#[derive(Debug, Clone)]
pub struct TokenOptOutcome {
    pub tokens: DynamicTokenSet,
    /// Contextualized condition `C_t` built from the returned tokens.
    pub cond: Array2<f64>,
    /// Cross-attention (`pixels x tokens`) under the returned tokens.
    pub attention: Array2<f64>,
    pub report: TokenStepReport,
}

pub(crate) fn noun_maps(attn: &Array2<f64>, resolution: usize, positions: &[usize]) -> Result<Vec<TokenAttention>> {
    positions.iter().map(|&p| token_map_from(attn.view(), resolution, p)).collect()
}

struct Evaluation {
    losses: LossBreakdown,
    grad: Array2<f64>,
    cond: Array2<f64>,
    attention: Array2<f64>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_tokens<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z_bar_t: &LatentCode,
    t: usize,
    prompt: &TextEmbeddingSequence,
    tokens: &DynamicTokenSet,
    mask: Option<&BackgroundMask>,
    weights: &LossWeights,
    smoother: &GaussianSmoother,
) -> Result<Evaluation> {
    let res = backend.dims().cross_resolution;
    let positions = tokens.positions();
    let (raw, cond) = condition_with_tokens(backend, prompt, tokens)?;
    let attention = backend.cross_attention(z_bar_t, t, cond.view(), res)?;
    let maps = noun_maps(&attention, res, &positions)?;
    let (losses, grads) = total_loss_grad(&maps, mask, weights, smoother)?;
    let mut d_attn = Array2::zeros(attention.raw_dim());
    for (g, &pos) in grads.iter().zip(&positions) {
        for (pix, v) in g.iter().enumerate() {
            d_attn[[pix, pos]] += v;
        }
    }
    let d_cond = backend.cross_attention_vjp(z_bar_t, t, cond.view(), res, d_attn.view())?;
    let d_raw = backend.encode_tokens_vjp(raw.view(), d_cond.view());
    let mut grad = Array2::zeros((positions.len(), d_raw.ncols()));
    for (i, &pos) in positions.iter().enumerate() {
        grad.row_mut(i).assign(&d_raw.row(pos));
    }
    Ok(Evaluation { losses, grad, cond, attention })
}

/// Updates the noun embeddings at timestep `t` until every loss is below
/// its threshold or the iteration cap is reached.
pub fn optimize_tokens_at_t<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z_bar_t: &LatentCode,
    t: usize,
    prompt: &TextEmbeddingSequence,
    tokens: &DynamicTokenSet,
    mask: Option<&BackgroundMask>,
    opts: &TokenOptOptions,
) -> Result<TokenOptOutcome> {
    let steps = backend.schedule().steps();
    if t == 0 || t > steps {
        return Err(Error::invalid(format!("token step t={t} outside [1, {steps}]")));
    }
    opts.weights.validate()?;
    opts.thresholds.validate()?;
    let smoother = GaussianSmoother::from_config(&opts.smoother)?;
    let positions = tokens.positions();
    let thresholds = opts.thresholds.at(t, steps);

    let mut current = DynamicTokenSet { tokens: tokens.tokens.clone(), timestep: t };
    let mut matrix = current.to_matrix();
    let mut adam = Adam::new(AdamConfig { lr: opts.lr, ..Default::default() }, matrix.raw_dim());
    let mut initial = None;
    let mut iterations = 0;
    loop {
        let eval = evaluate_tokens(backend, z_bar_t, t, prompt, &current, mask, &opts.weights, &smoother)?;
        let initial_losses = *initial.get_or_insert(eval.losses);
        let converged = eval.losses.below(&thresholds);
        if converged || iterations >= opts.max_iters {
            let hit_cap = !converged;
            if hit_cap && opts.max_iters > 0 {
                log::debug!("token optimization at t={t} hit the {}-step cap", opts.max_iters);
            }
            return Ok(TokenOptOutcome {
                tokens: current,
                cond: eval.cond,
                attention: eval.attention,
                report: TokenStepReport {
                    t,
                    iterations,
                    initial: initial_losses,
                    final_losses: eval.losses,
                    thresholds,
                    hit_cap,
                },
            });
        }
        if !eval.grad.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical(format!("non-finite token gradient at t={t}")));
        }
        adam.step(&mut matrix, &eval.grad);
        current = DynamicTokenSet::from_matrix(&positions, &matrix, t)?;
        if !current.is_finite() {
            return Err(Error::numerical(format!("non-finite token embedding at t={t}")));
        }
        iterations += 1;
    }
}

/// Total loss at timestep `t` and its gradient w.r.t. each noun embedding
/// (`K x embed_dim`, rows in position order).
#[allow(clippy::too_many_arguments)]
pub fn token_loss_and_grad<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z_bar_t: &LatentCode,
    t: usize,
    prompt: &TextEmbeddingSequence,
    tokens: &DynamicTokenSet,
    mask: Option<&BackgroundMask>,
    weights: &LossWeights,
    smoother: &GaussianSmoother,
) -> Result<(LossBreakdown, Array2<f64>)> {
    let eval = evaluate_tokens(backend, z_bar_t, t, prompt, tokens, mask, weights, smoother)?;
    Ok((eval.losses, eval.grad))
}
