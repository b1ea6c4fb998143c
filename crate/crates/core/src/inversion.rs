//! Deterministic DDIM inversion and sampling with classifier-free guidance.

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::attention::{aggregate, AttentionKind, MapAverager};
use crate::backend::{DiffusionBackend, ForwardHooks, Image, LatentCode, NoiseSchedule, TextEmbeddingSequence};
use crate::error::{Error, Result};

/// Guidance scale used for editing and null-text optimization.
pub const DEFAULT_GUIDANCE: f64 = 7.5;

/// DDIM latents `z_0..=z_T` of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub latents: Vec<LatentCode>,
    pub guidance_scale_used: f64,
}

impl LatentTrajectory {
    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn at(&self, t: usize) -> &LatentCode {
        &self.latents[t]
    }

    pub fn last(&self) -> &LatentCode {
        self.latents.last().expect("trajectory is never empty")
    }
}

/// Attention averaged over the inversion steps.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionAttention {
    /// `pixels x tokens` at the backend's cross resolution.
    pub cross: Array2<f64>,
    pub cross_resolution: usize,
    /// `pixels x pixels` at the backend's self resolution.
    pub self_attn: Array2<f64>,
    pub self_resolution: usize,
    pub steps_averaged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionOptions {
    pub guidance: f64,
    /// Fixed-point passes that make each inversion step the exact inverse of
    /// the matching sampling step. Zero keeps the plain explicit update.
    pub refine_iters: usize,
    pub refine_tol: f64,
    pub record_attention: bool,
    /// Inclusive `[first, last]` range of source timesteps whose attention is
    /// averaged. `None` averages every step.
    pub attention_steps: Option<(usize, usize)>,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self { guidance: 1.0, refine_iters: 50, refine_tol: 1e-13, record_attention: true, attention_steps: None }
    }
}

/// Denoised estimate from a given noise prediction:
/// `(z_t - sqrt(1 - a_t) eps) / sqrt(a_t)`.
pub fn denoised_from_noise(z: &Array3<f64>, eps: &Array3<f64>, alpha_bar: f64) -> Array3<f64> {
    (z - &(eps * (1.0 - alpha_bar).sqrt())) / alpha_bar.sqrt()
}

/// `f_theta(z_t, t, C)`: the model's prediction of `z_0`.
pub fn f_theta<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z: &LatentCode,
    t: usize,
    cond: &TextEmbeddingSequence,
) -> Result<LatentCode> {
    check_step(backend.schedule(), t, 1)?;
    let eps = backend.predict_noise(z, t, cond, false)?.noise_prediction;
    Ok(LatentCode::new(denoised_from_noise(&z.data, &eps, backend.schedule().alpha_bar(t)), 0))
}

/// Deterministic DDIM move between noise levels for a fixed `eps`:
/// `sqrt(a_to) f + sqrt(1 - a_to) eps`, written so that equal levels give
/// back `z` exactly and a zero `eps` gives `sqrt(a_to / a_from) z` exactly.
pub fn ddim_transition(z: &Array3<f64>, eps: &Array3<f64>, alpha_from: f64, alpha_to: f64) -> Array3<f64> {
    let (zc, ec) = transition_coefficients(alpha_from, alpha_to);
    z * zc + &(eps * ec)
}

/// Coefficients `(c_z, c_eps)` of [`ddim_transition`].
pub fn transition_coefficients(alpha_from: f64, alpha_to: f64) -> (f64, f64) {
    let ratio = (alpha_to / alpha_from).sqrt();
    (ratio, (1.0 - alpha_to).sqrt() - ratio * (1.0 - alpha_from).sqrt())
}

/// `w * eps(z, t, C) + (1 - w) * eps(z, t, null)`.
pub fn cfg_predict<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z: &LatentCode,
    t: usize,
    cond: ArrayView2<f64>,
    null_cond: ArrayView2<f64>,
    w: f64,
) -> Result<Array3<f64>> {
    if !w.is_finite() {
        return Err(Error::invalid("guidance scale must be finite"));
    }
    let eps_c = backend.forward(z, t, cond, &mut ForwardHooks::default())?;
    if w == 1.0 {
        return Ok(eps_c);
    }
    let eps_n = backend.forward(z, t, null_cond, &mut ForwardHooks::default())?;
    Ok(combine_guidance(&eps_c, &eps_n, w))
}

pub fn combine_guidance(eps_cond: &Array3<f64>, eps_null: &Array3<f64>, w: f64) -> Array3<f64> {
    if w == 1.0 {
        return eps_cond.clone();
    }
    if w == 0.0 {
        return eps_null.clone();
    }
    eps_cond * w + &(eps_null * (1.0 - w))
}

fn check_step(schedule: &NoiseSchedule, t: usize, lo: usize) -> Result<()> {
    if t < lo || t > schedule.steps() {
        return Err(Error::invalid(format!("timestep {t} outside [{lo}, {}]", schedule.steps())));
    }
    Ok(())
}

/// Explicit inversion update `z_t -> z_{t+1}` using `eps(z_t, t, C)`.
pub fn ddim_invert_step<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z: &LatentCode,
    t: usize,
    cond: &TextEmbeddingSequence,
) -> Result<LatentCode> {
    let sched = backend.schedule();
    if t >= sched.steps() {
        return Err(Error::invalid(format!("inversion step from t={t} must be below T={}", sched.steps())));
    }
    let eps = backend.predict_noise(z, t, cond, false)?.noise_prediction;
    Ok(LatentCode::new(ddim_transition(&z.data, &eps, sched.alpha_bar(t), sched.alpha_bar(t + 1)), t + 1))
}

/// One guided sampling step `z_t -> z_{t-1}`.
pub fn ddim_sample_step<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z: &LatentCode,
    t: usize,
    cond: ArrayView2<f64>,
    null_cond: ArrayView2<f64>,
    w: f64,
) -> Result<LatentCode> {
    let sched = backend.schedule();
    check_step(sched, t, 1)?;
    let eps = cfg_predict(backend, z, t, cond, null_cond, w)?;
    Ok(LatentCode::new(ddim_transition(&z.data, &eps, sched.alpha_bar(t), sched.alpha_bar(t - 1)), t - 1))
}

/// Inverts an encoded image to `z_T`, recording averaged attention on the way.
///
/// `null_cond` is only read when `opts.guidance != 1`.
pub fn ddim_invert<B: DiffusionBackend + ?Sized>(
    backend: &B,
    image: &Image,
    cond: &TextEmbeddingSequence,
    null_cond: Option<ArrayView2<f64>>,
    opts: &InversionOptions,
) -> Result<(LatentTrajectory, Option<InversionAttention>)> {
    let z0 = backend.encode_image(image)?;
    invert_latent(backend, z0, cond, null_cond, opts)
}

pub fn invert_latent<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z0: LatentCode,
    cond: &TextEmbeddingSequence,
    null_cond: Option<ArrayView2<f64>>,
    opts: &InversionOptions,
) -> Result<(LatentTrajectory, Option<InversionAttention>)> {
    let sched = backend.schedule();
    let dims = backend.dims();
    let steps = sched.steps();
    let w = opts.guidance;
    let owned_null;
    let null = match null_cond {
        Some(n) => n,
        None if w == 1.0 => cond.embeddings.view(),
        None => {
            owned_null = backend.null_embedding()?;
            owned_null.view()
        }
    };
    let guided = |z: &LatentCode, t: usize, hooks: &mut ForwardHooks<'_>| -> Result<Array3<f64>> {
        let eps_c = backend.forward(z, t, cond.embeddings.view(), hooks)?;
        if w == 1.0 {
            return Ok(eps_c);
        }
        let eps_n = backend.forward(z, t, null, &mut ForwardHooks::default())?;
        Ok(combine_guidance(&eps_c, &eps_n, w))
    };

    let mut cross_avg = MapAverager::default();
    let mut self_avg = MapAverager::default();
    let mut latents = Vec::with_capacity(steps + 1);
    latents.push(LatentCode::new(z0.data, 0));
    for t in 0..steps {
        let z = &latents[t];
        let in_range = opts.attention_steps.map_or(true, |(a, b)| t >= a && t <= b);
        let record = opts.record_attention && in_range;
        let mut hooks = ForwardHooks { record, ..Default::default() };
        let eps = guided(z, t, &mut hooks)?;
        if record {
            cross_avg.add(&aggregate(&hooks.records, AttentionKind::Cross, dims.cross_resolution)?);
            self_avg.add(&aggregate(&hooks.records, AttentionKind::SelfAttn, dims.self_resolution)?);
        }
        let (a_t, a_next) = (sched.alpha_bar(t), sched.alpha_bar(t + 1));
        let mut next = ddim_transition(&z.data, &eps, a_t, a_next);
        let scale = 1.0 + z.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for _ in 0..opts.refine_iters {
            let probe = LatentCode::new(next.clone(), t + 1);
            let eps_next = guided(&probe, t + 1, &mut ForwardHooks::default())?;
            let refined = ddim_transition(&z.data, &eps_next, a_t, a_next);
            let delta = (&refined - &next).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            next = refined;
            if delta <= opts.refine_tol * scale {
                break;
            }
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical(format!("non-finite latent at inversion step {t}")));
        }
        latents.push(LatentCode::new(next, t + 1));
    }

    let attention = match (cross_avg.mean(), self_avg.mean()) {
        (Some(cross), Some(self_attn)) => Some(InversionAttention {
            cross,
            cross_resolution: dims.cross_resolution,
            self_attn,
            self_resolution: dims.self_resolution,
            steps_averaged: cross_avg.count(),
        }),
        _ => None,
    };
    Ok((LatentTrajectory { latents, guidance_scale_used: w }, attention))
}

/// Samples `z_T -> z_0` with one condition and one null embedding per step
/// (`conds[t - 1]`, `nulls[t - 1]`). Returns `z_0..=z_T`.
pub fn ddim_sample_schedule<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z_t: &LatentCode,
    conds: &[ArrayView2<f64>],
    nulls: &[ArrayView2<f64>],
    w: f64,
) -> Result<Vec<LatentCode>> {
    let steps = backend.schedule().steps();
    if conds.len() != steps || nulls.len() != steps {
        return Err(Error::invalid(format!("need {steps} conditions and null embeddings")));
    }
    let mut out = vec![LatentCode::new(z_t.data.clone(), steps)];
    for t in (1..=steps).rev() {
        let prev = ddim_sample_step(backend, out.last().unwrap(), t, conds[t - 1], nulls[t - 1], w)?;
        out.push(prev);
    }
    out.reverse();
    Ok(out)
}

/// Samples with a fixed condition and null embedding at every step.
pub fn ddim_sample<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z_t: &LatentCode,
    cond: ArrayView2<f64>,
    null_cond: ArrayView2<f64>,
    w: f64,
) -> Result<Vec<LatentCode>> {
    let steps = backend.schedule().steps();
    let conds = vec![cond; steps];
    let nulls = vec![null_cond; steps];
    ddim_sample_schedule(backend, z_t, &conds, &nulls, w)
}
