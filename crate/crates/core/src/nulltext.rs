//! Null-text inversion: per-step optimization of the unconditional embedding
//! so guided sampling retraces the `w = 1` inversion trajectory.

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backend::{DiffusionBackend, ForwardHooks, LatentCode};
use crate::error::{Error, Result};
use crate::inversion::{combine_guidance, ddim_transition, transition_coefficients, LatentTrajectory, DEFAULT_GUIDANCE};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NtiOptions {
    pub guidance: f64,
    pub inner_steps: usize,
    pub lr: f64,
    /// Stop the inner loop once the step loss drops below this.
    pub early_stop: f64,
}

impl Default for NtiOptions {
    fn default() -> Self {
        Self { guidance: DEFAULT_GUIDANCE, inner_steps: 10, lr: 1e-2, early_stop: 1e-5 }
    }
}

/// Null embeddings `null_t` for `t = 1..=T` (stored at index `t - 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NullTextSchedule {
    pub embeddings: Vec<Array2<f64>>,
    /// Reconstruction loss of each step after optimization.
    pub per_step_loss: Vec<f64>,
    /// Reconstruction loss of each step before optimization.
    pub initial_loss: Vec<f64>,
}

impl NullTextSchedule {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn at(&self, t: usize) -> &Array2<f64> {
        &self.embeddings[t - 1]
    }

    pub fn mean_loss(&self) -> f64 {
        self.per_step_loss.iter().sum::<f64>() / self.per_step_loss.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct NtiStepResult {
    pub z_prev: LatentCode,
    pub null: Array2<f64>,
    pub loss_before: f64,
    pub loss_after: f64,
    pub iterations: usize,
}

fn mse(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    (a - b).mapv(|v| v * v).mean().unwrap_or(0.0)
}

/// Optimizes `null_t` so the guided step from `z_bar_t` lands on `target_prev`.
///
/// Returns the best iterate seen, so `loss_after <= loss_before` always holds.
pub fn nti_step<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z_bar_t: &LatentCode,
    target_prev: &LatentCode,
    t: usize,
    cond: ArrayView2<f64>,
    null_init: &Array2<f64>,
    opts: &NtiOptions,
) -> Result<NtiStepResult> {
    let sched = backend.schedule();
    if t == 0 || t > sched.steps() {
        return Err(Error::invalid(format!("null-text step t={t} outside [1, {}]", sched.steps())));
    }
    let (a_t, a_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let (_, eps_coef) = transition_coefficients(a_t, a_prev);
    let w = opts.guidance;
    let eps_c = backend.forward(z_bar_t, t, cond, &mut ForwardHooks::default())?;
    let n = eps_c.len() as f64;

    let evaluate = |null: &Array2<f64>| -> Result<(Array3<f64>, f64)> {
        let eps_n = backend.forward(z_bar_t, t, null.view(), &mut ForwardHooks::default())?;
        let eps = combine_guidance(&eps_c, &eps_n, w);
        let z_prev = ddim_transition(&z_bar_t.data, &eps, a_t, a_prev);
        let loss = mse(&z_prev, &target_prev.data);
        if !loss.is_finite() {
            return Err(Error::numerical(format!("non-finite null-text loss at t={t}")));
        }
        Ok((z_prev, loss))
    };

    let mut null = null_init.clone();
    let mut adam = Adam::new(AdamConfig { lr: opts.lr, ..Default::default() }, null.raw_dim());
    let (z0, loss_before) = evaluate(&null)?;
    let mut best = (null.clone(), z0, loss_before);
    let mut loss = loss_before;
    let mut z_prev = best.1.clone();
    let mut iterations = 0;
    while iterations < opts.inner_steps && loss >= opts.early_stop {
        let upstream = (&z_prev - &target_prev.data) * (2.0 * eps_coef * (1.0 - w) / n);
        let grad = backend.noise_vjp(z_bar_t, t, null.view(), &upstream)?;
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical(format!("non-finite null-text gradient at t={t}")));
        }
        adam.step(&mut null, &grad);
        iterations += 1;
        let (zp, l) = evaluate(&null)?;
        z_prev = zp;
        loss = l;
        if loss < best.2 {
            best = (null.clone(), z_prev.clone(), loss);
        }
    }
    let (null, z_best, loss_after) = best;
    Ok(NtiStepResult { z_prev: LatentCode::new(z_best, t - 1), null, loss_before, loss_after, iterations })
}

/// Runs null-text inversion along a trajectory with a fixed condition,
/// warm-starting each step from the previous step's embedding.
pub fn nti_full<B: DiffusionBackend + ?Sized>(
    backend: &B,
    trajectory: &LatentTrajectory,
    cond: ArrayView2<f64>,
    opts: &NtiOptions,
) -> Result<NullTextSchedule> {
    let steps = backend.schedule().steps();
    if trajectory.steps() != steps {
        return Err(Error::invalid(format!(
            "trajectory has {} steps, backend has {steps}",
            trajectory.steps()
        )));
    }
    let mut null = backend.null_embedding()?;
    let mut z_bar = trajectory.last().clone();
    let mut embeddings = vec![Array2::zeros((0, 0)); steps];
    let mut per_step_loss = vec![0.0; steps];
    let mut initial_loss = vec![0.0; steps];
    for t in (1..=steps).rev() {
        let res = nti_step(backend, &z_bar, trajectory.at(t - 1), t, cond, &null, opts)?;
        embeddings[t - 1] = res.null.clone();
        per_step_loss[t - 1] = res.loss_after;
        initial_loss[t - 1] = res.loss_before;
        null = res.null;
        z_bar = res.z_prev;
    }
    Ok(NullTextSchedule { embeddings, per_step_loss, initial_loss })
}
