use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::thresholds::ThresholdSchedule;
use super::tokens::{condition_with_tokens, optimize_tokens_at_t, DynamicTokenSet, TokenOptOptions, TokenStepReport};
use crate::archive::NamedArrayArchive;
use crate::attention::{token_map_from, MapAverager, TokenAttention};
use crate::backend::{encode_prompt, DiffusionBackend, Image, LatentCode, TextEmbeddingSequence};
use crate::bgmask::{background_from_attention, BackgroundEstimate, BackgroundMask, BackgroundOptions, ClusterLabeling};
use crate::error::{Error, Result};
use crate::inversion::{invert_latent, InversionAttention, InversionOptions, LatentTrajectory, DEFAULT_GUIDANCE};
use crate::nulltext::{nti_step, NtiOptions, NullTextSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DplConfig {
    /// Guidance scale of the editing-time sampler.
    pub guidance: f64,
    pub inversion: InversionOptions,
    pub tokens: TokenOptOptions,
    pub nti: NtiOptions,
    pub background: BackgroundOptions,
    /// Estimate a background mask and use the background loss.
    pub use_background: bool,
    /// Ablation: optimize the tokens once at `t = T` and reuse them.
    pub static_tokens: bool,
}

impl Default for DplConfig {
    fn default() -> Self {
        Self {
            guidance: DEFAULT_GUIDANCE,
            inversion: InversionOptions::default(),
            tokens: TokenOptOptions::default(),
            nti: NtiOptions::default(),
            background: BackgroundOptions::default(),
            use_background: true,
            static_tokens: false,
        }
    }
}

impl DplConfig {
    /// Same pipeline with the token loop switched off (null-text inversion only).
    pub fn without_token_learning(&self) -> Self {
        let mut cfg = self.clone();
        cfg.tokens.thresholds = ThresholdSchedule::disabled();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !self.guidance.is_finite() {
            return Err(Error::invalid("guidance scale must be finite"));
        }
        if self.inversion.guidance != 1.0 {
            log::warn!("inversion guidance is {}, not 1", self.inversion.guidance);
        }
        self.tokens.weights.validate()?;
        self.tokens.thresholds.validate()
    }
}

/// Everything one run produces; per-timestep vectors are indexed by `t - 1`.
#[derive(Debug, Clone)]
pub struct DplRun {
    pub prompt: String,
    pub nouns: Vec<String>,
    pub noun_positions: Vec<usize>,
    pub guidance: f64,
    pub trajectory: LatentTrajectory,
    /// `z_bar_0..=z_bar_T` of the guided reconstruction.
    pub reconstruction: Vec<LatentCode>,
    pub tokens: Vec<DynamicTokenSet>,
    pub nulls: NullTextSchedule,
    pub clusters: Option<ClusterLabeling>,
    pub background: Option<BackgroundEstimate>,
    /// Mask at the cross-attention resolution, as used by the background loss.
    pub mask: Option<BackgroundMask>,
    pub reports: Vec<TokenStepReport>,
    /// Cross-attention (`pixels x tokens`) at `z_bar_t` under the learned tokens.
    pub cross_attention: Vec<Array2<f64>>,
    pub cross_resolution: usize,
    pub inversion_attention: Option<InversionAttention>,
    pub warnings: Vec<String>,
}

impl DplRun {
    pub fn steps(&self) -> usize {
        self.tokens.len()
    }

    pub fn z_bar_t(&self) -> &LatentCode {
        self.trajectory.last()
    }

    /// Contextualized condition `C_t` for each step.
    pub fn conditions<B: DiffusionBackend + ?Sized>(&self, backend: &B) -> Result<Vec<Array2<f64>>> {
        let base = encode_prompt(backend, &self.prompt, &self.nouns, None)?;
        self.tokens.iter().map(|v| Ok(condition_with_tokens(backend, &base, v)?.1)).collect()
    }

    /// Per-noun cross-attention maps averaged over all steps.
    pub fn mean_noun_maps(&self) -> Result<Vec<TokenAttention>> {
        let mut avg = MapAverager::default();
        for a in &self.cross_attention {
            avg.add(a);
        }
        let mean = avg.mean().ok_or_else(|| Error::invalid("run has no attention"))?;
        self.noun_positions.iter().map(|&p| token_map_from(mean.view(), self.cross_resolution, p)).collect()
    }

    pub fn cap_hits(&self) -> usize {
        self.reports.iter().filter(|r| r.hit_cap).count()
    }
}

/// Inverts `image`, then walks `t = T..1` learning noun tokens and null
/// embeddings so guided sampling retraces the inversion.
pub fn run_dpl<B: DiffusionBackend + ?Sized>(
    backend: &B,
    image: &Image,
    prompt: &str,
    nouns: &[String],
    cfg: &DplConfig,
) -> Result<DplRun> {
    let z0 = backend.encode_image(image)?;
    run_dpl_latent(backend, z0, prompt, nouns, cfg)
}

pub fn run_dpl_latent<B: DiffusionBackend + ?Sized>(
    backend: &B,
    z0: LatentCode,
    prompt: &str,
    nouns: &[String],
    cfg: &DplConfig,
) -> Result<DplRun> {
    cfg.validate()?;
    if nouns.is_empty() {
        return Err(Error::invalid("at least one noun is required"));
    }
    let steps = backend.schedule().steps();
    let res = backend.dims().cross_resolution;
    let base = encode_prompt(backend, prompt, nouns, None)?;
    let mut warnings = Vec::new();

    let (trajectory, inversion_attention) = invert_latent(backend, z0, &base, None, &cfg.inversion)?;

    let (clusters, background, mask) = match (&inversion_attention, cfg.use_background) {
        (Some(attn), true) => {
            let (labels, est) = background_from_attention(attn, &base.noun_positions, &cfg.background)?;
            warnings.extend(est.warnings.iter().cloned());
            let small = est.mask.downsample(res)?;
            let mask = if small.is_empty() {
                warnings.push("background mask is empty; background loss disabled".into());
                None
            } else {
                Some(small)
            };
            (Some(labels), Some(est), mask)
        }
        (None, true) => {
            warnings.push("no inversion attention recorded; background loss disabled".into());
            (None, None, None)
        }
        _ => (None, None, None),
    };

    let nti_opts = NtiOptions { guidance: cfg.guidance, ..cfg.nti.clone() };
    let mut tokens = vec![DynamicTokenSet { tokens: Default::default(), timestep: 0 }; steps];
    let mut reports = Vec::with_capacity(steps);
    let mut cross_attention = vec![Array2::zeros((0, 0)); steps];
    let mut embeddings = vec![Array2::zeros((0, 0)); steps];
    let mut per_step_loss = vec![0.0; steps];
    let mut initial_loss = vec![0.0; steps];
    let mut reconstruction = vec![trajectory.last().clone()];

    let mut v = DynamicTokenSet::from_stock(&base, steps)?;
    let mut null = backend.null_embedding()?;
    let mut z_bar = trajectory.last().clone();
    for t in (1..=steps).rev() {
        let learn = !cfg.static_tokens || t == steps;
        let token_opts = if learn {
            cfg.tokens.clone()
        } else {
            TokenOptOptions { thresholds: ThresholdSchedule::disabled(), ..cfg.tokens.clone() }
        };
        let out = optimize_tokens_at_t(backend, &z_bar, t, &base, &v, mask.as_ref(), &token_opts)?;
        if out.report.hit_cap {
            warnings.push(format!("token optimization hit the iteration cap at t={t}"));
        }
        let step = nti_step(backend, &z_bar, trajectory.at(t - 1), t, out.cond.view(), &null, &nti_opts)?;

        tokens[t - 1] = out.tokens.clone();
        cross_attention[t - 1] = out.attention;
        reports.push(out.report);
        embeddings[t - 1] = step.null.clone();
        per_step_loss[t - 1] = step.loss_after;
        initial_loss[t - 1] = step.loss_before;

        v = DynamicTokenSet { tokens: out.tokens.tokens, timestep: t - 1 };
        null = step.null;
        z_bar = step.z_prev;
        reconstruction.push(z_bar.clone());
    }
    reports.reverse();
    reconstruction.reverse();
    let cap_hits = reports.iter().filter(|r| r.hit_cap).count();
    if cap_hits > 0 {
        log::warn!("token optimization hit the iteration cap at {cap_hits} of {steps} steps");
    }

    Ok(DplRun {
        prompt: prompt.to_string(),
        nouns: nouns.to_vec(),
        noun_positions: base.noun_positions.clone(),
        guidance: cfg.guidance,
        trajectory,
        reconstruction,
        tokens,
        nulls: NullTextSchedule { embeddings, per_step_loss, initial_loss },
        clusters,
        background,
        mask,
        reports,
        cross_attention,
        cross_resolution: res,
        inversion_attention,
        warnings,
    })
}

/// Scalar and text parts of a run, stored as archive metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub prompt: String,
    pub nouns: Vec<String>,
    pub noun_positions: Vec<usize>,
    pub steps: usize,
    pub guidance: f64,
    pub guidance_inversion: f64,
    pub cross_resolution: usize,
    pub reports: Vec<TokenStepReport>,
    pub null_loss: Vec<f64>,
    pub null_initial_loss: Vec<f64>,
    pub agreement_scores: Option<Vec<Vec<f64>>>,
    pub background_clusters: Option<Vec<usize>>,
    pub cluster_count: Option<usize>,
    pub inversion_self_resolution: Option<usize>,
    pub inversion_steps_averaged: Option<usize>,
    pub warnings: Vec<String>,
}

fn summary_err(e: serde_json::Error) -> Error {
    Error::Archive(format!("run summary: {e}"))
}

impl DplRun {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            prompt: self.prompt.clone(),
            nouns: self.nouns.clone(),
            noun_positions: self.noun_positions.clone(),
            steps: self.steps(),
            guidance: self.guidance,
            guidance_inversion: self.trajectory.guidance_scale_used,
            cross_resolution: self.cross_resolution,
            reports: self.reports.clone(),
            null_loss: self.nulls.per_step_loss.clone(),
            null_initial_loss: self.nulls.initial_loss.clone(),
            agreement_scores: self.background.as_ref().map(|b| b.scores.clone()),
            background_clusters: self.background.as_ref().map(|b| b.background_clusters.clone()),
            cluster_count: self.clusters.as_ref().map(|c| c.clusters),
            inversion_self_resolution: self.inversion_attention.as_ref().map(|a| a.self_resolution),
            inversion_steps_averaged: self.inversion_attention.as_ref().map(|a| a.steps_averaged),
            warnings: self.warnings.clone(),
        }
    }

    pub fn to_archive(&self) -> Result<NamedArrayArchive> {
        let mut ar = NamedArrayArchive::new();
        for (t, z) in self.trajectory.latents.iter().enumerate() {
            ar.insert(format!("trajectory/{t}"), &z.data);
        }
        for (t, z) in self.reconstruction.iter().enumerate() {
            ar.insert(format!("reconstruction/{t}"), &z.data);
        }
        ar.insert("z_bar_T", &self.z_bar_t().data);
        for t in 1..=self.steps() {
            ar.insert(format!("tokens/{t}"), &self.tokens[t - 1].to_matrix());
            ar.insert(format!("null/{t}"), self.nulls.at(t));
            ar.insert(format!("attention/{t}"), &self.cross_attention[t - 1]);
        }
        if let Some(m) = &self.mask {
            ar.insert("background_mask", &m.as_f64());
        }
        if let Some(b) = &self.background {
            ar.insert("background_mask_full", &b.mask.as_f64());
        }
        if let Some(c) = &self.clusters {
            ar.insert("clusters", &c.labels.mapv(|l| l as f64));
        }
        if let Some(a) = &self.inversion_attention {
            ar.insert("attention_inversion/cross", &a.cross);
            ar.insert("attention_inversion/self", &a.self_attn);
        }
        ar.set_metadata("run", serde_json::to_string(&self.summary()).map_err(summary_err)?);
        Ok(ar)
    }

    pub fn from_archive(ar: &NamedArrayArchive) -> Result<Self> {
        let meta = ar.metadata("run").ok_or_else(|| Error::Archive("archive has no run summary".into()))?;
        let s: RunSummary = serde_json::from_str(meta).map_err(summary_err)?;
        let steps = s.steps;
        let latents = (0..=steps)
            .map(|t| Ok(LatentCode::new(ar.get3(&format!("trajectory/{t}"))?, t)))
            .collect::<Result<Vec<_>>>()?;
        let reconstruction = (0..=steps)
            .map(|t| Ok(LatentCode::new(ar.get3(&format!("reconstruction/{t}"))?, t)))
            .collect::<Result<Vec<_>>>()?;
        let mut tokens = Vec::with_capacity(steps);
        let mut embeddings = Vec::with_capacity(steps);
        let mut cross_attention = Vec::with_capacity(steps);
        for t in 1..=steps {
            tokens.push(DynamicTokenSet::from_matrix(&s.noun_positions, &ar.get2(&format!("tokens/{t}"))?, t)?);
            embeddings.push(ar.get2(&format!("null/{t}"))?);
            cross_attention.push(ar.get2(&format!("attention/{t}"))?);
        }
        let bool_mask = |name: &str| -> Result<Option<BackgroundMask>> {
            if !ar.contains(name) {
                return Ok(None);
            }
            Ok(Some(BackgroundMask::from_values(&ar.get2(name)?, 0.5)?))
        };
        let mask = bool_mask("background_mask")?;
        let background = match (bool_mask("background_mask_full")?, &s.agreement_scores, &s.background_clusters) {
            (Some(mask), Some(scores), Some(bg)) => Some(BackgroundEstimate {
                mask,
                scores: scores.clone(),
                background_clusters: bg.clone(),
                warnings: Vec::new(),
            }),
            _ => None,
        };
        let clusters = match (ar.contains("clusters"), s.cluster_count) {
            (true, Some(n)) => Some(ClusterLabeling::new(ar.get2("clusters")?.mapv(|v| v.round() as usize), n)?),
            _ => None,
        };
        let inversion_attention = match (s.inversion_self_resolution, s.inversion_steps_averaged) {
            (Some(self_resolution), Some(steps_averaged)) => Some(InversionAttention {
                cross: ar.get2("attention_inversion/cross")?,
                cross_resolution: s.cross_resolution,
                self_attn: ar.get2("attention_inversion/self")?,
                self_resolution,
                steps_averaged,
            }),
            _ => None,
        };
        Ok(Self {
            prompt: s.prompt,
            nouns: s.nouns,
            noun_positions: s.noun_positions,
            guidance: s.guidance,
            trajectory: LatentTrajectory { latents, guidance_scale_used: s.guidance_inversion },
            reconstruction,
            tokens,
            nulls: NullTextSchedule {
                embeddings,
                per_step_loss: s.null_loss,
                initial_loss: s.null_initial_loss,
            },
            clusters,
            background,
            mask,
            reports: s.reports,
            cross_attention,
            cross_resolution: s.cross_resolution,
            inversion_attention,
            warnings: s.warnings,
        })
    }

    /// Checks that the run matches `backend` and encodes cleanly.
    pub fn check_backend<B: DiffusionBackend + ?Sized>(&self, backend: &B) -> Result<TextEmbeddingSequence> {
        let steps = backend.schedule().steps();
        if self.steps() != steps {
            return Err(Error::invalid(format!("run has {} steps, backend has {steps}", self.steps())));
        }
        let base = encode_prompt(backend, &self.prompt, &self.nouns, None)?;
        if base.noun_positions != self.noun_positions {
            return Err(Error::invalid("run noun positions do not match the prompt"));
        }
        Ok(base)
    }
}
