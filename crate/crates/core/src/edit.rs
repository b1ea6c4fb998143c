//! Attention-injection editing on top of a learned run: word swap,
//! refinement and re-weighting.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::attention::{aggregate, AttentionKind, AttentionRecord, CrossAttentionMap};
use crate::backend::{
    encode_prompt, AttentionController, DiffusionBackend, ForwardHooks, Image, LatentCode, TokenizedPrompt,
};
use crate::dpl::DplRun;
use crate::error::{Error, Result};
use crate::inversion::{combine_guidance, ddim_transition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    #[default]
    WordSwap,
    Refinement,
    Reweight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditSpec {
    pub mode: EditMode,
    /// Source word to replacement word.
    pub swap_map: BTreeMap<String, String>,
    /// Text appended to the source prompt.
    pub appended_text: Option<String>,
    /// Word to attention multiplier.
    pub reweight_factors: BTreeMap<String, f64>,
    /// Fraction of the steps, counted from `T` down, with cross-attention injection.
    pub cross_injection_fraction: f64,
    /// Same for self-attention.
    pub self_injection_fraction: f64,
    /// Rescale re-weighted rows to sum to one.
    pub renormalize: bool,
}

impl Default for EditSpec {
    fn default() -> Self {
        Self {
            mode: EditMode::WordSwap,
            swap_map: BTreeMap::new(),
            appended_text: None,
            reweight_factors: BTreeMap::new(),
            cross_injection_fraction: 0.8,
            self_injection_fraction: 0.4,
            renormalize: false,
        }
    }
}

impl EditSpec {
    /// Edits nothing; the edited image equals the reconstruction.
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn word_swap(pairs: &[(&str, &str)]) -> Self {
        Self {
            swap_map: pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            ..Self::default()
        }
    }

    pub fn refinement(text: &str) -> Self {
        Self { mode: EditMode::Refinement, appended_text: Some(text.to_string()), ..Self::default() }
    }

    pub fn reweight(factors: &[(&str, f64)]) -> Self {
        Self {
            mode: EditMode::Reweight,
            reweight_factors: factors.iter().map(|(w, f)| (w.to_string(), *f)).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for f in [self.cross_injection_fraction, self.self_injection_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("injection fraction {f} outside [0, 1]")));
            }
        }
        let (swap, text, factors) =
            (!self.swap_map.is_empty(), self.appended_text.is_some(), !self.reweight_factors.is_empty());
        let ok = match self.mode {
            EditMode::WordSwap => !text && !factors,
            EditMode::Refinement => text && !swap && !factors,
            EditMode::Reweight => !swap && !text,
        };
        if !ok {
            return Err(Error::invalid(format!("edit spec payload does not match mode {:?}", self.mode)));
        }
        if self.reweight_factors.values().any(|f| !f.is_finite()) {
            return Err(Error::invalid("reweight factors must be finite"));
        }
        Ok(())
    }

    /// Whether `t` of `steps` lies in a window covering `fraction` of the
    /// steps from `T` down.
    pub fn in_window(fraction: f64, t: usize, steps: usize) -> bool {
        (steps as f64 - t as f64) < fraction * steps as f64
    }
}

/// Longest common subsequence alignment: for each target index, the matched
/// source index.
pub fn lcs_alignment(source: &[String], target: &[String]) -> Vec<Option<usize>> {
    let (n, m) = (source.len(), target.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[i][j] = if source[i] == target[j] { dp[i + 1][j + 1] + 1 } else { dp[i + 1][j].max(dp[i][j + 1]) };
        }
    }
    let mut out = vec![None; m];
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if source[i] == target[j] {
            out[j] = Some(i);
            i += 1;
            j += 1;
        } else if dp[i + 1][j] > dp[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Resolved edit: target prompt, column alignment and per-column factors.
#[derive(Debug, Clone, PartialEq)]
pub struct EditPlan {
    pub mode: EditMode,
    pub target_prompt: String,
    /// For each target token, the source token whose attention it inherits.
    pub alignment: Vec<Option<usize>>,
    /// Multiplier of each target column.
    pub factors: Vec<f64>,
    pub cross_fraction: f64,
    pub self_fraction: f64,
    pub renormalize: bool,
}

fn word_positions(tok: &TokenizedPrompt, word: &str) -> Vec<usize> {
    let w = word.to_lowercase();
    tok.words.iter().zip(&tok.word_spans).filter(|(text, _)| **text == w).map(|(_, s)| s.start).collect()
}

impl EditPlan {
    pub fn new<B: DiffusionBackend + ?Sized>(backend: &B, source_prompt: &str, spec: &EditSpec) -> Result<Self> {
        spec.validate()?;
        let source = backend.tokenize(source_prompt)?;
        let seq = source.tokens.len();
        let mut factors = vec![1.0; seq];
        let (target_prompt, alignment) = match spec.mode {
            EditMode::WordSwap => {
                let mut words = source.words.clone();
                for (from, to) in &spec.swap_map {
                    let f = from.to_lowercase();
                    let hits: Vec<usize> = (0..words.len()).filter(|&i| words[i] == f).collect();
                    if hits.is_empty() {
                        return Err(Error::invalid(format!("swap word '{from}' is not in the prompt")));
                    }
                    if to.split_whitespace().count() != 1 {
                        return Err(Error::invalid(format!("replacement '{to}' must be a single word")));
                    }
                    for i in hits {
                        words[i] = to.to_lowercase();
                    }
                }
                (words.join(" "), (0..seq).map(Some).collect())
            }
            EditMode::Refinement => {
                let extra = spec.appended_text.as_deref().unwrap_or_default();
                let target_prompt = format!("{} {}", source_prompt.trim(), extra.trim());
                let target = backend.tokenize(&target_prompt)?;
                (target_prompt, lcs_alignment(&source.tokens, &target.tokens))
            }
            EditMode::Reweight => {
                for (word, f) in &spec.reweight_factors {
                    let hits = word_positions(&source, word);
                    if hits.is_empty() {
                        return Err(Error::invalid(format!("reweight word '{word}' is not in the prompt")));
                    }
                    for p in hits {
                        factors[p] = *f;
                    }
                }
                (source_prompt.to_string(), (0..seq).map(Some).collect())
            }
        };
        Ok(Self {
            mode: spec.mode,
            target_prompt,
            alignment,
            factors,
            cross_fraction: spec.cross_injection_fraction,
            self_fraction: spec.self_injection_fraction,
            renormalize: spec.renormalize,
        })
    }

    pub fn cross_active(&self, t: usize, steps: usize) -> bool {
        EditSpec::in_window(self.cross_fraction, t, steps)
    }

    pub fn self_active(&self, t: usize, steps: usize) -> bool {
        EditSpec::in_window(self.self_fraction, t, steps)
    }

    /// Target-pass attention (`pixels x tokens`) after injection from the
    /// source pass. Assumes the window is open.
    pub fn inject(&self, source: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<Array2<f64>> {
        if source.nrows() != target.nrows() || target.ncols() != self.alignment.len() {
            return Err(Error::invalid("source and target attention do not match the edit alignment"));
        }
        let mut out = target.to_owned();
        for (j, a) in self.alignment.iter().enumerate() {
            if let Some(i) = *a {
                if i >= source.ncols() {
                    return Err(Error::invalid(format!("aligned source column {i} out of range")));
                }
                out.column_mut(j).assign(&source.column(i));
            }
        }
        if self.mode == EditMode::Reweight {
            for (j, &f) in self.factors.iter().enumerate() {
                if f != 1.0 {
                    out.column_mut(j).mapv_inplace(|v| v * f);
                }
            }
            if self.renormalize {
                for mut row in out.rows_mut() {
                    let s = row.sum();
                    if s > 0.0 {
                        row.mapv_inplace(|v| v / s);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Applies `plan` to one aggregated map at timestep `t` of `steps`. Outside
/// the cross window the target passes through.
pub fn inject_cross_attention(
    source: &CrossAttentionMap,
    target: &CrossAttentionMap,
    plan: &EditPlan,
    t: usize,
    steps: usize,
) -> Result<CrossAttentionMap> {
    if source.resolution != target.resolution {
        return Err(Error::invalid("source and target maps differ in resolution"));
    }
    if !plan.cross_active(t, steps) {
        return Ok(target.clone());
    }
    Ok(CrossAttentionMap { values: plan.inject(source.values.view(), target.values.view())?, ..target.clone() })
}

/// Replays the source pass's per-layer attention into the target pass.
struct Injector<'a> {
    plan: &'a EditPlan,
    source: &'a [AttentionRecord],
    cross: bool,
    self_attn: bool,
    error: Option<Error>,
}

impl AttentionController for Injector<'_> {
    fn control(&mut self, kind: AttentionKind, layer: usize, _resolution: usize, heads: &mut [Array2<f64>]) {
        let active = match kind {
            AttentionKind::Cross => self.cross,
            AttentionKind::SelfAttn => self.self_attn,
        };
        if !active || self.error.is_some() {
            return;
        }
        let Some(src) = self.source.iter().find(|r| r.kind == kind && r.layer == layer) else {
            self.error = Some(Error::NotFound(format!("source attention for layer {layer}")));
            return;
        };
        for (h, target) in heads.iter_mut().enumerate() {
            match kind {
                AttentionKind::Cross => match self.plan.inject(src.heads[h].view(), target.view()) {
                    Ok(a) => *target = a,
                    Err(e) => self.error = Some(e),
                },
                AttentionKind::SelfAttn => target.assign(&src.heads[h]),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub target_prompt: String,
    pub edited: Image,
    pub reconstruction: Image,
    /// `z_0..=z_T` of the target pass.
    pub edited_latents: Vec<LatentCode>,
    /// `z_0..=z_T` of the source pass.
    pub source_latents: Vec<LatentCode>,
    /// Cross-attention at the cross resolution per step, index `t - 1`.
    pub edited_attention: Vec<Array2<f64>>,
    pub source_attention: Vec<Array2<f64>>,
}

/// Samples the source and target passes in lockstep from `z_bar_T`.
pub fn edit_image<B: DiffusionBackend + ?Sized>(backend: &B, run: &DplRun, spec: &EditSpec) -> Result<EditOutput> {
    let base = run.check_backend(backend)?;
    let plan = EditPlan::new(backend, &run.prompt, spec)?;
    let steps = run.steps();
    let res = backend.dims().cross_resolution;
    let source_conds = run.conditions(backend)?;

    // learned tokens carry over to target nouns that keep their word
    let target_tok = backend.tokenize(&plan.target_prompt)?;
    let mut carried = Vec::new();
    for (j, a) in plan.alignment.iter().enumerate() {
        if let Some(i) = *a {
            if run.noun_positions.contains(&i) && target_tok.tokens[j] == base.tokens[i] {
                carried.push((j, i));
            }
        }
    }
    let target_nouns: Vec<String> = carried.iter().map(|&(j, _)| target_tok.tokens[j].clone()).collect();
    let target_conds = (1..=steps)
        .map(|t| {
            let overrides: BTreeMap<usize, _> =
                carried.iter().map(|&(j, i)| (j, run.tokens[t - 1].tokens[&i].clone())).collect();
            let seq = encode_prompt(backend, &plan.target_prompt, &target_nouns, Some(&overrides))?;
            Ok(seq.embeddings)
        })
        .collect::<Result<Vec<_>>>()?;

    let sched = backend.schedule();
    let w = run.guidance;
    let mut src = run.z_bar_t().clone();
    let mut tgt = src.clone();
    let mut source_latents = vec![src.clone()];
    let mut edited_latents = vec![tgt.clone()];
    let mut source_attention = vec![Array2::zeros((0, 0)); steps];
    let mut edited_attention = vec![Array2::zeros((0, 0)); steps];
    for t in (1..=steps).rev() {
        let null = run.nulls.at(t).view();
        let (a_t, a_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));

        let mut hooks = ForwardHooks::recording();
        let eps_c = backend.forward(&src, t, source_conds[t - 1].view(), &mut hooks)?;
        let eps_n = backend.forward(&src, t, null, &mut ForwardHooks::default())?;
        let source_records = hooks.records;
        source_attention[t - 1] = aggregate(&source_records, AttentionKind::Cross, res)?;

        let mut injector = Injector {
            plan: &plan,
            source: &source_records,
            cross: plan.cross_active(t, steps),
            self_attn: plan.self_active(t, steps),
            error: None,
        };
        let mut thooks = ForwardHooks::controlled(&mut injector, true);
        let teps_c = backend.forward(&tgt, t, target_conds[t - 1].view(), &mut thooks)?;
        let target_records = std::mem::take(&mut thooks.records);
        drop(thooks);
        if let Some(e) = injector.error.take() {
            return Err(e);
        }
        let teps_n = backend.forward(&tgt, t, null, &mut ForwardHooks::default())?;
        edited_attention[t - 1] = aggregate(&target_records, AttentionKind::Cross, res)?;

        let next_src = ddim_transition(&src.data, &combine_guidance(&eps_c, &eps_n, w), a_t, a_prev);
        let next_tgt = ddim_transition(&tgt.data, &combine_guidance(&teps_c, &teps_n, w), a_t, a_prev);
        if !next_src.iter().chain(next_tgt.iter()).all(|v| v.is_finite()) {
            return Err(Error::numerical(format!("non-finite latent while editing at t={t}")));
        }
        src = LatentCode::new(next_src, t - 1);
        tgt = LatentCode::new(next_tgt, t - 1);
        source_latents.push(src.clone());
        edited_latents.push(tgt.clone());
    }
    source_latents.reverse();
    edited_latents.reverse();
    Ok(EditOutput {
        target_prompt: plan.target_prompt,
        edited: backend.decode_latent(&tgt)?,
        reconstruction: backend.decode_latent(&src)?,
        edited_latents,
        source_latents,
        edited_attention,
        source_attention,
    })
}
