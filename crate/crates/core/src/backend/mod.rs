//! Diffusion model interface.
//!
//! A backend bundles the denoiser, the text encoder, the image autoencoder and
//! the noise schedule. Everything above this module talks to a
//! [`DiffusionBackend`] and never to a concrete model, so the whole editing
//! pipeline can run against the deterministic [`SyntheticBackend`].

mod checkpoint;
mod synthetic;
mod text;

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, AttentionRecord};
use crate::error::{Error, Result};

pub use checkpoint::load_checkpoint;
pub use synthetic::{SyntheticBackend, SyntheticConfig, SyntheticParams};
pub use text::{tokenize_words, TokenizedPrompt, BOS_TOKEN, EOS_TOKEN};

/// A latent code `z_t`, laid out as `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub data: Array3<f64>,
    pub timestep: usize,
}

impl LatentCode {
    pub fn new(data: Array3<f64>, timestep: usize) -> Self {
        Self { data, timestep }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// An image in the backend's pixel space, `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }
}

/// The contextualized text condition for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingSequence {
    /// Token strings, padded to the encoder's sequence length.
    pub tokens: Vec<String>,
    /// Raw token embeddings fed to the text transformer (`seq_len x embed_dim`).
    pub token_embeddings: Array2<f64>,
    /// Output of the text transformer (`seq_len x embed_dim`).
    pub embeddings: Array2<f64>,
    /// Token positions covered by each prompt word.
    pub token_spans: Vec<Range<usize>>,
    /// One token position per noun, in the order the nouns were given.
    pub noun_positions: Vec<usize>,
    pub nouns: Vec<String>,
}

impl TextEmbeddingSequence {
    pub fn seq_len(&self) -> usize {
        self.embeddings.nrows()
    }
}

/// Cumulative signal levels `alpha_bar[t]`, `t = 0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::invalid("schedule needs at least two levels"));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::invalid("alpha_bar values must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("alpha_bar must be strictly decreasing"));
        }
        Ok(Self { alpha_bar })
    }

    /// Schedule whose signal coefficient `sqrt(alpha_bar)` falls linearly
    /// from 1 at `t = 0` to `final_signal` at `t = steps`.
    pub fn linear_signal(steps: usize, final_signal: f64) -> Result<Self> {
        if steps == 0 || !(final_signal > 0.0 && final_signal < 1.0) {
            return Err(Error::invalid("need steps >= 1 and final_signal in (0, 1)"));
        }
        let alpha_bar = (0..=steps)
            .map(|t| {
                let s = 1.0 - (1.0 - final_signal) * t as f64 / steps as f64;
                s * s
            })
            .collect();
        Self::new(alpha_bar)
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Shapes fixed per backend instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    /// Resolution of the cross-attention maps the token losses use.
    pub cross_resolution: usize,
    /// Resolution of the self-attention maps used for clustering.
    pub self_resolution: usize,
}

impl BackendDims {
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Output of one denoiser evaluation.
#[derive(Debug, Clone)]
pub struct BackendOutput {
    pub noise_prediction: Array3<f64>,
    pub recorded_attention: Vec<AttentionRecord>,
}

/// Edits attention probabilities in flight. Receives the per-head maps of
/// one layer and may overwrite them before they are applied to the values.
pub trait AttentionController {
    fn control(&mut self, kind: AttentionKind, layer: usize, resolution: usize, heads: &mut [Array2<f64>]);
}

/// Per-call hooks for [`DiffusionBackend::forward`]. One instance per call;
/// never shared between in-flight evaluations.
#[derive(Default)]
pub struct ForwardHooks<'a> {
    pub record: bool,
    pub records: Vec<AttentionRecord>,
    pub controller: Option<&'a mut dyn AttentionController>,
}

impl<'a> ForwardHooks<'a> {
    pub fn recording() -> Self {
        Self { record: true, ..Default::default() }
    }

    pub fn controlled(controller: &'a mut dyn AttentionController, record: bool) -> Self {
        Self { record, records: Vec::new(), controller: Some(controller) }
    }
}

/// A text-conditioned latent denoiser with attention access and the
/// vector-Jacobian products the token and null-text optimizers need.
pub trait DiffusionBackend: Send + Sync {
    fn dims(&self) -> BackendDims;

    fn schedule(&self) -> &NoiseSchedule;

    /// Splits a prompt into encoder tokens, padded to `seq_len`.
    fn tokenize(&self, prompt: &str) -> Result<TokenizedPrompt> {
        tokenize_words(prompt, self.dims().seq_len)
    }

    /// Stock input embedding of one token.
    fn token_embedding(&self, token: &str) -> Array1<f64>;

    /// The text transformer: raw token embeddings to contextualized ones.
    fn encode_tokens(&self, raw: ArrayView2<f64>) -> Array2<f64>;

    /// Pulls a gradient on the contextualized sequence back to the raw tokens.
    fn encode_tokens_vjp(&self, raw: ArrayView2<f64>, grad: ArrayView2<f64>) -> Array2<f64>;

    /// Evaluates `eps_theta(z, t, cond)`.
    fn forward(
        &self,
        z: &LatentCode,
        t: usize,
        cond: ArrayView2<f64>,
        hooks: &mut ForwardHooks<'_>,
    ) -> Result<Array3<f64>>;

    /// Head- and layer-averaged cross-attention (`pixels x tokens`) at `resolution`.
    fn cross_attention(
        &self,
        z: &LatentCode,
        t: usize,
        cond: ArrayView2<f64>,
        resolution: usize,
    ) -> Result<Array2<f64>>;

    /// Gradient w.r.t. `cond` of `<grad, cross_attention(z, t, cond, resolution)>`.
    fn cross_attention_vjp(
        &self,
        z: &LatentCode,
        t: usize,
        cond: ArrayView2<f64>,
        resolution: usize,
        grad: ArrayView2<f64>,
    ) -> Result<Array2<f64>>;

    /// Gradient w.r.t. `cond` of `<grad, eps_theta(z, t, cond)>`.
    fn noise_vjp(
        &self,
        z: &LatentCode,
        t: usize,
        cond: ArrayView2<f64>,
        grad: &Array3<f64>,
    ) -> Result<Array2<f64>>;

    fn encode_image(&self, image: &Image) -> Result<LatentCode>;

    fn decode_latent(&self, z: &LatentCode) -> Result<Image>;

    /// Evaluates the denoiser, optionally recording raw attention.
    fn predict_noise(
        &self,
        z: &LatentCode,
        t: usize,
        cond: &TextEmbeddingSequence,
        record_attention: bool,
    ) -> Result<BackendOutput> {
        let mut hooks = ForwardHooks { record: record_attention, ..Default::default() };
        let noise_prediction = self.forward(z, t, cond.embeddings.view(), &mut hooks)?;
        Ok(BackendOutput { noise_prediction, recorded_attention: hooks.records })
    }

    /// Null-text condition `tau("")`.
    fn null_embedding(&self) -> Result<Array2<f64>> {
        Ok(encode_prompt(self, "", &[], None)?.embeddings)
    }
}

/// Encodes a prompt, marking the given noun words and optionally replacing
/// their input embeddings before the text transformer runs.
///
/// `overrides` is keyed by token position; every key must be one of the
/// resulting `noun_positions`.
pub fn encode_prompt<B: DiffusionBackend + ?Sized>(
    backend: &B,
    prompt: &str,
    nouns: &[String],
    overrides: Option<&BTreeMap<usize, Array1<f64>>>,
) -> Result<TextEmbeddingSequence> {
    let tokenized = backend.tokenize(prompt)?;
    let noun_positions = tokenized.noun_positions(nouns)?;
    let dims = backend.dims();
    let mut raw = Array2::zeros((tokenized.tokens.len(), dims.embed_dim));
    for (i, tok) in tokenized.tokens.iter().enumerate() {
        raw.row_mut(i).assign(&backend.token_embedding(tok));
    }
    if let Some(overrides) = overrides {
        for (pos, emb) in overrides {
            if !noun_positions.contains(pos) {
                return Err(Error::invalid(format!("override position {pos} is not a noun slot")));
            }
            if emb.len() != dims.embed_dim {
                return Err(Error::invalid(format!(
                    "override embedding has length {}, expected {}",
                    emb.len(),
                    dims.embed_dim
                )));
            }
            raw.row_mut(*pos).assign(emb);
        }
    }
    let embeddings = backend.encode_tokens(raw.view());
    Ok(TextEmbeddingSequence {
        tokens: tokenized.tokens,
        token_embeddings: raw,
        embeddings,
        token_spans: tokenized.word_spans,
        noun_positions,
        nouns: nouns.to_vec(),
    })
}

pub(crate) fn check_latent(dims: &BackendDims, z: &LatentCode) -> Result<()> {
    if z.shape() != dims.latent_shape() {
        return Err(Error::invalid(format!(
            "latent shape {:?} does not match backend {:?}",
            z.shape(),
            dims.latent_shape()
        )));
    }
    Ok(())
}

pub(crate) fn check_cond(dims: &BackendDims, cond: ArrayView2<f64>) -> Result<()> {
    if cond.dim() != (dims.seq_len, dims.embed_dim) {
        return Err(Error::invalid(format!(
            "condition shape {:?} does not match ({}, {})",
            cond.dim(),
            dims.seq_len,
            dims.embed_dim
        )));
    }
    Ok(())
}
