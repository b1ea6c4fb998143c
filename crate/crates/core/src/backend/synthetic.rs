//! Closed-form, differentiable stand-in for a latent diffusion model.
//!
//! Every layer is a fixed seeded linear map followed by softmax attention:
//!
//! * pixel features at resolution `r`: `h_p = U_r z[src(p)] + pos_r[p] + P_t temb(t)`
//! * cross-attention per head: `softmax((W_q h)(W_k c)^T / sqrt(d))`, values `W_v c`
//! * self-attention per head: `softmax((S_q h)(S_k h)^T / sqrt(d))`
//! * noise: `W_z z + W_t temb(t) + W_m mean(c) + sum_r pool_r(cross_r) + self_latent`
//!
//! Only the self-attention layer at latent resolution feeds the noise; the
//! finer self-attention maps are computed when recording.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    check_cond, check_latent, BackendDims, DiffusionBackend, ForwardHooks, Image, LatentCode, NoiseSchedule,
};
use crate::attention::{softmax_rows, softmax_rows_vjp, AttentionKind, AttentionRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub channels: usize,
    pub latent_size: usize,
    pub embed_dim: usize,
    pub seq_len: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub resolutions: Vec<usize>,
    pub cross_resolution: usize,
    pub self_resolution: usize,
    pub steps: usize,
    /// `sqrt(alpha_bar_T)`.
    pub final_signal: f64,
    pub embed_scale: f64,
    pub text_mix_scale: f64,
    pub feature_gain: f64,
    pub position_scale: f64,
    pub time_scale: f64,
    pub query_gain: f64,
    pub key_gain: f64,
    pub value_scale: f64,
    pub self_sharpness: f64,
    pub self_value_scale: f64,
    pub latent_gain: f64,
    pub cond_mean_gain: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            channels: 8,
            latent_size: 8,
            embed_dim: 16,
            seq_len: 8,
            hidden_dim: 16,
            heads: 2,
            head_dim: 8,
            resolutions: vec![8, 16, 32],
            cross_resolution: 16,
            self_resolution: 32,
            steps: 50,
            final_signal: 0.1,
            embed_scale: 0.3,
            text_mix_scale: 0.3,
            feature_gain: 1.5,
            position_scale: 0.1,
            time_scale: 0.2,
            query_gain: 1.0,
            key_gain: 10.0 / 3.0,
            value_scale: 0.03,
            self_sharpness: 2.0,
            self_value_scale: 0.2,
            latent_gain: 0.2,
            cond_mean_gain: 0.03,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let pos = [
            self.channels,
            self.latent_size,
            self.embed_dim,
            self.seq_len,
            self.hidden_dim,
            self.heads,
            self.head_dim,
            self.steps,
        ];
        if pos.iter().any(|&v| v == 0) {
            return Err(Error::invalid("synthetic dims must be positive"));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::invalid("hidden_dim must be even"));
        }
        if !self.resolutions.contains(&self.latent_size) {
            return Err(Error::invalid("resolutions must include the latent size"));
        }
        if self.resolutions.iter().any(|r| r % self.latent_size != 0) {
            return Err(Error::invalid("every resolution must be a multiple of the latent size"));
        }
        for r in [self.cross_resolution, self.self_resolution] {
            if !self.resolutions.contains(&r) {
                return Err(Error::invalid(format!("resolution {r} has no attention layer")));
            }
        }
        Ok(())
    }
}

/// Weights of one attention layer at a fixed spatial resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub resolution: usize,
    /// `hidden x channels`
    pub up: Array2<f64>,
    /// `pixels x hidden`
    pub pos: Array2<f64>,
    /// per head `head_dim x hidden`
    pub wq: Vec<Array2<f64>>,
    /// per head `head_dim x embed`
    pub wk: Vec<Array2<f64>>,
    /// per head `channels x embed`
    pub wv: Vec<Array2<f64>>,
    /// per head `head_dim x hidden`
    pub sq: Vec<Array2<f64>>,
    pub sk: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub vocab_seed: u64,
    pub embed_scale: f64,
    /// `embed x embed`
    pub text_mix: Array2<f64>,
    /// `hidden x hidden`
    pub time_proj: Array2<f64>,
    /// `channels x hidden`
    pub time_out: Array2<f64>,
    /// `channels x channels`
    pub latent_mix: Array2<f64>,
    /// `channels x embed`
    pub cond_mean: Array2<f64>,
    /// `channels x hidden`
    pub self_value: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

impl SyntheticParams {
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (c, d, f, dk) = (cfg.channels, cfg.embed_dim, cfg.hidden_dim, cfg.head_dim);
        let text_mix = randn(&mut rng, (d, d), cfg.text_mix_scale / (d as f64).sqrt());
        let time_proj = randn(&mut rng, (f, f), cfg.time_scale / (f as f64).sqrt());
        let time_out = randn(&mut rng, (c, f), cfg.time_scale / (f as f64).sqrt());
        let latent_mix = randn(&mut rng, (c, c), cfg.latent_gain / (c as f64).sqrt());
        let cond_mean = randn(&mut rng, (c, d), cfg.cond_mean_gain / (d as f64).sqrt());
        let self_value = randn(&mut rng, (c, f), cfg.self_value_scale / (f as f64).sqrt());
        let mut resolutions = cfg.resolutions.clone();
        resolutions.sort_unstable();
        resolutions.dedup();
        let mut layers = Vec::with_capacity(resolutions.len());
        for &r in &resolutions {
            let up = randn(&mut rng, (f, c), cfg.feature_gain / (c as f64).sqrt());
            let pos = randn(&mut rng, (r * r, f), cfg.position_scale);
            let heads = |rng: &mut ChaCha8Rng, shape, scale| (0..cfg.heads).map(|_| randn(rng, shape, scale)).collect();
            let wq = heads(&mut rng, (dk, f), cfg.query_gain / (f as f64).sqrt());
            let wk = heads(&mut rng, (dk, d), cfg.key_gain / (d as f64).sqrt());
            let wv = heads(&mut rng, (c, d), cfg.value_scale / (d as f64).sqrt());
            let sq = heads(&mut rng, (dk, f), cfg.self_sharpness / (f as f64).sqrt());
            let sk = heads(&mut rng, (dk, f), cfg.self_sharpness / (f as f64).sqrt());
            layers.push(LayerParams { resolution: r, up, pos, wq, wk, wv, sq, sk });
        }
        Ok(Self {
            vocab_seed: cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
            embed_scale: cfg.embed_scale,
            text_mix,
            time_proj,
            time_out,
            latent_mix,
            cond_mean,
            self_value,
            layers,
        })
    }

    /// Same shapes as `generate`, every weight zero.
    pub fn zeroed(cfg: &SyntheticConfig) -> Result<Self> {
        let mut p = Self::generate(cfg)?;
        let zero = |a: &mut Array2<f64>| a.fill(0.0);
        zero(&mut p.text_mix);
        zero(&mut p.time_proj);
        zero(&mut p.time_out);
        zero(&mut p.latent_mix);
        zero(&mut p.cond_mean);
        zero(&mut p.self_value);
        for l in &mut p.layers {
            zero(&mut l.up);
            zero(&mut l.pos);
            for a in l.wq.iter_mut().chain(&mut l.wk).chain(&mut l.wv).chain(&mut l.sq).chain(&mut l.sk) {
                zero(a);
            }
        }
        Ok(p)
    }

    /// Flattens every weight into `name -> matrix`.
    pub fn to_named(&self) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        out.insert("text_mix".into(), self.text_mix.clone());
        out.insert("time_proj".into(), self.time_proj.clone());
        out.insert("time_out".into(), self.time_out.clone());
        out.insert("latent_mix".into(), self.latent_mix.clone());
        out.insert("cond_mean".into(), self.cond_mean.clone());
        out.insert("self_value".into(), self.self_value.clone());
        for l in &self.layers {
            let r = l.resolution;
            out.insert(format!("res{r}/up"), l.up.clone());
            out.insert(format!("res{r}/pos"), l.pos.clone());
            for (h, _) in l.wq.iter().enumerate() {
                out.insert(format!("res{r}/head{h}/wq"), l.wq[h].clone());
                out.insert(format!("res{r}/head{h}/wk"), l.wk[h].clone());
                out.insert(format!("res{r}/head{h}/wv"), l.wv[h].clone());
                out.insert(format!("res{r}/head{h}/sq"), l.sq[h].clone());
                out.insert(format!("res{r}/head{h}/sk"), l.sk[h].clone());
            }
        }
        out
    }

    /// Inverse of [`to_named`](Self::to_named); shapes come from `cfg`.
    pub fn from_named(cfg: &SyntheticConfig, named: &BTreeMap<String, Array2<f64>>) -> Result<Self> {
        let mut p = Self::zeroed(cfg)?;
        let take = |name: String, dst: &mut Array2<f64>| -> Result<()> {
            let src = named.get(&name).ok_or_else(|| Error::NotFound(format!("checkpoint tensor {name}")))?;
            if src.dim() != dst.dim() {
                return Err(Error::invalid(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    src.dim(),
                    dst.dim()
                )));
            }
            dst.assign(src);
            Ok(())
        };
        take("text_mix".into(), &mut p.text_mix)?;
        take("time_proj".into(), &mut p.time_proj)?;
        take("time_out".into(), &mut p.time_out)?;
        take("latent_mix".into(), &mut p.latent_mix)?;
        take("cond_mean".into(), &mut p.cond_mean)?;
        take("self_value".into(), &mut p.self_value)?;
        for l in &mut p.layers {
            let r = l.resolution;
            take(format!("res{r}/up"), &mut l.up)?;
            take(format!("res{r}/pos"), &mut l.pos)?;
            for h in 0..l.wq.len() {
                take(format!("res{r}/head{h}/wq"), &mut l.wq[h])?;
                take(format!("res{r}/head{h}/wk"), &mut l.wk[h])?;
                take(format!("res{r}/head{h}/wv"), &mut l.wv[h])?;
                take(format!("res{r}/head{h}/sq"), &mut l.sq[h])?;
                take(format!("res{r}/head{h}/sk"), &mut l.sk[h])?;
            }
        }
        p.vocab_seed = SyntheticParams::generate(cfg)?.vocab_seed;
        Ok(p)
    }
}

/// Deterministic synthetic backend. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    config: SyntheticConfig,
    params: SyntheticParams,
    schedule: NoiseSchedule,
}

struct LayerForward {
    features: Array2<f64>,
    queries: Vec<Array2<f64>>,
    probs: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl SyntheticBackend {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        let params = SyntheticParams::generate(&config)?;
        Self::with_params(config, params)
    }

    pub fn with_params(config: SyntheticConfig, params: SyntheticParams) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::linear_signal(config.steps, config.final_signal)?;
        Ok(Self { config, params, schedule })
    }

    pub fn zeroed(config: SyntheticConfig) -> Result<Self> {
        let params = SyntheticParams::zeroed(&config)?;
        Self::with_params(config, params)
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn params(&self) -> &SyntheticParams {
        &self.params
    }

    /// Sinusoidal time code, `hidden_dim` long.
    pub fn time_code(&self, t: usize) -> Array1<f64> {
        let f = self.config.hidden_dim;
        let mut out = Array1::zeros(f);
        for k in 0..f / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * k as f64 / f as f64);
            out[2 * k] = (t as f64 * freq).sin();
            out[2 * k + 1] = (t as f64 * freq).cos();
        }
        out
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.config.steps {
            return Err(Error::invalid(format!("timestep {t} outside [0, {}]", self.config.steps)));
        }
        Ok(())
    }

    /// `pixels x hidden` features of one layer.
    fn features(&self, layer: &LayerParams, z: &LatentCode, t: usize) -> Array2<f64> {
        let r = layer.resolution;
        let f = r / self.config.latent_size;
        let c = self.config.channels;
        let zr = Array2::from_shape_fn((r * r, c), |(p, ch)| z.data[[ch, (p / r) / f, (p % r) / f]]);
        let temb = self.params.time_proj.dot(&self.time_code(t));
        let mut h = zr.dot(&layer.up.t()) + &layer.pos;
        h += &temb.view().insert_axis(Axis(0));
        h
    }

    fn cross_forward(&self, layer: &LayerParams, feats: Array2<f64>, cond: ArrayView2<f64>) -> LayerForward {
        let scale = (self.config.head_dim as f64).sqrt();
        let mut queries = Vec::with_capacity(layer.wq.len());
        let mut probs = Vec::with_capacity(layer.wq.len());
        let mut values = Vec::with_capacity(layer.wq.len());
        for h in 0..layer.wq.len() {
            let q = feats.dot(&layer.wq[h].t());
            let k = cond.dot(&layer.wk[h].t());
            let mut a = q.dot(&k.t()) / scale;
            softmax_rows(&mut a);
            queries.push(q);
            probs.push(a);
            values.push(cond.dot(&layer.wv[h].t()));
        }
        LayerForward { features: feats, queries, probs, values }
    }

    fn self_probs(&self, layer: &LayerParams, feats: &Array2<f64>) -> Vec<Array2<f64>> {
        let scale = (self.config.head_dim as f64).sqrt();
        (0..layer.sq.len())
            .map(|h| {
                let q = feats.dot(&layer.sq[h].t());
                let k = feats.dot(&layer.sk[h].t());
                let mut a = q.dot(&k.t()) / scale;
                softmax_rows(&mut a);
                a
            })
            .collect()
    }

    /// Area-pools a `pixels x channels` map at resolution `r` into latent pixels.
    fn pool_to_latent(&self, out: &Array2<f64>, r: usize) -> Array2<f64> {
        let n = self.config.latent_size;
        let f = r / n;
        let mut pooled = Array2::zeros((n * n, out.ncols()));
        for (p, row) in out.rows().into_iter().enumerate() {
            let (i, j) = (p / r / f, (p % r) / f);
            let mut dst = pooled.row_mut(i * n + j);
            dst += &row;
        }
        pooled / (f * f) as f64
    }

    /// Adjoint of `pool_to_latent`.
    fn unpool_from_latent(&self, g: &Array2<f64>, r: usize) -> Array2<f64> {
        let n = self.config.latent_size;
        let f = r / n;
        let inv = 1.0 / (f * f) as f64;
        Array2::from_shape_fn((r * r, g.ncols()), |(p, ch)| g[[(p / r / f) * n + (p % r) / f, ch]] * inv)
    }

    fn latent_pixels(&self, z: &LatentCode) -> Array2<f64> {
        let n = self.config.latent_size;
        let c = self.config.channels;
        Array2::from_shape_fn((n * n, c), |(p, ch)| z.data[[ch, p / n, p % n]])
    }

    fn grad_pixels(&self, g: &Array3<f64>) -> Array2<f64> {
        let n = self.config.latent_size;
        let c = self.config.channels;
        Array2::from_shape_fn((n * n, c), |(p, ch)| g[[ch, p / n, p % n]])
    }
}

impl DiffusionBackend for SyntheticBackend {
    fn dims(&self) -> BackendDims {
        BackendDims {
            channels: self.config.channels,
            height: self.config.latent_size,
            width: self.config.latent_size,
            seq_len: self.config.seq_len,
            embed_dim: self.config.embed_dim,
            cross_resolution: self.config.cross_resolution,
            self_resolution: self.config.self_resolution,
        }
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn token_embedding(&self, token: &str) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.params.vocab_seed ^ fnv1a(token.as_bytes()));
        Array1::from_shape_simple_fn(self.config.embed_dim, || {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * self.params.embed_scale
        })
    }

    /// Causal prefix mixing: `c_i = x_i + P mean(x_0..=x_i)`.
    fn encode_tokens(&self, raw: ArrayView2<f64>) -> Array2<f64> {
        let mut out = raw.to_owned();
        let mut prefix = Array1::zeros(raw.ncols());
        for (i, x) in raw.rows().into_iter().enumerate() {
            prefix += &x;
            let mixed = self.params.text_mix.dot(&prefix) / (i + 1) as f64;
            let mut row = out.row_mut(i);
            row += &mixed;
        }
        out
    }

    fn encode_tokens_vjp(&self, raw: ArrayView2<f64>, grad: ArrayView2<f64>) -> Array2<f64> {
        let n = raw.nrows();
        let mut out = grad.to_owned();
        let mut suffix = Array1::zeros(raw.ncols());
        for j in (0..n).rev() {
            suffix.scaled_add(1.0 / (j + 1) as f64, &grad.row(j));
            let back = self.params.text_mix.t().dot(&suffix);
            let mut row = out.row_mut(j);
            row += &back;
        }
        out
    }

    fn forward(
        &self,
        z: &LatentCode,
        t: usize,
        cond: ArrayView2<f64>,
        hooks: &mut ForwardHooks<'_>,
    ) -> Result<Array3<f64>> {
        let dims = self.dims();
        check_latent(&dims, z)?;
        check_cond(&dims, cond)?;
        self.check_t(t)?;
        let n = self.config.latent_size;
        let heads = self.config.heads as f64;

        let zp = self.latent_pixels(z);
        let mut eps = zp.dot(&self.params.latent_mix.t());
        let temb = self.params.time_proj.dot(&self.time_code(t));
        let bias = self.params.time_out.dot(&temb) + self.params.cond_mean.dot(&cond.mean_axis(Axis(0)).unwrap());
        eps += &bias.view().insert_axis(Axis(0));

        for (li, layer) in self.params.layers.iter().enumerate() {
            let r = layer.resolution;
            let feats = self.features(layer, z, t);
            let mut fwd = self.cross_forward(layer, feats, cond);
            if let Some(ctrl) = hooks.controller.as_deref_mut() {
                ctrl.control(AttentionKind::Cross, li, r, &mut fwd.probs);
            }
            let mut out = Array2::zeros((r * r, self.config.channels));
            for (a, v) in fwd.probs.iter().zip(&fwd.values) {
                out += &a.dot(v);
            }
            out /= heads;
            eps += &self.pool_to_latent(&out, r);
            if hooks.record {
                hooks.records.push(AttentionRecord {
                    kind: AttentionKind::Cross,
                    layer: li,
                    resolution: r,
                    heads: fwd.probs.clone(),
                });
            }

            let contributes = r == n;
            if contributes || hooks.record {
                let mut sp = self.self_probs(layer, &fwd.features);
                if let Some(ctrl) = hooks.controller.as_deref_mut() {
                    ctrl.control(AttentionKind::SelfAttn, li, r, &mut sp);
                }
                if contributes {
                    let vals = fwd.features.dot(&self.params.self_value.t());
                    let mut so = Array2::zeros((r * r, self.config.channels));
                    for a in &sp {
                        so += &a.dot(&vals);
                    }
                    eps += &(so / heads);
                }
                if hooks.record {
                    hooks.records.push(AttentionRecord {
                        kind: AttentionKind::SelfAttn,
                        layer: li,
                        resolution: r,
                        heads: sp,
                    });
                }
            }
        }

        let out = Array3::from_shape_fn((self.config.channels, n, n), |(ch, i, j)| eps[[i * n + j, ch]]);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("non-finite noise prediction"));
        }
        Ok(out)
    }

    fn cross_attention(
        &self,
        z: &LatentCode,
        t: usize,
        cond: ArrayView2<f64>,
        resolution: usize,
    ) -> Result<Array2<f64>> {
        let dims = self.dims();
        check_latent(&dims, z)?;
        check_cond(&dims, cond)?;
        self.check_t(t)?;
        let mut acc: Option<Array2<f64>> = None;
        let mut count = 0usize;
        for layer in self.params.layers.iter().filter(|l| l.resolution == resolution) {
            let fwd = self.cross_forward(layer, self.features(layer, z, t), cond);
            for a in fwd.probs {
                match acc.as_mut() {
                    Some(s) => *s += &a,
                    None => acc = Some(a),
                }
                count += 1;
            }
        }
        acc.map(|a| a / count as f64)
            .ok_or_else(|| Error::NotFound(format!("no cross-attention layer at resolution {resolution}")))
    }

    fn cross_attention_vjp(
        &self,
        z: &LatentCode,
        t: usize,
        cond: ArrayView2<f64>,
        resolution: usize,
        grad: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let dims = self.dims();
        check_latent(&dims, z)?;
        check_cond(&dims, cond)?;
        self.check_t(t)?;
        let layers: Vec<&LayerParams> = self.params.layers.iter().filter(|l| l.resolution == resolution).collect();
        if layers.is_empty() {
            return Err(Error::NotFound(format!("no cross-attention layer at resolution {resolution}")));
        }
        let npix = resolution * resolution;
        if grad.dim() != (npix, dims.seq_len) {
            return Err(Error::invalid("attention gradient shape mismatch"));
        }
        let count = (layers.len() * self.config.heads) as f64;
        let scale = (self.config.head_dim as f64).sqrt();
        let upstream = grad.to_owned() / count;
        let mut dcond = Array2::zeros(cond.raw_dim());
        for layer in layers {
            let fwd = self.cross_forward(layer, self.features(layer, z, t), cond);
            for h in 0..fwd.probs.len() {
                let dlogits = softmax_rows_vjp(&fwd.probs[h], &upstream);
                let dk = dlogits.t().dot(&fwd.queries[h]) / scale;
                dcond += &dk.dot(&layer.wk[h]);
            }
        }
        Ok(dcond)
    }

    fn noise_vjp(
        &self,
        z: &LatentCode,
        t: usize,
        cond: ArrayView2<f64>,
        grad: &Array3<f64>,
    ) -> Result<Array2<f64>> {
        let dims = self.dims();
        check_latent(&dims, z)?;
        check_cond(&dims, cond)?;
        self.check_t(t)?;
        if grad.dim() != dims.latent_shape() {
            return Err(Error::invalid("noise gradient shape mismatch"));
        }
        let heads = self.config.heads as f64;
        let scale = (self.config.head_dim as f64).sqrt();
        let g8 = self.grad_pixels(grad);
        let seq = cond.nrows() as f64;

        let total = g8.sum_axis(Axis(0));
        let mean_grad = self.params.cond_mean.t().dot(&total) / seq;
        let mut dcond = Array2::zeros(cond.raw_dim());
        dcond += &mean_grad.view().insert_axis(Axis(0));

        for layer in &self.params.layers {
            let r = layer.resolution;
            let gr = self.unpool_from_latent(&g8, r) / heads;
            let fwd = self.cross_forward(layer, self.features(layer, z, t), cond);
            for h in 0..fwd.probs.len() {
                let a = &fwd.probs[h];
                let dv = a.t().dot(&gr);
                dcond += &dv.dot(&layer.wv[h]);
                let da = gr.dot(&fwd.values[h].t());
                let dlogits = softmax_rows_vjp(a, &da);
                let dk = dlogits.t().dot(&fwd.queries[h]) / scale;
                dcond += &dk.dot(&layer.wk[h]);
            }
        }
        Ok(dcond)
    }

    fn encode_image(&self, image: &Image) -> Result<LatentCode> {
        let shape = self.dims().latent_shape();
        if image.data.dim() != shape {
            return Err(Error::invalid(format!(
                "image shape {:?} does not match {:?}",
                image.data.dim(),
                shape
            )));
        }
        Ok(LatentCode::new(image.data.clone(), 0))
    }

    fn decode_latent(&self, z: &LatentCode) -> Result<Image> {
        check_latent(&self.dims(), z)?;
        Ok(Image::new(z.data.clone()))
    }
}
