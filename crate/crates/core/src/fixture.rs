//! Synthetic two-object scene with planted attention leakage and known
//! object and background masks.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backend::{encode_prompt, Image, LatentCode, SyntheticBackend, SyntheticConfig};
use crate::error::{Error, Result};

/// Half-open box `[r0, r1) x [c0, c1)` in latent pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl Region {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..self.r1).contains(&r) && (self.c0..self.c1).contains(&c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub backend: SyntheticConfig,
    pub prompt: String,
    pub nouns: Vec<String>,
    /// One box per noun.
    pub objects: Vec<Region>,
    /// Latent norm of object pixels.
    pub object_scale: f64,
    pub background_scale: f64,
    /// How much of the first noun's direction is mixed into each later object.
    pub leak: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            backend: SyntheticConfig::default(),
            prompt: "a cat and a dog".into(),
            nouns: vec!["cat".into(), "dog".into()],
            objects: vec![Region { r0: 1, r1: 4, c0: 1, c1: 4 }, Region { r0: 4, r1: 7, c0: 4, c1: 7 }],
            object_scale: 3.0,
            background_scale: 3.0,
            leak: 0.7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub backend: SyntheticBackend,
    pub prompt: String,
    pub nouns: Vec<String>,
    pub image: Image,
    /// Per-noun object masks at the cross-attention resolution.
    pub object_masks: Vec<Array2<bool>>,
    /// Pixels outside every object, at the cross-attention resolution.
    pub background: Array2<bool>,
}

impl Scene {
    pub fn latent(&self) -> LatentCode {
        LatentCode::new(self.image.data.clone(), 0)
    }

    /// Background at an arbitrary multiple of the latent size.
    pub fn background_at(&self, resolution: usize) -> Array2<bool> {
        let r = self.background.nrows();
        Array2::from_shape_fn((resolution, resolution), |(i, j)| self.background[[i * r / resolution, j * r / resolution]])
    }
}

fn unit(v: Array1<f64>) -> Result<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if !(n > 1e-12) {
        return Err(Error::degenerate("scene direction has zero norm"));
    }
    Ok(v / n)
}

/// Latent directions that raise each token's cross-attention logit at the
/// cross resolution, relative to the mean token. One row per token.
pub fn token_directions(backend: &SyntheticBackend, cond: &Array2<f64>) -> Array2<f64> {
    let cfg = backend.config();
    let layer = backend
        .params()
        .layers
        .iter()
        .find(|l| l.resolution == cfg.cross_resolution)
        .expect("validated: cross layer exists");
    let scale = (cfg.head_dim as f64).sqrt() * layer.wq.len() as f64;
    let mut g = Array2::zeros((cond.nrows(), cfg.channels));
    for h in 0..layer.wq.len() {
        // logit_pj = z_p . (U^T Wq^T Wk c_j) / sqrt(d) + terms independent of z
        let m = layer.up.t().dot(&layer.wq[h].t()).dot(&layer.wk[h]);
        g += &(cond.dot(&m.t()) / scale);
    }
    let mean = g.mean_axis(ndarray::Axis(0)).expect("non-empty");
    g - &mean
}

pub fn two_object_scene(cfg: &SceneConfig) -> Result<Scene> {
    if cfg.objects.len() != cfg.nouns.len() {
        return Err(Error::invalid("need one object region per noun"));
    }
    let backend = SyntheticBackend::new(cfg.backend.clone())?;
    let n = cfg.backend.latent_size;
    if cfg.objects.iter().any(|o| o.r1 > n || o.c1 > n || o.r0 >= o.r1 || o.c0 >= o.c1) {
        return Err(Error::invalid("object region outside the latent grid"));
    }
    let seq = encode_prompt(&backend, &cfg.prompt, &cfg.nouns, None)?;
    let dirs = token_directions(&backend, &seq.embeddings);
    let noun_dirs =
        seq.noun_positions.iter().map(|&p| unit(dirs.row(p).to_owned())).collect::<Result<Vec<_>>>()?;

    let mut object_latents = Vec::with_capacity(noun_dirs.len());
    for (k, d) in noun_dirs.iter().enumerate() {
        let v = if k == 0 { d.clone() } else { unit(d + &(&noun_dirs[0] * cfg.leak))? };
        object_latents.push(v * cfg.object_scale);
    }
    let away = noun_dirs.iter().fold(Array1::zeros(cfg.backend.channels), |acc, d| acc - d);
    let bg = unit(away)? * cfg.background_scale;

    let mut z = Array3::zeros((cfg.backend.channels, n, n));
    for r in 0..n {
        for c in 0..n {
            let v = cfg.objects.iter().position(|o| o.contains(r, c)).map_or(&bg, |k| &object_latents[k]);
            for ch in 0..cfg.backend.channels {
                z[[ch, r, c]] = v[ch];
            }
        }
    }

    let res = cfg.backend.cross_resolution;
    let f = res / n;
    let object_masks: Vec<Array2<bool>> = cfg
        .objects
        .iter()
        .map(|o| Array2::from_shape_fn((res, res), |(i, j)| o.contains(i / f, j / f)))
        .collect();
    let background = Array2::from_shape_fn((res, res), |(i, j)| !object_masks.iter().any(|m| m[[i, j]]));
    Ok(Scene {
        backend,
        prompt: cfg.prompt.clone(),
        nouns: cfg.nouns.clone(),
        image: Image::new(z),
        object_masks,
        background,
    })
}
