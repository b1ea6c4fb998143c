//! Browser bindings for the demo page: threshold schedules, background
//! estimation on a planted scene, and attention before/after token learning.
//!
//! Everything is plain Rust underneath so the logic is testable natively.

use dynprompt::attention::TokenAttention;
use dynprompt::backend::SyntheticConfig;
use dynprompt::bgmask::{cluster_self_attention, estimate_background, ClusterOptions};
use dynprompt::dpl::{run_dpl, DplConfig, ThresholdSchedule};
use dynprompt::eval::{iou_curve, DEFAULT_IOU_STEPS};
use dynprompt::fixture::{two_object_scene, SceneConfig};
use ndarray::Array2;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Thresholds for `t = 1..=steps`, laid out as `[at..., dj..., bg...]`.
pub fn threshold_table(beta: [f64; 3], alpha: f64, steps: usize) -> dynprompt::Result<Vec<f64>> {
    let s = ThresholdSchedule {
        beta_at: beta[0],
        beta_dj: beta[1],
        beta_bg: beta[2],
        alpha_at: alpha,
        alpha_dj: alpha,
        alpha_bg: alpha,
        ..ThresholdSchedule::default()
    };
    s.validate()?;
    let rows: Vec<_> = (1..=steps).map(|t| s.at(t, steps)).collect();
    Ok(rows.iter().map(|r| r.at).chain(rows.iter().map(|r| r.dj)).chain(rows.iter().map(|r| r.bg)).collect())
}

#[wasm_bindgen(js_name = thresholdCurves)]
pub fn threshold_curves(beta_at: f64, beta_dj: f64, beta_bg: f64, alpha: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    threshold_table([beta_at, beta_dj, beta_bg], alpha, steps).map_err(js_err)
}

/// Square object on a `res` grid, as a half-open box.
#[derive(Debug, Clone, Copy)]
struct Square {
    r: usize,
    c: usize,
    size: usize,
}

impl Square {
    fn contains(&self, i: usize, j: usize) -> bool {
        (self.r..self.r + self.size).contains(&i) && (self.c..self.c + self.size).contains(&j)
    }
}

/// Planted scene: two objects over a background split into three bands.
/// Region ids: 0..3 background bands, 3 and 4 the objects.
fn planted_regions(res: usize, objects: &[Square; 2]) -> Array2<usize> {
    Array2::from_shape_fn((res, res), |(i, j)| match objects.iter().position(|o| o.contains(i, j)) {
        Some(k) => 3 + k,
        None => (i * 3 / res).min(2),
    })
}

/// Background estimate on a planted scene.
#[wasm_bindgen]
pub struct BackgroundDemo {
    res: usize,
    labels: Vec<u8>,
    mask: Vec<u8>,
    truth: Vec<u8>,
    scores: Vec<f64>,
    iou: f64,
}

impl BackgroundDemo {
    fn build(res: usize, noise: f64, leak: f64, th: f64, seed: u64) -> dynprompt::Result<Self> {
        use rand::{Rng, SeedableRng};
        if !(8..=24).contains(&res) {
            return Err(dynprompt::Error::InvalidArgument("resolution must be in 8..=24".into()));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let size = res / 3;
        let objects = [Square { r: res / 8 + size / 2, c: res / 8, size }, Square { r: res / 2, c: res / 2 + 1, size }];
        let regions = planted_regions(res, &objects);
        let flat: Vec<usize> = regions.iter().copied().collect();
        let n = flat.len();
        let mut attn = Array2::from_shape_fn((n, n), |(p, q)| if flat[p] == flat[q] { 1.0 } else { 0.0 });
        attn.mapv_inplace(|v| v + rng.random_range(0.0..noise.max(1e-6)));
        for mut row in attn.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let opts = ClusterOptions { seed, ..ClusterOptions::default() };
        let (labels, _) = cluster_self_attention(attn.view(), res, &opts)?;
        let maps: Vec<TokenAttention> = (0..2)
            .map(|k| TokenAttention {
                map: regions.mapv(|r| if r == 3 + k { rng.random_range(0.7..1.0) } else { rng.random_range(0.0..leak.max(1e-6)) }),
                token_position: k + 1,
            })
            .collect();
        let est = estimate_background(&labels, &maps, th)?;
        let truth = regions.mapv(|r| r < 3);
        let inter = est.mask.mask.iter().zip(&truth).filter(|(a, b)| **a && **b).count();
        let union = est.mask.mask.iter().zip(&truth).filter(|(a, b)| **a || **b).count();
        Ok(Self {
            res,
            labels: labels.labels.iter().map(|&l| l as u8).collect(),
            mask: est.mask.mask.iter().map(|&b| u8::from(b)).collect(),
            truth: truth.iter().map(|&b| u8::from(b)).collect(),
            scores: est.scores.concat(),
            iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        })
    }
}

#[wasm_bindgen]
impl BackgroundDemo {
    /// `noise` blurs the planted self-attention; `leak` spreads noun
    /// attention over the background; `th` is the agreement threshold.
    #[wasm_bindgen(constructor)]
    pub fn new(res: usize, noise: f64, leak: f64, th: f64, seed: u64) -> Result<BackgroundDemo, JsError> {
        Self::build(res, noise, leak, th, seed).map_err(js_err)
    }


    #[wasm_bindgen(getter)]
    pub fn res(&self) -> usize {
        self.res
    }

    /// Cluster id per pixel, row-major.
    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }

    pub fn mask(&self) -> Vec<u8> {
        self.mask.clone()
    }

    pub fn truth(&self) -> Vec<u8> {
        self.truth.clone()
    }

    /// Agreement per noun and cluster, noun-major.
    pub fn scores(&self) -> Vec<f64> {
        self.scores.clone()
    }

    /// Overlap of the estimate with the planted background.
    #[wasm_bindgen(getter)]
    pub fn iou(&self) -> f64 {
        self.iou
    }
}

/// Step-averaged noun attention without and with token learning on the
/// planted two-object scene.
#[wasm_bindgen]
pub struct DplDemo {
    res: usize,
    nouns: Vec<String>,
    before: Vec<Array2<f64>>,
    after: Vec<Array2<f64>>,
    iou_before: Vec<f64>,
    iou_after: Vec<f64>,
}

impl DplDemo {
    fn build(leak: f64, steps: usize) -> dynprompt::Result<Self> {
        let cfg = SceneConfig { leak, backend: SyntheticConfig { steps, ..SyntheticConfig::default() }, ..SceneConfig::default() };
        let scene = two_object_scene(&cfg)?;
        let dpl = DplConfig::default();
        let mut maps = Vec::new();
        let mut ious = Vec::new();
        for c in [dpl.without_token_learning(), dpl] {
            let run = run_dpl(&scene.backend, &scene.image, &scene.prompt, &scene.nouns, &c)?;
            let m: Vec<Array2<f64>> = run.mean_noun_maps()?.into_iter().map(|t| t.map).collect();
            let iou = m
                .iter()
                .zip(&scene.object_masks)
                .map(|(m, g)| Ok(iou_curve(m, g, DEFAULT_IOU_STEPS)?.at(0.5)))
                .collect::<dynprompt::Result<Vec<_>>>()?;
            maps.push(m);
            ious.push(iou);
        }
        let after = maps.pop().expect("two runs");
        let before = maps.pop().expect("two runs");
        let iou_after = ious.pop().expect("two runs");
        let iou_before = ious.pop().expect("two runs");
        Ok(Self { res: cfg.backend.cross_resolution, nouns: scene.nouns, before, after, iou_before, iou_after })
    }
}

#[wasm_bindgen]
impl DplDemo {
    /// `leak` mixes the first noun into the second object; `steps` is the
    /// sampler length.
    #[wasm_bindgen(constructor)]
    pub fn new(leak: f64, steps: usize) -> Result<DplDemo, JsError> {
        Self::build(leak, steps).map_err(js_err)
    }


    #[wasm_bindgen(getter)]
    pub fn res(&self) -> usize {
        self.res
    }

    #[wasm_bindgen(getter)]
    pub fn nouns(&self) -> Vec<String> {
        self.nouns.clone()
    }

    /// Noun map, row-major, min-max scaled to `[0, 1]`.
    pub fn map(&self, noun: usize, learned: bool) -> Vec<f64> {
        let maps = if learned { &self.after } else { &self.before };
        maps.get(noun).map_or_else(Vec::new, |m| dynprompt::attention::min_max_normalize(m).iter().copied().collect())
    }

    /// IoU at threshold 0.5 against the planted object.
    pub fn iou(&self, noun: usize, learned: bool) -> f64 {
        let v = if learned { &self.iou_after } else { &self.iou_before };
        v.get(noun).copied().unwrap_or(f64::NAN)
    }
}
