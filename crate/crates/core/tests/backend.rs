use dynprompt::backend::{encode_prompt, DiffusionBackend, ForwardHooks, LatentCode, SyntheticBackend, SyntheticConfig};
use dynprompt::bgmask::BackgroundMask;
use dynprompt::dpl::{token_loss_and_grad, DynamicTokenSet, GaussianSmoother, LossWeights};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        seed,
        channels: 4,
        latent_size: 4,
        embed_dim: 8,
        seq_len: 6,
        hidden_dim: 8,
        heads: 2,
        head_dim: 4,
        resolutions: vec![4, 8],
        cross_resolution: 8,
        self_resolution: 8,
        steps: 10,
        ..SyntheticConfig::default()
    }
}

fn random_latent(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, t: usize) -> LatentCode {
    let n = cfg.latent_size;
    LatentCode::new(Array3::from_shape_simple_fn((cfg.channels, n, n), || rng.random_range(-1.5..1.5)), t)
}

fn random_matrix(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-scale..scale))
}

fn softmax(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Scalar-loop re-implementation of the synthetic denoiser.
fn naive_forward(b: &SyntheticBackend, z: &LatentCode, t: usize, cond: &Array2<f64>) -> Array3<f64> {
    let cfg = b.config();
    let p = b.params();
    let (c, n, hid, dk, heads) = (cfg.channels, cfg.latent_size, cfg.hidden_dim, cfg.head_dim, cfg.heads);
    let seq = cond.nrows();
    let code = b.time_code(t);
    let mut temb = vec![0.0; hid];
    for i in 0..hid {
        for j in 0..hid {
            temb[i] += p.time_proj[[i, j]] * code[j];
        }
    }
    let mut cmean = vec![0.0; cond.ncols()];
    for s in 0..seq {
        for e in 0..cond.ncols() {
            cmean[e] += cond[[s, e]] / seq as f64;
        }
    }
    let mut eps = Array3::<f64>::zeros((c, n, n));
    for ch in 0..c {
        let mut bias = 0.0;
        for j in 0..hid {
            bias += p.time_out[[ch, j]] * temb[j];
        }
        for e in 0..cond.ncols() {
            bias += p.cond_mean[[ch, e]] * cmean[e];
        }
        for i in 0..n {
            for j in 0..n {
                let mut v = bias;
                for k in 0..c {
                    v += p.latent_mix[[ch, k]] * z.data[[k, i, j]];
                }
                eps[[ch, i, j]] = v;
            }
        }
    }
    for layer in &p.layers {
        let r = layer.resolution;
        let f = r / n;
        let npix = r * r;
        let mut feats = vec![vec![0.0; hid]; npix];
        for (pix, row) in feats.iter_mut().enumerate() {
            let (y, x) = (pix / r / f, (pix % r) / f);
            for (h, out) in row.iter_mut().enumerate() {
                let mut v = layer.pos[[pix, h]] + temb[h];
                for k in 0..c {
                    v += layer.up[[h, k]] * z.data[[k, y, x]];
                }
                *out = v;
            }
        }
        let mut out = vec![vec![0.0; c]; npix];
        for head in 0..heads {
            for (pix, fr) in feats.iter().enumerate() {
                let mut logits = vec![0.0; seq];
                for (s, l) in logits.iter_mut().enumerate() {
                    for d in 0..dk {
                        let mut q = 0.0;
                        for h in 0..hid {
                            q += layer.wq[head][[d, h]] * fr[h];
                        }
                        let mut kk = 0.0;
                        for e in 0..cond.ncols() {
                            kk += layer.wk[head][[d, e]] * cond[[s, e]];
                        }
                        *l += q * kk;
                    }
                    *l /= (dk as f64).sqrt();
                }
                softmax(&mut logits);
                for ch in 0..c {
                    for s in 0..seq {
                        let mut v = 0.0;
                        for e in 0..cond.ncols() {
                            v += layer.wv[head][[ch, e]] * cond[[s, e]];
                        }
                        out[pix][ch] += logits[s] * v / heads as f64;
                    }
                }
            }
        }
        for (pix, o) in out.iter().enumerate() {
            let (y, x) = (pix / r / f, (pix % r) / f);
            for ch in 0..c {
                eps[[ch, y, x]] += o[ch] / (f * f) as f64;
            }
        }
        if r == n {
            for head in 0..heads {
                for (pix, fr) in feats.iter().enumerate() {
                    let mut logits = vec![0.0; npix];
                    for (o, l) in logits.iter_mut().enumerate() {
                        for d in 0..dk {
                            let (mut q, mut k) = (0.0, 0.0);
                            for h in 0..hid {
                                q += layer.sq[head][[d, h]] * fr[h];
                                k += layer.sk[head][[d, h]] * feats[o][h];
                            }
                            *l += q * k;
                        }
                        *l /= (dk as f64).sqrt();
                    }
                    softmax(&mut logits);
                    for ch in 0..c {
                        let mut v = 0.0;
                        for (o, a) in logits.iter().enumerate() {
                            let mut val = 0.0;
                            for h in 0..hid {
                                val += p.self_value[[ch, h]] * feats[o][h];
                            }
                            v += a * val;
                        }
                        eps[[ch, pix / r, pix % r]] += v / heads as f64;
                    }
                }
            }
        }
    }
    eps
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn forward_matches_loop_oracle() {
    for seed in 0..4 {
        let cfg = small_config(seed);
        let b = SyntheticBackend::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cond = random_matrix(&mut rng, (cfg.seq_len, cfg.embed_dim), 1.0);
        for t in [0, 3, 10] {
            let z = random_latent(&mut rng, &cfg, t);
            let fast = b.forward(&z, t, cond.view(), &mut ForwardHooks::default()).unwrap();
            let slow = naive_forward(&b, &z, t, &cond);
            let err = (&fast - &slow).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10, "seed {seed} t {t}: {err}");
        }
    }
}

#[test]
fn recorded_attention_rows_are_distributions() {
    let cfg = small_config(1);
    let b = SyntheticBackend::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cond = random_matrix(&mut rng, (cfg.seq_len, cfg.embed_dim), 1.0);
    let z = random_latent(&mut rng, &cfg, 5);
    let mut hooks = ForwardHooks::recording();
    b.forward(&z, 5, cond.view(), &mut hooks).unwrap();
    assert!(!hooks.records.is_empty());
    for rec in &hooks.records {
        for h in &rec.heads {
            for row in h.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}

#[test]
fn encode_tokens_vjp_matches_finite_differences() {
    let cfg = small_config(2);
    let b = SyntheticBackend::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw = random_matrix(&mut rng, (cfg.seq_len, cfg.embed_dim), 1.0);
    let g = random_matrix(&mut rng, (cfg.seq_len, cfg.embed_dim), 1.0);
    let analytic = b.encode_tokens_vjp(raw.view(), g.view());
    let f = |x: &Array2<f64>| (b.encode_tokens(x.view()) * &g).sum();
    let eps = 1e-4;
    for i in 0..raw.nrows() {
        for j in 0..raw.ncols() {
            let (mut p, mut m) = (raw.clone(), raw.clone());
            p[[i, j]] += eps;
            m[[i, j]] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            assert!(rel_err(fd, analytic[[i, j]]) < 1e-3 || (fd - analytic[[i, j]]).abs() < 1e-9);
        }
    }
}

#[test]
fn cross_attention_vjp_matches_finite_differences() {
    let cfg = small_config(3);
    let b = SyntheticBackend::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cond = random_matrix(&mut rng, (cfg.seq_len, cfg.embed_dim), 1.0);
    let z = random_latent(&mut rng, &cfg, 4);
    let res = cfg.cross_resolution;
    let g = random_matrix(&mut rng, (res * res, cfg.seq_len), 1.0);
    let analytic = b.cross_attention_vjp(&z, 4, cond.view(), res, g.view()).unwrap();
    let f = |c: &Array2<f64>| (b.cross_attention(&z, 4, c.view(), res).unwrap() * &g).sum();
    let eps = 1e-4;
    for i in 0..cond.nrows() {
        for j in 0..cond.ncols() {
            let (mut p, mut m) = (cond.clone(), cond.clone());
            p[[i, j]] += eps;
            m[[i, j]] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            let a = analytic[[i, j]];
            assert!(rel_err(fd, a) < 1e-3 || (fd - a).abs() < 1e-9, "({i},{j}) fd {fd} analytic {a}");
        }
    }
}

#[test]
fn noise_vjp_matches_finite_differences() {
    let cfg = small_config(4);
    let b = SyntheticBackend::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cond = random_matrix(&mut rng, (cfg.seq_len, cfg.embed_dim), 1.0);
    let z = random_latent(&mut rng, &cfg, 7);
    let n = cfg.latent_size;
    let g = Array3::from_shape_simple_fn((cfg.channels, n, n), || rng.random_range(-1.0..1.0));
    let analytic = b.noise_vjp(&z, 7, cond.view(), &g).unwrap();
    let f = |c: &Array2<f64>| (b.forward(&z, 7, c.view(), &mut ForwardHooks::default()).unwrap() * &g).sum();
    let eps = 1e-4;
    for i in 0..cond.nrows() {
        for j in 0..cond.ncols() {
            let (mut p, mut m) = (cond.clone(), cond.clone());
            p[[i, j]] += eps;
            m[[i, j]] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            let a = analytic[[i, j]];
            assert!(rel_err(fd, a) < 1e-3 || (fd - a).abs() < 1e-9, "({i},{j}) fd {fd} analytic {a}");
        }
    }
}

#[test]
fn total_loss_gradient_through_tokens() {
    let cfg = small_config(5);
    let b = SyntheticBackend::new(cfg.clone()).unwrap();
    let nouns = vec!["cat".to_string(), "dog".to_string()];
    let prompt = encode_prompt(&b, "a cat and dog", &nouns, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = random_latent(&mut rng, &cfg, 6);
    let res = cfg.cross_resolution;
    let mask = BackgroundMask::from_bools(Array2::from_shape_fn((res, res), |(i, j)| i < 3 || j < 2)).unwrap();
    let smoother = GaussianSmoother::new(3, 0.5).unwrap();
    let weights = LossWeights::default();
    let tokens = DynamicTokenSet::from_stock(&prompt, 6).unwrap();
    let (_, analytic) = token_loss_and_grad(&b, &z, 6, &prompt, &tokens, Some(&mask), &weights, &smoother).unwrap();
    let positions = tokens.positions();
    let base = tokens.to_matrix();
    let loss = |m: &Array2<f64>| {
        let set = DynamicTokenSet::from_matrix(&positions, m, 6).unwrap();
        token_loss_and_grad(&b, &z, 6, &prompt, &set, Some(&mask), &weights, &smoother).unwrap().0.total
    };
    let eps = 1e-4;
    let mut worst = 0.0f64;
    for i in 0..base.nrows() {
        for j in 0..base.ncols() {
            let (mut p, mut m) = (base.clone(), base.clone());
            p[[i, j]] += eps;
            m[[i, j]] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            let a = analytic[[i, j]];
            if (fd - a).abs() > 1e-9 {
                worst = worst.max(rel_err(fd, a));
            }
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}
