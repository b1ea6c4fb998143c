mod common;

use dynprompt::archive::NamedArrayArchive;
use dynprompt::backend::{encode_prompt, DiffusionBackend};
use dynprompt::dpl::{run_dpl, DplConfig, DplRun, LossWeights};
use dynprompt::eval::{iou_curve, DEFAULT_IOU_STEPS};
use dynprompt::inversion::ddim_sample;

fn iou_at_half(run: &DplRun) -> Vec<f64> {
    let s = common::scene();
    run.mean_noun_maps()
        .unwrap()
        .iter()
        .zip(&s.object_masks)
        .map(|(m, g)| iou_curve(&m.map, g, DEFAULT_IOU_STEPS).unwrap().at(0.5))
        .collect()
}

#[test]
fn every_inner_loop_ends_below_threshold_or_at_the_cap() {
    let run = common::dpl_run();
    let cfg = DplConfig::default();
    assert_eq!(run.reports.len(), run.steps());
    for r in &run.reports {
        assert!(r.iterations <= cfg.tokens.max_iters);
        assert!(r.final_losses.below(&r.thresholds) || r.hit_cap, "t={}", r.t);
    }
    if run.cap_hits() > 0 {
        assert!(run.warnings.iter().any(|w| w.contains("cap")), "{:?}", run.warnings);
    }
}

#[test]
fn learned_tokens_sharpen_noun_attention() {
    let before = iou_at_half(common::baseline_run());
    let after = iou_at_half(common::dpl_run());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&after) > mean(&before), "before {before:?} after {after:?}");
    for (a, b) in after.iter().zip(&before) {
        assert!(a >= b, "before {before:?} after {after:?}");
    }
}

#[test]
fn estimated_background_matches_the_scene() {
    let run = common::dpl_run();
    let s = common::scene();
    assert_eq!(run.mask.as_ref().unwrap().mask, s.background);
}

#[test]
fn baseline_keeps_stock_tokens() {
    let run = common::baseline_run();
    let s = common::scene();
    let stock = encode_prompt(&s.backend, &s.prompt, &s.nouns, None).unwrap();
    for v in &run.tokens {
        for (&p, e) in &v.tokens {
            assert_eq!(e, &stock.token_embeddings.row(p).to_owned());
        }
    }
    assert!(run.reports.iter().all(|r| r.iterations == 0));
}

#[test]
fn disabled_learning_reduces_to_guided_ddim() {
    let s = common::scene();
    let mut cfg = DplConfig::default().without_token_learning();
    cfg.nti.inner_steps = 0;
    let run = run_dpl(&s.backend, &s.image, &s.prompt, &s.nouns, &cfg).unwrap();
    let cond = encode_prompt(&s.backend, &s.prompt, &s.nouns, None).unwrap();
    let null = s.backend.null_embedding().unwrap();
    let plain = ddim_sample(&s.backend, run.z_bar_t(), cond.embeddings.view(), null.view(), cfg.guidance).unwrap();
    for (a, b) in run.reconstruction.iter().zip(&plain) {
        let err = (&a.data - &b.data).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12, "t={}: {err}", a.timestep);
    }
}

#[test]
fn archive_round_trip_preserves_the_run() {
    let run = common::dpl_run();
    let bytes = run.to_archive().unwrap().to_bytes().unwrap();
    let back = DplRun::from_archive(&NamedArrayArchive::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.summary(), run.summary());
    assert_eq!(back.mask, run.mask);
    assert_eq!(back.clusters, run.clusters);
    assert_eq!(back.steps(), run.steps());
    let close = |a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>| {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6 * (1.0 + y.abs()))
    };
    for t in 1..=run.steps() {
        assert!(close(back.nulls.at(t), run.nulls.at(t)));
        assert!(close(&back.tokens[t - 1].to_matrix(), &run.tokens[t - 1].to_matrix()));
    }
    back.check_backend(&common::scene().backend).unwrap();
}

#[test]
fn invalid_configs_are_rejected() {
    let s = common::scene();
    let mut cfg = DplConfig::default();
    cfg.tokens.weights = LossWeights { lambda_at: 0.0, lambda_dj: 0.0, lambda_bg: 0.0 };
    assert!(run_dpl(&s.backend, &s.image, &s.prompt, &s.nouns, &cfg).is_err());
    let missing = vec!["horse".to_string()];
    assert!(run_dpl(&s.backend, &s.image, &s.prompt, &missing, &DplConfig::default()).is_err());
}
