mod common;

use dynprompt::attention::CrossAttentionMap;
use dynprompt::backend::{SyntheticBackend, SyntheticConfig};
use dynprompt::edit::{edit_image, inject_cross_attention, EditMode, EditPlan, EditSpec};
use dynprompt::Error;
use ndarray::Array2;

fn map(values: Array2<f64>) -> CrossAttentionMap {
    CrossAttentionMap { values, resolution: 2, timestep: 0, normalized: true }
}

fn random_rows(seed: u64, cols: usize) -> Array2<f64> {
    let mut a = Array2::from_shape_fn((4, cols), |(i, j)| (((i * 31 + j * 17 + seed as usize * 7) % 13) + 1) as f64);
    for mut r in a.rows_mut() {
        let s = r.sum();
        r /= s;
    }
    a
}

#[test]
fn identity_edit_reproduces_the_reconstruction_exactly() {
    let s = common::scene();
    let run = common::dpl_run();
    let out = edit_image(&s.backend, run, &EditSpec::identity()).unwrap();
    assert_eq!(out.edited.data, out.reconstruction.data);
    assert_eq!(out.edited_latents, out.source_latents);
    assert_eq!(out.target_prompt, run.prompt);
}

#[test]
fn source_pass_retraces_the_learned_reconstruction() {
    let s = common::scene();
    let run = common::dpl_run();
    let out = edit_image(&s.backend, run, &EditSpec::identity()).unwrap();
    for (a, b) in out.source_latents.iter().zip(&run.reconstruction) {
        let err = (&a.data - &b.data).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9, "t={}: {err}", a.timestep);
    }
}

#[test]
fn unit_reweight_is_a_no_op() {
    let s = common::scene();
    let run = common::dpl_run();
    let words: Vec<(&str, f64)> = ["a", "cat", "and", "dog"].iter().map(|w| (*w, 1.0)).collect();
    let out = edit_image(&s.backend, run, &EditSpec::reweight(&words)).unwrap();
    assert_eq!(out.edited.data, out.reconstruction.data);
}

#[test]
fn reweight_scales_only_the_target_column_at_the_first_step() {
    let s = common::scene();
    let run = common::dpl_run();
    let out = edit_image(&s.backend, run, &EditSpec::reweight(&[("cat", 2.0)])).unwrap();
    let t = run.steps();
    let (src, dst) = (&out.source_attention[t - 1], &out.edited_attention[t - 1]);
    let cat = run.noun_positions[0];
    for j in 0..src.ncols() {
        for i in 0..src.nrows() {
            if j == cat {
                assert!((dst[[i, j]] - 2.0 * src[[i, j]]).abs() <= 1e-15 * src[[i, j]].abs().max(1.0));
            } else {
                assert_eq!(dst[[i, j]], src[[i, j]]);
            }
        }
    }
    assert_ne!(out.edited.data, out.reconstruction.data);
}

#[test]
fn word_swap_starts_from_the_shared_noise() {
    let s = common::scene();
    let run = common::dpl_run();
    let out = edit_image(&s.backend, run, &EditSpec::word_swap(&[("dog", "bird")])).unwrap();
    assert_eq!(out.target_prompt, "a cat and a bird");
    let t = run.steps();
    assert_eq!(out.edited_latents[t], out.source_latents[t]);
    assert_ne!(out.edited_latents[0], out.source_latents[0]);
    // injected cross maps keep the source layout while the window is open
    assert_eq!(out.edited_attention[t - 1], out.source_attention[t - 1]);
}

#[test]
fn refinement_runs_and_keeps_shared_columns() {
    let s = common::scene();
    let run = common::dpl_run();
    let out = edit_image(&s.backend, run, &EditSpec::refinement("outside")).unwrap();
    assert_eq!(out.target_prompt, "a cat and a dog outside");
    let t = run.steps();
    let (src, dst) = (&out.source_attention[t - 1], &out.edited_attention[t - 1]);
    // "cat" keeps its position and its source column
    assert_eq!(dst.column(2), src.column(2));
}

#[test]
fn invalid_edits_are_rejected() {
    let s = common::scene();
    let run = common::dpl_run();
    let e = edit_image(&s.backend, run, &EditSpec::word_swap(&[("horse", "bird")])).unwrap_err();
    assert!(matches!(e, Error::InvalidArgument(_)));
    let e = edit_image(&s.backend, run, &EditSpec::reweight(&[("horse", 2.0)])).unwrap_err();
    assert!(matches!(e, Error::InvalidArgument(_)));
    let short = SyntheticBackend::new(SyntheticConfig { steps: 10, ..SyntheticConfig::default() }).unwrap();
    let e = edit_image(&short, run, &EditSpec::identity()).unwrap_err();
    assert!(matches!(e, Error::InvalidArgument(_)));
}

#[test]
fn identical_prompts_with_full_window_return_the_source() {
    let b = &common::scene().backend;
    let spec = EditSpec { cross_injection_fraction: 1.0, ..EditSpec::identity() };
    let plan = EditPlan::new(b, "a red cat", &spec).unwrap();
    let (src, tgt) = (map(random_rows(1, 8)), map(random_rows(2, 8)));
    for t in 1..=50 {
        assert_eq!(inject_cross_attention(&src, &tgt, &plan, t, 50).unwrap().values, src.values);
    }
}

#[test]
fn outside_the_window_the_target_passes_through() {
    let b = &common::scene().backend;
    let plan = EditPlan::new(b, "a red cat", &EditSpec::word_swap(&[("red", "blue")])).unwrap();
    let (src, tgt) = (map(random_rows(1, 8)), map(random_rows(2, 8)));
    assert_eq!(inject_cross_attention(&src, &tgt, &plan, 10, 50).unwrap().values, tgt.values);
    assert_eq!(inject_cross_attention(&src, &tgt, &plan, 11, 50).unwrap().values, src.values);
}

#[test]
fn reweight_doubles_one_column() {
    let b = &common::scene().backend;
    let plan = EditPlan::new(b, "a red cat", &EditSpec::reweight(&[("cat", 2.0)])).unwrap();
    let src = map(random_rows(3, 8));
    let out = inject_cross_attention(&src, &src, &plan, 50, 50).unwrap().values;
    for j in 0..8 {
        let want = if j == 3 { &src.values.column(j) * 2.0 } else { src.values.column(j).to_owned() };
        assert_eq!(out.column(j), want);
    }
}

#[test]
fn renormalized_reweight_keeps_rows_stochastic() {
    let b = &common::scene().backend;
    let spec = EditSpec { renormalize: true, ..EditSpec::reweight(&[("cat", 3.0)]) };
    let plan = EditPlan::new(b, "a red cat", &spec).unwrap();
    let src = map(random_rows(4, 8));
    let out = inject_cross_attention(&src, &src, &plan, 50, 50).unwrap().values;
    for r in out.rows() {
        assert!((r.sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn refinement_alignment_matches_hand_oracle() {
    let b = &common::scene().backend;
    let plan = EditPlan::new(b, "a cat", &EditSpec::refinement("sleeping")).unwrap();
    assert_eq!(plan.mode, EditMode::Refinement);
    // source: bos a cat eos eos eos eos eos
    // target: bos a cat sleeping eos eos eos eos
    let want = vec![Some(0), Some(1), Some(2), None, Some(3), Some(4), Some(5), Some(6)];
    assert_eq!(plan.alignment, want);
    let (src, tgt) = (map(random_rows(5, 8)), map(random_rows(6, 8)));
    let out = inject_cross_attention(&src, &tgt, &plan, 50, 50).unwrap().values;
    for (j, a) in want.iter().enumerate() {
        match a {
            Some(i) => assert_eq!(out.column(j), src.values.column(*i)),
            None => assert_eq!(out.column(j), tgt.values.column(j)),
        }
    }
}

#[test]
fn misaligned_maps_are_rejected() {
    let b = &common::scene().backend;
    let plan = EditPlan::new(b, "a red cat", &EditSpec::identity()).unwrap();
    let e = inject_cross_attention(&map(random_rows(1, 8)), &map(random_rows(1, 5)), &plan, 50, 50);
    assert!(e.is_err());
}
