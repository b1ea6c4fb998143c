use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use dynprompt::archive::NamedArrayArchive;
use dynprompt_cli::commands::eval::EvalReport;
use dynprompt_cli::manifest::RunManifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dynprompt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn dynprompt")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

struct Fixture {
    dir: PathBuf,
    elapsed: Duration,
}

impl Fixture {
    fn scene(&self) -> PathBuf {
        self.dir.join("scene.safetensors")
    }
    fn archive(&self) -> PathBuf {
        self.dir.join("run/run.safetensors")
    }
}

/// Synthetic scene plus one invert run, shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = scratch("fixture");
        ok(&["synth-scene", "--out", s(&dir)]);
        let start = Instant::now();
        invert(&dir, &dir.join("run"), &[]);
        Fixture { elapsed: start.elapsed(), dir }
    })
}

fn invert(scene_dir: &Path, out: &Path, extra: &[&str]) -> RunManifest {
    let image = scene_dir.join("scene.safetensors");
    let config = scene_dir.join("run.toml");
    let mut args = vec![
        "invert", "--image", s(&image), "--prompt", "a cat and a dog", "--nouns", "cat,dog", "--config", s(&config),
        "--out", s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    RunManifest::read(&out.join("manifest.json")).unwrap()
}

#[test]
fn smoke_run_is_fast_and_complete() {
    let f = fixture();
    assert!(f.elapsed < Duration::from_secs(60), "{:?}", f.elapsed);
    let m = RunManifest::read(&f.dir.join("run/manifest.json")).unwrap();
    assert_eq!(m.nouns, vec!["cat", "dog"]);
    assert_eq!(m.loss_curves.null_loss.len(), 50);
    for o in m.outputs.values() {
        assert!(Path::new(&o.path).is_file());
    }
    assert_eq!(m.manifest_hash, m.compute_hash().unwrap());
}

#[test]
fn missing_noun_exits_with_usage_code() {
    let f = fixture();
    let out = run(&["invert", "--image", s(&f.scene()), "--prompt", "a cat", "--nouns", "horse", "--out", s(&scratch("horse"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rerun_with_same_seed_hashes_the_same() {
    let f = fixture();
    let first = RunManifest::read(&f.dir.join("run/manifest.json")).unwrap();
    let again = invert(&f.dir, &scratch("rerun"), &[]);
    assert_eq!(first.manifest_hash, again.manifest_hash);
    assert_eq!(first.outputs["archive"].sha256, again.outputs["archive"].sha256);
}

#[test]
fn flags_override_the_config_file() {
    let f = fixture();
    let dir = scratch("precedence");
    let cfg = dir.join("c.toml");
    let base = std::fs::read_to_string(f.dir.join("run.toml")).unwrap();
    std::fs::write(&cfg, base.replacen("seed = 0", "seed = 5", 1)).unwrap();
    let scene = f.scene();
    let common = ["invert", "--image", s(&scene), "--prompt", "a cat and a dog", "--nouns", "cat,dog", "--config", s(&cfg)];
    let file_only = dir.join("a");
    ok(&[&common[..], &["--nti-steps", "0", "--out", s(&file_only)]].concat());
    let m = RunManifest::read(&file_only.join("manifest.json")).unwrap();
    assert_eq!(m.seeds.run, 5);
    assert_eq!(m.config["dpl"]["nti"]["inner_steps"], 0);
    assert_eq!(m.config["dpl"]["tokens"]["max_iters"], 20);
    let flagged = dir.join("b");
    ok(&[&common[..], &["--seed", "7", "--max-iters", "3", "--nti-steps", "0", "--out", s(&flagged)]].concat());
    let m = RunManifest::read(&flagged.join("manifest.json")).unwrap();
    assert_eq!(m.seeds.run, 7);
    assert_eq!(m.config["dpl"]["tokens"]["max_iters"], 3);
    assert_eq!(m.config["dpl"]["background"]["cluster"]["seed"], 7);
}

#[test]
fn identity_edit_reproduces_the_reconstruction() {
    let f = fixture();
    let out = scratch("identity");
    ok(&["edit", "--archive", s(&f.archive()), "--out", s(&out)]);
    let ar = NamedArrayArchive::read(out.join("edit.safetensors")).unwrap();
    assert_eq!(ar.raw("edited").unwrap(), ar.raw("reconstruction").unwrap());
    assert_eq!(std::fs::read(out.join("edited.png")).unwrap(), std::fs::read(out.join("reconstruction.png")).unwrap());
}

#[test]
fn bad_archive_exits_with_usage_code() {
    let dir = scratch("bad");
    let junk = dir.join("junk.safetensors");
    std::fs::write(&junk, b"not an archive").unwrap();
    assert_eq!(run(&["edit", "--archive", s(&junk), "--out", s(&dir.join("o"))]).status.code(), Some(2));
    assert_eq!(run(&["viz", "--archive", s(&junk), "--out", s(&dir.join("o"))]).status.code(), Some(2));
    let missing = dir.join("nope.safetensors");
    assert_eq!(run(&["edit", "--archive", s(&missing), "--out", s(&dir.join("o"))]).status.code(), Some(2));
}

#[test]
fn word_swap_outputs_are_byte_stable() {
    let f = fixture();
    let dir = scratch("swap");
    let spec = dir.join("swap.toml");
    std::fs::write(&spec, "mode = \"word_swap\"\n[swap_map]\ndog = \"bird\"\n").unwrap();
    let mut manifests = Vec::new();
    for k in 0..2 {
        let out = dir.join(k.to_string());
        ok(&["edit", "--archive", s(&f.archive()), "--edit-config", s(&spec), "--out", s(&out)]);
        manifests.push(RunManifest::read(&out.join("edit_manifest.json")).unwrap());
    }
    assert_eq!(manifests[0].prompt, "a cat and a bird");
    assert_eq!(manifests[0].manifest_hash, manifests[1].manifest_hash);
    for (k, o) in &manifests[0].outputs {
        assert_eq!(o.sha256, manifests[1].outputs[k].sha256, "{k}");
    }
    assert_ne!(manifests[0].outputs["edited"].sha256, manifests[0].outputs["reconstruction"].sha256);
}

#[test]
fn attention_grid_is_nouns_by_timesteps() {
    let f = fixture();
    let out = scratch("grid");
    ok(&["viz", "--archive", s(&f.archive()), "--timesteps", "50,25,1", "--scale", "3", "--out", s(&out)]);
    let img = image::open(out.join("attention_grid.png")).unwrap();
    let ar = NamedArrayArchive::read(f.archive()).unwrap();
    let res = dynprompt::dpl::DplRun::from_archive(&ar).unwrap().cross_resolution as u32;
    assert_eq!((img.width(), img.height()), (3 * res * 3, 2 * res * 3));
}

#[test]
fn empty_timestep_selection_exits_with_usage_code() {
    let f = fixture();
    let out = scratch("empty");
    for sel in ["", "0", "51"] {
        let o = run(&["viz", "--archive", s(&f.archive()), "--timesteps", sel, "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(2), "{sel:?}");
    }
}

#[test]
fn overlay_paints_one_block_per_mask_cell() {
    let f = fixture();
    let out = scratch("overlay");
    ok(&["viz", "--archive", s(&f.archive()), "--scale", "5", "--out", s(&out)]);
    let ar = NamedArrayArchive::read(f.archive()).unwrap();
    let popcount = ar.get2("background_mask").unwrap().iter().filter(|&&v| v > 0.5).count();
    assert!(popcount > 0);
    let img = image::open(out.join("background_overlay.png")).unwrap().to_rgb8();
    let red = img.pixels().filter(|p| p.0 == [255, 0, 0]).count();
    assert_eq!(red, popcount * 25);
}

fn eval(tsv: &Path, out: &Path) -> EvalReport {
    ok(&["eval", "--manifest", s(tsv), "--jobs", "2", "--out", s(out)]);
    assert!(out.join("iou_curves.png").is_file());
    serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn eval_report_has_auc_per_noun() {
    let f = fixture();
    let report = eval(&f.dir.join("eval.tsv"), &scratch("eval"));
    assert!(report.skipped.is_empty());
    assert_eq!(report.per_noun.keys().collect::<Vec<_>>(), vec!["cat", "dog"]);
    for n in report.per_noun.values() {
        assert!((0.0..=1.0).contains(&n.mean_auc));
    }
    assert!(report.metrics.clip_score.is_none());
}

#[test]
fn missing_ground_truth_row_is_skipped() {
    let f = fixture();
    let tsv = f.dir.join("eval_missing.tsv");
    let mut text = std::fs::read_to_string(f.dir.join("eval.tsv")).unwrap();
    text.push_str("run/run.safetensors\ta cat and a dog\tdog\tmasks/absent.png\n");
    std::fs::write(&tsv, text).unwrap();
    let report = eval(&tsv, &scratch("eval_missing"));
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.skipped.len(), 1);
    assert!(report.skipped[0].reason.contains("missing"));
}

fn close(a: &serde_json::Value, b: &serde_json::Value, path: &str) {
    use serde_json::Value;
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-9, "{path}: {x} vs {y}");
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len(), "{path}");
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                close(u, v, &format!("{path}[{i}]"));
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>(), "{path}");
            for (k, u) in x {
                close(u, &y[k], &format!("{path}.{k}"));
            }
        }
        _ => assert_eq!(a, b, "{path}"),
    }
}

/// Set `DYNPROMPT_BLESS=1` to rewrite the stored report.
#[test]
fn fixture_dataset_reproduces_golden_report() {
    let f = fixture();
    let out = scratch("golden");
    eval(&f.dir.join("eval.tsv"), &out);
    let got: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_report.json");
    if std::env::var_os("DYNPROMPT_BLESS").is_some() {
        std::fs::write(&golden, serde_json::to_string_pretty(&got).unwrap()).unwrap();
    }
    let want: serde_json::Value = serde_json::from_slice(&std::fs::read(&golden).unwrap()).unwrap();
    close(&got, &want, "report");
}
