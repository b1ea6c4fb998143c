#![allow(dead_code)]

use std::sync::OnceLock;

use dynprompt::dpl::{run_dpl, DplConfig, DplRun};
use dynprompt::fixture::{two_object_scene, Scene, SceneConfig};

pub fn scene() -> &'static Scene {
    static SCENE: OnceLock<Scene> = OnceLock::new();
    SCENE.get_or_init(|| two_object_scene(&SceneConfig::default()).unwrap())
}

pub fn dpl_run() -> &'static DplRun {
    static RUN: OnceLock<DplRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let s = scene();
        run_dpl(&s.backend, &s.image, &s.prompt, &s.nouns, &DplConfig::default()).unwrap()
    })
}

pub fn baseline_run() -> &'static DplRun {
    static RUN: OnceLock<DplRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let s = scene();
        let cfg = DplConfig::default().without_token_learning();
        run_dpl(&s.backend, &s.image, &s.prompt, &s.nouns, &cfg).unwrap()
    })
}
