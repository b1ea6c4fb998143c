use std::path::PathBuf;

use dynprompt::archive::NamedArrayArchive;
use dynprompt::fixture::{two_object_scene, SceneConfig};

use super::create_dir;
use super::invert::IMAGE_ENTRY;
use crate::config::{BackendConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::render;

pub const SCENE_FILE: &str = "scene.safetensors";

#[derive(Debug, Clone, clap::Args)]
pub struct SynthArgs {
    /// TOML scene description; the built-in two-object scene by default.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Writes the scene image, its masks, a matching run config and an eval
/// table that expects the run archive at `run/run.safetensors`.
pub fn run(args: &SynthArgs) -> CliResult<()> {
    let cfg: SceneConfig = match &args.scene {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read scene {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::usage(format!("bad scene config: {e}")))?
        }
        None => SceneConfig::default(),
    };
    let scene = two_object_scene(&cfg)?;
    create_dir(&args.out.join("masks"))?;

    let mut ar = NamedArrayArchive::new();
    ar.insert(IMAGE_ENTRY, &scene.image.data);
    ar.set_metadata("prompt", scene.prompt.clone());
    ar.set_metadata("nouns", scene.nouns.join(","));
    ar.write(args.out.join(SCENE_FILE))?;

    let mut tsv = String::from("# run_archive\tprompt\tnoun\tgt_mask\n");
    for (noun, mask) in scene.nouns.iter().zip(&scene.object_masks) {
        render::write_mask(mask, &args.out.join("masks").join(format!("{noun}.png")))?;
        tsv.push_str(&format!("run/run.safetensors\t{}\t{noun}\tmasks/{noun}.png\n", scene.prompt));
    }
    render::write_mask(&scene.background, &args.out.join("background.png"))?;
    render::save(&render::latent_preview(&scene.image, 8), &args.out.join("preview.png"))?;
    std::fs::write(args.out.join("eval.tsv"), tsv)?;

    let run_cfg = RunConfig { backend: BackendConfig { synthetic: cfg.backend.clone(), ..Default::default() }, ..Default::default() };
    let text = toml::to_string(&run_cfg).map_err(|e| CliError::usage(e.to_string()))?;
    std::fs::write(args.out.join("run.toml"), text)?;
    println!("prompt: {}\nnouns: {}", scene.prompt, scene.nouns.join(","));
    Ok(())
}
