use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dynprompt::archive::NamedArrayArchive;
use dynprompt::edit::{edit_image, EditPlan, EditSpec};

use super::{create_dir, load_run, noun_cells, parse_timesteps};
use crate::error::{CliError, CliResult};
use crate::manifest::{OutputFile, RunManifest, Seeds};
use crate::render;

pub const MANIFEST_FILE: &str = "edit_manifest.json";

#[derive(Debug, Clone, clap::Args)]
pub struct EditArgs {
    /// Run archive written by `invert`.
    #[arg(long)]
    pub archive: PathBuf,
    /// TOML edit description; without it the edit is the identity.
    #[arg(long)]
    pub edit_config: Option<PathBuf>,
    /// Overrides the cross-attention injection fraction.
    #[arg(long)]
    pub cross_fraction: Option<f64>,
    /// Overrides the self-attention injection fraction.
    #[arg(long)]
    pub self_fraction: Option<f64>,
    /// Comma-separated timesteps for the attention grids.
    #[arg(long)]
    pub timesteps: Option<String>,
    /// Pixels per latent cell in the images.
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn load_spec(path: Option<&Path>) -> CliResult<EditSpec> {
    let Some(path) = path else {
        return Ok(EditSpec::identity());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read edit config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("bad edit config: {e}")))
}

pub fn run(args: &EditArgs) -> CliResult<RunManifest> {
    if args.scale == 0 {
        return Err(CliError::usage("--scale must be positive"));
    }
    let mut spec = load_spec(args.edit_config.as_deref())?;
    if let Some(f) = args.cross_fraction {
        spec.cross_injection_fraction = f;
    }
    if let Some(f) = args.self_fraction {
        spec.self_injection_fraction = f;
    }
    spec.validate()?;
    let loaded = load_run(&args.archive)?;
    let backend = loaded.backend()?;
    let run = &loaded.run;
    let timesteps = parse_timesteps(args.timesteps.as_deref(), run.steps())?;
    create_dir(&args.out)?;

    let start = Instant::now();
    let out = edit_image(&backend, run, &spec)?;
    let mut timings = BTreeMap::new();
    timings.insert("edit".to_string(), start.elapsed().as_secs_f64());

    let mut files: Vec<(&str, PathBuf)> = Vec::new();
    let path = args.out.join("edited.png");
    render::save(&render::latent_preview(&out.edited, args.scale), &path)?;
    files.push(("edited", path));
    let path = args.out.join("reconstruction.png");
    render::save(&render::latent_preview(&out.reconstruction, args.scale), &path)?;
    files.push(("reconstruction", path));

    // nouns in the target pass sit wherever the alignment puts their source token
    let plan = EditPlan::new(&backend, &run.prompt, &spec)?;
    let target_positions: Vec<usize> = run
        .noun_positions
        .iter()
        .map(|&p| plan.alignment.iter().position(|a| *a == Some(p)).unwrap_or(p))
        .collect();
    let res = run.cross_resolution;
    let path = args.out.join("attention_source.png");
    render::save(&render::heat_grid(&noun_cells(&out.source_attention, &run.noun_positions, &timesteps, res)?, args.scale), &path)?;
    files.push(("attention_source", path));
    let path = args.out.join("attention_edited.png");
    render::save(&render::heat_grid(&noun_cells(&out.edited_attention, &target_positions, &timesteps, res)?, args.scale), &path)?;
    files.push(("attention_edited", path));

    let mut ar = NamedArrayArchive::new();
    ar.insert("edited", &out.edited.data);
    ar.insert("reconstruction", &out.reconstruction.data);
    for (t, (e, s)) in out.edited_latents.iter().zip(&out.source_latents).enumerate() {
        ar.insert(format!("edited_latents/{t}"), &e.data);
        ar.insert(format!("source_latents/{t}"), &s.data);
    }
    ar.set_metadata("target_prompt", out.target_prompt.clone());
    let path = args.out.join("edit.safetensors");
    ar.write(&path)?;
    files.push(("edit_archive", path));

    let mut outputs = BTreeMap::new();
    for (k, p) in &files {
        outputs.insert(k.to_string(), OutputFile::of(p)?);
    }
    let spec_json = serde_json::to_value(&spec)?;
    let manifest = RunManifest {
        command: "edit".into(),
        image: Some(args.archive.display().to_string()),
        prompt: out.target_prompt.clone(),
        nouns: run.nouns.clone(),
        config_hash: crate::config::sha256_hex(spec_json.to_string().as_bytes()),
        config: serde_json::json!({ "run": loaded.config, "edit": spec_json }),
        seeds: Seeds { run: loaded.config.seed, backend: loaded.config.backend.synthetic.seed },
        timings,
        outputs,
        ..Default::default()
    }
    .finalize()?;
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
