use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Axis;

use super::{create_dir, load_run, noun_cells, parse_timesteps};
use crate::error::{CliError, CliResult};
use crate::manifest::{OutputFile, RunManifest, Seeds};
use crate::render;

pub const GRID_FILE: &str = "attention_grid.png";
pub const OVERLAY_FILE: &str = "background_overlay.png";
pub const MANIFEST_FILE: &str = "viz_manifest.json";

#[derive(Debug, Clone, clap::Args)]
pub struct VizArgs {
    #[arg(long)]
    pub archive: PathBuf,
    /// Comma-separated timesteps; five evenly spaced ones by default.
    #[arg(long)]
    pub timesteps: Option<String>,
    /// Pixels per attention cell.
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &VizArgs) -> CliResult<RunManifest> {
    if args.scale == 0 {
        return Err(CliError::usage("--scale must be positive"));
    }
    let loaded = load_run(&args.archive)?;
    let run = &loaded.run;
    let timesteps = parse_timesteps(args.timesteps.as_deref(), run.steps())?;
    create_dir(&args.out)?;

    let mut outputs = BTreeMap::new();
    let cells = noun_cells(&run.cross_attention, &run.noun_positions, &timesteps, run.cross_resolution)?;
    let path = args.out.join(GRID_FILE);
    render::save(&render::heat_grid(&cells, args.scale), &path)?;
    outputs.insert("attention_grid".to_string(), OutputFile::of(&path)?);

    let mut warnings = Vec::new();
    match &run.mask {
        Some(mask) => {
            let z0 = &run.reconstruction[0].data;
            let base = z0.mean_axis(Axis(0)).expect("latent has channels");
            let path = args.out.join(OVERLAY_FILE);
            render::save(&render::mask_overlay(&base, &mask.mask, args.scale)?, &path)?;
            outputs.insert("background_overlay".to_string(), OutputFile::of(&path)?);
        }
        None => warnings.push("run has no background mask; overlay skipped".to_string()),
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let manifest = RunManifest {
        command: "viz".into(),
        image: Some(args.archive.display().to_string()),
        prompt: run.prompt.clone(),
        nouns: run.nouns.clone(),
        config: serde_json::json!({ "timesteps": timesteps, "scale": args.scale }),
        seeds: Seeds { run: loaded.config.seed, backend: loaded.config.backend.synthetic.seed },
        outputs,
        warnings,
        ..Default::default()
    }
    .finalize()?;
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
