use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dynprompt::archive::NamedArrayArchive;
use dynprompt::backend::Image;
use dynprompt::dpl::run_dpl;

use super::{create_dir, CONFIG_KEY};
use crate::config::{build_backend, ConfigFlags, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{LossCurves, OutputFile, RunManifest, Seeds};

pub const ARCHIVE_FILE: &str = "run.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Entry of the input archive holding the `C x H x W` image.
pub const IMAGE_ENTRY: &str = "image";

#[derive(Debug, Clone, clap::Args)]
pub struct InvertArgs {
    /// Named-array archive with an `image` entry.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Comma-separated noun words from the prompt.
    #[arg(long, value_delimiter = ',', required = true)]
    pub nouns: Vec<String>,
    #[command(flatten)]
    pub config: ConfigFlags,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn read_image(path: &Path) -> CliResult<Image> {
    let ar = NamedArrayArchive::read(path)
        .map_err(|e| CliError::usage(format!("cannot read image {}: {e}", path.display())))?;
    Ok(Image::new(ar.get3(IMAGE_ENTRY)?))
}

pub fn run(args: &InvertArgs) -> CliResult<RunManifest> {
    let cfg = RunConfig::resolve(&args.config)?;
    let nouns: Vec<String> = args.nouns.iter().map(|n| n.trim().to_string()).filter(|n| !n.is_empty()).collect();
    if nouns.is_empty() {
        return Err(CliError::usage("--nouns is empty"));
    }
    let image = read_image(&args.image)?;
    let backend = build_backend(&cfg.backend)?;
    create_dir(&args.out)?;

    let mut timings = BTreeMap::new();
    let start = Instant::now();
    let run = run_dpl(&backend, &image, &args.prompt, &nouns, &cfg.dpl)?;
    timings.insert("dpl".to_string(), start.elapsed().as_secs_f64());
    for w in &run.warnings {
        log::debug!("{w}");
    }

    let mut ar = run.to_archive()?;
    ar.set_metadata(CONFIG_KEY, cfg.to_json()?);
    let archive_path = args.out.join(ARCHIVE_FILE);
    ar.write(&archive_path)?;
    timings.insert("total".to_string(), start.elapsed().as_secs_f64());

    let mut outputs = BTreeMap::new();
    outputs.insert("archive".to_string(), OutputFile::of(&archive_path)?);
    let manifest = RunManifest {
        command: "invert".into(),
        image: Some(args.image.display().to_string()),
        prompt: args.prompt.clone(),
        nouns,
        config_hash: cfg.hash()?,
        config: serde_json::to_value(&cfg)?,
        seeds: Seeds { run: cfg.seed, backend: cfg.backend.synthetic.seed },
        timings,
        loss_curves: LossCurves {
            null_loss: run.nulls.per_step_loss.clone(),
            token_initial: run.reports.iter().map(|r| r.initial.total).collect(),
            token_final: run.reports.iter().map(|r| r.final_losses.total).collect(),
            token_iterations: run.reports.iter().map(|r| r.iterations).collect(),
        },
        outputs,
        warnings: run.warnings.clone(),
        manifest_hash: String::new(),
    }
    .finalize()?;
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    log::info!("wrote {}", archive_path.display());
    Ok(manifest)
}
