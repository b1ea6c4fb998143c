pub mod edit;
pub mod eval;
pub mod invert;
pub mod synth;
pub mod viz;

use std::path::Path;

use dynprompt::archive::NamedArrayArchive;
use dynprompt::dpl::DplRun;

use crate::config::{build_backend, RunConfig};
use crate::error::{CliError, CliResult};

/// Archive metadata key holding the resolved run config as JSON.
pub const CONFIG_KEY: &str = "config";

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

/// A run archive with the config it was made under.
pub struct LoadedRun {
    pub run: DplRun,
    pub config: RunConfig,
}

pub fn load_run(path: &Path) -> CliResult<LoadedRun> {
    let bad = |e: String| CliError::usage(format!("bad run archive {}: {e}", path.display()));
    let ar = NamedArrayArchive::read(path).map_err(|e| bad(e.to_string()))?;
    let run = DplRun::from_archive(&ar).map_err(|e| bad(e.to_string()))?;
    let config = match ar.metadata(CONFIG_KEY) {
        Some(s) => serde_json::from_str(s).map_err(|e| bad(e.to_string()))?,
        None => {
            log::warn!("{} has no config; assuming defaults", path.display());
            RunConfig::default()
        }
    };
    Ok(LoadedRun { run, config })
}

impl LoadedRun {
    pub fn backend(&self) -> CliResult<dynprompt::backend::SyntheticBackend> {
        let b = build_backend(&self.config.backend)?;
        self.run.check_backend(&b)?;
        Ok(b)
    }
}

/// `n` timesteps spread evenly from `T` down to 1.
pub fn even_timesteps(steps: usize, n: usize) -> Vec<usize> {
    let n = n.min(steps).max(1);
    if n == 1 {
        return vec![steps];
    }
    (0..n).map(|k| steps - k * (steps - 1) / (n - 1)).collect()
}

/// Parses a comma-separated timestep list; every entry must lie in `1..=steps`.
pub fn parse_timesteps(text: Option<&str>, steps: usize) -> CliResult<Vec<usize>> {
    let Some(text) = text else {
        return Ok(even_timesteps(steps, 5));
    };
    let ts = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| CliError::usage(format!("bad timestep {s:?}"))))
        .collect::<CliResult<Vec<_>>>()?;
    if ts.is_empty() {
        return Err(CliError::usage("no timesteps selected"));
    }
    if let Some(t) = ts.iter().find(|&&t| t == 0 || t > steps) {
        return Err(CliError::usage(format!("timestep {t} outside 1..={steps}")));
    }
    Ok(ts)
}

/// Noun attention maps of `attn` (`pixels x tokens`) at `positions`, one row
/// per position and one column per timestep.
pub fn noun_cells(
    attn: &[ndarray::Array2<f64>],
    positions: &[usize],
    timesteps: &[usize],
    res: usize,
) -> CliResult<Vec<Vec<ndarray::Array2<f64>>>> {
    positions
        .iter()
        .map(|&p| {
            timesteps
                .iter()
                .map(|&t| Ok(dynprompt::attention::token_map_from(attn[t - 1].view(), res, p)?.map))
                .collect()
        })
        .collect()
}
