//! Run configuration. Values resolve as command-line flag, then config file,
//! then built-in default.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use dynprompt::backend::{load_checkpoint, SyntheticBackend, SyntheticConfig};
use dynprompt::dpl::DplConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Directory holding `model.safetensors` for `--backend real`.
pub const CHECKPOINT_ENV: &str = "DYNPROMPT_CHECKPOINT_DIR";
pub const CHECKPOINT_FILE: &str = "model.safetensors";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    /// Weights loaded from the checkpoint directory.
    Real,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Architecture; for `real` the checkpoint must match it.
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the background clustering.
    pub seed: u64,
    pub backend: BackendConfig,
    pub dpl: DplConfig,
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigFlags {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Token updates allowed per timestep.
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Null-text updates per timestep.
    #[arg(long)]
    pub nti_steps: Option<usize>,
    /// Skip background estimation and the background loss.
    #[arg(long)]
    pub no_background: bool,
    /// Learn tokens at t = T only and reuse them.
    #[arg(long)]
    pub static_tokens: bool,
    /// Null-text inversion only, no token learning.
    #[arg(long)]
    pub no_tokens: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn resolve(flags: &ConfigFlags) -> CliResult<Self> {
        let mut cfg = match &flags.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(b) = flags.backend {
            cfg.backend.kind = b;
        }
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if let Some(g) = flags.guidance {
            cfg.dpl.guidance = g;
            cfg.dpl.nti.guidance = g;
        }
        if let Some(n) = flags.max_iters {
            cfg.dpl.tokens.max_iters = n;
        }
        if let Some(n) = flags.nti_steps {
            cfg.dpl.nti.inner_steps = n;
        }
        if flags.no_background {
            cfg.dpl.use_background = false;
        }
        if flags.static_tokens {
            cfg.dpl.static_tokens = true;
        }
        if flags.no_tokens {
            cfg.dpl = cfg.dpl.without_token_learning();
        }
        cfg.dpl.background.cluster.seed = cfg.seed;
        cfg.dpl.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> CliResult<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> CliResult<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn build_backend(cfg: &BackendConfig) -> CliResult<SyntheticBackend> {
    match cfg.kind {
        BackendKind::Synthetic => Ok(SyntheticBackend::new(cfg.synthetic.clone())?),
        BackendKind::Real => {
            let dir = std::env::var_os(CHECKPOINT_ENV)
                .ok_or_else(|| CliError::usage(format!("--backend real needs {CHECKPOINT_ENV}")))?;
            let path = Path::new(&dir).join(CHECKPOINT_FILE);
            if !path.is_file() {
                return Err(CliError::usage(format!("no checkpoint at {}", path.display())));
            }
            Ok(load_checkpoint(cfg.synthetic.clone(), path)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let file = RunConfig::from_toml("seed = 4\n[dpl]\nguidance = 5.0\n[dpl.tokens]\nmax_iters = 7\n").unwrap();
        assert_eq!(file.dpl.tokens.max_iters, 7);
        assert_eq!(file.dpl.nti.inner_steps, 10);
        let dir = std::env::temp_dir().join(format!("dynprompt-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.toml");
        std::fs::write(&path, "seed = 4\n[dpl.tokens]\nmax_iters = 7\n").unwrap();
        let flags = ConfigFlags { config: Some(path), seed: Some(9), ..Default::default() };
        let cfg = RunConfig::resolve(&flags).unwrap();
        assert_eq!((cfg.seed, cfg.dpl.tokens.max_iters, cfg.dpl.background.cluster.seed), (9, 7, 9));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 4").is_err());
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }
}
