use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

impl OutputFile {
    pub fn of(path: &Path) -> CliResult<Self> {
        Ok(Self { path: path.display().to_string(), sha256: sha256_hex(&std::fs::read(path)?) })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossCurves {
    pub null_loss: Vec<f64>,
    pub token_initial: Vec<f64>,
    pub token_final: Vec<f64>,
    pub token_iterations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub backend: u64,
}

/// Record of one command run. `manifest_hash` covers everything except
/// timings and file paths, so reruns with the same inputs hash the same.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub image: Option<String>,
    pub prompt: String,
    pub nouns: Vec<String>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: Seeds,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub loss_curves: LossCurves,
    pub outputs: BTreeMap<String, OutputFile>,
    pub warnings: Vec<String>,
    pub manifest_hash: String,
}

#[derive(Serialize)]
struct Hashed<'a> {
    command: &'a str,
    prompt: &'a str,
    nouns: &'a [String],
    config_hash: &'a str,
    seeds: &'a Seeds,
    loss_curves: &'a LossCurves,
    outputs: BTreeMap<&'a str, &'a str>,
    warnings: &'a [String],
}

impl RunManifest {
    pub fn compute_hash(&self) -> CliResult<String> {
        let h = Hashed {
            command: &self.command,
            prompt: &self.prompt,
            nouns: &self.nouns,
            config_hash: &self.config_hash,
            seeds: &self.seeds,
            loss_curves: &self.loss_curves,
            outputs: self.outputs.iter().map(|(k, v)| (k.as_str(), v.sha256.as_str())).collect(),
            warnings: &self.warnings,
        };
        Ok(sha256_hex(serde_json::to_string(&h)?.as_bytes()))
    }

    pub fn finalize(mut self) -> CliResult<Self> {
        self.manifest_hash = self.compute_hash()?;
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
