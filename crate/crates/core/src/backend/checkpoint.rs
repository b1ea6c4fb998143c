//! Weights loaded from a named-array archive instead of generated from the seed.
//!
//! The archive stores every tensor of [`SyntheticParams::to_named`] as `f32`,
//! so a reloaded backend matches its source to single precision.

use std::collections::BTreeMap;
use std::path::Path;

use super::{SyntheticBackend, SyntheticConfig, SyntheticParams};
use crate::archive::NamedArrayArchive;
use crate::error::Result;

pub fn load_checkpoint(config: SyntheticConfig, path: impl AsRef<Path>) -> Result<SyntheticBackend> {
    let archive = NamedArrayArchive::read(path)?;
    let mut named = BTreeMap::new();
    for name in archive.names() {
        named.insert(name.to_string(), archive.get2(name)?);
    }
    let params = SyntheticParams::from_named(&config, &named)?;
    SyntheticBackend::with_params(config, params)
}

impl SyntheticBackend {
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut archive = NamedArrayArchive::new();
        for (name, w) in self.params().to_named() {
            archive.insert(name, &w);
        }
        archive.set_metadata("format", "dynprompt-synthetic-weights");
        archive.write(path)
    }
}
