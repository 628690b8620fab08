//! Run outputs and the manifest written beside them.
//!
//! The manifest holds no timestamps, host names or absolute paths, so two
//! runs with the same configuration and seed produce identical bytes.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Settings;
use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One file produced by a subcommand.
pub struct Artifact {
    pub name: &'static str,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn json<T: Serialize>(name: &'static str, value: &T) -> Result<Self, CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(mfrbsde::Error::from)?;
        bytes.push(b'\n');
        Ok(Artifact { name, bytes })
    }

    pub fn csv<F>(name: &'static str, write: F) -> Result<Self, CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> mfrbsde::Result<()>,
    {
        let mut bytes = Vec::new();
        write(&mut bytes)?;
        Ok(Artifact { name, bytes })
    }
}

#[derive(Serialize)]
struct OutputEntry<'a> {
    file: &'a str,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: u64,
    /// Hash of the resolved model and settings.
    config_sha256: String,
    /// Hash of the config file as read, when one was given.
    config_file_sha256: Option<&'a str>,
    settings: &'a Settings,
    exit_code: u8,
    outputs: Vec<OutputEntry<'a>>,
}

impl<'a> Manifest<'a> {
    pub fn new(
        subcommand: &'a str,
        settings: &'a Settings,
        config_sha256: String,
        config_file_sha256: Option<&'a str>,
        exit_code: u8,
        artifacts: &'a [Artifact],
    ) -> Self {
        Manifest {
            tool: "mfrbsde",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed: settings.seed,
            config_sha256,
            config_file_sha256,
            settings,
            exit_code,
            outputs: artifacts
                .iter()
                .map(|a| OutputEntry { file: a.name, bytes: a.bytes.len(), sha256: sha256_hex(&a.bytes) })
                .collect(),
        }
    }
}

/// Writes the artifacts in order, then `manifest.json`.
pub fn write_all(dir: &Path, artifacts: &[Artifact], manifest: &Manifest<'_>) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for a in artifacts {
        let path = dir.join(a.name);
        std::fs::write(&path, &a.bytes).map_err(|e| CliError::io(&path, e))?;
    }
    let m = Artifact::json("manifest.json", manifest)?;
    let path = dir.join(m.name);
    std::fs::write(&path, &m.bytes).map_err(|e| CliError::io(&path, e))
}
