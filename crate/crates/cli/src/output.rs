//! Atomic file output and the run manifest every subcommand writes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ebr_core::tensor::encode_tensor;
use ebr_core::{Tensor, FORMAT_VERSION};
use serde::Serialize;

pub const RUN_MANIFEST: &str = "manifest.json";

/// Write to a sibling temporary file, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    atomic_write(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    atomic_write(path, &encode_tensor(tensor))
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    format_version: u32,
    command: &'a str,
    config: &'a C,
}

/// Record the subcommand and its flags under `out`.
pub fn write_run_manifest(out: &Path, command: &str, config: &impl Serialize) -> Result<()> {
    write_json(&out.join(RUN_MANIFEST), &RunManifest { format_version: FORMAT_VERSION, command, config })
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
