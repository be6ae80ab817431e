//! On-disk synthetic dataset: clip tensors plus a JSON index.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ebr_core::synth::SynthSpec;
use ebr_core::{Clip, Segment, FORMAT_VERSION};
use serde::{Deserialize, Serialize};

pub const INDEX_FILE: &str = "index.json";
pub const CLIP_DIR: &str = "clips";
pub const MODEL_DIR: &str = "model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    /// Clip tensor, relative to the dataset directory.
    pub file: PathBuf,
    pub spec: SynthSpec,
    pub gt: Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub format_version: u32,
    pub labels: Vec<String>,
    pub clips: Vec<IndexEntry>,
}

impl Index {
    pub fn load(dir: &Path) -> Result<Index> {
        let path = dir.join(INDEX_FILE);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let index: Index = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        if index.format_version != FORMAT_VERSION {
            bail!("{}: unsupported format_version {}", path.display(), index.format_version);
        }
        Ok(index)
    }
}

pub fn clip_id(i: usize) -> String {
    format!("clip_{i:05}")
}

pub fn load_clip(dir: &Path, entry: &IndexEntry) -> Result<Clip> {
    let path = dir.join(&entry.file);
    Clip::load(&path).with_context(|| format!("loading clip {}", path.display()))
}
