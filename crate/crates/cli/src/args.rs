use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ebr_core::synth::Layout;
use ebr_core::Mode;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "ebr", version, about = "Excitation backprop saliency for recurrent video models")]
pub struct Cli {
    /// Worker threads for per-clip and per-frame work.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-action dataset and the toy model that reads it.
    GenSynth(GenSynthArgs),
    /// Compute a saliency sequence for every clip of a dataset.
    Saliency(SaliencyArgs),
    /// Temporal grounding from saliency sums or thresholded probabilities.
    Ground(GroundArgs),
    /// Localization and pointing accuracies from grounding output.
    Eval(EvalArgs),
    /// Overlay a saliency sequence on its clip as PPM images.
    Render(RenderArgs),
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    s.trim().parse::<Layout>().map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Clip length in frames.
    #[arg(long = "t", default_value_t = 16)]
    pub t: usize,
    /// Number of clips.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Comma-separated layouts, assigned to clips in turn.
    #[arg(long, default_value = "gt-first", value_delimiter = ',', value_parser = parse_layout)]
    pub layout: Vec<Layout>,
    /// Frames holding the gt action; defaults to half the clip.
    #[arg(long)]
    pub gt_length: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// Recurrent decay of the toy model.
    #[arg(long, default_value_t = 0.5)]
    pub decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SaliencyArgs {
    /// Model directory or manifest file.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory (with index.json).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Mode,
    /// Layer whose output is mapped, or `input`.
    #[arg(long, default_value = "input")]
    pub layer: String,
    /// Prior unit by label name or index; defaults to each clip's gt class.
    #[arg(long)]
    pub label: Option<String>,
    /// 1-based step the prior is injected at; defaults to the last frame.
    #[arg(long)]
    pub step: Option<usize>,
    /// Report absolute gradients in BP modes.
    #[arg(long)]
    pub bp_absolute: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundMethod {
    /// Sums of the saliency maps.
    Saliency,
    /// Per-step gt probability thresholded at 0.5.
    Probability,
    /// Saliency segment; a hit when either peak lands in the gt segment.
    Combined,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GroundArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Saliency directory written by `saliency`.
    #[arg(long)]
    pub saliency: Option<PathBuf>,
    /// Model, needed for the probability and combined methods.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GroundMethod::Saliency)]
    pub method: GroundMethod,
    /// Known segment length; unknown-length grounding when absent.
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// segments.csv written by `ground`.
    #[arg(long)]
    pub segments: PathBuf,
    /// IoU threshold for a correct localization.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Saliency directory for the spatial pointing game.
    #[arg(long, requires = "data")]
    pub saliency: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pointing-game radius in pixels.
    #[arg(long, default_value_t = ebr_core::grounding::DEFAULT_RADIUS)]
    pub radius: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RenderArgs {
    /// Saliency tensor file.
    #[arg(long)]
    pub saliency: PathBuf,
    /// Clip tensor file.
    #[arg(long)]
    pub clip: PathBuf,
    /// Overlay strength at the largest |value|.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}
