mod eval;
mod gen_synth;
mod ground;
mod render;
mod saliency;

use std::fmt;

use anyhow::Result;

use crate::args::Command;

pub use ground::SegmentRow;

/// A flag combination the command refuses; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::GenSynth(a) => gen_synth::run(a),
        Command::Saliency(a) => saliency::run(a),
        Command::Ground(a) => ground::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Render(a) => render::run(a),
    }
}
