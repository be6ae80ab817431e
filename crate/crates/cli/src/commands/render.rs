use anyhow::{Context, Result};
use ebr_core::eb::SaliencySequence;
use ebr_core::render::render_sequence;
use ebr_core::Clip;
use rayon::prelude::*;

use crate::args::RenderArgs;
use crate::output::{atomic_write, create_dir, write_run_manifest};

pub fn run(args: &RenderArgs) -> Result<()> {
    let sal = SaliencySequence::load(&args.saliency)
        .with_context(|| format!("loading saliency {}", args.saliency.display()))?;
    let clip = Clip::load(&args.clip).with_context(|| format!("loading clip {}", args.clip.display()))?;
    let images = render_sequence(&sal, &clip, args.alpha)?;
    create_dir(&args.out)?;
    images
        .par_iter()
        .enumerate()
        .try_for_each(|(t, img)| atomic_write(&args.out.join(format!("frame_{t:04}.ppm")), img))?;
    write_run_manifest(&args.out, "render", args)
}
