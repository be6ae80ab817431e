use std::fs;

use anyhow::{Context, Result};
use ebr_core::forward::sidecar_path;
use ebr_core::save_model;
use ebr_core::synth::{build_toy_model, gen_synthetic_clip, SynthSpec, ToyModelConfig};
use ebr_core::FORMAT_VERSION;
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::usage;
use crate::args::GenSynthArgs;
use crate::dataset::{clip_id, Index, IndexEntry, CLIP_DIR, INDEX_FILE, MODEL_DIR};
use crate::output::{create_dir, write_json, write_run_manifest, write_tensor};

/// Per-clip specs. Classes and seeds are drawn sequentially from one stream
/// so the dataset depends only on the flags.
fn clip_specs(args: &GenSynthArgs) -> Result<Vec<SynthSpec>> {
    if args.classes < 2 {
        return Err(usage("--classes must be at least 2"));
    }
    if args.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let gt_length = args.gt_length.unwrap_or(args.t / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let specs: Vec<SynthSpec> = (0..args.n)
        .map(|i| {
            let gt_class = rng.gen_range(0..args.classes);
            let rand_class = (gt_class + rng.gen_range(1..args.classes)) % args.classes;
            SynthSpec {
                num_classes: args.classes,
                frame: [args.channels, args.height, args.width],
                clip_length: args.t,
                gt_class,
                rand_class,
                layout: args.layout[i % args.layout.len()],
                gt_length,
                noise: args.noise,
                seed: rng.gen(),
            }
        })
        .collect();
    for s in &specs {
        s.validate().map_err(|e| usage(e.to_string()))?;
    }
    Ok(specs)
}

pub fn run(args: &GenSynthArgs) -> Result<()> {
    let specs = clip_specs(args)?;
    let mut cfg = ToyModelConfig::new(args.classes, [args.channels, args.height, args.width], args.t);
    cfg.decay = args.decay;
    let model = build_toy_model(&cfg).map_err(|e| usage(e.to_string()))?;

    create_dir(&args.out.join(CLIP_DIR))?;
    let model_dir = args.out.join(MODEL_DIR);
    let staging = args.out.join(format!("{MODEL_DIR}.tmp"));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    save_model(&model, &staging)?;
    if model_dir.exists() {
        fs::remove_dir_all(&model_dir).with_context(|| format!("replacing {}", model_dir.display()))?;
    }
    fs::rename(&staging, &model_dir)?;

    let clips = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let id = clip_id(i);
            let sc = gen_synthetic_clip(spec)?;
            let file = std::path::Path::new(CLIP_DIR).join(format!("{id}.ebt"));
            let path = args.out.join(&file);
            write_tensor(&path, sc.clip.frames())?;
            write_json(&sidecar_path(&path), sc.clip.meta.as_ref().expect("synthetic clips carry metadata"))?;
            Ok(IndexEntry { id, file, spec: spec.clone(), gt: sc.gt })
        })
        .collect::<Result<Vec<_>>>()?;
    info!("wrote {} clips to {}", clips.len(), args.out.display());

    let index = Index { format_version: FORMAT_VERSION, labels: model.labels().to_vec(), clips };
    write_json(&args.out.join(INDEX_FILE), &index)?;
    write_run_manifest(&args.out, "gen-synth", args)
}
