use anyhow::{Context, Result};
use ebr_core::eb::{saliency_from_cache, PriorSpec, SaliencyOptions};
use ebr_core::{forward_clip, load_model, Model};
use log::info;
use rayon::prelude::*;

use super::usage;
use crate::args::SaliencyArgs;
use crate::dataset::{load_clip, Index};
use crate::output::{create_dir, write_json, write_run_manifest, write_tensor};

/// Resolve `--label` as a label name first, then as an index.
pub fn resolve_label(model: &Model, label: &str) -> Result<usize> {
    if let Some(i) = model.label_index(label) {
        return Ok(i);
    }
    match label.parse::<usize>() {
        Ok(i) if i < model.num_outputs() => Ok(i),
        _ => Err(usage(format!("unknown label {label:?}; the model has {:?}", model.labels()))),
    }
}

pub fn run(args: &SaliencyArgs) -> Result<()> {
    let model = load_model(&args.model).with_context(|| format!("loading model {}", args.model.display()))?;
    let index = Index::load(&args.data)?;
    if args.layer != "input" && model.cnn_layer_index(&args.layer).is_none() {
        let names: Vec<&str> = model.cnn_layers().iter().map(|l| l.name.as_str()).collect();
        return Err(usage(format!("unknown layer {:?}; choose input or one of {names:?}", args.layer)));
    }
    let unit = args.label.as_deref().map(|l| resolve_label(&model, l)).transpose()?;
    let opts = SaliencyOptions { target: args.layer.as_str().into(), bp_absolute: args.bp_absolute };
    create_dir(&args.out)?;

    index
        .clips
        .par_iter()
        .map(|entry| {
            let clip = load_clip(&args.data, entry)?;
            let step = args.step.unwrap_or(clip.len());
            let prior = PriorSpec::one_hot(unit.unwrap_or(entry.spec.gt_class), model.num_outputs(), step);
            let cache = forward_clip(&model, &clip)?;
            let sal = saliency_from_cache(&model, &cache, &prior, args.mode, &opts)
                .with_context(|| format!("clip {}", entry.id))?;
            write_tensor(&args.out.join(format!("{}.ebt", entry.id)), &sal.channel_summed()?)?;
            write_json(&args.out.join(format!("{}.json", entry.id)), &sal.sidecar())?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    info!("{} saliency for {} clips", args.mode, index.clips.len());
    write_run_manifest(&args.out, "saliency", args)
}
