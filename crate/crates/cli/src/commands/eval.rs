use std::collections::BTreeMap;

use anyhow::{Context, Result};
use ebr_core::eb::SaliencySequence;
use ebr_core::grounding::{hit_test, localization_accuracy, pointing_accuracy, segment_iou, spatial_point};
use ebr_core::{Segment, FORMAT_VERSION};
use rayon::prelude::*;
use serde::Serialize;

use super::SegmentRow;
use crate::args::EvalArgs;
use crate::dataset::{load_clip, Index};
use crate::output::{create_dir, write_json, write_run_manifest};

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Serialize)]
struct MethodSummary {
    videos: usize,
    localization_accuracy: f64,
    temporal_pointing_accuracy: f64,
    mean_iou: f64,
}

#[derive(Debug, Serialize)]
struct SpatialSummary {
    radius: f64,
    hits: usize,
    misses: usize,
    accuracy: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    format_version: u32,
    alpha: f64,
    methods: BTreeMap<String, MethodSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spatial_pointing: Option<SpatialSummary>,
}

fn summarize(rows: &[&SegmentRow], alpha: f64) -> Result<MethodSummary> {
    let preds: Vec<Segment> = rows.iter().map(|r| r.predicted()).collect();
    let gts: Vec<Segment> = rows.iter().map(|r| r.ground_truth()).collect();
    let hits = rows.iter().filter(|r| r.hit).count();
    let iou: f64 = preds.iter().zip(&gts).map(|(p, g)| segment_iou(p, g)).sum();
    Ok(MethodSummary {
        videos: rows.len(),
        localization_accuracy: localization_accuracy(&preds, &gts, alpha)?,
        temporal_pointing_accuracy: pointing_accuracy(hits, rows.len() - hits),
        mean_iou: if rows.is_empty() { 0.0 } else { iou / rows.len() as f64 },
    })
}

/// Pointing game over every frame showing the class the saliency was computed for.
fn spatial_pointing(args: &EvalArgs, index: &Index) -> Result<SpatialSummary> {
    let dir = args.saliency.as_ref().expect("checked by caller");
    let data = args.data.as_ref().expect("required with --saliency");
    let counts = index
        .clips
        .par_iter()
        .map(|entry| {
            let path = dir.join(format!("{}.ebt", entry.id));
            let sal = SaliencySequence::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let clip = load_clip(data, entry)?;
            let [_, h, w] = clip.frame_shape();
            let mut hits = (0, 0);
            let Some(meta) = &clip.meta else { return Ok(hits) };
            for (t, frame) in meta.frames.iter().enumerate() {
                let (Some(class), Some(bbox)) = (frame.class, frame.bbox) else { continue };
                if class != sal.prior.unit {
                    continue;
                }
                if hit_test(spatial_point(&sal.spatial(t), h, w), &bbox, args.radius) {
                    hits.0 += 1;
                } else {
                    hits.1 += 1;
                }
            }
            Ok(hits)
        })
        .collect::<Result<Vec<(usize, usize)>>>()?;
    let (hits, misses) = counts.iter().fold((0, 0), |a, c| (a.0 + c.0, a.1 + c.1));
    Ok(SpatialSummary { radius: args.radius, hits, misses, accuracy: pointing_accuracy(hits, misses) })
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let mut reader = csv::Reader::from_path(&args.segments)
        .with_context(|| format!("reading {}", args.segments.display()))?;
    let rows: Vec<SegmentRow> = reader.deserialize().collect::<Result<_, _>>()?;
    let mut by_method: BTreeMap<String, Vec<&SegmentRow>> = BTreeMap::new();
    for r in &rows {
        by_method.entry(r.method.clone()).or_default().push(r);
    }
    let methods = by_method
        .into_iter()
        .map(|(m, rs)| Ok((m, summarize(&rs, args.alpha)?)))
        .collect::<Result<_>>()?;
    let spatial_pointing = match (&args.saliency, &args.data) {
        (Some(_), Some(data)) => Some(spatial_pointing(args, &Index::load(data)?)?),
        _ => None,
    };
    create_dir(&args.out)?;
    let summary = Summary { format_version: FORMAT_VERSION, alpha: args.alpha, methods, spatial_pointing };
    write_json(&args.out.join(SUMMARY_FILE), &summary)?;
    write_run_manifest(&args.out, "eval", args)
}
