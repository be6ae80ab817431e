use std::path::Path;

use anyhow::{Context, Result};
use ebr_core::eb::SaliencySequence;
use ebr_core::grounding::{
    argmax_first, fixed_length_ground, map_sums, segment_iou, temporal_ground, temporal_point_game,
};
use ebr_core::synth::probability_baseline;
use ebr_core::{forward_clip, load_model, softmax_probs, Model, Segment};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::usage;
use crate::args::{GroundArgs, GroundMethod};
use crate::dataset::{load_clip, Index, IndexEntry};
use crate::output::{atomic_write, create_dir, write_run_manifest};

pub const SEGMENTS_FILE: &str = "segments.csv";

/// One line of `segments.csv`. Frames are 0-based and inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub video_id: String,
    pub label: String,
    pub method: String,
    pub s: usize,
    pub e: usize,
    pub gt_s: usize,
    pub gt_e: usize,
    pub iou: f64,
    /// Temporal pointing game: the peak frame lies inside the gt segment.
    pub hit: bool,
}

impl SegmentRow {
    pub fn predicted(&self) -> Segment {
        Segment::new(self.s, self.e, 0)
    }

    pub fn ground_truth(&self) -> Segment {
        Segment::new(self.gt_s, self.gt_e, 0)
    }
}

fn ground(scores: &[f64], length: Option<usize>, label: usize) -> Result<Segment> {
    Ok(match length {
        Some(l) => fixed_length_ground(scores, l, label)?,
        None => temporal_ground(scores, label)?.segment,
    })
}

fn load_saliency(dir: &Path, entry: &IndexEntry) -> Result<SaliencySequence> {
    let path = dir.join(format!("{}.ebt", entry.id));
    SaliencySequence::load(&path).with_context(|| format!("loading saliency {}", path.display()))
}

/// Thresholded scores and the peak-probability frame for the gt class.
fn probability_scores(model: &Model, data: &Path, entry: &IndexEntry) -> Result<(Vec<f64>, usize)> {
    let cache = forward_clip(model, &load_clip(data, entry)?)?;
    let gt = entry.spec.gt_class;
    let probs: Vec<f64> = cache.logits.iter().map(|l| softmax_probs(l).data()[gt]).collect();
    Ok((probability_baseline(&cache, gt), argmax_first(&probs).expect("non-empty clip")))
}

pub fn run(args: &GroundArgs) -> Result<()> {
    let index = Index::load(&args.data)?;
    let needs_saliency = args.method != GroundMethod::Probability;
    let saliency_dir = match (&args.saliency, needs_saliency) {
        (Some(d), true) => Some(d.as_path()),
        (None, true) => return Err(usage("--saliency is required for this method")),
        _ => None,
    };
    let model = match (&args.model, args.method != GroundMethod::Saliency) {
        (Some(m), true) => Some(load_model(m).with_context(|| format!("loading model {}", m.display()))?),
        (None, true) => return Err(usage("--model is required for this method")),
        _ => None,
    };

    let saliency: Vec<Option<SaliencySequence>> = index
        .clips
        .par_iter()
        .map(|e| saliency_dir.map(|d| load_saliency(d, e)).transpose())
        .collect::<Result<_>>()?;
    if args.length.is_none() {
        if let Some(sal) = saliency.iter().flatten().find(|s| !s.mode.is_signed()) {
            return Err(usage(format!(
                "{} sums are never negative, so unknown-length grounding would always cover the whole clip; \
                 pass --length or use cEB-R saliency",
                sal.mode
            )));
        }
    }

    let rows = index
        .clips
        .par_iter()
        .zip(&saliency)
        .map(|(entry, sal)| {
            let label = entry.spec.gt_class;
            let (segment, hit, method) = match args.method {
                GroundMethod::Saliency => {
                    let sal = sal.as_ref().expect("saliency loaded");
                    let sums = map_sums(sal);
                    (ground(&sums, args.length, label)?, temporal_point_game(&sums, &entry.gt), sal.mode.to_string())
                }
                GroundMethod::Probability => {
                    let (scores, peak) = probability_scores(model.as_ref().unwrap(), &args.data, entry)?;
                    (ground(&scores, args.length, label)?, entry.gt.contains(peak), "probability".to_string())
                }
                GroundMethod::Combined => {
                    let sums = map_sums(sal.as_ref().expect("saliency loaded"));
                    let (_, peak) = probability_scores(model.as_ref().unwrap(), &args.data, entry)?;
                    let hit = entry.gt.contains(peak) || temporal_point_game(&sums, &entry.gt);
                    (ground(&sums, args.length, label)?, hit, "combined".to_string())
                }
            };
            Ok(SegmentRow {
                video_id: entry.id.clone(),
                label: index.labels.get(label).cloned().unwrap_or_else(|| label.to_string()),
                method,
                s: segment.start,
                e: segment.end,
                gt_s: entry.gt.start,
                gt_e: entry.gt.end,
                iou: segment_iou(&segment, &entry.gt),
                hit,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    create_dir(&args.out)?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        csv.serialize(r)?;
    }
    atomic_write(&args.out.join(SEGMENTS_FILE), &csv.into_inner()?)?;
    write_run_manifest(&args.out, "ground", args)
}
