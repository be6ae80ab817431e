//! Deterministic forward pass over a clip.
//!
//! Every kernel sums in a fixed order, so caches are bitwise reproducible and
//! independent of how many threads process the frames.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::BBox;
use crate::model::{Conv2d, Layer, LayerKind, Linear, MaxPool2d, Model};
use crate::tensor::{load_tensor, save_tensor, Tensor};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub frames: Vec<FrameMeta>,
}

/// `T` frames of shape `[C, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    frames: Tensor,
    pub meta: Option<ClipMeta>,
}

impl Clip {
    pub fn new(frames: Tensor, meta: Option<ClipMeta>) -> Result<Clip> {
        if frames.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "clip must be [T, C, H, W], got {:?}",
                frames.shape()
            )));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ShapeMismatch(format!("clip value {v} outside [0, 1]")));
        }
        if let Some(m) = &meta {
            if m.frames.len() != frames.shape()[0] {
                return Err(Error::LengthMismatch { left: m.frames.len(), right: frames.shape()[0] });
            }
        }
        Ok(Clip { frames, meta })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frame(&self, t: usize) -> Tensor {
        self.frames.slice_outer(t)
    }

    /// `[C, H, W]` of a single frame.
    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[1], s[2], s[3]]
    }

    /// Writes the frames to `path` and, when present, the metadata to the
    /// JSON sidecar (`path` with extension `json`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_tensor(&self.frames, path)?;
        if let Some(meta) = &self.meta {
            fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)? + "\n")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Clip> {
        let path = path.as_ref();
        let frames = load_tensor(path)?;
        let side = sidecar_path(path);
        let meta = if side.exists() {
            Some(serde_json::from_slice(&fs::read(side)?)?)
        } else {
            None
        };
        Clip::new(frames, meta)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Per-frame activations of the frame-level stack.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCache {
    pub input: Tensor,
    /// Output of each frame-level layer, post-nonlinearity where one applies.
    pub outputs: Vec<Tensor>,
    /// For maxpool layers, the flat input index that won each output cell.
    pub argmax: Vec<Option<Vec<usize>>>,
}

impl FrameCache {
    /// Input to the aggregator (the input frame itself for an empty stack).
    pub fn feature(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }

    /// Activations feeding frame-level layer `idx`.
    pub fn layer_input(&self, idx: usize) -> &Tensor {
        if idx == 0 {
            &self.input
        } else {
            &self.outputs[idx - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TemporalCache {
    None,
    /// `h_0 ..= h_T`, with `h_0 = 0` from a forward pass.
    Recurrent { states: Vec<Tensor> },
    MeanPool { pooled: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub frames: Vec<FrameCache>,
    pub temporal: TemporalCache,
    /// One logit vector per step; a single entry for mean-pool models.
    pub logits: Vec<Tensor>,
}

impl ActivationCache {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Output of a named layer at frame/step `t` (0-based).
    pub fn layer_output<'a>(&'a self, model: &Model, t: usize, name: &str) -> Option<&'a Tensor> {
        if name == "input" {
            return self.frames.get(t).map(|f| &f.input);
        }
        if let Some(i) = model.cnn_layer_index(name) {
            return self.frames.get(t).map(|f| &f.outputs[i]);
        }
        if Some(name) == model.aggregator_name() {
            return match &self.temporal {
                TemporalCache::Recurrent { states } => states.get(t + 1),
                TemporalCache::MeanPool { pooled } => Some(pooled),
                TemporalCache::None => None,
            };
        }
        if name == model.classifier_name() {
            return self.logits.get(t).or(self.logits.last());
        }
        None
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn conv2d_forward(input: &Tensor, conv: &Conv2d) -> Tensor {
    let (ic, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    debug_assert_eq!(ic, conv.in_channels);
    let (k, s, p) = (conv.kernel, conv.stride, conv.padding);
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let oc = conv.out_channels;
    let x = input.data();
    let wt = conv.weight.data();
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        let b = conv.bias.as_ref().map_or(0.0, |b| b.data()[o]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for c in 0..ic {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wt[((o * ic + c) * k + ky) * k + kx]
                                * x[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::from_parts(vec![oc, oh, ow], out)
}

/// Max over each window; ties go to the first index in row-major order.
pub fn maxpool_forward(input: &Tensor, pool: &MaxPool2d) -> (Tensor, Vec<usize>) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (k, s) = (pool.window, pool.stride);
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (c * h * w, f64::NEG_INFINITY);
                for ky in 0..k {
                    for kx in 0..k {
                        let i = (ch * h + oy * s + ky) * w + ox * s + kx;
                        if x[i] > best.1 || best.0 == c * h * w {
                            best = (i, x[i]);
                        }
                    }
                }
                arg.push(best.0);
                out.push(best.1);
            }
        }
    }
    (Tensor::from_parts(vec![c, oh, ow], out), arg)
}

pub fn linear_forward(x: &[f64], layer: &Linear) -> Vec<f64> {
    let w = layer.weight.data();
    (0..layer.out_dim)
        .map(|j| {
            let row = &w[j * layer.in_dim..(j + 1) * layer.in_dim];
            let b = layer.bias.as_ref().map_or(0.0, |b| b.data()[j]);
            row.iter().zip(x).fold(b, |acc, (w, x)| acc + w * x)
        })
        .collect()
}

/// Apply one frame-level layer. Returns the output and, for maxpool, the argmax indices.
pub fn apply_layer(layer: &Layer, input: &Tensor) -> (Tensor, Option<Vec<usize>>) {
    match &layer.kind {
        LayerKind::Conv2d(c) => (conv2d_forward(input, c), None),
        LayerKind::Relu => (relu(input), None),
        LayerKind::MaxPool2d(p) => {
            let (out, arg) = maxpool_forward(input, p);
            (out, Some(arg))
        }
        LayerKind::Flatten => (Tensor::from_parts(vec![input.len()], input.data().to_vec()), None),
        LayerKind::FullyConnected(l) => (Tensor::vector(linear_forward(input.data(), l)), None),
        LayerKind::TemporalMeanPool | LayerKind::Recurrent(_) | LayerKind::Classifier(_) => {
            panic!("layer {:?} is not a frame-level layer", layer.name)
        }
    }
}

pub fn forward_frame(model: &Model, frame: &Tensor) -> Result<FrameCache> {
    if frame.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch(format!(
            "frame shape {:?}, model expects {:?}",
            frame.shape(),
            model.input_shape()
        )));
    }
    let mut outputs: Vec<Tensor> = Vec::with_capacity(model.cnn_layers().len());
    let mut argmax = Vec::with_capacity(model.cnn_layers().len());
    for layer in model.cnn_layers() {
        let (out, arg) = apply_layer(layer, outputs.last().unwrap_or(frame));
        outputs.push(out);
        argmax.push(arg);
    }
    Ok(FrameCache { input: frame.clone(), outputs, argmax })
}

/// Run the aggregator and classifier over per-frame features.
pub fn forward_temporal(model: &Model, features: &[&Tensor]) -> Result<(TemporalCache, Vec<Tensor>)> {
    if features.is_empty() {
        return Err(Error::ShapeMismatch("no frames".into()));
    }
    let cls = model.classifier();
    let classify = |x: &Tensor| Tensor::vector(linear_forward(x.data(), cls));
    match &model.layers()[model.cnn_layers().len()].kind {
        LayerKind::Recurrent(r) => {
            let mut states = vec![Tensor::from_parts(vec![r.hidden_dim], vec![0.0; r.hidden_dim])];
            let mut logits = Vec::with_capacity(features.len());
            for x in features {
                let prev = states.last().unwrap();
                let wx = r.input_weight.data();
                let wh = r.hidden_weight.data();
                let h: Vec<f64> = (0..r.hidden_dim)
                    .map(|j| {
                        let mut acc = r.bias.as_ref().map_or(0.0, |b| b.data()[j]);
                        for (w, v) in wx[j * r.in_dim..(j + 1) * r.in_dim].iter().zip(x.data()) {
                            acc += w * v;
                        }
                        for (w, v) in wh[j * r.hidden_dim..(j + 1) * r.hidden_dim].iter().zip(prev.data()) {
                            acc += w * v;
                        }
                        acc.max(0.0)
                    })
                    .collect();
                let h = Tensor::vector(h);
                logits.push(classify(&h));
                states.push(h);
            }
            Ok((TemporalCache::Recurrent { states }, logits))
        }
        LayerKind::TemporalMeanPool => {
            let n = features.len() as f64;
            let mut acc = vec![0.0; features[0].len()];
            for x in features {
                for (a, v) in acc.iter_mut().zip(x.data()) {
                    *a += v;
                }
            }
            let pooled = Tensor::vector(acc.into_iter().map(|v| v / n).collect());
            let logits = vec![classify(&pooled)];
            Ok((TemporalCache::MeanPool { pooled }, logits))
        }
        _ => Ok((TemporalCache::None, features.iter().map(|x| classify(x)).collect())),
    }
}

/// Forward pass from already computed frame caches (any number of frames).
pub fn forward_from_frames(model: &Model, frames: Vec<FrameCache>) -> Result<ActivationCache> {
    let features: Vec<&Tensor> = frames.iter().map(FrameCache::feature).collect();
    let (temporal, logits) = forward_temporal(model, &features)?;
    Ok(ActivationCache { frames, temporal, logits })
}

pub fn forward_clip(model: &Model, clip: &Clip) -> Result<ActivationCache> {
    if clip.len() != model.clip_length() {
        return Err(Error::ShapeMismatch(format!(
            "clip has {} frames, model expects {}",
            clip.len(),
            model.clip_length()
        )));
    }
    let frames = (0..clip.len())
        .into_par_iter()
        .map(|t| forward_frame(model, &clip.frame(t)))
        .collect::<Result<Vec<_>>>()?;
    forward_from_frames(model, frames)
}

/// Softmax with max-subtraction.
pub fn softmax_probs(logits: &Tensor) -> Tensor {
    let m = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.data().iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Tensor::from_parts(logits.shape().to_vec(), e.into_iter().map(|v| v / z).collect())
}
