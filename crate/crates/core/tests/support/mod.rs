//! Reference implementations used as test oracles. Nothing here calls the
//! crate's propagation code; models are only read for their weights.

#![allow(dead_code)]

use std::collections::BTreeMap;

use ebr_core::model::{InputSpec, LayerOp, LayerSpec, Model, ModelManifest};
use ebr_core::{Clip, Tensor, FORMAT_VERSION};
use rand::Rng;

/// Six nested loops, zero padding, no tricks.
pub fn naive_conv2d(
    input: &[f64],
    (ic, h, w): (usize, usize, usize),
    weight: &[f64],
    (oc, k): (usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for c in 0..ic {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as i64 - pad as i64;
                            let ix = (x * stride + kx) as i64 - pad as i64;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += weight[((o * ic + c) * k + ky) * k + kx]
                                    * input[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                out[o * oh * ow + y * ow + x] = acc;
            }
        }
    }
    out
}

/// Dense chain: input -> (fc, relu)* -> recurrent relu -> classifier, all
/// weights as row-major `Vec<Vec<f64>>` with rows indexing outputs.
#[derive(Debug, Clone)]
pub struct Chain {
    pub fcs: Vec<Vec<Vec<f64>>>,
    pub wx: Vec<Vec<f64>>,
    pub wh: Vec<Vec<f64>>,
    pub cls: Vec<Vec<f64>>,
}

fn rand_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn flat(m: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![m.len(), m[0].len()], m.concat()).unwrap()
}

impl Chain {
    /// `widths[0]` is the input size, the rest are fc output sizes.
    pub fn random(rng: &mut impl Rng, widths: &[usize], hidden: usize, classes: usize) -> Chain {
        let fcs = widths.windows(2).map(|p| rand_matrix(rng, p[1], p[0])).collect();
        let top = *widths.last().unwrap();
        Chain {
            fcs,
            wx: rand_matrix(rng, hidden, top),
            wh: rand_matrix(rng, hidden, hidden),
            cls: rand_matrix(rng, classes, hidden),
        }
    }

    pub fn neurons(&self) -> usize {
        self.fcs[0][0].len() + self.fcs.iter().map(Vec::len).sum::<usize>() + self.wx.len() + self.cls.len()
    }

    pub fn to_model(&self, clip_length: usize) -> Model {
        let n0 = self.fcs[0][0].len();
        let mut layers = vec![LayerSpec { name: "flatten".into(), op: LayerOp::Flatten }];
        let mut weights = BTreeMap::new();
        for (i, m) in self.fcs.iter().enumerate() {
            let name = format!("fc{i}");
            layers.push(LayerSpec {
                name: name.clone(),
                op: LayerOp::FullyConnected {
                    in_dim: m[0].len(),
                    out_dim: m.len(),
                    weight: format!("{name}.w"),
                    bias: None,
                },
            });
            layers.push(LayerSpec { name: format!("relu{i}"), op: LayerOp::Relu });
            weights.insert(format!("{name}.w"), flat(m));
        }
        let (hid, top) = (self.wx.len(), self.wx[0].len());
        layers.push(LayerSpec {
            name: "rnn".into(),
            op: LayerOp::RecurrentRelu {
                in_dim: top,
                hidden_dim: hid,
                input_weight: "rnn.wx".into(),
                hidden_weight: "rnn.wh".into(),
                bias: None,
            },
        });
        layers.push(LayerSpec {
            name: "classifier".into(),
            op: LayerOp::Classifier { in_dim: hid, out_dim: self.cls.len(), weight: "cls.w".into(), bias: None },
        });
        weights.insert("rnn.wx".into(), flat(&self.wx));
        weights.insert("rnn.wh".into(), flat(&self.wh));
        weights.insert("cls.w".into(), flat(&self.cls));
        let manifest = ModelManifest {
            format_version: FORMAT_VERSION,
            input: InputSpec { channels: n0, height: 1, width: 1, clip_length },
            labels: (0..self.cls.len()).map(|i| format!("c{i}")).collect(),
            layers,
        };
        Model::new(manifest, &weights).unwrap()
    }
}

fn matvec_relu(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>().max(0.0)).collect()
}

/// Excitation backprop marginals on the input of every frame by explicit
/// enumeration of every top-down path through the unrolled graph. Each path
/// contributes the product of its conditional winning probabilities.
pub struct PathOracle<'a> {
    chain: &'a Chain,
    /// `acts[t][l]`: input (`l = 0`) and fc outputs of frame `t`.
    acts: Vec<Vec<Vec<f64>>>,
    /// `h[t]`, with `h[0] = 0`.
    h: Vec<Vec<f64>>,
    pub marginals: Vec<Vec<f64>>,
    pub paths: usize,
}

impl<'a> PathOracle<'a> {
    pub fn new(chain: &'a Chain, frames: &[Vec<f64>]) -> PathOracle<'a> {
        let acts: Vec<Vec<Vec<f64>>> = frames
            .iter()
            .map(|x| {
                let mut a = vec![x.clone()];
                for m in &chain.fcs {
                    let next = matvec_relu(m, a.last().unwrap());
                    a.push(next);
                }
                a
            })
            .collect();
        let mut h = vec![vec![0.0; chain.wx.len()]];
        for a in &acts {
            let x = a.last().unwrap();
            let prev = h.last().unwrap();
            let next = chain
                .wx
                .iter()
                .zip(&chain.wh)
                .map(|(rx, rh)| {
                    (rx.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                        + rh.iter().zip(prev).map(|(w, v)| w * v).sum::<f64>())
                    .max(0.0)
                })
                .collect();
            h.push(next);
        }
        let marginals = frames.iter().map(|f| vec![0.0; f.len()]).collect();
        PathOracle { chain, acts, h, marginals, paths: 0 }
    }

    /// Inject `prior` on the classifier at 1-based `step`; `negate` flips
    /// the classifier weights (the dual unit).
    pub fn run(mut self, prior: &[f64], step: usize, negate: bool) -> Vec<Vec<f64>> {
        let sign = if negate { -1.0 } else { 1.0 };
        for (k, &p) in prior.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let row: Vec<f64> = self.chain.cls[k].iter().map(|w| sign * w).collect();
            let z: f64 = row.iter().zip(&self.h[step]).filter(|(w, _)| **w >= 0.0).map(|(w, a)| w * a).sum();
            if z <= 0.0 {
                continue;
            }
            for (j, &w) in row.iter().enumerate() {
                if w >= 0.0 && self.h[step][j] * w > 0.0 {
                    self.visit_h(step, j, p * self.h[step][j] * w / z);
                }
            }
        }
        self.marginals
    }

    fn visit_h(&mut self, t: usize, j: usize, p: f64) {
        if t == 0 {
            self.paths += 1;
            return;
        }
        let x = self.acts[t - 1].last().unwrap().clone();
        let prev = self.h[t - 1].clone();
        let rx = self.chain.wx[j].clone();
        let rh = self.chain.wh[j].clone();
        let z: f64 = rx.iter().zip(&x).chain(rh.iter().zip(&prev)).filter(|(w, _)| **w >= 0.0).map(|(w, a)| w * a).sum();
        if z <= 0.0 {
            self.paths += 1;
            return;
        }
        for (i, (&w, &a)) in rx.iter().zip(&x).enumerate() {
            if w >= 0.0 && a * w > 0.0 {
                let top = self.chain.fcs.len();
                self.visit_fc(t - 1, top, i, p * a * w / z);
            }
        }
        for (m, (&w, &a)) in rh.iter().zip(&prev).enumerate() {
            if w >= 0.0 && a * w > 0.0 {
                self.visit_h(t - 1, m, p * a * w / z);
            }
        }
    }

    /// Unit `i` of activation level `l` in frame `t` (level 0 is the input).
    fn visit_fc(&mut self, t: usize, l: usize, i: usize, p: f64) {
        if l == 0 {
            self.marginals[t][i] += p;
            self.paths += 1;
            return;
        }
        let row = self.chain.fcs[l - 1][i].clone();
        let below = self.acts[t][l - 1].clone();
        let z: f64 = row.iter().zip(&below).filter(|(w, _)| **w >= 0.0).map(|(w, a)| w * a).sum();
        if z <= 0.0 {
            self.paths += 1;
            return;
        }
        for (c, (&w, &a)) in row.iter().zip(&below).enumerate() {
            if w >= 0.0 && a * w > 0.0 {
                self.visit_fc(t, l - 1, c, p * a * w / z);
            }
        }
    }
}

pub fn normalize(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: f64 = m.iter().flatten().sum();
    m.iter().map(|r| r.iter().map(|v| v / total).collect()).collect()
}

pub fn chain_clip(frames: &[Vec<f64>]) -> Clip {
    let n0 = frames[0].len();
    Clip::new(Tensor::new(vec![frames.len(), n0, 1, 1], frames.concat()).unwrap(), None).unwrap()
}

/// `sum_k prior_k * logit_k(step)` computed from scratch with the crate's
/// forward pass only.
pub fn objective(model: &Model, clip: &Clip, prior: &[f64], step: usize) -> f64 {
    let cache = ebr_core::forward_clip(model, clip).unwrap();
    let logits = &cache.logits[step.min(cache.logits.len()) - 1];
    prior.iter().zip(logits.data()).map(|(p, l)| p * l).sum()
}

/// Central differences of [`objective`] with respect to every input pixel.
/// Pixels must sit at least `eps` inside `[0, 1]`.
pub fn finite_difference(model: &Model, clip: &Clip, prior: &[f64], step: usize, eps: f64) -> Vec<f64> {
    let base = clip.frames().data().to_vec();
    let shape = clip.frames().shape().to_vec();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += eps;
            minus[i] -= eps;
            let f = |d: Vec<f64>| {
                let c = Clip::new(Tensor::new(shape.clone(), d).unwrap(), None).unwrap();
                objective(model, &c, prior, step)
            };
            (f(plus) - f(minus)) / (2.0 * eps)
        })
        .collect()
}

/// Distance of the forward pass from its nearest non-differentiable point:
/// the smallest `|pre-activation|` feeding any relu (including the recurrent
/// one) and the smallest gap between the top two entries of a pooling window
/// with a positive maximum (all-zero windows only move through a relu).
/// Finite differences are only meaningful when a nudge cannot cross one.
pub fn kink_margin(model: &Model, cache: &ebr_core::ActivationCache) -> f64 {
    use ebr_core::forward::TemporalCache;
    use ebr_core::model::LayerKind;
    let mut margin = f64::INFINITY;
    for frame in &cache.frames {
        for (idx, layer) in model.cnn_layers().iter().enumerate() {
            let input = frame.layer_input(idx);
            match &layer.kind {
                LayerKind::Relu => {
                    margin = input.data().iter().fold(margin, |m, v| m.min(v.abs()));
                }
                LayerKind::MaxPool2d(p) => {
                    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                    let (oh, ow) = ((h - p.window) / p.stride + 1, (w - p.window) / p.stride + 1);
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut vals: Vec<f64> = (0..p.window * p.window)
                                    .map(|i| {
                                        let (y, x) = (oy * p.stride + i / p.window, ox * p.stride + i % p.window);
                                        input.data()[(ch * h + y) * w + x]
                                    })
                                    .collect();
                                vals.sort_by(|a, b| b.total_cmp(a));
                                if vals[0] > 0.0 {
                                    margin = margin.min(vals[0] - vals[1]);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
    }
    if let (Some(r), TemporalCache::Recurrent { states }) = (model.recurrent(), &cache.temporal) {
        for (t, frame) in cache.frames.iter().enumerate() {
            let (x, prev) = (frame.feature().data(), states[t].data());
            for j in 0..r.hidden_dim {
                let mut z = r.bias.as_ref().map_or(0.0, |b| b.data()[j]);
                z += (0..r.in_dim).map(|i| r.input_weight.data()[j * r.in_dim + i] * x[i]).sum::<f64>();
                z += (0..r.hidden_dim).map(|i| r.hidden_weight.data()[j * r.hidden_dim + i] * prev[i]).sum::<f64>();
                margin = margin.min(z.abs());
            }
        }
    }
    margin
}
