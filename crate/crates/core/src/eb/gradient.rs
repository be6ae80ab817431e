//! Plain reverse-mode gradients of the prior-weighted logit, the BP / BP-R baselines.

use crate::error::{Error, Result};
use crate::forward::{ActivationCache, FrameCache, TemporalCache};
use crate::model::{Aggregator, LayerKind, Model};
use crate::tensor::Tensor;

use super::PriorSpec;

/// `W^T g` for `W` stored `[out, in]`.
fn transpose_mul(weight: &Tensor, g: &[f64]) -> Vec<f64> {
    let (rows, cols) = (weight.shape()[0], weight.shape()[1]);
    let w = weight.data();
    let mut out = vec![0.0; cols];
    for (j, &gj) in g.iter().enumerate().take(rows) {
        if gj == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(&w[j * cols..(j + 1) * cols]) {
            *o += wv * gj;
        }
    }
    out
}

/// Gradient of `sum_k prior_k * logit_k(step)` with respect to every frame's feature.
pub fn gradient_temporal(model: &Model, cache: &ActivationCache, prior: &PriorSpec) -> Result<Vec<Tensor>> {
    let cls = model.classifier();
    if prior.mass.len() != cls.out_dim {
        return Err(Error::InvalidPrior(format!("prior has {} entries", prior.mass.len())));
    }
    let g_top = transpose_mul(&cls.weight, &prior.mass);
    let zeros = |f: &FrameCache| Tensor::from_parts(f.feature().shape().to_vec(), vec![0.0; f.feature().len()]);
    let mut grads: Vec<Tensor> = cache.frames.iter().map(zeros).collect();
    let steps = cache.len();
    match model.aggregator() {
        Aggregator::Recurrent => {
            let rec = model.recurrent().unwrap();
            let TemporalCache::Recurrent { states } = &cache.temporal else {
                return Err(Error::ShapeMismatch("cache holds no recurrent states".into()));
            };
            if prior.step == 0 || prior.step > steps {
                return Err(Error::InvalidStep { step: prior.step, max: steps });
            }
            let mut g_h = g_top;
            for t in (1..=prior.step).rev() {
                let g_z: Vec<f64> =
                    g_h.iter().zip(states[t].data()).map(|(g, &h)| if h > 0.0 { *g } else { 0.0 }).collect();
                grads[t - 1].data_mut().copy_from_slice(&transpose_mul(&rec.input_weight, &g_z));
                g_h = transpose_mul(&rec.hidden_weight, &g_z);
            }
        }
        Aggregator::MeanPool => {
            let inv = 1.0 / steps as f64;
            for g in &mut grads {
                for (o, v) in g.data_mut().iter_mut().zip(&g_top) {
                    *o = v * inv;
                }
            }
        }
        Aggregator::None => {
            if prior.step == 0 || prior.step > steps {
                return Err(Error::InvalidStep { step: prior.step, max: steps });
            }
            grads[prior.step - 1].data_mut().copy_from_slice(&g_top);
        }
    }
    Ok(grads)
}

/// Pull a feature gradient down to the output of frame-level layer `target`
/// (`None` for the input frame).
pub fn gradient_cnn(model: &Model, frame: &FrameCache, grad_feature: &Tensor, target: Option<usize>) -> Tensor {
    let stop = target.map_or(0, |t| t + 1);
    let mut g = grad_feature.clone();
    for idx in (stop..model.cnn_layers().len()).rev() {
        let input = frame.layer_input(idx);
        g = match &model.cnn_layers()[idx].kind {
            LayerKind::Conv2d(c) => {
                let (ic, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let (oc, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let (k, s, p) = (c.kernel, c.stride, c.padding);
                let wt = c.weight.data();
                let gd = g.data();
                let mut out = vec![0.0; input.len()];
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = gd[(o * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            for ch in 0..ic {
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
                                        out[(ch * h + iy as usize) * w + ix as usize] +=
                                            wt[((o * ic + ch) * k + ky) * k + kx] * go;
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::from_parts(input.shape().to_vec(), out)
            }
            LayerKind::Relu => {
                let y = &frame.outputs[idx];
                Tensor::from_parts(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(g, &y)| if y > 0.0 { *g } else { 0.0 }).collect(),
                )
            }
            LayerKind::MaxPool2d(_) => {
                let arg = frame.argmax[idx].as_ref().expect("maxpool argmax cached");
                let mut out = vec![0.0; input.len()];
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    out[i] += gv;
                }
                Tensor::from_parts(input.shape().to_vec(), out)
            }
            LayerKind::Flatten => Tensor::from_parts(input.shape().to_vec(), g.into_data()),
            LayerKind::FullyConnected(l) => {
                Tensor::from_parts(input.shape().to_vec(), transpose_mul(&l.weight, g.data()))
            }
            _ => unreachable!("aggregator and classifier are not frame-level layers"),
        };
    }
    g
}
