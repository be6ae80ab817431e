//! Winning-probability propagation rules, one function per layer type.
//!
//! A parent `j` holding mass `m_j` hands it to its children in proportion to
//! `a_i * w_ij` over the children with `w_ij >= 0`. Parents without such a
//! child, or whose excitatory input sums to zero, keep nothing: their mass is
//! dropped and reported as leaked. Biases never take part.

use crate::error::{Error, Result};
use crate::forward::{ActivationCache, FrameCache, TemporalCache};
use crate::model::{Aggregator, Conv2d, LayerKind, Model};
use crate::tensor::Tensor;

use super::PriorSpec;

/// Mass arriving at a layer plus the mass dropped on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagated {
    pub mass: Tensor,
    pub leaked: f64,
}

/// Dense rule on raw slices. `weights` is `[parents, children]` row-major.
/// Accumulates into `out` and returns the leaked mass.
pub(crate) fn linear_into(
    child_acts: &[f64],
    weights: &[f64],
    parent_mass: &[f64],
    negate: bool,
    out: &mut [f64],
) -> f64 {
    let n = child_acts.len();
    let sign = if negate { -1.0 } else { 1.0 };
    let mut leaked = 0.0;
    for (j, &m) in parent_mass.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let row = &weights[j * n..(j + 1) * n];
        let mut z = 0.0;
        for (&a, &w) in child_acts.iter().zip(row) {
            let w = sign * w;
            if w >= 0.0 {
                z += a * w;
            }
        }
        if z.is_nan() || z <= 0.0 {
            leaked += m;
            continue;
        }
        let scale = m / z;
        for ((o, &a), &w) in out.iter_mut().zip(child_acts).zip(row) {
            let w = sign * w;
            if w >= 0.0 {
                *o += a * w * scale;
            }
        }
    }
    leaked
}

/// Excitation backprop through `parent = W child`, with `W` stored
/// `[parents, children]`. `negate` flips the sign of every weight first.
pub fn eb_linear_backward(
    child_acts: &Tensor,
    weights: &Tensor,
    parent_mass: &Tensor,
    negate: bool,
) -> Result<Propagated> {
    let [p, c] = weights.shape() else {
        return Err(Error::ShapeMismatch(format!("weights must be 2-D, got {:?}", weights.shape())));
    };
    if child_acts.len() != *c || parent_mass.len() != *p {
        return Err(Error::ShapeMismatch(format!(
            "weights {:?} vs {} children and {} parents",
            weights.shape(),
            child_acts.len(),
            parent_mass.len()
        )));
    }
    let mut out = vec![0.0; *c];
    let leaked = linear_into(child_acts.data(), weights.data(), parent_mass.data(), negate, &mut out);
    Ok(Propagated { mass: Tensor::from_parts(child_acts.shape().to_vec(), out), leaked })
}

/// Convolution as a structured linear layer: each output cell competes over
/// the in-bounds inputs of its receptive field. Zero padding contributes no
/// children.
pub fn eb_conv_backward(input: &Tensor, conv: &Conv2d, parent_mass: &Tensor) -> Result<Propagated> {
    let [ic, h, w] = *input.shape() else {
        return Err(Error::ShapeMismatch(format!("conv input must be 3-D, got {:?}", input.shape())));
    };
    let (k, s, p) = (conv.kernel, conv.stride, conv.padding);
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    if ic != conv.in_channels || parent_mass.shape() != [conv.out_channels, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "conv mass {:?} does not match input {:?}",
            parent_mass.shape(),
            input.shape()
        )));
    }
    let x = input.data();
    let wt = conv.weight.data();
    let mass = parent_mass.data();
    let mut out = vec![0.0; input.len()];
    let mut leaked = 0.0;

    // Receptive field bounds for one output coordinate.
    let span = |o: usize, extent: usize| {
        let lo = (o * s) as isize - p as isize;
        let k_lo = (-lo).max(0) as usize;
        let k_hi = (extent as isize - lo).min(k as isize).max(0) as usize;
        (lo, k_lo, k_hi)
    };

    for oc in 0..conv.out_channels {
        for oy in 0..oh {
            let (y0, ky_lo, ky_hi) = span(oy, h);
            for ox in 0..ow {
                let m = mass[(oc * oh + oy) * ow + ox];
                if m == 0.0 {
                    continue;
                }
                let (x0, kx_lo, kx_hi) = span(ox, w);
                let mut z = 0.0;
                for c in 0..ic {
                    for ky in ky_lo..ky_hi {
                        let iy = (y0 + ky as isize) as usize;
                        for kx in kx_lo..kx_hi {
                            let wv = wt[((oc * ic + c) * k + ky) * k + kx];
                            if wv >= 0.0 {
                                z += x[(c * h + iy) * w + (x0 + kx as isize) as usize] * wv;
                            }
                        }
                    }
                }
                if z.is_nan() || z <= 0.0 {
                    leaked += m;
                    continue;
                }
                let scale = m / z;
                for c in 0..ic {
                    for ky in ky_lo..ky_hi {
                        let iy = (y0 + ky as isize) as usize;
                        for kx in kx_lo..kx_hi {
                            let wv = wt[((oc * ic + c) * k + ky) * k + kx];
                            if wv >= 0.0 {
                                let i = (c * h + iy) * w + (x0 + kx as isize) as usize;
                                out[i] += x[i] * wv * scale;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Propagated { mass: Tensor::from_parts(input.shape().to_vec(), out), leaked })
}

/// Each pooled cell hands all of its mass to the input that won the forward max.
pub fn eb_pool_backward(input_shape: &[usize], argmax: &[usize], parent_mass: &Tensor) -> Result<Tensor> {
    if argmax.len() != parent_mass.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pooled cells but {} argmax entries",
            parent_mass.len(),
            argmax.len()
        )));
    }
    let mut out = vec![0.0; input_shape.iter().product()];
    for (&i, &m) in argmax.iter().zip(parent_mass.data()) {
        out[i] += m;
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), out))
}

/// One-to-one layers keep mass where it is.
pub fn eb_relu_backward(parent_mass: &Tensor) -> Tensor {
    parent_mass.clone()
}

pub fn eb_flatten_backward(input_shape: &[usize], parent_mass: &Tensor) -> Result<Tensor> {
    parent_mass.reshape(input_shape.to_vec())
}

/// Backward through frame-level layer `idx`, landing on that layer's input.
pub fn eb_layer_backward(model: &Model, frame: &FrameCache, idx: usize, mass: &Tensor) -> Result<Propagated> {
    let input = frame.layer_input(idx);
    let moved = |mass: Tensor| Propagated { mass, leaked: 0.0 };
    match &model.cnn_layers()[idx].kind {
        LayerKind::Conv2d(c) => eb_conv_backward(input, c, mass),
        LayerKind::Relu => Ok(moved(eb_relu_backward(mass))),
        LayerKind::MaxPool2d(_) => {
            let arg = frame.argmax[idx].as_deref().expect("maxpool argmax cached");
            Ok(moved(eb_pool_backward(input.shape(), arg, mass)?))
        }
        LayerKind::Flatten => Ok(moved(eb_flatten_backward(input.shape(), mass)?)),
        LayerKind::FullyConnected(l) => eb_linear_backward(input, &l.weight, mass, false),
        _ => unreachable!("aggregator and classifier are not frame-level layers"),
    }
}

/// Per-layer bookkeeping of a frame-level backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMass {
    /// Layer whose output holds `mass`, or `"input"`.
    pub layer: String,
    pub mass: f64,
    /// Mass leaked below the feature level so far.
    pub leaked: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnBackward {
    pub map: Tensor,
    pub leaked: f64,
    pub trace: Vec<LayerMass>,
}

/// Push frame-level mass from the feature layer down to the output of
/// frame-level layer `target` (`None` for the input frame).
pub fn eb_cnn_backward(
    model: &Model,
    frame: &FrameCache,
    feature_mass: &Tensor,
    target: Option<usize>,
) -> Result<CnnBackward> {
    let stop = target.map_or(0, |t| t + 1);
    let mut mass = feature_mass.clone();
    let mut leaked = 0.0;
    let mut trace = Vec::new();
    for idx in (stop..model.cnn_layers().len()).rev() {
        let step = eb_layer_backward(model, frame, idx, &mass)?;
        mass = step.mass;
        leaked += step.leaked;
        let layer = if idx == 0 { "input".to_string() } else { model.cnn_layers()[idx - 1].name.clone() };
        trace.push(LayerMass { layer, mass: mass.sum(), leaked });
    }
    Ok(CnnBackward { map: mass, leaked, trace })
}

/// Split pooled-feature mass over frames in proportion to each frame's
/// activation of that feature (the `1/T` pool weights cancel).
pub fn eb_meanpool_temporal_backward(features: &[&Tensor], parent_mass: &Tensor) -> Result<(Vec<Tensor>, f64)> {
    let d = parent_mass.len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::ShapeMismatch("frame features and pooled mass differ in length".into()));
    }
    let mut out: Vec<Vec<f64>> = vec![vec![0.0; d]; features.len()];
    let mut leaked = 0.0;
    for (i, &m) in parent_mass.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let z: f64 = features.iter().map(|f| f.data()[i]).sum();
        if z.is_nan() || z <= 0.0 {
            leaked += m;
            continue;
        }
        for (o, f) in out.iter_mut().zip(features) {
            o[i] += m * f.data()[i] / z;
        }
    }
    let frames = out
        .into_iter()
        .zip(features)
        .map(|(v, f)| Tensor::from_parts(f.shape().to_vec(), v))
        .collect();
    Ok((frames, leaked))
}

/// Feature-level masses for every frame after the top-down pass through the
/// classifier and the temporal aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalMass {
    pub frames: Vec<Tensor>,
    /// Total leaked anywhere above the feature level, including the classifier.
    pub leaked: f64,
    pub classifier_leaked: f64,
    /// Mass that reached the classifier's input at the prior step.
    pub aggregator_mass: f64,
}

fn check_step(prior: &PriorSpec, steps: usize) -> Result<usize> {
    if prior.step == 0 || prior.step > steps {
        return Err(Error::InvalidStep { step: prior.step, max: steps });
    }
    Ok(prior.step - 1)
}

/// Top-down pass through the classifier (negated when `negate_classifier`)
/// and the unrolled recurrence.
///
/// At step `t` the mass on `h_t` competes over `[x_t ; h_{t-1}]` with weights
/// `[W_x | W_h]`; the `x_t` share is frame `t`'s feature mass and the
/// `h_{t-1}` share carries on. Whatever reaches `h_0` is leaked.
pub fn eb_recurrent_backward(
    model: &Model,
    cache: &ActivationCache,
    prior: &PriorSpec,
    negate_classifier: bool,
) -> Result<TemporalMass> {
    let rec = model
        .recurrent()
        .ok_or_else(|| Error::InvalidMode("model has no recurrent layer".into()))?;
    let TemporalCache::Recurrent { states } = &cache.temporal else {
        return Err(Error::ShapeMismatch("cache holds no recurrent states".into()));
    };
    let n = check_step(prior, cache.len())? + 1;
    if states.len() != cache.len() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} recurrent states for {} frames",
            states.len(),
            cache.len()
        )));
    }
    let cls = model.classifier();
    let top = eb_linear_backward(&states[n], &cls.weight, &Tensor::vector(prior.mass.clone()), negate_classifier)?;
    let mut leaked = top.leaked;
    let aggregator_mass = top.mass.sum();

    // [W_x | W_h] as one [hidden, in + hidden] matrix.
    let (hd, id) = (rec.hidden_dim, rec.in_dim);
    let mut joint = Vec::with_capacity(hd * (id + hd));
    for j in 0..hd {
        joint.extend_from_slice(&rec.input_weight.data()[j * id..(j + 1) * id]);
        joint.extend_from_slice(&rec.hidden_weight.data()[j * hd..(j + 1) * hd]);
    }
    let joint = Tensor::from_parts(vec![hd, id + hd], joint);

    let mut frames: Vec<Tensor> =
        cache.frames.iter().map(|f| Tensor::from_parts(f.feature().shape().to_vec(), vec![0.0; id])).collect();
    let mut h_mass = top.mass;
    let mut children = vec![0.0; id + hd];
    for t in (1..=n).rev() {
        let x = cache.frames[t - 1].feature();
        children[..id].copy_from_slice(x.data());
        children[id..].copy_from_slice(states[t - 1].data());
        let step = eb_linear_backward(&Tensor::from_parts(vec![id + hd], children.clone()), &joint, &h_mass, false)?;
        leaked += step.leaked;
        let (xs, hs) = step.mass.data().split_at(id);
        frames[t - 1].data_mut().copy_from_slice(xs);
        h_mass = Tensor::from_parts(vec![hd], hs.to_vec());
    }
    leaked += h_mass.sum();
    Ok(TemporalMass { frames, leaked, classifier_leaked: top.leaked, aggregator_mass })
}

/// Top-down pass from the prior to per-frame feature masses for any aggregator.
///
/// Mean-pool models have a single classifier step, so `prior.step` is not
/// consulted for them. Models without an aggregator classify each frame, and
/// the prior lands on the frame at `prior.step`.
pub fn eb_temporal_backward(
    model: &Model,
    cache: &ActivationCache,
    prior: &PriorSpec,
    negate_classifier: bool,
) -> Result<TemporalMass> {
    if prior.mass.len() != model.num_outputs() {
        return Err(Error::InvalidPrior(format!(
            "prior has {} entries, model has {} outputs",
            prior.mass.len(),
            model.num_outputs()
        )));
    }
    let cls = model.classifier();
    let prior_mass = Tensor::vector(prior.mass.clone());
    match model.aggregator() {
        Aggregator::Recurrent => eb_recurrent_backward(model, cache, prior, negate_classifier),
        Aggregator::MeanPool => {
            let TemporalCache::MeanPool { pooled } = &cache.temporal else {
                return Err(Error::ShapeMismatch("cache holds no pooled features".into()));
            };
            let top = eb_linear_backward(pooled, &cls.weight, &prior_mass, negate_classifier)?;
            let features: Vec<&Tensor> = cache.frames.iter().map(FrameCache::feature).collect();
            let (frames, pool_leak) = eb_meanpool_temporal_backward(&features, &top.mass)?;
            Ok(TemporalMass {
                frames,
                leaked: top.leaked + pool_leak,
                classifier_leaked: top.leaked,
                aggregator_mass: top.mass.sum(),
            })
        }
        Aggregator::None => {
            let n = check_step(prior, cache.len())?;
            let top = eb_linear_backward(cache.frames[n].feature(), &cls.weight, &prior_mass, negate_classifier)?;
            let aggregator_mass = top.mass.sum();
            let mut frames: Vec<Tensor> = cache
                .frames
                .iter()
                .map(|f| Tensor::from_parts(f.feature().shape().to_vec(), vec![0.0; f.feature().len()]))
                .collect();
            frames[n] = top.mass;
            Ok(TemporalMass { frames, leaked: top.leaked, classifier_leaked: top.leaked, aggregator_mass })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::forward_frame;
    use crate::model::{InputSpec, LayerOp, LayerSpec, ModelManifest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn linear_hand_example() {
        // Z = 1 / (2*1 + 1*3) = 1/5
        let r = eb_linear_backward(
            &Tensor::vector(vec![2.0, 1.0, 1.0]),
            &Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap(),
            &Tensor::vector(vec![1.0]),
            false,
        )
        .unwrap();
        assert!(close(r.mass.data(), &[0.4, 0.0, 0.6], 1e-15));
        assert_eq!(r.leaked, 0.0);
    }

    #[test]
    fn linear_all_inhibitory_leaks() {
        let r = eb_linear_backward(
            &Tensor::vector(vec![2.0, 1.0]),
            &Tensor::new(vec![1, 2], vec![-1.0, -3.0]).unwrap(),
            &Tensor::vector(vec![1.0]),
            false,
        )
        .unwrap();
        assert_eq!(r.mass.data(), &[0.0, 0.0]);
        assert_eq!(r.leaked, 1.0);
        // negation turns the same weights excitatory
        let r = eb_linear_backward(
            &Tensor::vector(vec![2.0, 1.0]),
            &Tensor::new(vec![1, 2], vec![-1.0, -3.0]).unwrap(),
            &Tensor::vector(vec![1.0]),
            true,
        )
        .unwrap();
        assert!(close(r.mass.data(), &[0.4, 0.6], 1e-15));
    }

    #[test]
    fn linear_single_excitatory_child_takes_all() {
        let r = eb_linear_backward(
            &Tensor::vector(vec![0.3, 5.0, 1.0]),
            &Tensor::new(vec![1, 3], vec![-1.0, 2.0, -0.5]).unwrap(),
            &Tensor::vector(vec![0.7]),
            false,
        )
        .unwrap();
        assert_eq!(r.mass.data(), &[0.0, 0.7, 0.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let r = eb_linear_backward(
            &Tensor::vector(vec![1.0, 1.0]),
            &Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap(),
            &Tensor::vector(vec![1.0]),
            false,
        );
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    fn conv(ic: usize, oc: usize, k: usize, stride: usize, padding: usize, w: Vec<f64>) -> Conv2d {
        Conv2d {
            in_channels: ic,
            out_channels: oc,
            kernel: k,
            stride,
            padding,
            weight: Tensor::new(vec![oc, ic, k, k], w).unwrap(),
            bias: None,
        }
    }

    #[test]
    fn conv_1x1_copies_mass() {
        let c = conv(1, 1, 1, 1, 0, vec![2.0]);
        let x = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let m = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = eb_conv_backward(&x, &c, &m).unwrap();
        assert_eq!(r.mass.data(), m.data());
    }

    #[test]
    fn conv_uniform_3x3_spreads_ninths() {
        let c = conv(1, 1, 3, 1, 1, vec![1.0; 9]);
        let x = Tensor::filled(vec![1, 5, 5], 0.5).unwrap();
        let mut m = Tensor::zeros(vec![1, 5, 5]).unwrap();
        m.set(&[0, 2, 2], 1.0);
        let r = eb_conv_backward(&x, &c, &m).unwrap();
        for y in 0..5 {
            for xx in 0..5 {
                let expect = if (1..=3).contains(&y) && (1..=3).contains(&xx) { 1.0 / 9.0 } else { 0.0 };
                assert!((r.mass.get(&[0, y, xx]) - expect).abs() < 1e-15);
            }
        }
    }

    /// Dense `[out, in]` matrix equivalent of a convolution.
    fn im2col_matrix(c: &Conv2d, h: usize, w: usize) -> Tensor {
        let (k, s, p) = (c.kernel, c.stride, c.padding);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (w + 2 * p - k) / s + 1;
        let n_in = c.in_channels * h * w;
        let mut m = vec![0.0; c.out_channels * oh * ow * n_in];
        for o in 0..c.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (o * oh + oy) * ow + ox;
                    for ic in 0..c.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let col = (ic * h + iy as usize) * w + ix as usize;
                                m[row * n_in + col] = c.weight.get(&[o, ic, ky, kx]);
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![c.out_channels * oh * ow, n_in], m).unwrap()
    }

    #[test]
    fn conv_matches_im2col_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (ic, oc, k, s, p) in [(1, 1, 2, 1, 0), (2, 3, 2, 1, 1), (2, 2, 3, 2, 1), (1, 2, 2, 2, 0)] {
            let c = conv(ic, oc, k, s, p, (0..oc * ic * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let x = Tensor::new(vec![ic, 4, 4], (0..ic * 16).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
            let oh = (4 + 2 * p - k) / s + 1;
            let m = Tensor::new(vec![oc, oh, oh], (0..oc * oh * oh).map(|_| rng.gen_range(0.0..1.0)).collect())
                .unwrap();
            let direct = eb_conv_backward(&x, &c, &m).unwrap();
            let flat_x = x.reshape(vec![x.len()]).unwrap();
            let flat_m = m.reshape(vec![m.len()]).unwrap();
            let dense = eb_linear_backward(&flat_x, &im2col_matrix(&c, 4, 4), &flat_m, false).unwrap();
            assert!(close(direct.mass.data(), dense.mass.data(), 1e-12));
            assert!((direct.leaked - dense.leaked).abs() < 1e-12);
            assert!((direct.mass.sum() + direct.leaked - m.sum()).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_routes_to_winner() {
        let arg = vec![3];
        let r = eb_pool_backward(&[1, 2, 2], &arg, &Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap()).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_and_flatten_pass_through() {
        let m = Tensor::vector(vec![0.3, 0.7]);
        assert_eq!(eb_relu_backward(&m).data(), &[0.3, 0.7]);
        let m = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
        let back = eb_flatten_backward(&[1, 2, 2], &m).unwrap();
        assert_eq!(back.shape(), &[1, 2, 2]);
        assert_eq!(back.sum(), m.sum());
    }

    #[test]
    fn meanpool_examples() {
        let a = Tensor::vector(vec![1.0]);
        let b = Tensor::vector(vec![3.0]);
        let (f, leak) = eb_meanpool_temporal_backward(&[&a, &b], &Tensor::vector(vec![1.0])).unwrap();
        assert_eq!((f[0].data()[0], f[1].data()[0], leak), (0.25, 0.75, 0.0));

        let e = Tensor::vector(vec![2.0]);
        let (f, _) = eb_meanpool_temporal_backward(&[&e, &e, &e, &e], &Tensor::vector(vec![1.0])).unwrap();
        assert!(f.iter().all(|t| t.data()[0] == 0.25));

        let z = Tensor::vector(vec![0.0]);
        let (f, leak) = eb_meanpool_temporal_backward(&[&z, &z], &Tensor::vector(vec![1.0])).unwrap();
        assert_eq!((f[0].data()[0], f[1].data()[0], leak), (0.0, 0.0, 1.0));
    }

    /// flatten -> rnn(1 -> 1) -> classifier(1 -> 1)
    fn scalar_rnn(wx: f64, wh: f64, t: usize) -> Model {
        let manifest = ModelManifest {
            format_version: 1,
            input: InputSpec { channels: 1, height: 1, width: 1, clip_length: t },
            labels: vec!["a".into()],
            layers: vec![
                LayerSpec { name: "flat".into(), op: LayerOp::Flatten },
                LayerSpec {
                    name: "rnn".into(),
                    op: LayerOp::RecurrentRelu {
                        in_dim: 1,
                        hidden_dim: 1,
                        input_weight: "wx".into(),
                        hidden_weight: "wh".into(),
                        bias: None,
                    },
                },
                LayerSpec {
                    name: "cls".into(),
                    op: LayerOp::Classifier { in_dim: 1, out_dim: 1, weight: "c".into(), bias: None },
                },
            ],
        };
        let mut w = BTreeMap::new();
        w.insert("wx".to_string(), Tensor::new(vec![1, 1], vec![wx]).unwrap());
        w.insert("wh".to_string(), Tensor::new(vec![1, 1], vec![wh]).unwrap());
        w.insert("c".to_string(), Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        Model::new(manifest, &w).unwrap()
    }

    fn hand_cache(model: &Model, xs: &[f64], hs: &[f64]) -> ActivationCache {
        let frames = xs
            .iter()
            .map(|&x| forward_frame(model, &Tensor::new(vec![1, 1, 1], vec![x]).unwrap()).unwrap())
            .collect();
        ActivationCache {
            frames,
            temporal: TemporalCache::Recurrent { states: hs.iter().map(|&h| Tensor::vector(vec![h])).collect() },
            logits: vec![Tensor::vector(vec![0.0]); xs.len()],
        }
    }

    #[test]
    fn two_step_trace_with_equal_activations() {
        // every activation (x_1, x_2, h_0, h_1, h_2) equal, identity weights
        let m = scalar_rnn(1.0, 1.0, 2);
        let cache = hand_cache(&m, &[0.5, 0.5], &[0.5, 0.5, 0.5]);
        let r = eb_recurrent_backward(&m, &cache, &PriorSpec::one_hot(0, 1, 2), false).unwrap();
        assert_eq!(r.frames[0].data(), &[0.25]);
        assert_eq!(r.frames[1].data(), &[0.5]);
        assert_eq!(r.leaked, 0.25);
    }

    #[test]
    fn no_recurrence_puts_everything_on_last_frame() {
        let m = scalar_rnn(1.0, 0.0, 3);
        let cache = hand_cache(&m, &[0.2, 0.9, 0.4], &[0.0, 0.2, 0.9, 0.4]);
        let r = eb_recurrent_backward(&m, &cache, &PriorSpec::one_hot(0, 1, 3), false).unwrap();
        assert_eq!(r.frames[0].data(), &[0.0]);
        assert_eq!(r.frames[1].data(), &[0.0]);
        assert_eq!(r.frames[2].data(), &[1.0]);
    }

    #[test]
    fn invalid_step() {
        let m = scalar_rnn(1.0, 1.0, 2);
        let cache = hand_cache(&m, &[0.5, 0.5], &[0.0, 0.5, 1.0]);
        for step in [0, 3] {
            let r = eb_recurrent_backward(&m, &cache, &PriorSpec::one_hot(0, 1, step), false);
            assert!(matches!(r, Err(Error::InvalidStep { .. })));
        }
    }
}
