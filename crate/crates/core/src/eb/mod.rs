//! Top-down saliency: excitation backprop (EB), its contrastive form (cEB),
//! their recurrent extensions (EB-R, cEB-R) and gradient baselines (BP, BP-R).
//!
//! For the recurrent modes the pipeline is:
//!
//! 1. inject the prior on the classifier outputs at the chosen step and run
//!    the top-down pass back through time to per-frame feature masses;
//! 2. for the contrastive mode, repeat with the classifier weights negated;
//! 3. normalize each branch so its mass sums to one over space and time;
//! 4. subtract the dual branch (contrastive mode only);
//! 5. push each frame's (possibly signed) feature map down the frame-level
//!    stack to the target layer.

mod gradient;
mod propagate;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{forward_clip, forward_from_frames, ActivationCache, Clip};
use crate::model::{validate_eb_assumptions, Aggregator, Model};
use crate::tensor::{load_tensor, save_tensor, Tensor};
use crate::FORMAT_VERSION;

pub use gradient::{gradient_cnn, gradient_temporal};
pub use propagate::{
    eb_cnn_backward, eb_conv_backward, eb_flatten_backward, eb_layer_backward, eb_linear_backward,
    eb_meanpool_temporal_backward, eb_pool_backward, eb_recurrent_backward, eb_relu_backward,
    eb_temporal_backward, CnnBackward, LayerMass, Propagated, TemporalMass,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "EB")]
    Eb,
    #[serde(rename = "cEB")]
    CEb,
    #[serde(rename = "EB-R")]
    EbR,
    #[serde(rename = "cEB-R")]
    CEbR,
    #[serde(rename = "BP")]
    Bp,
    #[serde(rename = "BP-R")]
    BpR,
}

impl Mode {
    pub const ALL: [Mode; 6] = [Mode::Eb, Mode::CEb, Mode::EbR, Mode::CEbR, Mode::Bp, Mode::BpR];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Eb => "EB",
            Mode::CEb => "cEB",
            Mode::EbR => "EB-R",
            Mode::CEbR => "cEB-R",
            Mode::Bp => "BP",
            Mode::BpR => "BP-R",
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, Mode::EbR | Mode::CEbR | Mode::BpR)
    }

    pub fn is_contrastive(self) -> bool {
        matches!(self, Mode::CEb | Mode::CEbR)
    }

    pub fn is_gradient(self) -> bool {
        matches!(self, Mode::Bp | Mode::BpR)
    }

    /// Whether maps can take negative values (and so carry a boundary signal).
    pub fn is_signed(self) -> bool {
        self.is_contrastive() || self.is_gradient()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidMode(format!("{s:?} (expected one of EB, cEB, EB-R, cEB-R, BP, BP-R)")))
    }
}

/// Top-down input: a distribution over output units injected at `step`
/// (1-based, as is every time step in this module).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub unit: usize,
    pub step: usize,
    pub mass: Vec<f64>,
}

impl PriorSpec {
    pub fn one_hot(unit: usize, num_outputs: usize, step: usize) -> PriorSpec {
        let mut mass = vec![0.0; num_outputs];
        mass[unit] = 1.0;
        PriorSpec { unit, step, mass }
    }

    pub fn validate(&self, num_outputs: usize) -> Result<()> {
        if self.mass.len() != num_outputs {
            return Err(Error::InvalidPrior(format!(
                "{} entries for {num_outputs} outputs",
                self.mass.len()
            )));
        }
        if self.unit >= num_outputs {
            return Err(Error::InvalidPrior(format!("unit {} out of range", self.unit)));
        }
        if self.mass.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::InvalidPrior("mass must be finite and non-negative".into()));
        }
        let total: f64 = self.mass.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPrior(format!("mass sums to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Layer at which maps are read: the input frame or a frame-level layer's output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetLayer {
    Input,
    Layer(String),
}

impl TargetLayer {
    pub fn name(&self) -> &str {
        match self {
            TargetLayer::Input => "input",
            TargetLayer::Layer(n) => n,
        }
    }

    fn resolve(&self, model: &Model) -> Result<Option<usize>> {
        match self {
            TargetLayer::Input => Ok(None),
            TargetLayer::Layer(n) => model
                .cnn_layer_index(n)
                .map(Some)
                .ok_or_else(|| Error::InvalidLayer(n.clone())),
        }
    }
}

impl From<&str> for TargetLayer {
    fn from(s: &str) -> TargetLayer {
        if s == "input" {
            TargetLayer::Input
        } else {
            TargetLayer::Layer(s.to_string())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyOptions {
    pub target: TargetLayer,
    /// Report `|gradient|` instead of the raw gradient in BP modes.
    pub bp_absolute: bool,
}

impl SaliencyOptions {
    pub fn at(target: impl Into<TargetLayer>) -> SaliencyOptions {
        SaliencyOptions { target: target.into(), bp_absolute: false }
    }
}

/// Mass dropped during propagation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakReport {
    /// Leaked above the feature level by the positive branch (prior units).
    pub positive: f64,
    /// Same for the dual branch, in contrastive modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual: Option<f64>,
    /// Leaked inside the frame-level stack by the propagated (normalized) map.
    pub spatial: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencySequence {
    pub layer: String,
    pub mode: Mode,
    pub prior: PriorSpec,
    /// One map per frame with the target layer's own shape.
    pub maps: Vec<Tensor>,
    pub leaked: LeakReport,
}

/// JSON sidecar written next to a saved saliency tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencySidecar {
    pub format_version: u32,
    pub mode: Mode,
    pub layer: String,
    pub prior: PriorSpec,
    pub leaked: LeakReport,
}

/// Collapse a layer map to 2-D: channel sum for `[C, H, W]`, `[1, D]` for vectors.
pub fn spatial_map(map: &Tensor) -> Tensor {
    match *map.shape() {
        [c, h, w] => {
            let mut out = vec![0.0; h * w];
            for ch in 0..c {
                for (o, v) in out.iter_mut().zip(&map.data()[ch * h * w..(ch + 1) * h * w]) {
                    *o += v;
                }
            }
            Tensor::from_parts(vec![h, w], out)
        }
        [d] => Tensor::from_parts(vec![1, d], map.data().to_vec()),
        [h, w] => Tensor::from_parts(vec![h, w], map.data().to_vec()),
        _ => panic!("unsupported map shape {:?}", map.shape()),
    }
}

impl SaliencySequence {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn spatial(&self, t: usize) -> Tensor {
        spatial_map(&self.maps[t])
    }

    /// `[T, H', W']` stack of channel-summed maps.
    pub fn channel_summed(&self) -> Result<Tensor> {
        let maps: Vec<Tensor> = (0..self.len()).map(|t| self.spatial(t)).collect();
        Tensor::stack(&maps)
    }

    pub fn sidecar(&self) -> SaliencySidecar {
        SaliencySidecar {
            format_version: FORMAT_VERSION,
            mode: self.mode,
            layer: self.layer.clone(),
            prior: self.prior.clone(),
            leaked: self.leaked,
        }
    }

    /// Writes the `[T, H', W']` tensor to `path` and the sidecar to `path.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_tensor(&self.channel_summed()?, path)?;
        fs::write(path.with_extension("json"), serde_json::to_string_pretty(&self.sidecar())? + "\n")?;
        Ok(())
    }

    /// Reads a saved sequence; maps come back channel-summed (`[H', W']` each).
    pub fn load(path: impl AsRef<Path>) -> Result<SaliencySequence> {
        let path = path.as_ref();
        let stacked = load_tensor(path)?;
        if stacked.rank() != 3 {
            return Err(Error::ShapeMismatch(format!("saliency must be [T, H, W], got {:?}", stacked.shape())));
        }
        let side: SaliencySidecar = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
        Ok(SaliencySequence {
            layer: side.layer,
            mode: side.mode,
            prior: side.prior,
            maps: (0..stacked.shape()[0]).map(|t| stacked.slice_outer(t)).collect(),
            leaked: side.leaked,
        })
    }
}

/// Divide every mass by the total over all frames and positions.
pub fn temporal_normalize(masses: &[Tensor]) -> Result<Vec<Tensor>> {
    let total: f64 = masses.iter().map(Tensor::sum).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::AllZeroMass);
    }
    Ok(masses.iter().map(|m| m.map(|v| v / total)).collect())
}

/// Elementwise `positive - dual`.
pub fn contrastive_combine(positive: &[Tensor], dual: &[Tensor]) -> Result<Vec<Tensor>> {
    if positive.len() != dual.len() {
        return Err(Error::LengthMismatch { left: positive.len(), right: dual.len() });
    }
    positive
        .iter()
        .zip(dual)
        .map(|(p, d)| {
            if p.shape() != d.shape() {
                return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", p.shape(), d.shape())));
            }
            Ok(Tensor::from_parts(
                p.shape().to_vec(),
                p.data().iter().zip(d.data()).map(|(a, b)| a - b).collect(),
            ))
        })
        .collect()
}

/// A branch whose mass leaked entirely contributes an all-zero map.
fn normalize_or_zero(masses: &[Tensor]) -> Vec<Tensor> {
    temporal_normalize(masses).unwrap_or_else(|_| masses.iter().map(|m| m.map(|_| 0.0)).collect())
}

/// Normalized feature-level maps for one branch set, before the frame-level pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub maps: Vec<Tensor>,
    pub positive_leak: f64,
    pub dual_leak: Option<f64>,
}

/// Steps 1-4 for the recurrent EB modes: per-frame feature maps after
/// temporal normalization and, for cEB-R, the contrastive subtraction.
pub fn recurrent_feature_maps(
    model: &Model,
    cache: &ActivationCache,
    prior: &PriorSpec,
    contrastive: bool,
) -> Result<FeatureMaps> {
    let pos = eb_temporal_backward(model, cache, prior, false)?;
    let pos_n = normalize_or_zero(&pos.frames);
    if !contrastive {
        return Ok(FeatureMaps { maps: pos_n, positive_leak: pos.leaked, dual_leak: None });
    }
    let dual = eb_temporal_backward(model, cache, prior, true)?;
    let dual_n = normalize_or_zero(&dual.frames);
    Ok(FeatureMaps {
        maps: contrastive_combine(&pos_n, &dual_n)?,
        positive_leak: pos.leaked,
        dual_leak: Some(dual.leaked),
    })
}

/// Single-frame feature maps for EB / cEB: each frame is its own length-1
/// clip and is normalized on its own.
fn per_frame_feature_maps(
    model: &Model,
    cache: &ActivationCache,
    prior: &PriorSpec,
    contrastive: bool,
) -> Result<FeatureMaps> {
    let single = PriorSpec { step: 1, ..prior.clone() };
    let per_frame: Vec<FeatureMaps> = cache
        .frames
        .par_iter()
        .map(|f| {
            let c = forward_from_frames(model, vec![f.clone()])?;
            recurrent_feature_maps(model, &c, &single, contrastive)
        })
        .collect::<Result<_>>()?;
    let mut out = FeatureMaps {
        maps: Vec::with_capacity(per_frame.len()),
        positive_leak: 0.0,
        dual_leak: contrastive.then_some(0.0),
    };
    for f in per_frame {
        out.maps.extend(f.maps);
        out.positive_leak += f.positive_leak;
        if let (Some(acc), Some(d)) = (out.dual_leak.as_mut(), f.dual_leak) {
            *acc += d;
        }
    }
    Ok(out)
}

/// Saliency for a clip whose forward pass is already cached.
pub fn saliency_from_cache(
    model: &Model,
    cache: &ActivationCache,
    prior: &PriorSpec,
    mode: Mode,
    opts: &SaliencyOptions,
) -> Result<SaliencySequence> {
    prior.validate(model.num_outputs())?;
    let target = opts.target.resolve(model)?;
    if mode.is_recurrent() && model.aggregator() == Aggregator::None {
        return Err(Error::InvalidMode(format!("{mode} needs a model with a temporal aggregator")));
    }
    if mode.is_recurrent() && model.aggregator() == Aggregator::Recurrent && (prior.step == 0 || prior.step > cache.len()) {
        return Err(Error::InvalidStep { step: prior.step, max: cache.len() });
    }

    let (maps, leaked) = if mode.is_gradient() {
        let grads = if mode.is_recurrent() {
            gradient_temporal(model, cache, prior)?
        } else {
            let single = PriorSpec { step: 1, ..prior.clone() };
            cache
                .frames
                .par_iter()
                .map(|f| {
                    let c = forward_from_frames(model, vec![f.clone()])?;
                    Ok(gradient_temporal(model, &c, &single)?.remove(0))
                })
                .collect::<Result<Vec<_>>>()?
        };
        let maps: Vec<Tensor> = cache
            .frames
            .par_iter()
            .zip(&grads)
            .map(|(f, g)| {
                let m = gradient_cnn(model, f, g, target);
                if opts.bp_absolute {
                    m.map(f64::abs)
                } else {
                    m
                }
            })
            .collect();
        (maps, LeakReport::default())
    } else {
        let violations = validate_eb_assumptions(model.manifest());
        if !violations.is_empty() {
            return Err(Error::EbAssumptions(violations));
        }
        let features = if mode.is_recurrent() {
            recurrent_feature_maps(model, cache, prior, mode.is_contrastive())?
        } else {
            per_frame_feature_maps(model, cache, prior, mode.is_contrastive())?
        };
        let results: Vec<CnnBackward> = cache
            .frames
            .par_iter()
            .zip(&features.maps)
            .map(|(f, m)| eb_cnn_backward(model, f, m, target))
            .collect::<Result<_>>()?;
        let spatial = results.iter().map(|r| r.leaked).sum();
        let maps = results.into_iter().map(|r| r.map).collect();
        (maps, LeakReport { positive: features.positive_leak, dual: features.dual_leak, spatial })
    };

    Ok(SaliencySequence { layer: opts.target.name().to_string(), mode, prior: prior.clone(), maps, leaked })
}

/// Forward pass plus saliency.
pub fn run_saliency(
    model: &Model,
    clip: &Clip,
    prior: &PriorSpec,
    mode: Mode,
    opts: &SaliencyOptions,
) -> Result<SaliencySequence> {
    let cache = forward_clip(model, clip)?;
    saliency_from_cache(model, &cache, prior, mode, opts)
}

/// Mass bookkeeping of an un-normalized EB-R pass, layer by layer from the
/// classifier down to the input frame. At every entry
/// `mass + leaked` equals the prior's total mass.
pub fn trace_eb_r(model: &Model, cache: &ActivationCache, prior: &PriorSpec) -> Result<Vec<LayerMass>> {
    prior.validate(model.num_outputs())?;
    let temporal = eb_temporal_backward(model, cache, prior, false)?;
    let prior_total: f64 = prior.mass.iter().sum();
    let mut trace = vec![LayerMass { layer: model.classifier_name().to_string(), mass: prior_total, leaked: 0.0 }];
    if let Some(name) = model.aggregator_name() {
        trace.push(LayerMass {
            layer: name.to_string(),
            mass: temporal.aggregator_mass,
            leaked: temporal.classifier_leaked,
        });
    }
    let feature_name = model.cnn_layers().last().map_or("input", |l| l.name.as_str());
    trace.push(LayerMass {
        layer: feature_name.to_string(),
        mass: temporal.frames.iter().map(Tensor::sum).sum(),
        leaked: temporal.leaked,
    });
    let per_frame: Vec<CnnBackward> = cache
        .frames
        .iter()
        .zip(&temporal.frames)
        .map(|(f, m)| eb_cnn_backward(model, f, m, None))
        .collect::<Result<_>>()?;
    for i in 0..model.cnn_layers().len() {
        let layer = per_frame[0].trace[i].layer.clone();
        let mass = per_frame.iter().map(|r| r.trace[i].mass).sum();
        let leaked = temporal.leaked + per_frame.iter().map(|r| r.trace[i].leaked).sum::<f64>();
        trace.push(LayerMass { layer, mass, leaked });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let ones = vec![Tensor::vector(vec![1.0, 1.0]), Tensor::vector(vec![1.0, 1.0])];
        let n = temporal_normalize(&ones).unwrap();
        assert!(n.iter().all(|t| t.data() == [0.25, 0.25]));
        let single = vec![Tensor::vector(vec![2.0, 0.0]), Tensor::vector(vec![0.0, 0.0])];
        let n = temporal_normalize(&single).unwrap();
        assert_eq!(n[0].data(), &[1.0, 0.0]);
        assert_eq!(n[1].data(), &[0.0, 0.0]);
        let zero = vec![Tensor::vector(vec![0.0])];
        assert!(matches!(temporal_normalize(&zero), Err(Error::AllZeroMass)));
    }

    #[test]
    fn combine_examples() {
        let p = vec![Tensor::vector(vec![0.5, 0.5])];
        assert!(contrastive_combine(&p, &p).unwrap()[0].data().iter().all(|&v| v == 0.0));
        let a = vec![Tensor::vector(vec![1.0, 0.0])];
        let b = vec![Tensor::vector(vec![0.0, 1.0])];
        assert_eq!(contrastive_combine(&a, &b).unwrap()[0].data(), &[1.0, -1.0]);
        assert!(contrastive_combine(&a, &[]).is_err());
        assert!(contrastive_combine(&a, &[Tensor::vector(vec![1.0])]).is_err());
    }

    #[test]
    fn mode_strings() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), m.as_str());
        }
        assert_eq!("ceb-r".parse::<Mode>().unwrap(), Mode::CEbR);
        assert!("EBR".parse::<Mode>().is_err());
    }

    #[test]
    fn prior_validation() {
        assert!(PriorSpec::one_hot(1, 3, 1).validate(3).is_ok());
        assert!(PriorSpec::one_hot(1, 3, 1).validate(4).is_err());
        let p = PriorSpec { unit: 0, step: 1, mass: vec![0.5, 0.6] };
        assert!(p.validate(2).is_err());
        let p = PriorSpec { unit: 0, step: 1, mass: vec![1.5, -0.5] };
        assert!(p.validate(2).is_err());
    }

    #[test]
    fn spatial_map_shapes() {
        let m = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(spatial_map(&m).data(), &[4.0, 6.0]);
        assert_eq!(spatial_map(&Tensor::vector(vec![1.0, 2.0])).shape(), &[1, 2]);
    }

    proptest! {
        #[test]
        fn normalized_sums_to_one(
            frames in proptest::collection::vec(proptest::collection::vec(0.0f64..10.0, 1..20), 1..10)
        ) {
            let d = frames[0].len();
            let masses: Vec<Tensor> = frames.iter().map(|f| {
                let mut v = f.clone();
                v.resize(d, 0.5);
                Tensor::vector(v)
            }).collect();
            prop_assume!(masses.iter().map(Tensor::sum).sum::<f64>() > 0.0);
            let n = temporal_normalize(&masses).unwrap();
            let total: f64 = n.iter().map(Tensor::sum).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}
