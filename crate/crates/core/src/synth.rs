//! Synthetic two-action clips with known boundaries, a hand-built toy model
//! that recognizes them, and random model generators for property tests.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{softmax_probs, ActivationCache, Clip, ClipMeta, FrameMeta};
use crate::grounding::{BBox, Segment};
use crate::model::{InputSpec, LayerOp, LayerSpec, Model, ModelManifest};
use crate::tensor::Tensor;
use crate::FORMAT_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    GtFirst,
    RandFirst,
    RandGtRand,
}

impl Layout {
    pub fn as_str(self) -> &'static str {
        match self {
            Layout::GtFirst => "gt-first",
            Layout::RandFirst => "rand-first",
            Layout::RandGtRand => "rand-gt-rand",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Layout> {
        [Layout::GtFirst, Layout::RandFirst, Layout::RandGtRand]
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown layout {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// `[C, H, W]`.
    pub frame: [usize; 3],
    pub clip_length: usize,
    pub gt_class: usize,
    pub rand_class: usize,
    pub layout: Layout,
    pub gt_length: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::InvalidSpec("need at least two classes".into()));
        }
        if self.gt_class >= k || self.rand_class >= k {
            return Err(Error::InvalidSpec("class id out of range".into()));
        }
        if self.gt_class == self.rand_class {
            return Err(Error::InvalidSpec("gt and rand classes must differ".into()));
        }
        if self.gt_length == 0 || self.gt_length > self.clip_length {
            return Err(Error::InvalidSpec(format!(
                "gt_length {} must be in 1..={}",
                self.gt_length, self.clip_length
            )));
        }
        if self.layout == Layout::RandGtRand && self.clip_length < self.gt_length + 2 {
            return Err(Error::InvalidSpec("rand-gt-rand needs a rand frame on each side".into()));
        }
        let g = grid_size(k);
        let [c, h, w] = self.frame;
        if c == 0 || h < 4 * g || w < 4 * g {
            return Err(Error::InvalidSpec(format!("frame {:?} too small for {k} classes", self.frame)));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::InvalidSpec("noise must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub clip: Clip,
    /// Frames holding the gt pattern; the label is `gt_class`.
    pub gt: Segment,
    pub gt_class: usize,
    pub rand_class: usize,
}

fn grid_size(num_classes: usize) -> usize {
    (1..).find(|g| g * g >= num_classes).unwrap()
}

/// Rectangle drawn for class `k`: the central half of grid cell `k` on a
/// `ceil(sqrt K)` square grid, in pixel units.
pub fn pattern_rect(k: usize, num_classes: usize, height: usize, width: usize) -> BBox {
    let g = grid_size(num_classes);
    let (ch, cw) = (height / g, width / g);
    let (row, col) = (k / g, k % g);
    BBox {
        x: (col * cw + cw / 4) as f64,
        y: (row * ch + ch / 4) as f64,
        w: (cw / 2) as f64,
        h: (ch / 2) as f64,
    }
}

fn draw_frame(data: &mut [f64], class: usize, spec: &SynthSpec, rng: &mut ChaCha8Rng) {
    let [c, h, w] = spec.frame;
    let r = pattern_rect(class, spec.num_classes, h, w);
    let (x0, y0) = (r.x as usize, r.y as usize);
    let (x1, y1) = (x0 + r.w as usize, y0 + r.h as usize);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let base = if (y0..y1).contains(&y) && (x0..x1).contains(&x) { 1.0 } else { 0.0 };
                let n: f64 = if spec.noise > 0.0 { rng.gen_range(-spec.noise..=spec.noise) } else { 0.0 };
                data[(ch * h + y) * w + x] = (base + n).clamp(0.0, 1.0);
            }
        }
    }
}

/// Clip of rand frames with a contiguous run of gt frames placed by `layout`.
pub fn gen_synthetic_clip(spec: &SynthSpec) -> Result<SynthClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t_len = spec.clip_length;
    let start = match spec.layout {
        Layout::GtFirst => 0,
        Layout::RandFirst => t_len - spec.gt_length,
        Layout::RandGtRand => rng.gen_range(1..t_len - spec.gt_length),
    };
    let gt = Segment::new(start, start + spec.gt_length - 1, spec.gt_class);
    let [c, h, w] = spec.frame;
    let frame_len = c * h * w;
    let mut data = vec![0.0; t_len * frame_len];
    let mut meta = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let class = if gt.contains(t) { spec.gt_class } else { spec.rand_class };
        draw_frame(&mut data[t * frame_len..(t + 1) * frame_len], class, spec, &mut rng);
        meta.push(FrameMeta { class: Some(class), bbox: Some(pattern_rect(class, spec.num_classes, h, w)) });
    }
    let clip = Clip::new(Tensor::new(vec![t_len, c, h, w], data)?, Some(ClipMeta { frames: meta }))?;
    Ok(SynthClip { clip, gt, gt_class: spec.gt_class, rand_class: spec.rand_class })
}

/// Clip showing class `class` on every frame.
pub fn gen_single_class_clip(
    num_classes: usize,
    frame: [usize; 3],
    clip_length: usize,
    class: usize,
    noise: f64,
    seed: u64,
) -> Result<SynthClip> {
    gen_synthetic_clip(&SynthSpec {
        num_classes,
        frame,
        clip_length,
        gt_class: class,
        rand_class: (class + 1) % num_classes,
        layout: Layout::GtFirst,
        gt_length: clip_length,
        noise,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub num_classes: usize,
    pub frame: [usize; 3],
    pub clip_length: usize,
    /// Recurrent decay; `W_h = decay * I`.
    pub decay: f64,
    /// Classifier weight from state `k` to class `k`.
    pub class_weight: f64,
    /// Magnitude of the negative weight from state `k` to every other class.
    pub off_class_weight: f64,
    /// Magnitude of the fc weight on pooled cells outside a class's rectangle.
    pub fc_off_weight: f64,
}

impl ToyModelConfig {
    pub fn new(num_classes: usize, frame: [usize; 3], clip_length: usize) -> ToyModelConfig {
        ToyModelConfig {
            num_classes,
            frame,
            clip_length,
            decay: 0.5,
            class_weight: 2.0,
            off_class_weight: 1.0,
            fc_off_weight: 0.01,
        }
    }
}

fn toy_layer(name: &str, op: LayerOp) -> LayerSpec {
    LayerSpec { name: name.into(), op }
}

/// Hand-built detector for the synthetic patterns.
///
/// conv1 is a bright-blob template shared by every class (positive 3x3
/// centre, slightly negative ring). Because the class patterns differ only
/// in position, the class templates live in fc1: unit `k` weighs the pooled
/// cells under rectangle `k` positively and every other cell slightly
/// negatively. The recurrent layer accumulates with decay and the
/// classifier maps state `k` to class `k`.
pub fn build_toy_model(cfg: &ToyModelConfig) -> Result<Model> {
    let k = cfg.num_classes;
    let [c, h, w] = cfg.frame;
    if k < 2 || c == 0 || h < 4 * grid_size(k) || w < 4 * grid_size(k) {
        return Err(Error::InvalidSpec("frame too small for the class grid".into()));
    }
    if !(cfg.decay > 0.0 && cfg.decay < 1.0) {
        return Err(Error::InvalidSpec("decay must lie in (0, 1)".into()));
    }
    let (ksize, pad) = (5usize, 2usize);
    let mut conv = vec![0.0; c * ksize * ksize];
    for ch in 0..c {
        for y in 0..ksize {
            for x in 0..ksize {
                let centre = (1..4).contains(&y) && (1..4).contains(&x);
                conv[(ch * ksize + y) * ksize + x] = if centre { 1.0 / 9.0 } else { -0.01 } / c as f64;
            }
        }
    }
    let (ph, pw) = (h / 2, w / 2);
    let mut fc = vec![0.0; k * ph * pw];
    for class in 0..k {
        let r = pattern_rect(class, k, h, w);
        let inside = |py: usize, px: usize| {
            let (y, x) = ((2 * py) as f64, (2 * px) as f64);
            y + 2.0 > r.y && y < r.y + r.h && x + 2.0 > r.x && x < r.x + r.w
        };
        let n_in = (0..ph * pw).filter(|i| inside(i / pw, i % pw)).count() as f64;
        for i in 0..ph * pw {
            fc[class * ph * pw + i] = if inside(i / pw, i % pw) { 1.0 / n_in } else { -cfg.fc_off_weight };
        }
    }
    let mut wx = vec![0.0; k * k];
    let mut wh = vec![0.0; k * k];
    let mut cls = vec![0.0; k * k];
    for i in 0..k {
        wx[i * k + i] = 1.0;
        wh[i * k + i] = cfg.decay;
        for j in 0..k {
            cls[i * k + j] = if i == j { cfg.class_weight } else { -cfg.off_class_weight };
        }
    }

    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        input: InputSpec { channels: c, height: h, width: w, clip_length: cfg.clip_length },
        labels: (0..k).map(|i| format!("class{i}")).collect(),
        layers: vec![
            toy_layer(
                "conv1",
                LayerOp::Conv2d {
                    in_channels: c,
                    out_channels: 1,
                    kernel: ksize,
                    stride: 1,
                    padding: pad,
                    weight: "conv1.weight".into(),
                    bias: None,
                },
            ),
            toy_layer("relu1", LayerOp::Relu),
            toy_layer("pool1", LayerOp::Maxpool2d { window: 2, stride: 2 }),
            toy_layer("flatten", LayerOp::Flatten),
            toy_layer(
                "fc1",
                LayerOp::FullyConnected { in_dim: ph * pw, out_dim: k, weight: "fc1.weight".into(), bias: None },
            ),
            toy_layer("relu2", LayerOp::Relu),
            toy_layer(
                "rnn",
                LayerOp::RecurrentRelu {
                    in_dim: k,
                    hidden_dim: k,
                    input_weight: "rnn.input_weight".into(),
                    hidden_weight: "rnn.hidden_weight".into(),
                    bias: None,
                },
            ),
            toy_layer(
                "classifier",
                LayerOp::Classifier { in_dim: k, out_dim: k, weight: "classifier.weight".into(), bias: None },
            ),
        ],
    };
    let weights = BTreeMap::from([
        ("conv1.weight".to_string(), Tensor::new(vec![1, c, ksize, ksize], conv)?),
        ("fc1.weight".to_string(), Tensor::new(vec![k, ph * pw], fc)?),
        ("rnn.input_weight".to_string(), Tensor::new(vec![k, k], wx)?),
        ("rnn.hidden_weight".to_string(), Tensor::new(vec![k, k], wh)?),
        ("classifier.weight".to_string(), Tensor::new(vec![k, k], cls)?),
    ]);
    Model::new(manifest, &weights)
}

/// Per-step `+1` when the gt class has probability at least 0.5, else `-1`.
pub fn probability_baseline(cache: &ActivationCache, gt_class: usize) -> Vec<f64> {
    cache
        .logits
        .iter()
        .map(|l| if softmax_probs(l).data()[gt_class] >= 0.5 { 1.0 } else { -1.0 })
        .collect()
}

/// Shape of a random model drawn by [`random_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct RandomModelConfig {
    pub frame: [usize; 3],
    pub clip_length: usize,
    pub conv_channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// Recurrent layer when true, temporal mean pool otherwise.
    pub recurrent: bool,
    pub with_bias: bool,
}

impl Default for RandomModelConfig {
    fn default() -> RandomModelConfig {
        RandomModelConfig {
            frame: [2, 6, 6],
            clip_length: 4,
            conv_channels: 3,
            hidden: 5,
            num_classes: 3,
            recurrent: true,
            with_bias: false,
        }
    }
}

fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// A conv-relu-pool-flatten-fc-relu-aggregator-classifier model with
/// uniform random weights. Weights are mixed-sign; every competition layer
/// is followed by a relu so the model passes the EB assumption check.
pub fn random_model(rng: &mut impl Rng, cfg: &RandomModelConfig) -> Model {
    let [c, h, w] = cfg.frame;
    let oc = cfg.conv_channels;
    let (ch, cw) = (h, w);
    let (ph, pw) = (ch / 2, cw / 2);
    let flat = oc * ph * pw;
    let (hid, k) = (cfg.hidden, cfg.num_classes);
    let bias = |name: &str| cfg.with_bias.then(|| name.to_string());
    let mut layers = vec![
        toy_layer(
            "conv1",
            LayerOp::Conv2d {
                in_channels: c,
                out_channels: oc,
                kernel: 3,
                stride: 1,
                padding: 1,
                weight: "conv1.weight".into(),
                bias: bias("conv1.bias"),
            },
        ),
        toy_layer("relu1", LayerOp::Relu),
        toy_layer("pool1", LayerOp::Maxpool2d { window: 2, stride: 2 }),
        toy_layer("flatten", LayerOp::Flatten),
        toy_layer(
            "fc1",
            LayerOp::FullyConnected { in_dim: flat, out_dim: hid, weight: "fc1.weight".into(), bias: bias("fc1.bias") },
        ),
        toy_layer("relu2", LayerOp::Relu),
    ];
    let mut weights = BTreeMap::new();
    weights.insert("conv1.weight".to_string(), random_tensor(rng, vec![oc, c, 3, 3], 1.0));
    weights.insert("fc1.weight".to_string(), random_tensor(rng, vec![hid, flat], 1.0));
    if cfg.recurrent {
        layers.push(toy_layer(
            "rnn",
            LayerOp::RecurrentRelu {
                in_dim: hid,
                hidden_dim: hid,
                input_weight: "rnn.input_weight".into(),
                hidden_weight: "rnn.hidden_weight".into(),
                bias: bias("rnn.bias"),
            },
        ));
        weights.insert("rnn.input_weight".to_string(), random_tensor(rng, vec![hid, hid], 1.0));
        weights.insert("rnn.hidden_weight".to_string(), random_tensor(rng, vec![hid, hid], 0.8));
    } else {
        layers.push(toy_layer("meanpool", LayerOp::TemporalMeanPool));
    }
    layers.push(toy_layer(
        "classifier",
        LayerOp::Classifier { in_dim: hid, out_dim: k, weight: "classifier.weight".into(), bias: bias("classifier.bias") },
    ));
    weights.insert("classifier.weight".to_string(), random_tensor(rng, vec![k, hid], 1.0));
    if cfg.with_bias {
        weights.insert("conv1.bias".to_string(), random_tensor(rng, vec![oc], 0.2));
        weights.insert("fc1.bias".to_string(), random_tensor(rng, vec![hid], 0.2));
        if cfg.recurrent {
            weights.insert("rnn.bias".to_string(), random_tensor(rng, vec![hid], 0.2));
        }
        weights.insert("classifier.bias".to_string(), random_tensor(rng, vec![k], 0.2));
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        input: InputSpec { channels: c, height: h, width: w, clip_length: cfg.clip_length },
        labels: (0..k).map(|i| format!("class{i}")).collect(),
        layers,
    };
    Model::new(manifest, &weights).expect("random model is well formed")
}

/// Clip of i.i.d. uniform `[0, 1)` pixels.
pub fn random_clip(rng: &mut impl Rng, frame: [usize; 3], clip_length: usize) -> Clip {
    let [c, h, w] = frame;
    let n = clip_length * c * h * w;
    let data = (0..n).map(|_| rng.gen::<f64>()).collect();
    Clip::new(Tensor::new(vec![clip_length, c, h, w], data).unwrap(), None).unwrap()
}
