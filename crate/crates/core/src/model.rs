//! Model description: an ordered chain of layers plus named weight tensors.
//!
//! A manifest is a JSON document:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "input": { "channels": 1, "height": 32, "width": 32, "clip_length": 16 },
//!   "labels": ["class0", "class1"],
//!   "layers": [
//!     { "kind": "conv2d", "name": "conv1", "in_channels": 1, "out_channels": 4,
//!       "kernel": 3, "stride": 1, "padding": 1, "weight": "conv1.weight", "bias": "conv1.bias" },
//!     { "kind": "relu", "name": "relu1" },
//!     { "kind": "flatten", "name": "flatten" },
//!     { "kind": "recurrent-relu", "name": "rnn", "in_dim": 4096, "hidden_dim": 2,
//!       "input_weight": "rnn.wx", "hidden_weight": "rnn.wh" },
//!     { "kind": "classifier", "name": "classifier", "in_dim": 2, "out_dim": 2, "weight": "cls.weight" }
//!   ]
//! }
//! ```
//!
//! Every weight reference `r` resolves to the tensor file `r.ebt` next to the
//! manifest. Weight layouts: conv `[out, in, k, k]`, fully-connected and
//! classifier `[out, in]`, recurrent input `[hidden, in]` and hidden
//! `[hidden, hidden]`, biases `[out]`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{load_tensor, save_tensor, Tensor};
use crate::FORMAT_VERSION;

pub const MANIFEST_FILE: &str = "model.json";
pub const WEIGHT_EXT: &str = "ebt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub clip_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub op: LayerOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerOp {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Relu,
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
    FullyConnected {
        in_dim: usize,
        out_dim: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    TemporalMeanPool,
    RecurrentRelu {
        in_dim: usize,
        hidden_dim: usize,
        input_weight: String,
        hidden_weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Classifier {
        in_dim: usize,
        out_dim: usize,
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Conv2d { .. } => "conv2d",
            LayerOp::Relu => "relu",
            LayerOp::Maxpool2d { .. } => "maxpool2d",
            LayerOp::Flatten => "flatten",
            LayerOp::FullyConnected { .. } => "fully-connected",
            LayerOp::TemporalMeanPool => "temporal-mean-pool",
            LayerOp::RecurrentRelu { .. } => "recurrent-relu",
            LayerOp::Classifier { .. } => "classifier",
        }
    }

    fn is_aggregator(&self) -> bool {
        matches!(self, LayerOp::TemporalMeanPool | LayerOp::RecurrentRelu { .. })
    }

    /// Layers whose outputs compete for winning probability over weighted children.
    fn is_competition(&self) -> bool {
        matches!(
            self,
            LayerOp::Conv2d { .. }
                | LayerOp::FullyConnected { .. }
                | LayerOp::TemporalMeanPool
                | LayerOp::RecurrentRelu { .. }
                | LayerOp::Classifier { .. }
        )
    }

    fn weight_refs(&self) -> Vec<&str> {
        let mut refs = Vec::new();
        match self {
            LayerOp::Conv2d { weight, bias, .. }
            | LayerOp::FullyConnected { weight, bias, .. }
            | LayerOp::Classifier { weight, bias, .. } => {
                refs.push(weight.as_str());
                refs.extend(bias.as_deref());
            }
            LayerOp::RecurrentRelu { input_weight, hidden_weight, bias, .. } => {
                refs.push(input_weight.as_str());
                refs.push(hidden_weight.as_str());
                refs.extend(bias.as_deref());
            }
            _ => {}
        }
        refs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub input: InputSpec,
    pub labels: Vec<String>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
}

/// Dense layer `y = W x + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Elman unit `h_t = relu(W_x x_t + W_h h_{t-1} + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recurrent {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub input_weight: Tensor,
    pub hidden_weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d(Conv2d),
    Relu,
    MaxPool2d(MaxPool2d),
    Flatten,
    FullyConnected(Linear),
    TemporalMeanPool,
    Recurrent(Recurrent),
    Classifier(Linear),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

/// Which temporal aggregator sits between the frame-level stack and the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    None,
    Recurrent,
    MeanPool,
}

/// A validated, weight-resolved model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    manifest: ModelManifest,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    cnn_len: usize,
}

/// A structural rule that excitation backprop needs and the model breaks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub layer: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {:?}: {}", self.layer, self.message)
    }
}

fn take_weight(
    weights: &BTreeMap<String, Tensor>,
    name: &str,
    layer: &str,
    expected: &[usize],
) -> Result<Tensor> {
    let t = weights.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))?;
    if t.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "layer {layer:?}: weight {name:?} has shape {:?}, expected {expected:?}",
            t.shape()
        )));
    }
    Ok(t.clone())
}

fn take_bias(
    weights: &BTreeMap<String, Tensor>,
    name: &Option<String>,
    layer: &str,
    dim: usize,
) -> Result<Option<Tensor>> {
    name.as_deref().map(|n| take_weight(weights, n, layer, &[dim])).transpose()
}

fn expect_shape(layer: &str, got: &[usize], what: &str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("layer {layer:?}: input shape {got:?}, expected {what}")))
    }
}

impl Model {
    /// Resolve weights and check the layer chain. Structural rules enforced
    /// here: unique names, exactly one classifier and it is last, at most one
    /// temporal aggregator with only the classifier after it, and
    /// shape-compatible neighbours.
    pub fn new(manifest: ModelManifest, weights: &BTreeMap<String, Tensor>) -> Result<Model> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported format_version {}",
                manifest.format_version
            )));
        }
        let input = &manifest.input;
        if input.channels == 0 || input.height == 0 || input.width == 0 || input.clip_length == 0 {
            return Err(Error::InvalidModel("input extents and clip length must be positive".into()));
        }
        if manifest.layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }

        let mut seen = HashSet::new();
        for l in &manifest.layers {
            if l.name == "input" {
                return Err(Error::InvalidModel("layer name \"input\" is reserved".into()));
            }
            if !seen.insert(l.name.as_str()) {
                return Err(Error::DuplicateLayerName(l.name.clone()));
            }
        }

        let n = manifest.layers.len();
        let classifiers = manifest
            .layers
            .iter()
            .filter(|l| matches!(l.op, LayerOp::Classifier { .. }))
            .count();
        if classifiers != 1 || !matches!(manifest.layers[n - 1].op, LayerOp::Classifier { .. }) {
            return Err(Error::InvalidModel(
                "exactly one classifier layer is required and it must be last".into(),
            ));
        }
        let aggregators: Vec<usize> = manifest
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.op.is_aggregator())
            .map(|(i, _)| i)
            .collect();
        let cnn_len = match aggregators.as_slice() {
            [] => n - 1,
            [i] if *i == n - 2 => *i,
            [_] => {
                return Err(Error::InvalidModel(
                    "only the classifier may follow the temporal aggregator".into(),
                ))
            }
            _ => return Err(Error::InvalidModel("at most one temporal aggregator is allowed".into())),
        };

        let mut layers = Vec::with_capacity(n);
        let mut shapes = Vec::with_capacity(n);
        let mut shape = vec![input.channels, input.height, input.width];
        for spec in &manifest.layers {
            let name = spec.name.as_str();
            let kind = match &spec.op {
                LayerOp::Conv2d { in_channels, out_channels, kernel, stride, padding, weight, bias } => {
                    let (ic, oc, k, s, p) = (*in_channels, *out_channels, *kernel, *stride, *padding);
                    if oc == 0 || k == 0 || s == 0 {
                        return Err(Error::InvalidModel(format!("layer {name:?}: zero conv geometry")));
                    }
                    expect_shape(name, &shape, "[in_channels, H, W]", shape.len() == 3 && shape[0] == ic)?;
                    let (h, w) = (shape[1] + 2 * p, shape[2] + 2 * p);
                    expect_shape(name, &shape, "spatial extent >= kernel", h >= k && w >= k)?;
                    let conv = Conv2d {
                        in_channels: ic,
                        out_channels: oc,
                        kernel: k,
                        stride: s,
                        padding: p,
                        weight: take_weight(weights, weight, name, &[oc, ic, k, k])?,
                        bias: take_bias(weights, bias, name, oc)?,
                    };
                    shape = vec![oc, (h - k) / s + 1, (w - k) / s + 1];
                    LayerKind::Conv2d(conv)
                }
                LayerOp::Relu => LayerKind::Relu,
                LayerOp::Maxpool2d { window, stride } => {
                    if *window == 0 || *stride == 0 {
                        return Err(Error::InvalidModel(format!("layer {name:?}: zero pool geometry")));
                    }
                    expect_shape(
                        name,
                        &shape,
                        "[C, H, W] with H, W >= window",
                        shape.len() == 3 && shape[1] >= *window && shape[2] >= *window,
                    )?;
                    shape = vec![
                        shape[0],
                        (shape[1] - window) / stride + 1,
                        (shape[2] - window) / stride + 1,
                    ];
                    LayerKind::MaxPool2d(MaxPool2d { window: *window, stride: *stride })
                }
                LayerOp::Flatten => {
                    shape = vec![shape.iter().product()];
                    LayerKind::Flatten
                }
                LayerOp::FullyConnected { in_dim, out_dim, weight, bias }
                | LayerOp::Classifier { in_dim, out_dim, weight, bias } => {
                    expect_shape(name, &shape, &format!("[{in_dim}]"), shape == [*in_dim])?;
                    if *out_dim == 0 {
                        return Err(Error::InvalidModel(format!("layer {name:?}: zero out_dim")));
                    }
                    let linear = Linear {
                        in_dim: *in_dim,
                        out_dim: *out_dim,
                        weight: take_weight(weights, weight, name, &[*out_dim, *in_dim])?,
                        bias: take_bias(weights, bias, name, *out_dim)?,
                    };
                    shape = vec![*out_dim];
                    if matches!(spec.op, LayerOp::Classifier { .. }) {
                        LayerKind::Classifier(linear)
                    } else {
                        LayerKind::FullyConnected(linear)
                    }
                }
                LayerOp::TemporalMeanPool => {
                    expect_shape(name, &shape, "a flat feature vector", shape.len() == 1)?;
                    LayerKind::TemporalMeanPool
                }
                LayerOp::RecurrentRelu { in_dim, hidden_dim, input_weight, hidden_weight, bias } => {
                    expect_shape(name, &shape, &format!("[{in_dim}]"), shape == [*in_dim])?;
                    if *hidden_dim == 0 {
                        return Err(Error::InvalidModel(format!("layer {name:?}: zero hidden_dim")));
                    }
                    let rec = Recurrent {
                        in_dim: *in_dim,
                        hidden_dim: *hidden_dim,
                        input_weight: take_weight(weights, input_weight, name, &[*hidden_dim, *in_dim])?,
                        hidden_weight: take_weight(
                            weights,
                            hidden_weight,
                            name,
                            &[*hidden_dim, *hidden_dim],
                        )?,
                        bias: take_bias(weights, bias, name, *hidden_dim)?,
                    };
                    shape = vec![*hidden_dim];
                    LayerKind::Recurrent(rec)
                }
            };
            shapes.push(shape.clone());
            layers.push(Layer { name: spec.name.clone(), kind });
        }

        if manifest.labels.len() != *shapes.last().unwrap().first().unwrap() {
            return Err(Error::InvalidModel(format!(
                "{} labels for a classifier with {} outputs",
                manifest.labels.len(),
                shapes.last().unwrap()[0]
            )));
        }

        Ok(Model { manifest, layers, shapes, cnn_len })
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn input(&self) -> &InputSpec {
        &self.manifest.input
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let i = &self.manifest.input;
        [i.channels, i.height, i.width]
    }

    pub fn clip_length(&self) -> usize {
        self.manifest.input.clip_length
    }

    pub fn labels(&self) -> &[String] {
        &self.manifest.labels
    }

    pub fn num_outputs(&self) -> usize {
        self.manifest.labels.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// The frame-level layers, i.e. everything before the aggregator/classifier.
    pub fn cnn_layers(&self) -> &[Layer] {
        &self.layers[..self.cnn_len]
    }

    /// Output shape of layer `idx` for a single frame.
    pub fn output_shape(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    /// Shape of the per-frame feature handed to the aggregator.
    pub fn feature_shape(&self) -> Vec<usize> {
        match self.cnn_len {
            0 => self.input_shape().to_vec(),
            n => self.shapes[n - 1].clone(),
        }
    }

    pub fn aggregator(&self) -> Aggregator {
        match self.layers.get(self.cnn_len).map(|l| &l.kind) {
            Some(LayerKind::Recurrent(_)) => Aggregator::Recurrent,
            Some(LayerKind::TemporalMeanPool) => Aggregator::MeanPool,
            _ => Aggregator::None,
        }
    }

    pub fn recurrent(&self) -> Option<&Recurrent> {
        match &self.layers[self.cnn_len].kind {
            LayerKind::Recurrent(r) => Some(r),
            _ => None,
        }
    }

    pub fn aggregator_name(&self) -> Option<&str> {
        match self.aggregator() {
            Aggregator::None => None,
            _ => Some(&self.layers[self.cnn_len].name),
        }
    }

    pub fn classifier(&self) -> &Linear {
        match &self.layers.last().unwrap().kind {
            LayerKind::Classifier(c) => c,
            _ => unreachable!("validated: classifier is last"),
        }
    }

    pub fn classifier_name(&self) -> &str {
        &self.layers.last().unwrap().name
    }

    /// Index of a frame-level layer by name.
    pub fn cnn_layer_index(&self, name: &str) -> Option<usize> {
        self.cnn_layers().iter().position(|l| l.name == name)
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.manifest.labels.iter().position(|l| l == label)
    }

    /// Every weight tensor keyed by its manifest reference.
    pub fn weights(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (spec, layer) in self.manifest.layers.iter().zip(&self.layers) {
            let tensors: Vec<&Tensor> = match &layer.kind {
                LayerKind::Conv2d(c) => std::iter::once(&c.weight).chain(&c.bias).collect(),
                LayerKind::FullyConnected(l) | LayerKind::Classifier(l) => {
                    std::iter::once(&l.weight).chain(&l.bias).collect()
                }
                LayerKind::Recurrent(r) => [&r.input_weight, &r.hidden_weight]
                    .into_iter()
                    .chain(&r.bias)
                    .collect(),
                _ => Vec::new(),
            };
            for (name, t) in spec.op.weight_refs().into_iter().zip(tensors) {
                out.insert(name.to_string(), t.clone());
            }
        }
        out
    }

    /// Same model with the classifier weights (not the bias) negated.
    pub fn with_negated_classifier(&self) -> Model {
        let mut m = self.clone();
        if let Some(Layer { kind: LayerKind::Classifier(c), .. }) = m.layers.last_mut() {
            c.weight = c.weight.map(|w| -w);
        }
        m
    }
}

/// Structural excitation-backprop rules on a manifest:
///
/// * every conv / fully-connected output must pass through a relu before it
///   reaches the next competition layer (conv, fc, aggregator, classifier);
/// * at most one temporal aggregator;
/// * the aggregator comes after the whole frame-level stack.
pub fn validate_eb_assumptions(manifest: &ModelManifest) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut pending: Option<&str> = None;
    let mut aggregator_seen = false;
    for layer in &manifest.layers {
        if layer.op.is_competition() {
            if let Some(src) = pending.take() {
                violations.push(Violation {
                    layer: src.to_string(),
                    message: format!(
                        "output reaches {:?} without a relu, so activations can be negative",
                        layer.name
                    ),
                });
            }
        }
        match &layer.op {
            LayerOp::Relu => pending = None,
            LayerOp::Conv2d { .. } | LayerOp::FullyConnected { .. } => {
                if aggregator_seen {
                    violations.push(Violation {
                        layer: layer.name.clone(),
                        message: "frame-level layer placed after the temporal aggregator".into(),
                    });
                }
                pending = Some(&layer.name);
            }
            LayerOp::Maxpool2d { .. } | LayerOp::Flatten if aggregator_seen => {
                violations.push(Violation {
                    layer: layer.name.clone(),
                    message: "frame-level layer placed after the temporal aggregator".into(),
                });
            }
            op if op.is_aggregator() => {
                if aggregator_seen {
                    violations.push(Violation {
                        layer: layer.name.clone(),
                        message: "more than one temporal aggregator".into(),
                    });
                }
                aggregator_seen = true;
            }
            _ => {}
        }
    }
    violations
}

fn weight_path(dir: &Path, name: &str) -> Result<PathBuf> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(Error::InvalidModel(format!("invalid weight reference {name:?}")));
    }
    Ok(dir.join(format!("{name}.{WEIGHT_EXT}")))
}

/// Load a manifest (or a directory containing `model.json`) and its weights.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let dir = file.parent().unwrap_or(Path::new("."));
    let manifest: ModelManifest = serde_json::from_slice(&fs::read(&file)?)?;
    let mut weights = BTreeMap::new();
    for spec in &manifest.layers {
        for name in spec.op.weight_refs() {
            let p = weight_path(dir, name)?;
            if !p.exists() {
                return Err(Error::MissingWeight(name.to_string()));
            }
            weights.insert(name.to_string(), load_tensor(&p)?);
        }
    }
    Model::new(manifest, &weights)
}

/// Alias matching the manifest-centric name used in the CLI docs.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<Model> {
    load_model(path)
}

/// Write `model.json` and one tensor file per weight into `dir`.
pub fn save_model(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (name, t) in model.weights() {
        save_tensor(&t, weight_path(dir, &name)?)?;
    }
    let json = serde_json::to_string_pretty(&model.manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}
