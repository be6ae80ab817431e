//! Excitation backprop for recurrent networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and the `EBT1` binary file format.
//! * [`model`]: declarative layer chains, weight loading and the structural
//!   checks excitation backprop relies on (non-negative activations).
//! * [`forward`]: the deterministic forward pass over a clip, caching every
//!   activation the backward passes read.
//! * [`eb`]: winning-probability propagation through the classifier, the
//!   unrolled recurrence and the per-frame CNN, the contrastive variants and
//!   the plain-gradient baselines.
//! * [`grounding`]: temporal segments, spatial points and their scores.
//! * [`synth`]: synthetic concatenated clips and a hand-built toy model that
//!   classifies them without training.
//! * [`render`]: PPM heatmap overlays.

pub mod eb;
pub mod error;
pub mod forward;
pub mod grounding;
pub mod model;
pub mod render;
pub mod synth;
pub mod tensor;

pub use eb::{run_saliency, Mode, PriorSpec, SaliencyOptions, SaliencySequence, TargetLayer};
pub use error::{Error, Result};
pub use forward::{forward_clip, softmax_probs, ActivationCache, Clip, ClipMeta, FrameMeta};
pub use grounding::{BBox, Segment};
pub use model::{load_model, save_model, Model, ModelManifest};
pub use tensor::{load_tensor, save_tensor, Tensor};

/// Version stamp written into every JSON document this crate produces.
pub const FORMAT_VERSION: u32 = 1;
