//! Hybrid Mamba-2 / attention / FFN language models.

pub mod arch;
pub mod forward;
pub mod weights;

pub use arch::{build_layer_pattern, ArchSpec, Dims, LayerKind};
pub use forward::{forward, logits, ForwardOptions, ForwardOutput, RMS_EPS};
pub use weights::{AttentionWeights, FfnWeights, LayerWeights, MambaWeights, ModelWeights};
