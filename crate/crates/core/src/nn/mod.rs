//! Minimal feed-forward network engine with hand-written reverse-mode gradients.

mod layer;
mod network;
mod optim;

pub use layer::{Layer, LayerKind};
pub use network::{Network, NetworkBuilder, ParamGrads, INPUT_LAYER};
pub use optim::{Optimizer, OptimizerKind};
