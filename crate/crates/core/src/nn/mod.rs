//! Minimal deterministic CPU neural-network engine.

pub mod layers;
mod network;
mod optim;
mod params;
mod real;
mod tensor;

pub use layers::{LayerKind, LayerSpec};
pub use network::{Gradients, Mode, Network, Tape};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{FlatParams, Manifest, ManifestEntry, ParamRole};
pub use real::{Precision, Real};
pub use tensor::Tensor4;
