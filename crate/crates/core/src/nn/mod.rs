//! A small CPU tensor/layer engine: depthwise-separable convolutions, dense
//! layers, softmax cross-entropy with exact gradients, and Adam.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod tensor;

pub use adam::{adam_step, OptimizerState};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use layers::{ActShape, LayerKind};
pub use network::{
    extract_features, forward, loss_and_grads, Architecture, ForwardCache, ForwardOutput, Grads,
    LayerSpec, NamedTensor, NetConfig, NetworkParams,
};
pub use tensor::{Scalar, Tensor};
