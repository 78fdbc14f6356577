//! Network engine: tensors, dense and convolutional layers, forward
//! evaluation, and reverse-mode gradients with respect to inputs and weights.

pub mod conv;
pub mod gradcheck;
pub(crate) mod linalg;
mod network;
pub mod serialize;
mod tensor;

pub use conv::{ConvGeometry, Padding, Pads};
pub use linalg::{dot, norm_l2};
pub use network::{
    argmax, grad_input, grad_params, Activation, Layer, LayerKind, LayerSpec, Loss, Network,
    NetworkSpec, ParamGrads,
};
pub use serialize::{load_network, save_network};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
