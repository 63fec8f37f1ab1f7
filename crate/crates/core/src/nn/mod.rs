//! A small static-graph training engine: tensors, the layers the detector
//! needs with hand-written backward passes, Adam, and a binary weight format.
//!
//! Layers cache what their backward pass needs during `forward`; `infer`
//! runs the same computation through `&self` for shared eval-mode use.

mod layers;
mod param;
mod tensor;
pub mod weights;

pub use layers::{
    leaky_relu, mish, mish_grad, sigmoid, softplus, upsample_nearest, upsample_nearest_backward, Activation,
    ActivationKind, BatchNorm2d, Conv2d, ConvBlock, MaxPool2d, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE,
};
pub use param::{Adam, Parameter};
pub use tensor::{concat_channels, split_channels, Float, Tensor};
pub use weights::{Record, RecordKind};
