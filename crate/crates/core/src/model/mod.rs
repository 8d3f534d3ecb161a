//! The ConvNet family used as distillation backbone and NAS search space.

pub(crate) mod layers;
mod network;
mod spec;

pub use network::{
    build_network, cross_entropy, init_weights, Block, FeatureGrads, FeatureStack, Gradients, Mode, Network, NormParams,
    Tape, TapPoint,
};
pub use spec::{Activation, ConvNetSpec, Encoder, Norm, Pooling, DEPTHS, WIDTHS};
