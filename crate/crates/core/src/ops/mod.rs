//! Eager tensor kernels and their hand-written gradients.

pub mod broadcast;
pub mod conv;
pub mod norm;
pub mod pointwise;
pub mod pool;

pub use broadcast::BinaryOp;
pub use conv::{
    conv2d, depthwise_conv2d, pad_channel_constant, Conv, ConvKernel, DepthwiseKernel, Padding,
};
pub use norm::{layer_norm, NormGroup, LAYER_NORM_EPS};
pub use pointwise::{prelu, relu, sigmoid};
pub use pool::{global_pool_spatial, pool_over_channels, PoolMode};
