//! Forward and backward numeric kernels over NHWC [`Tensor`](crate::Tensor)s.

mod conv;
mod elementwise;
mod norm;
mod resample;

pub use conv::{
    axis_geometry, conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, ConvGrads, ConvParams,
    Padding,
};
pub use elementwise::{
    add, apply_mask, concat_channels, dropout, dropout_mask, relu6, relu6_backward, softmax, split_channels,
};
pub use norm::{
    batch_norm, batch_norm_backward, batch_norm_forward, batch_stats, BatchNormGrads, BatchNormParams, BatchStats,
    DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};
pub use resample::{
    avg_pool, avg_pool_backward, avg_pool_to_bins, avg_pool_to_bins_backward, bilinear_resize,
    bilinear_resize_backward, bilinear_upsample,
};
