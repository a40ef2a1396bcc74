//! Forward kernels and their gradient rules.

pub mod conv;
pub mod elementwise;
pub(crate) mod gemm;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, transposed_conv2d, ConvSpec};
pub use elementwise::{add, concat_channels, linear, mul, relu, scale_channels, sigmoid};
pub use norm::{batch_norm_eval, batch_norm_train, BatchStats};
pub use pool::{bilinear_resize, global_avg_pool, maxpool2d, nearest_resize};
