//! Layers with hand-written backward passes and the SGD optimizer.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod optim;

pub use activation::{global_avg_pool_backward, global_avg_pool_forward, relu, relu_backward, relu_forward};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormParams, BnCache, BnGrads, Mode};
pub use conv::{conv2d_backward, conv2d_backward_on, conv2d_forward, conv2d_forward_im2col, ConvGrads, ConvSpec};
pub use linear::{softmax_cross_entropy, Linear, LinearGrads};
pub use optim::{sgd_step, Sgd};
