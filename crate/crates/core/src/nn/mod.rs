//! Trainable layers and the stateless kernels behind them.

pub mod functional;
pub mod layer;

pub use functional::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, fc_backward, fc_forward,
    relu_backward, relu_forward, softmax, softmax_xent_backward, softmax_xent_forward,
};
pub use layer::{BatchNormState, Layer, LayerKind, Mode, BATCHNORM_EPSILON, BATCHNORM_MOMENTUM};
