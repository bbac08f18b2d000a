//! Numeric kernels shared by the layers.

pub mod conv;
pub mod fd;
pub mod init;
pub mod lrn;
pub mod pool;

pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvParams, Padding};
pub use fd::{finite_difference_grad, max_relative_error, relative_error};
pub use init::{glorot_bound, glorot_uniform};
pub use lrn::{lrn_backward, lrn_forward, LrnParams};
pub use pool::{maxpool_backward, maxpool_forward, Pooled};
