//! Array-level numeric kernels shared by the autodiff graph and the inference paths.

mod basic;
mod conv;
mod norm;
mod pool;

pub use basic::{argmax_rows, check_labels, cross_entropy, linear, matmul_nt, relu, softmax_rows};
pub use conv::{conv3d, conv3d_backward_input, conv3d_backward_weight, Conv3dSpec};
pub(crate) use conv::{conv3d_accumulate, ConvGeometry};
pub use norm::{
    batch_norm_eval, batch_norm_train, batch_norm_train_backward, channel_affine, eval_affine, BatchNormCache, BN_EPS,
};
pub use pool::{avg_pool3d, avg_pool3d_backward, global_avg_pool, global_avg_pool_backward};
