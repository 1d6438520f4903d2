//! Learnable group convolution for 3D DenseNets on hyperspectral patches.

pub mod autodiff;
pub mod checkpoint;
pub mod compiler;
pub mod densenet;
pub mod error;
pub mod gradcheck;
pub mod hsi;
pub mod lgc;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod permutation;
pub mod render;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, NdArray, Scalar};
