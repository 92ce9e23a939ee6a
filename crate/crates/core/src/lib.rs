//! Convolution kernels built around the im2win data layout.
//!
//! The crate provides:
//!
//! * [`Tensor4`] / [`Mat2`] containers and convolution geometry ([`ConvParams`]),
//! * the im2col and im2win lowerings plus exact footprint counts ([`transforms`]),
//! * reference convolutions: direct, im2col + GEMM, implicit GEMM and the
//!   basic im2win kernel ([`reference`]),
//! * the tiled, micro-kernel based im2win convolution ([`optimized`]),
//! * a benchmark and ablation harness ([`bench`]).
//!
//! All kernels accumulate every output element in ascending reduction order
//! with 32-bit arithmetic, so on finite inputs they agree bit-for-bit.

pub mod bench;
pub mod error;
pub mod fixture;
pub mod optimized;
pub mod parallel;
pub mod reference;
pub mod tensor;
pub mod transforms;

pub use error::{ConvError, Result};
pub use optimized::{conv_im2win_opt, default_plan, KernelCounters, TilePlan, Toggles};
pub use reference::{
    conv_direct, conv_im2col_gemm, conv_im2win_basic, conv_implicit_gemm, gemm, GemmDims,
};
pub use tensor::{max_rel_diff, output_dims, ConvParams, ConvShape, Mat2, Tensor4};
pub use transforms::{footprint_elems, im2col, im2win, Im2winTensor, Layout};
