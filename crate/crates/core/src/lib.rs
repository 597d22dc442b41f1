//! Two-branch glacier calving-front segmentation: a windowed-attention context
//! branch and a convolutional target branch joined by attention hooks, plus
//! the front post-processing and evaluation stack.
//!
//! The crate is `no_std` + `alloc`; the `std` feature only enables runtime
//! SIMD dispatch in the matrix kernels.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod context;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hooks;
pub mod losses;
pub mod model;
pub mod nn;
pub mod target;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
