//! Numeric core of the lightweight NMS-free fault detector.
//!
//! Everything here is pure computation: a small reverse-mode autodiff tape
//! over dense NCHW tensors, the depthwise-separable backbone, the fault
//! feature pyramid (channel attention, bottleneck and dilated bottleneck
//! blocks), the one-to-one detection head with its losses, a baseline
//! greedy NMS and the image-level accuracy metrics.
//!
//! # Features
//!
//! `std` (default): enables `rayon` parallelism inside the larger matrix
//! products and the standard-library float routines. Without it the crate
//! is `no_std` and only needs `alloc`.
//!
//! `serde`: derives `Serialize`/`Deserialize` for every configuration type.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backbone;
pub mod conv;
pub mod detector;
pub mod error;
pub mod ffp;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod init;
pub mod layers;
pub mod metrics;
pub mod nms;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use real::{Precision, Real};
pub use tensor::Tensor;
