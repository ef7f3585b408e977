//! Two-branch audiovisual fusion networks trained end to end on a small
//! reverse-mode autodiff engine.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches the
//! file system, the command line or serialization lives in the companion
//! `avfusion-cli` crate.
//!
//! Layout:
//!
//! - [`tensor`], [`tape`], [`gradcheck`]: dense `f64` tensors, the gradient
//!   tape and a central-difference checker.
//! - [`layers`]: temporal convolutions, normalization, pooling and the two
//!   modality branches.
//! - [`fusion`]: cross-modal attention, transformer blocks, the
//!   attention-vector fusion and the assembled [`fusion::Model`].
//! - [`robustness`]: modality dropout for training and the missing/noisy
//!   modality test settings.
//! - [`data`]: synthetic class-conditional audiovisual datasets.
//! - [`harness`]: SGD, plateau scheduling, metrics, training and evaluation.
//! - [`verify`]: the finite-difference suite over layers and whole models.
#![no_std]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod params;
pub mod rng;
pub mod robustness;
pub mod tape;
pub mod tensor;
pub mod verify;

mod kernels;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Fill, Tensor};
