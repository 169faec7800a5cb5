//! Encoder-only change detection on bitemporal imagery.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: rank-4 tensors, a define-by-run tape and the differentiable
//!   operator set (convolution, channel pooling, interpolation, activations).
//! - [`losses`]: supervision and distillation objectives recorded on the tape.
//! - [`network`]: the early-fusion student (stem, pyramid encoder, parameter-free
//!   multiscale fusion, head), the naive-fusion baseline and checkpoints.
//! - [`data`]: synthetic bitemporal scenes, PPM/PGM I/O and batching.
//! - [`train`]: AdamW, linear decay, augmentation, teachers and the fit loop.
//! - [`eval`]: change-class metrics and parameter/FLOP/latency profiling.
//! - [`config`]: the sectioned run-configuration file.
//! - [`gradcheck`]: finite-difference verification of every differentiable op.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod mask;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::Mask;
pub use tensor::{Real, Shape, Tape, Tensor, Var};
