//! Cross-modal retrieval between sentences and bitemporal image pairs.
//!
//! The crate is `no_std` (with `alloc`) and carries all of the numerical
//! machinery: a small reverse-mode tensor engine, the global and
//! transformer-based fusion strategies, projection heads, the bidirectional
//! contrastive objective, SGD training, exact top-k retrieval with the
//! leave-one-out protocol, and BLEU / METEOR / ROUGE-L scoring.
//!
//! File formats, configuration files and the command line live in the `itsr`
//! companion crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![deny(missing_debug_implementations)]
// `as Float` is a no-op in one of the two precision builds.
#![allow(clippy::unnecessary_cast)]

extern crate alloc;

pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod rng;
pub mod selfcheck;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Scalar type used by all tensor math.
#[cfg(not(feature = "f64"))]
pub type Float = f32;
/// Scalar type used by all tensor math.
#[cfg(feature = "f64")]
pub type Float = f64;
