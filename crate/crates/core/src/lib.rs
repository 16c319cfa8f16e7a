//! Slide-level graph collaborative distillation.
//!
//! A desk-scale, fully deterministic training engine for bag-of-instances
//! ("slide") classification. A MIL backbone embeds each bag; a FIFO node
//! buffer rehearses recent embeddings; a kNN hypergraph is built over the
//! buffer and refined by a two-layer hypergraph convolution branch with
//! zero-mean channel attention; the graph branch is trained jointly with the
//! MIL head under a JS-divergence distillation objective.
//!
//! All math is generic over [`scalar::Scalar`] (`f32`/`f64`); the training
//! pipeline runs on the `f64` aliases below.

pub mod autodiff;
pub mod backbone;
pub mod bagio;
pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hgcn;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use autodiff::{Tape, Value, ValueId};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::Rng;
pub use scalar::Scalar;

/// Matrix with the pipeline's element type.
pub type Mat = Matrix<f64>;
/// Tape with the pipeline's element type.
pub type Tape64 = Tape<f64>;
/// Single-precision variants, for callers that trade accuracy for memory.
pub type Mat32 = Matrix<f32>;
pub type Tape32 = Tape<f32>;
