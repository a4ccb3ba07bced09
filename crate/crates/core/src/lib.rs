//! Meta-continual learning of neural fields at desk scale.
//!
//! A signal (image, audio clip, video) is treated as a field: a coordinate MLP
//! maps normalized coordinates to signal values. The field is split into a
//! sequence of tasks (spatial patches, temporal chunks, resolution phases),
//! each owned by a separate module instantiated from one shared, meta-learned
//! initialization. Task-specific adaptation runs a Fisher-information-weighted
//! loss with optional diagonal-Fisher preconditioning; the outer loop updates
//! the shared initialization across episodes (MAML-style, first- or exact
//! second-order through the unrolled inner loop).
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`tape`], [`unroll`], [`rng`] — dense f64 math, reverse-mode
//!   differentiation with per-sample gradients, meta-gradients through
//!   unrolled SGD, and a counter-based deterministic RNG.
//! - [`field`] — coordinate-MLP architectures (sine/ReLU), init, prediction.
//! - [`task`] — signals, task streams (splits), synthetic families, sampling.
//! - [`modular`] — per-task modules sharing one initialization, hard gating.
//! - [`fisher`] — score functions, diagonal empirical Fisher, FIM loss and
//!   FIM-SGD.
//! - [`meta`] — the episode engine: inner adaptation, outer meta-update,
//!   test-time optimization.
//! - [`baselines`] — OL / CL / ER / EWC / MAML+CL / OML reference strategies.
//! - [`metrics`], [`config`], [`checkpoint`], [`io`], [`selftest`] — PSNR and
//!   CSV tables, run configuration, binary checkpoints, PGM/PPM/WAV I/O, and
//!   the built-in oracle suite.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod field;
pub mod fisher;
pub mod io;
pub mod meta;
pub mod metrics;
pub mod modular;
pub mod rng;
pub mod selftest;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod unroll;

pub use error::{Error, Result};
