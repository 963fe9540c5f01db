//! # dmst-core
//!
//! Coding-rate mathematics for white-box transformers and the decoupled
//! membership-subspace attention (DMSA) operator derived from it.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`coding_rate`] | log-det coding rates, variational upper bounds, analytic gradient |
//! | [`sparsify`] | soft-threshold simplex projection, top-k gate, membership activations |
//! | [`attention`] | DMSA operator and layer, TSSA/MHSA baselines, gated channel form, RoPE |
//! | [`model`] | toy classifier, reverse-mode tape, AdamW, synthetic data, checkpoints |
//! | [`analysis`] | layer-wise rate curves, membership maps, memory profiles |
//! | [`verify`] | runnable invariant suites backed by the independent [`oracle`] routines |
//!
//! Internal math uses the `d × n` column convention (columns are tokens).
//! File formats and the training stack use `(token, channel)` row-major data.

pub mod analysis;
pub mod attention;
pub mod coding_rate;
mod error;
pub mod memory;
pub mod model;
pub mod oracle;
pub mod pgm;
pub mod sparsify;
pub mod verify;

pub use error::{Error, Result};
