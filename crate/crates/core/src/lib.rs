//! Masked image modeling without reconstruction.
//!
//! A student vision transformer encodes only the visible patches of an
//! image. Its per-block features are projected by lightweight adaptors,
//! mixed by a learnable dynamic-alignment matrix, and regressed onto the
//! normalised multi-level features a frozen teacher extracts from the intact
//! image.
//!
//! Modules:
//! - [`tensor`]: dense tensors with a reverse-mode tape
//! - [`vit`]: the encoder
//! - [`masking`]: random and attentive visible-set selection
//! - [`alignment`]: adaptors, dynamic alignment, target normalisation, loss
//! - [`checkpoint`]: binary checkpoint format and the frozen teacher
//! - [`train`]: data, optimisation and the training loops
//! - [`tools`]: attention-map export and the paradigm cost model

pub mod alignment;
pub mod checkpoint;
pub mod error;
pub mod masking;
pub mod par;
pub mod tensor;
pub mod tools;
pub mod train;
pub mod vit;

pub use error::{Error, Result};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;
