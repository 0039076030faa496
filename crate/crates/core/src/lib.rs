//! Exemplar-guided domain translation: conditioning extraction, a shared
//! content encoder, per-domain style encoders and critics, a fused
//! denormalization generator, reconstruction-only training, inference in
//! three regimes, and Fréchet-distance evaluation.

// Negated comparisons are how NaN gets rejected along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditioning;
pub mod config;
pub mod content;
pub mod dataset;
pub mod discriminator;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod fixtures;
pub mod generator;
pub mod inference;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod style;
pub mod trace;
pub mod trainer;

pub use error::{Error, Result};
