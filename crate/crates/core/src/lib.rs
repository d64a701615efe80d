//! Source-free self-training domain adaptation with attentive class
//! prototypes, at desk scale.
//!
//! A source-trained binary classifier over ROI features is adapted to an
//! unlabeled, distribution-shifted target set by iterated self-training.
//! Positive-region features pass through a (frozen, seeded) transformer; the
//! attentive outputs are aggregated into a class prototype using
//! predictive-entropy weights and smoothed across batches by an exponential
//! moving average. Each positive region's classification loss is then scaled
//! by its cosine similarity to the prototype, so regions that look unlike the
//! class core — typically over-confident false positives — stop reinforcing
//! themselves.
//!
//! The crate ships a deterministic numeric substrate ([`matrix`], [`rng`],
//! [`gradcheck`]), the [`transformer`] and [`prototype`] machinery, a toy
//! [`detector`] head with analytic backprop, a synthetic domain-shift
//! [`benchmark`], and the full [`pipeline`] plus a [`cli`] front end.

pub mod benchmark;
pub mod cli;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod pipeline;
pub mod prototype;
pub mod rng;
pub mod transformer;

pub use error::{Error, Result};
