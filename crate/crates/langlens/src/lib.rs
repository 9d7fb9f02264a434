//! Detection and manipulation of language-specific neurons in a small,
//! fully deterministic decoder-only transformer.
//!
//! The crate is organised around one experiment loop:
//!
//! 1. [`corpus`] generates synthetic multilingual corpora over disjoint
//!    token-id ranges, so language identity is decidable per token.
//! 2. [`model`] provides the 64-bit-float toy transformer with per-layer
//!    state capture and neuron-level deactivation masking.
//! 3. [`importance`] scores every neuron's contribution to a document,
//!    both by brute-force deactivation oracles and by batched formulas
//!    that compute all scores from a single forward pass.
//! 4. [`atlas`] turns per-document scores into labelled neuron sets and
//!    supplies the set algebra, overlap statistics, and matched random
//!    baselines the experiments need.
//! 5. [`lab`] runs the structured deactivation experiments: layer
//!    partitions, region/structure configurations, perplexity evaluation
//!    with the delta metric, and the layer-wise language-ratio probe.
//! 6. [`tuner`] implements exact analytic gradients and gradient-masked
//!    selective fine-tuning that touches only a neuron set's parameters.
//!
//! Everything is seeded: identical inputs produce bit-identical outputs.

pub mod atlas;
pub mod corpus;
pub mod error;
pub mod fsio;
pub mod importance;
pub mod lab;
pub mod model;
pub mod seeds;
pub mod tuner;

pub use error::{Error, Result};
