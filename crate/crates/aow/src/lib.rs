//! Watermarking workbench for sequential next-item recommenders.
//!
//! The library covers the full ownership-verification loop at desk scale:
//!
//! * [`corpus`] — interaction datasets: loading, synthesis, leave-one-out
//!   splits, popularity statistics.
//! * [`metrics`] — all-item ranking with Recall@k / NDCG@k aggregation.
//! * [`scorer`] — next-item scorers: a counts-based Markov model and a small
//!   causal self-attention network trained by hand-rolled gradient descent,
//!   with binary checkpointing and finite-difference gradient validation.
//! * [`watermark`] — autoregressive out-of-distribution watermark generation
//!   (bottom-M sampling), injection into training data, and validity
//!   verification over prefix truncations.
//! * [`attacks`] — removal-attack simulators: black-box distillation and
//!   fine-tuning on attacker-generated sequences.
//! * [`harness`] — experiment configs, seeded end-to-end pipelines,
//!   hyperparameter sweeps, and report emission.

pub mod attacks;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod scorer;
pub mod watermark;

pub use error::{Error, Result};
