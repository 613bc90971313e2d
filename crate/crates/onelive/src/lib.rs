//! Desk-scale generative live-streaming recommendation pipeline.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`numerics`]: dense matrix kernel, reverse-mode tape, gradient checking,
//!   and the Adam optimizer used by every learned component.
//! - [`sim`]: a deterministic synthetic live-streaming world: drifting author
//!   content, finite session lifecycles, multi-objective user feedback.
//! - [`tokenizer`]: dynamic tokenization: two-tower behavioral alignment of
//!   author content, residual k-means quantization into 3-level Semantic IDs,
//!   codebook health metrics.
//! - [`generator`]: lazy decoder-only generative model over Semantic IDs with
//!   temporal perception, gated attention, QK normalization, and sequential
//!   multi-token prediction.
//! - [`inference`]: beam search with live-validity filtering, the MTP fast
//!   path reusing KV caches, retrieval metrics, and a decoding benchmark.
//! - [`alignment`]: ensemble reward model, group sampling, advantage
//!   normalization, DPO/GRPO objectives, and the combined training step.
//! - [`pipeline`]: stage orchestration, artifact manifests, evaluation.

pub mod alignment;
pub mod config;
pub mod error;
pub mod formats;
pub mod generator;
pub mod inference;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod sim;
pub mod tokenizer;

pub use error::{Error, Result};
