//! Attention-entropy test-time adaptation at desk scale.
//!
//! A small vision transformer adapts to each test image with a single
//! optimizer step that minimizes the Shannon entropy of its CLS→patch
//! attention, predicts with the adapted weights, then resets to the
//! pretrained snapshot. Optimizer moments can be carried across samples or
//! reset per sample. The crate bundles everything needed to study the
//! protocol end to end: a reverse-mode autodiff tape, the transformer, the
//! entropy objective, SGD/Adam adaptation engines, a synthetic corruption
//! benchmark, and a streaming evaluation harness with analysis outputs.
//!
//! The `aetta` binary drives the harness; see the repository README for the
//! config schema and CLI verbs.

pub mod analysis;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod graph;
pub mod harness;
pub mod image;
mod kernels;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod snapshot;
pub mod vit;

pub use engine::{adapt_and_predict, run_stream, AdaptationPolicy, EpisodeRecord, TtaEngine};
pub use error::{Error, Result};
pub use graph::{Graph, Tensor};
pub use image::Image;
pub use objective::{ClsAttentionDistribution, HeadEntropies};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use snapshot::{GradientMap, ParameterSnapshot};
pub use vit::{AttentionTensor, Prediction, VitConfig, VitModel};
