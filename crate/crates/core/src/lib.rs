//! Guided token dropping for small vision transformers.
//!
//! A lightweight guidance model classifies each image first. Confident
//! samples exit immediately with the guidance prediction; the rest get a
//! Grad-CAM saliency map over the guidance model's final block, which
//! ranks the target model's patch tokens. Low-importance tokens are
//! dropped before the target's first block, with absolute positional
//! embeddings or relative position biases sub-selected to match, and an
//! analytic FLOPs account is attached to every sample.
//!
//! Modules:
//! * [`tensor`] — dense f64 kernel with an instrumented FLOP counter
//! * [`model`] — the ViT family, weight I/O and the toy trainer
//! * [`saliency`] — tail gradients and Grad-CAM token scoring
//! * [`policy`] — early exit and the confidence-to-drop mapping
//! * [`dropper`] — top-k selection, gathering, positional adaptation
//! * [`flops`] — closed-form cost model
//! * [`dataset`] — toy data generation and the on-disk layout
//! * [`pipeline`] — per-sample orchestration, evaluation, sweeps
//! * [`report`] — JSONL/CSV serialization

pub mod container;
pub mod dataset;
pub mod dropper;
mod error;
pub mod flops;
pub mod model;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
