//! Dual-encoder cross-modal retrieval with weak-positive boosting.
//!
//! A text query whose own image sits at rank `k` behind an image of a
//! different identity is a *weak positive*. At a fixed epoch cadence the
//! trainer re-mines these pairs over the whole training split and multiplies
//! their loss contribution by `exp(alpha)`. Everything else here (synthetic
//! data, MLP encoders, Adam, retrieval metrics) is the harness needed to
//! exercise that mechanism end to end.
//!
//! Module map:
//!
//! - [`dataset`]: synthetic two-modality identity corpora and their on-disk format
//! - [`encoder`]: MLP towers, analytic backward pass, Adam, checkpoints
//! - [`mining`]: similarity, ranking, weak-positive sets, weight tables
//! - [`losses`]: boosted ITC, ID and SDM objectives with exact gradients
//! - [`trainer`]: epoch loop and the periodic weight refresh
//! - [`eval`]: R@k / mAP, distractor galleries, cross-dataset evaluation
//! - [`report`]: comparison tables, ablation series, promotion diagnostics

pub mod binfmt;
pub mod dataset;
pub mod encoder;
mod error;
pub mod eval;
pub mod losses;
pub mod mining;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
