//! Coarse-to-fine blind image quality assessment.
//!
//! The crate trains and evaluates a scorer that predicts a mean opinion score
//! (MOS) for an image at each of `T` recurrent time steps. The first step is
//! trained with a pairwise rank-and-gradient loss over micro-batches that span
//! the five ACR quality scales; later steps are trained with absolute-error
//! losses whose tolerance shrinks step by step. Range-effect diagnostics
//! (per-scale correlation, scale confusion, deviation histograms) evaluate how
//! well predictions hold up inside narrow quality ranges.
//!
//! Module map:
//! - [`scales`]: ACR quality scales and micro-batch sampling
//! - [`losses`]: coarse/fine losses, curriculum weights
//! - [`backbone`], [`feedback`], [`encoder`], [`assessor`]: the network
//! - [`metrics`]: SROCC, PLCC and range-effect reports
//! - [`data`]: manifests, the synthetic distortion generator, split and crop
//! - [`harness`]: training, evaluation and analysis pipelines
//! - [`graph`], [`tensor`], [`params`]: the numeric substrate

pub mod assessor;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod feedback;
pub mod graph;
pub mod harness;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod params;
pub mod scales;
pub mod tensor;
#[cfg(test)]
mod testutil;

pub use error::{Error, LoadIssue, Result};
pub use par::Exec;
