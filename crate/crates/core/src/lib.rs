//! Desk-scale pipeline for classifying disease progression between
//! registered OCT B-scan pairs and for predicting a follow-up scan from a
//! single baseline scan.
//!
//! The crate is organized around the stages of that pipeline:
//!
//! - [`numerics`]: dense f64 tensors, reverse-mode autodiff, AdamW
//! - [`dataio`]: manifests, PGM/PNG images, synthetic longitudinal data
//! - [`preprocess`]: retina surface detection, flattening, crop/resize
//! - [`patchwork`]: patch grids, mask sampling, composite assembly
//! - [`models`]: fusion CNN classifiers and the patch-progression
//!   masked autoencoder
//! - [`training`]: training loops, augmentation, fold ensembling
//! - [`metrics`]: confusion-matrix metrics and evaluation reports
//! - [`cli`]: the subcommand implementations behind the `octprog` binary



pub mod cli;
pub mod config;
pub mod dataio;
pub mod metrics;
pub mod models;


pub mod numerics;
pub mod patchwork;
pub mod preprocess;
pub mod training;


pub use numerics::{Tape, Tensor};
