//! Two-stage pulmonary nodule detection on CT volumes.
//!
//! The pipeline has two trained stages plus the plumbing around them:
//!
//! 1. **Candidate detection** ([`detector`]) — an anchor-based region-proposal
//!    detector that runs on axial slice triplets. A deconvolutional layer
//!    upsamples the backbone features from stride 16 to stride 4 so that
//!    small nodules stay resolvable, six square anchors per feature cell
//!    cover the nodule size range, and an ROI-pooling classifier head scores
//!    each proposal. Per-slice detections are fused into 3D candidates.
//! 2. **False-positive reduction** ([`fpr`]) — a 3D convolutional classifier
//!    that rescores each candidate from a volumetric patch around its
//!    center, with crop/flip augmentation and positive duplication during
//!    training.
//!
//! Supporting modules:
//!
//! - [`tensor`] — dense f64 tensors with reverse-mode differentiation,
//!   implementing exactly the layer vocabulary the two networks need.
//! - [`geom`] — boxes, anchors, IoU, encoding, assignment, and NMS.
//! - [`ct`] — CT volumes, a MetaImage-subset parser, world/voxel transforms,
//!   slice-triplet construction, annotation/candidate CSVs, and a synthetic
//!   phantom generator for desk-scale experiments.
//! - [`froc`] — candidate/annotation matching, FROC curves, and the
//!   seven-point average score.
//! - [`cli`] — the `phantom-gen` / `train-detector` / `detect` / `train-fpr`
//!   / `reduce` / `froc` / `report` / `pipeline` subcommands.
//!
//! The `examples/` directory walks through every stage on synthetic data;
//! `examples/two_stage_pipeline.rs` runs the whole thing end to end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod ct;
pub mod detector;
pub mod fpr;
pub mod froc;
pub mod geom;
pub mod pipeline;
pub mod tensor;

mod error;
mod optim;
mod util;

pub use error::{Error, Result};

#[cfg(feature = "testkit")]
pub mod testkit;
