//! Detector-agnostic tooling for counting microbial colonies by detection.
//!
//! A plate photo is annotated as a set of class-labelled bounding boxes
//! (AGAR-style JSON, one file per sample). A detector — which this crate
//! never runs — produces scored boxes per 512x512 patch. Everything around
//! that detector lives here:
//!
//! * [`model`] / [`agar`] / [`coco`] — domain types, annotation parsing and
//!   writing, COCO export.
//! * [`geometry`] — axis-aligned boxes, IoU, coordinate transforms.
//! * [`tiler`] — randomized training patches and overlapped test windows.
//! * [`postprocess`] — merging per-window detections, probability filtering,
//!   and the area-priority soft-NMS variant.
//! * [`metrics`] — IoU-thresholded matching, PR curves, AP/mAP, and the
//!   counting errors MAE, cMAE, and sMAPE.
//! * [`tuner`] — grid search for the (probability, NMS) threshold pair and
//!   the general/auxiliary double-thresholding policy.
//! * [`stats`] — dataset summaries, box size buckets, heatmaps, histograms.
//! * [`synth`] — seeded synthetic plates plus brute-force oracles so the
//!   whole pipeline is testable without images or a trained model.
//!
//! Geometry and the numeric kernels are generic over the scalar type via
//! [`Scalar`] (`f32` or `f64`); the pipeline-facing aliases below fix `f64`.

pub mod agar;
pub mod coco;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod postprocess;
pub mod records;
pub mod scalar;
pub mod stats;
pub mod synth;
pub mod tiler;
pub mod tuner;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Pixel-space box with `f64` coordinates, the type the pipeline works in.
pub type BBox = geometry::BBox<f64>;
/// Single-precision box for callers feeding `f32` detector output directly.
pub type BBox32 = geometry::BBox<f32>;

/// Scored, class-labelled detection with `f64` coordinates.
pub type Detection = model::Detection<f64>;
/// Single-precision detection.
pub type Detection32 = model::Detection<f32>;
