//! Monocular fish pose and length estimation from a single binary mask.
//!
//! The pipeline fits a deformable flat-fish template to the mask contour by
//! chamfer minimization ([`optimizer`]), lifts the fitted head, center and tail
//! keypoints to millimeters using a calibrated reference plane
//! ([`localization`]), and aggregates per-frame lengths over a clip
//! ([`metrics`]). A brute-force retrieval baseline lives in [`bfs`].

pub mod bfs;
pub mod cli;
pub mod contour;
pub mod error;
pub mod geometry;
pub mod io;
pub mod localization;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod optimizer;
pub mod pipeline;
pub mod synth;
pub mod template;

pub use error::{Error, Result};
