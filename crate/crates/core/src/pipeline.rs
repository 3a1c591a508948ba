//! Frame and clip estimation: relative fit, metric localization, aggregation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bfs::{bfs_estimate, iou, ProjectionDatabase};
use crate::error::{Error, Result};
use crate::geometry::Mat3;
use crate::io::read_mask;
use crate::localization::{localize, AbsolutePose, CameraModel};
use crate::mask::BinaryMask;
use crate::metrics::{aggregate_clip, ClipEstimate};
use crate::nn::Vec2;
use crate::optimizer::{estimate_relative_pose, OptimizerConfig, RelativePose};
use crate::synth::{render_perspective, BodyPlacement};
use crate::template::Template;

/// Everything estimated for one mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub relative: RelativePose,
    pub absolute: AbsolutePose,
    /// IoU between the mask and the perspective re-rendering of the chosen
    /// pose; `None` when the re-rendering left the frame.
    pub reprojection_iou: Option<f64>,
    pub homography: Mat3,
}

impl FrameResult {
    pub fn length_mm(&self) -> f64 {
        self.absolute.length_mm
    }
}

/// Localizes `rel` and scores it by re-rendering through the real camera.
fn localize_and_score(
    rel: &RelativePose,
    mask: &BinaryMask,
    template: &Template,
    cam: &CameraModel,
) -> Result<(AbsolutePose, Option<f64>)> {
    let abs = localize(rel, cam, template, None)?;
    let mm_per_px = (abs.h_abs - abs.t_abs).norm() / (rel.h - rel.t).norm();
    let placement = BodyPlacement {
        center_cam: abs.c_abs,
        mm_per_px,
    };
    let score = render_perspective(template, &rel.params, &placement, cam, mask.width(), mask.height())
        .ok()
        .and_then(|m| iou(&m, mask).ok());
    Ok((abs, score))
}

/// Fits one mask and converts the fit to a metric length.
///
/// An orthographic silhouette cannot tell a pose from its depth twin (bend,
/// alpha and beta negated), yet the two localize to different lengths. Both
/// are re-rendered with perspective and the better IoU wins, the direct fit
/// on ties.
pub fn estimate_frame(
    mask: &BinaryMask,
    template: &Template,
    cam: &CameraModel,
    cfg: &OptimizerConfig,
) -> Result<FrameResult> {
    let rel = estimate_relative_pose(mask, template, cfg)?;
    finish_frame(rel, mask, template, cam)
}

/// Same as [`estimate_frame`] with the relative pose looked up in a
/// projection database instead of fitted.
pub fn estimate_frame_bfs(
    mask: &BinaryMask,
    template: &Template,
    cam: &CameraModel,
    db: &ProjectionDatabase,
) -> Result<FrameResult> {
    let m = bfs_estimate(mask, db, template)?;
    finish_frame(m.pose, mask, template, cam)
}

/// Resolves the depth twin and localizes.
pub fn finish_frame(
    rel: RelativePose,
    mask: &BinaryMask,
    template: &Template,
    cam: &CameraModel,
) -> Result<FrameResult> {
    let center = Vec2::new(mask.width() as f64 / 2.0, mask.height() as f64 / 2.0);
    let twin = RelativePose::from_params(
        template,
        &rel.params.depth_twin(),
        center,
        rel.final_loss,
        rel.loss_trace.clone(),
    )?;

    let direct = localize_and_score(&rel, mask, template, cam)?;
    let mirrored = localize_and_score(&twin, mask, template, cam);
    let (relative, (absolute, reprojection_iou)) = match mirrored {
        Ok(m) if m.1.unwrap_or(-1.0) > direct.1.unwrap_or(-1.0) => (twin, m),
        _ => (rel, direct),
    };
    Ok(FrameResult {
        relative,
        absolute,
        reprojection_iou,
        homography: *cam.homography(),
    })
}

#[derive(Debug)]
pub struct FrameOutcome {
    pub index: usize,
    pub path: PathBuf,
    pub result: Result<FrameResult>,
}

/// Mask files in `dir`, sorted by name; frame indices follow that order.
pub fn list_masks(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::file(dir, "no .pgm masks found"));
    }
    Ok(paths)
}

/// Estimates every frame concurrently. Results come back in frame order.
pub fn estimate_frames(
    paths: &[PathBuf],
    template: &Template,
    cam: &CameraModel,
    cfg: &OptimizerConfig,
) -> Vec<FrameOutcome> {
    paths
        .par_iter()
        .enumerate()
        .map(|(index, path)| FrameOutcome {
            index,
            path: path.clone(),
            result: read_mask(path).and_then(|m| estimate_frame(&m, template, cam, cfg)),
        })
        .collect()
}

#[derive(Debug)]
pub struct ClipResult {
    pub frames: Vec<FrameOutcome>,
    pub clip: ClipEstimate,
    /// Frame indices that contributed to `clip`, parallel to its lengths.
    pub used: Vec<usize>,
}

/// Estimates all frames and aggregates the successful ones.
pub fn estimate_clip(
    paths: &[PathBuf],
    template: &Template,
    cam: &CameraModel,
    cfg: &OptimizerConfig,
) -> Result<ClipResult> {
    let frames = estimate_frames(paths, template, cam, cfg);
    let (used, lengths): (Vec<usize>, Vec<f64>) = frames
        .iter()
        .filter_map(|f| f.result.as_ref().ok().map(|r| (f.index, r.length_mm())))
        .unzip();
    if lengths.is_empty() {
        let first = frames
            .into_iter()
            .find_map(|f| f.result.err())
            .expect("at least one frame");
        return Err(first);
    }
    let clip = aggregate_clip(&lengths)?;
    Ok(ClipResult { frames, clip, used })
}
