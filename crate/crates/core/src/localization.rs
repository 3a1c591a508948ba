//! Metric localization of a fitted pose against a calibrated reference plane.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{closest_points_between_lines, Line3, Mat3, Vec3};
use crate::nn::Vec2;
use crate::optimizer::RelativePose;
use crate::template::Template;

/// Default low-confidence threshold, as a fraction of the center distance.
pub const DEFAULT_GAP_FRACTION: f64 = 0.05;

/// Pinhole camera with the world `Z = 0` plane as reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    k: Mat3,
    r: Mat3,
    t: Vec3,
    h: Mat3,
    k_inv: Mat3,
    h_inv: Mat3,
}

impl CameraModel {
    /// `r` and `t` map world points to the camera frame: `X_c = r X_w + t`.
    pub fn new(k: Mat3, r: Mat3, t: Vec3) -> Result<Self> {
        if !(k.iter().chain(r.iter()).chain(t.iter()).all(|v| v.is_finite())) {
            return Err(Error::InvalidCalibration("non-finite calibration entry".into()));
        }
        if (k[(2, 2)] - 1.0).abs() > 1e-12 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::InvalidCalibration(
                "intrinsics must have last row (0, 0, 1)".into(),
            ));
        }
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| Error::InvalidCalibration("intrinsics are singular".into()))?;
        let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidCalibration(
                "rotation must be orthonormal with determinant 1".into(),
            ));
        }
        let h = k * Matrix3::from_columns(&[r.column(0).into(), r.column(1).into(), t]);
        let scale = h.abs().max();
        let h_inv = h
            .try_inverse()
            .filter(|_| h.determinant().abs() > 1e-12 * scale.powi(3))
            .ok_or_else(|| {
                Error::InvalidCalibration("reference plane passes through the camera center".into())
            })?;
        Ok(Self {
            k,
            r,
            t,
            h,
            k_inv,
            h_inv,
        })
    }

    pub fn intrinsics(&self) -> &Mat3 {
        &self.k
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.r
    }

    pub fn translation(&self) -> &Vec3 {
        &self.t
    }

    /// Image-to-plane homography `K [r1 r2 t]`.
    pub fn homography(&self) -> &Mat3 {
        &self.h
    }

    pub fn world_to_camera(&self, p_world: &Vec3) -> Vec3 {
        self.r * p_world + self.t
    }

    /// Pixel coordinates of a camera-frame point; errors behind the camera.
    pub fn project(&self, p_cam: &Vec3) -> Result<Vec2> {
        if !(p_cam.z > 0.0) {
            return Err(Error::BehindCamera(format!(
                "point at depth {} does not project",
                p_cam.z
            )));
        }
        let q = self.k * p_cam;
        Ok(Vec2::new(q.x / q.z, q.y / q.z))
    }
}

/// Depth-1 ray point `K^-1 (U, V, 1)`.
pub fn back_project(cam: &CameraModel, uv: Vec2) -> Vec3 {
    let p = cam.k_inv * Vec3::new(uv.x, uv.y, 1.0);
    p / p.z
}

/// Camera depth and world-plane coordinates of the plane point seen at `uv`.
pub fn plane_depth(cam: &CameraModel, uv: Vec2) -> Result<(f64, f64, f64)> {
    let q = cam.h_inv * Vec3::new(uv.x, uv.y, 1.0);
    let z = 1.0 / q.z;
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::BehindCamera(format!(
            "point ({}, {}) meets the reference plane at depth {z}",
            uv.x, uv.y
        )));
    }
    Ok((z, q.x * z, q.y * z))
}

/// Camera-frame center point: the ray point scaled to the plane depth.
pub fn absolute_center(cam: &CameraModel, uv_center: Vec2, ray_point: &Vec3) -> Result<Vec3> {
    let (z, _, _) = plane_depth(cam, uv_center)?;
    Ok(ray_point * z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsolutePose {
    pub h_abs: Vec3,
    pub c_abs: Vec3,
    pub t_abs: Vec3,
    /// Closest-approach gaps of the head and tail line pairs (mm).
    pub gaps: [f64; 2],
    pub length_mm: f64,
    pub bend_ratio: f64,
    pub low_confidence: bool,
}

/// Arc-over-chord bending ratio and the corrected length.
pub fn compute_length(
    rel: &RelativePose,
    abs_h: &Vec3,
    abs_t: &Vec3,
    template: &Template,
) -> Result<(f64, f64)> {
    let chord = (rel.h - rel.t).norm();
    if !(chord > 0.0) {
        return Err(Error::InvalidInput("head and tail coincide".into()));
    }
    let arc = rel.params.s * template.head_tail_arc();
    let ratio = arc / chord;
    Ok(((abs_h - abs_t).norm() * ratio, ratio))
}

/// Places head and tail on their viewing rays, anchored at `c_abs` along the
/// relative-pose directions. `gap_tol` defaults to a fraction of `|c_abs|`.
pub fn locate_endpoints(
    rel: &RelativePose,
    cam: &CameraModel,
    c_abs: &Vec3,
    template: &Template,
    gap_tol: Option<f64>,
) -> Result<AbsolutePose> {
    if !(c_abs.z > 0.0) {
        return Err(Error::BehindCamera("center point is behind the camera".into()));
    }
    let endpoint = |rel_pt: &Vec3, uv: Vec2| -> Result<(Vec3, f64)> {
        let ray = Line3::new(Vec3::zeros(), back_project(cam, uv))?;
        let offset = rel_pt - rel.c;
        let n = offset.norm();
        if !(n > 0.0) {
            return Err(Error::InvalidInput("endpoint coincides with the center".into()));
        }
        let body = Line3::new(*c_abs, offset / n)?;
        let cp = closest_points_between_lines(&ray, &body)?;
        Ok((cp.midpoint, cp.gap))
    };
    let (h_abs, gap_h) = endpoint(&rel.h, rel.h2d)?;
    let (t_abs, gap_t) = endpoint(&rel.t, rel.t2d)?;
    let (length_mm, bend_ratio) = compute_length(rel, &h_abs, &t_abs, template)?;
    let tol = gap_tol.unwrap_or(DEFAULT_GAP_FRACTION * c_abs.norm());
    Ok(AbsolutePose {
        h_abs,
        c_abs: *c_abs,
        t_abs,
        gaps: [gap_h, gap_t],
        length_mm,
        bend_ratio,
        low_confidence: gap_h > tol || gap_t > tol,
    })
}

/// Full chain from a relative pose: center depth, center point, endpoints.
pub fn localize(
    rel: &RelativePose,
    cam: &CameraModel,
    template: &Template,
    gap_tol: Option<f64>,
) -> Result<AbsolutePose> {
    let ray = back_project(cam, rel.c2d);
    let c_abs = absolute_center(cam, rel.c2d, &ray)?;
    locate_endpoints(rel, cam, &c_abs, template, gap_tol)
}
