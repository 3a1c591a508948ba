//! Elementary 3D geometry shared by the deformation model and localization.
//!
//! Points are treated as row vectors throughout: a rotation `M` acts as `p * M`.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};

use crate::error::{ensure_finite, Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Threshold on the normalized cross product below which two lines count as parallel.
pub const PARALLEL_EPS: f64 = 1e-9;

/// Counterclockwise rotation about x for row vectors (`p * rot_x(a)`).
pub fn rot_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, s, 0.0, -s, c)
}

/// Counterclockwise rotation about y for row vectors.
pub fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

/// Counterclockwise rotation about z for row vectors.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Composed rotation `R(gamma) * R(beta) * R(alpha)`.
///
/// A row-vector point `p` is first turned about z by `gamma`, then about y by
/// `beta`, then about x by `alpha`.
pub fn rotation_matrix(alpha: f64, beta: f64, gamma: f64) -> Result<Mat3> {
    ensure_finite("alpha", alpha)?;
    ensure_finite("beta", beta)?;
    ensure_finite("gamma", gamma)?;
    let (a, b, g) = (alpha.rem_euclid(TAU), beta.rem_euclid(TAU), gamma.rem_euclid(TAU));
    Ok(rot_z(g) * rot_y(b) * rot_x(a))
}

/// Angles `(alpha, beta, gamma)` with `rotation_matrix(alpha, beta, gamma) == m`
/// for a proper rotation `m`, taking beta in [-pi/2, pi/2] and gamma in
/// [0, 2pi). Near gimbal lock alpha absorbs the free rotation.
pub fn euler_angles(m: &Mat3) -> (f64, f64, f64) {
    // m = (Rx(alpha) Ry(beta) Rz(gamma))^T in column-vector form.
    let n = m.transpose();
    let beta = n[(0, 2)].clamp(-1.0, 1.0).asin();
    let (alpha, gamma) = if n[(0, 2)].abs() < 1.0 - 1e-12 {
        ((-n[(1, 2)]).atan2(n[(2, 2)]), (-n[(0, 1)]).atan2(n[(0, 0)]))
    } else {
        (n[(2, 1)].atan2(n[(1, 1)]), 0.0)
    };
    (alpha, beta, gamma.rem_euclid(TAU))
}

/// Applies a rotation to a row-vector point.
#[inline]
pub fn rotate_row(p: &Vec3, m: &Mat3) -> Vec3 {
    (p.transpose() * m).transpose()
}

/// Infinite line `origin + t * direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line3 {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Line3 {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        if !origin.iter().chain(direction.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("line coordinates must be finite".into()));
        }
        if direction.norm() <= 1e-12 {
            return Err(Error::InvalidInput("line direction has zero length".into()));
        }
        Ok(Self { origin, direction })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// Euclidean distance from `p` to the line.
    pub fn distance_to(&self, p: &Vec3) -> f64 {
        let d = self.direction / self.direction.norm();
        let w = p - self.origin;
        (w - d * w.dot(&d)).norm()
    }
}

/// Result of [`closest_points_between_lines`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoints {
    pub p1: Vec3,
    pub p2: Vec3,
    pub midpoint: Vec3,
    pub gap: f64,
}

/// Closest pair of points between two non-parallel lines.
///
/// Solves the 2x2 normal equations of `|o1 + a d1 - o2 - b d2|^2`.
pub fn closest_points_between_lines(l1: &Line3, l2: &Line3) -> Result<ClosestPoints> {
    let (d1, d2) = (l1.direction, l2.direction);
    let (n1, n2) = (d1.norm(), d2.norm());
    if n1 <= 1e-12 || n2 <= 1e-12 {
        return Err(Error::InvalidInput("line direction has zero length".into()));
    }
    let sin_angle = d1.cross(&d2).norm() / (n1 * n2);
    if sin_angle < PARALLEL_EPS {
        return Err(Error::DegenerateGeometry(format!(
            "lines are parallel (sin angle = {sin_angle:e})"
        )));
    }

    let w = l1.origin - l2.origin;
    let a11 = d1.dot(&d1);
    let a12 = d1.dot(&d2);
    let a22 = d2.dot(&d2);
    let r1 = d1.dot(&w);
    let r2 = d2.dot(&w);
    let denom = a11 * a22 - a12 * a12;

    let t1 = (a12 * r2 - a22 * r1) / denom;
    let t2 = (a11 * r2 - a12 * r1) / denom;

    let p1 = l1.origin + d1 * t1;
    let p2 = l2.origin + d2 * t2;
    Ok(ClosestPoints {
        p1,
        p2,
        midpoint: (p1 + p2) * 0.5,
        gap: (p1 - p2).norm(),
    })
}
