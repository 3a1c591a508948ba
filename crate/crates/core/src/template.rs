//! Relative 3D fish template and its deformation chain.
//!
//! The template is a flat sheet of points (pixel units) built from the
//! foreground of a silhouette mask. A pose is produced by four transforms
//! applied in order: scale, cylindrical bend along y, in-plane translation,
//! and rotation.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::geometry::{rotate_row, rotation_matrix, Mat3, Vec3};
use crate::mask::BinaryMask;

/// Minimum foreground pixel count accepted by [`build_template`].
pub const MIN_TEMPLATE_PIXELS: usize = 100;

/// Below this bend angle the sin/cos form is replaced by its Taylor series.
const TAYLOR_THETA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Pixels,
    Millimeters,
}

/// Ordered 3D points tagged with their unit.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet3 {
    points: Vec<Vec3>,
    unit: Unit,
}

impl PointSet3 {
    pub fn new(points: Vec<Vec3>, unit: Unit) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point set is empty".into()));
        }
        if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput("point set has non-finite coordinates".into()));
        }
        Ok(Self { points, unit })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn map(&self, f: impl Fn(&Vec3) -> Vec3) -> PointSet3 {
        PointSet3 {
            points: self.points.iter().map(f).collect(),
            unit: self.unit,
        }
    }
}

/// The seven deformation parameters.
///
/// Bending is parameterized by signed curvature `kappa = 1 / r` so the flat
/// sheet is `kappa = 0`; the sign picks the bend direction along z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformParams {
    pub s: f64,
    pub kappa: f64,
    pub tx: f64,
    pub ty: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for DeformParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl DeformParams {
    pub const COUNT: usize = 7;

    pub fn identity() -> Self {
        Self {
            s: 1.0,
            kappa: 0.0,
            tx: 0.0,
            ty: 0.0,
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in ["s", "kappa", "tx", "ty", "alpha", "beta", "gamma"]
            .iter()
            .zip(self.to_array())
        {
            ensure_finite(name, v)?;
        }
        if self.s <= 0.0 {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {}", self.s)));
        }
        Ok(())
    }

    /// Order: s, kappa, tx, ty, alpha, beta, gamma.
    pub fn to_array(&self) -> [f64; 7] {
        [self.s, self.kappa, self.tx, self.ty, self.alpha, self.beta, self.gamma]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Self {
            s: v[0],
            kappa: v[1],
            tx: v[2],
            ty: v[3],
            alpha: v[4],
            beta: v[5],
            gamma: v[6],
        }
    }

    /// The silhouette twin: mirroring the deformed sheet through z = 0 is
    /// reproduced exactly by negating kappa, alpha and beta.
    pub fn depth_twin(&self) -> Self {
        Self {
            kappa: -self.kappa,
            alpha: -self.alpha,
            beta: -self.beta,
            ..*self
        }
    }
}

/// Maps source-mask pixel coordinates into the template frame.
#[derive(Debug, Clone, Copy, PartialEq)]
struct TemplateFrame {
    centroid: (f64, f64),
    rotation: f64,
}

impl TemplateFrame {
    fn to_template(&self, px: f64, py: f64) -> Vec3 {
        let (dx, dy) = (px - self.centroid.0, py - self.centroid.1);
        let (s, c) = self.rotation.sin_cos();
        Vec3::new(dx * c - dy * s, dx * s + dy * c, 0.0)
    }
}

/// Flat template point sheet with tracked head, center and tail indices.
#[derive(Debug, Clone)]
pub struct Template {
    points0: PointSet3,
    head_idx: usize,
    center_idx: usize,
    tail_idx: usize,
    source: BinaryMask,
    frame: TemplateFrame,
}

impl Template {
    pub fn points0(&self) -> &PointSet3 {
        &self.points0
    }

    pub fn n_points(&self) -> usize {
        self.points0.len()
    }

    pub fn head_idx(&self) -> usize {
        self.head_idx
    }

    pub fn center_idx(&self) -> usize {
        self.center_idx
    }

    pub fn tail_idx(&self) -> usize {
        self.tail_idx
    }

    /// Silhouette the template was built from.
    pub fn source_mask(&self) -> &BinaryMask {
        &self.source
    }

    pub fn head0(&self) -> Vec3 {
        self.points0.points[self.head_idx]
    }

    pub fn center0(&self) -> Vec3 {
        self.points0.points[self.center_idx]
    }

    pub fn tail0(&self) -> Vec3 {
        self.points0.points[self.tail_idx]
    }

    /// Head-to-tail midline arc of the flat sheet (pixels). Bending is an
    /// isometry of the sheet, so the deformed arc is always `s` times this.
    pub fn head_tail_arc(&self) -> f64 {
        (self.head0() - self.tail0()).norm()
    }

    /// Largest |y| over the template; bounds the curvature before over-bend.
    pub fn max_abs_y(&self) -> f64 {
        self.points0.points.iter().map(|p| p.y.abs()).fold(0.0, f64::max)
    }

    /// Maps a continuous source-mask coordinate into the template frame.
    pub fn mask_to_template(&self, px: f64, py: f64) -> Vec3 {
        self.frame.to_template(px, py)
    }

    /// Every foreground pixel of the source mask sampled `factor x factor`
    /// times, expressed in the template frame. Used for dense rendering.
    pub fn supersampled_points(&self, factor: usize) -> PointSet3 {
        let factor = factor.max(1);
        let step = 1.0 / factor as f64;
        let mut pts = Vec::with_capacity(self.source.count() * factor * factor);
        for (x, y) in self.source.foreground() {
            for j in 0..factor {
                for i in 0..factor {
                    let px = x as f64 + (i as f64 + 0.5) * step;
                    let py = y as f64 + (j as f64 + 0.5) * step;
                    pts.push(self.frame.to_template(px, py));
                }
            }
        }
        PointSet3 {
            points: pts,
            unit: Unit::Pixels,
        }
    }
}

/// Builds the flat template from a silhouette mask, keeping every `stride`-th
/// foreground pixel in row-major order.
pub fn build_template(mask: &BinaryMask, stride: usize) -> Result<Template> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let area = mask.count();
    if area < MIN_TEMPLATE_PIXELS {
        return Err(Error::InvalidInput(format!(
            "template mask needs at least {MIN_TEMPLATE_PIXELS} foreground pixels, found {area}"
        )));
    }

    let centers: Vec<(f64, f64)> = mask
        .foreground()
        .map(|(x, y)| (x as f64 + 0.5, y as f64 + 0.5))
        .collect();
    let sampled: Vec<(f64, f64)> = centers.iter().copied().step_by(stride).collect();
    let n = sampled.len() as f64;
    let cx = sampled.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = sampled.iter().map(|p| p.1).sum::<f64>() / n;

    // Turn the major axis onto y with the smallest rotation.
    let axis = mask.principal_axis_angle().unwrap_or(FRAC_PI_2);
    let mut rotation = FRAC_PI_2 - axis;
    while rotation > FRAC_PI_2 {
        rotation -= PI;
    }
    while rotation <= -FRAC_PI_2 {
        rotation += PI;
    }
    if rotation.abs() < 1e-9 {
        rotation = 0.0;
    }
    let provisional = TemplateFrame {
        centroid: (cx, cy),
        rotation,
    };

    let mut points: Vec<Vec3> = sampled.iter().map(|&(x, y)| provisional.to_template(x, y)).collect();

    // Head and tail are the midline extremes of the full-resolution mask, so
    // subsampling cannot clip them; they join the sheet if not already in it.
    let midline: Vec<Vec3> = centers
        .iter()
        .map(|&(x, y)| provisional.to_template(x, y))
        .filter(|p| p.x.abs() < 1.0)
        .collect();
    let head = midline
        .iter()
        .copied()
        .reduce(|a, b| if b.y > a.y { b } else { a })
        .ok_or_else(|| Error::InvalidInput("template has no midline points".into()))?;
    let tail = midline
        .iter()
        .copied()
        .reduce(|a, b| if b.y < a.y { b } else { a })
        .expect("midline is nonempty");
    let mut locate = |q: Vec3| match points.iter().position(|p| (p - q).norm() < 1e-9) {
        Some(i) => i,
        None => {
            points.push(q);
            points.len() - 1
        }
    };
    let head_idx = locate(head);
    let tail_idx = locate(tail);

    let mean = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64;
    for p in &mut points {
        p.x -= mean.x;
        p.y -= mean.y;
        p.z = 0.0;
    }
    let (sr, cr) = rotation.sin_cos();
    let frame = TemplateFrame {
        centroid: (cx + mean.x * cr + mean.y * sr, cy - mean.x * sr + mean.y * cr),
        rotation,
    };

    let mut center_idx = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.norm_squared().total_cmp(&b.1.norm_squared()))
        .map(|(i, _)| i)
        .expect("points are nonempty");
    let nearest = points[center_idx].norm();
    if nearest > 1.5 || !mask.get_signed(frame.centroid.0.floor() as i64, frame.centroid.1.floor() as i64) {
        return Err(Error::InvalidInput(
            "template has no foreground at its centroid".into(),
        ));
    }
    if nearest > 1.0 {
        // Subsampling can leave a hole at the centroid; pin the center point
        // there. Appending the origin keeps the centroid at zero.
        points.push(Vec3::zeros());
        center_idx = points.len() - 1;
    }

    if head_idx == tail_idx || head_idx == center_idx || tail_idx == center_idx {
        return Err(Error::InvalidInput(
            "template keypoints are not distinct; mask is too short along its axis".into(),
        ));
    }

    Ok(Template {
        points0: PointSet3::new(points, Unit::Pixels)?,
        head_idx,
        center_idx,
        tail_idx,
        source: mask.clone(),
        frame,
    })
}

/// S1: multiply every coordinate by `s`.
pub fn scale_points(ps: &PointSet3, s: f64) -> Result<PointSet3> {
    ensure_finite("s", s)?;
    if s <= 0.0 {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {s}")));
    }
    Ok(ps.map(|p| p * s))
}

/// Wraps a single point onto the cylinder of curvature `kappa`.
///
/// For a point on the sheet (z = 0) this is `(x, sin(theta)/kappa,
/// (1 - cos(theta))/kappa)` with `theta = kappa * y`; a nonzero z is carried
/// along the cylinder normal so that `kappa = 0` is the identity.
#[inline]
pub fn bend_point(p: &Vec3, kappa: f64) -> Result<Vec3> {
    let theta = p.y * kappa;
    if theta.abs() >= std::f64::consts::PI {
        return Err(Error::OverBend { kappa, theta: theta.abs() });
    }
    let (sin_t, cos_t) = theta.sin_cos();
    let (along, lift) = if theta.abs() < TAYLOR_THETA {
        let t2 = theta * theta;
        (
            p.y * (1.0 - t2 / 6.0 + t2 * t2 / 120.0),
            p.y * theta * (0.5 - t2 / 24.0 + t2 * t2 / 720.0),
        )
    } else {
        let half = (0.5 * theta).sin();
        (sin_t / kappa, 2.0 * half * half / kappa)
    };
    Ok(Vec3::new(p.x, along - p.z * sin_t, lift + p.z * cos_t))
}

/// S2: bend every point along y.
pub fn bend_points(ps: &PointSet3, kappa: f64) -> Result<PointSet3> {
    ensure_finite("kappa", kappa)?;
    let points = ps
        .points
        .iter()
        .map(|p| bend_point(p, kappa))
        .collect::<Result<Vec<_>>>()?;
    Ok(PointSet3 {
        points,
        unit: ps.unit,
    })
}

/// S3: add `(tx, ty, 0)`.
pub fn translate_points(ps: &PointSet3, tx: f64, ty: f64) -> Result<PointSet3> {
    ensure_finite("tx", tx)?;
    ensure_finite("ty", ty)?;
    let t = Vec3::new(tx, ty, 0.0);
    Ok(ps.map(|p| p + t))
}

/// S4: right-multiply each row-vector point by `R(gamma) R(beta) R(alpha)`.
pub fn rotate_points(ps: &PointSet3, alpha: f64, beta: f64, gamma: f64) -> Result<PointSet3> {
    let m = rotation_matrix(alpha, beta, gamma)?;
    Ok(ps.map(|p| rotate_row(p, &m)))
}

/// Deformed template state.
#[derive(Debug, Clone)]
pub struct Deformed {
    pub s4: PointSet3,
    pub head: Vec3,
    pub center: Vec3,
    pub tail: Vec3,
}

/// Runs scale, bend, translate and rotate in sequence.
pub fn apply_deformation(t: &Template, p: &DeformParams) -> Result<Deformed> {
    p.validate()?;
    let s1 = scale_points(&t.points0, p.s)?;
    let s2 = bend_points(&s1, p.kappa)?;
    let s3 = translate_points(&s2, p.tx, p.ty)?;
    let s4 = rotate_points(&s3, p.alpha, p.beta, p.gamma)?;
    Ok(Deformed {
        head: s4.points[t.head_idx],
        center: s4.points[t.center_idx],
        tail: s4.points[t.tail_idx],
        s4,
    })
}

/// Precomputed deformation for evaluating individual points quickly.
#[derive(Debug, Clone, Copy)]
pub struct Deformation {
    params: DeformParams,
    rotation: Mat3,
}

impl Deformation {
    pub fn new(params: &DeformParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params: *params,
            rotation: rotation_matrix(params.alpha, params.beta, params.gamma)?,
        })
    }

    pub fn params(&self) -> &DeformParams {
        &self.params
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    #[inline]
    pub fn apply(&self, p0: &Vec3) -> Result<Vec3> {
        let p = &self.params;
        let bent = bend_point(&(p0 * p.s), p.kappa)?;
        let moved = bent + Vec3::new(p.tx, p.ty, 0.0);
        Ok(rotate_row(&moved, &self.rotation))
    }

    /// Deforms a whole point set.
    pub fn apply_all(&self, ps: &PointSet3) -> Result<PointSet3> {
        let points = ps.points.iter().map(|q| self.apply(q)).collect::<Result<Vec<_>>>()?;
        Ok(PointSet3 {
            points,
            unit: ps.unit,
        })
    }
}

/// Procedural flat-fish silhouette: a tapered elliptical body, a narrow caudal
/// peduncle and a tail fin, 300 px from tail tip to head tip with the head
/// toward +y (down the image rows).
pub fn default_fish_mask() -> BinaryMask {
    const WIDTH: usize = 120;
    const HEIGHT: usize = 304;
    let half_width = |u: f64| -> f64 {
        let mut hw: f64 = 0.0;
        // Body ellipse, tail end narrower than the head end.
        let t = (u - 34.0) / 116.0;
        if t.abs() <= 1.0 {
            let taper = if t < 0.0 { 1.0 + 0.25 * t } else { 1.0 };
            hw = hw.max(54.0 * (1.0 - t * t).sqrt() * taper);
        }
        if (-114.0..=-70.0).contains(&u) {
            hw = hw.max(9.0);
        }
        if (-150.0..-112.0).contains(&u) {
            let f = (-112.0 - u) / 38.0;
            hw = hw.max(9.0 + 25.0 * f);
        }
        hw
    };
    BinaryMask::from_fn(WIDTH, HEIGHT, |x, y| {
        let xc = x as f64 + 0.5 - WIDTH as f64 / 2.0;
        let u = y as f64 + 0.5 - HEIGHT as f64 / 2.0;
        (-150.0..=150.0).contains(&u) && xc.abs() <= half_width(u)
    })
    .expect("fixed nonzero dimensions")
}

/// Template from [`default_fish_mask`] with the default stride of 2.
pub fn default_template() -> Template {
    build_template(&default_fish_mask(), 2).expect("procedural template is valid")
}
