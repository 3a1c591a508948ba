//! Perspective rendering of synthetic scenes with known ground truth.

use serde::{Deserialize, Serialize};

use crate::contour::rasterize_on;
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::localization::CameraModel;
use crate::mask::BinaryMask;
use crate::nn::Vec2;
use crate::template::{apply_deformation, DeformParams, Deformation, Template};

/// Scene description. The fish center lies on the world `Z = 0` plane; the
/// plane is seen by a camera at distance `plane_distance_mm` along the optical
/// axis, tilted by `plane_tilt_rad` about the camera x axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub image_width: usize,
    pub image_height: usize,
    pub focal_px: f64,
    #[serde(default)]
    pub plane_tilt_rad: f64,
    pub plane_distance_mm: f64,
    /// Fish center on the reference plane (world mm).
    #[serde(default)]
    pub center_world_mm: [f64; 2],
    pub length_mm: f64,
    /// Total bend angle across the head-tail midline (radians).
    #[serde(default)]
    pub bend_rad: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
    /// Millimeters per relative-pose pixel. Defaults to the center depth over
    /// the focal length, which makes the relative pose match the image scale.
    #[serde(default)]
    pub mm_per_px: Option<f64>,
}

impl SceneSpec {
    pub fn camera(&self) -> Result<CameraModel> {
        if !(self.focal_px > 0.0 && self.focal_px.is_finite()) {
            return Err(Error::InvalidSpec("focal_px must be positive".into()));
        }
        let k = Mat3::new(
            self.focal_px,
            0.0,
            self.image_width as f64 / 2.0,
            0.0,
            self.focal_px,
            self.image_height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        let (s, c) = self.plane_tilt_rad.sin_cos();
        let r = Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c);
        CameraModel::new(k, r, Vec3::new(0.0, 0.0, self.plane_distance_mm))
            .map_err(|e| Error::InvalidSpec(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoints3 {
    pub head: Vec3,
    pub center: Vec3,
    pub tail: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoints2 {
    pub head: Vec2,
    pub center: Vec2,
    pub tail: Vec2,
}

/// Ground truth written next to a rendered mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub true_length_mm: f64,
    pub params: DeformParams,
    pub mm_per_px: f64,
    /// Camera-frame keypoints (mm).
    pub keypoints_3d: Keypoints3,
    /// Image keypoints (pixels).
    pub keypoints_2d: Keypoints2,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub camera: CameraModel,
    pub truth: SceneTruth,
    pub mask: BinaryMask,
}

/// Places a deformed template in the camera frame: the center keypoint goes to
/// `center_cam`, offsets are scaled by `mm_per_px`.
pub struct BodyPlacement {
    pub center_cam: Vec3,
    pub mm_per_px: f64,
}

impl BodyPlacement {
    fn place(&self, p: &Vec3, center_rel: &Vec3) -> Vec3 {
        self.center_cam + (p - center_rel) * self.mm_per_px
    }
}

/// Perspective silhouette of the template posed by `params` and `placement`.
/// Fails with `InvalidSpec` if any body point is behind the camera or falls
/// outside the image.
pub fn render_perspective(
    template: &Template,
    params: &DeformParams,
    placement: &BodyPlacement,
    cam: &CameraModel,
    width: usize,
    height: usize,
) -> Result<BinaryMask> {
    let d = apply_deformation(template, params)?;
    // Dense enough that neighboring samples land at most about a pixel apart.
    let mag = params.s * placement.mm_per_px * cam.intrinsics()[(0, 0)] / placement.center_cam.z;
    let factor = ((2.5 * mag).ceil() as usize).clamp(2, 16);
    let dense = Deformation::new(params)?.apply_all(&template.supersampled_points(factor))?;

    let mut uv = Vec::with_capacity(dense.len());
    for p in dense.points() {
        let pc = placement.place(p, &d.center);
        if !(pc.z > 0.0) {
            return Err(Error::InvalidSpec("fish extends behind the camera".into()));
        }
        let q = cam.project(&pc)?;
        if q.x < 0.0 || q.y < 0.0 || q.x >= width as f64 || q.y >= height as f64 {
            return Err(Error::InvalidSpec(format!(
                "fish leaves the {width}x{height} frame at pixel ({:.1}, {:.1})",
                q.x, q.y
            )));
        }
        uv.push(q);
    }
    let raster = rasterize_on(&uv, 1, Vec2::zeros())?;
    let closed = raster.mask.close();
    let mut image = BinaryMask::new(width, height)?;
    let (ox, oy) = (raster.origin.x.round() as i64, raster.origin.y.round() as i64);
    for (i, j) in closed.foreground() {
        let (x, y) = (ox + i as i64, oy + j as i64);
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            image.set(x as usize, y as usize, true);
        }
    }
    Ok(image)
}

/// Renders `spec` with `template` and records the ground truth.
pub fn render_synthetic(template: &Template, spec: &SceneSpec) -> Result<SyntheticScene> {
    if spec.image_width == 0 || spec.image_height == 0 {
        return Err(Error::InvalidSpec("image dimensions must be positive".into()));
    }
    let finite = [
        spec.plane_tilt_rad,
        spec.plane_distance_mm,
        spec.center_world_mm[0],
        spec.center_world_mm[1],
        spec.length_mm,
        spec.bend_rad,
        spec.alpha,
        spec.beta,
        spec.gamma,
    ];
    if !finite.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidSpec("scene values must be finite".into()));
    }
    if !(spec.length_mm > 0.0) {
        return Err(Error::InvalidSpec("length_mm must be positive".into()));
    }
    let cam = spec.camera()?;
    let c_world = Vec3::new(spec.center_world_mm[0], spec.center_world_mm[1], 0.0);
    let center_cam = cam.world_to_camera(&c_world);
    if !(center_cam.z > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "fish center is behind the camera (depth {:.1} mm)",
            center_cam.z
        )));
    }
    let mm_per_px = spec.mm_per_px.unwrap_or(center_cam.z / spec.focal_px);
    if !(mm_per_px > 0.0 && mm_per_px.is_finite()) {
        return Err(Error::InvalidSpec("mm_per_px must be positive".into()));
    }

    let arc0 = template.head_tail_arc();
    let s = spec.length_mm / (arc0 * mm_per_px);
    let params = DeformParams {
        s,
        kappa: spec.bend_rad / (s * arc0),
        tx: 0.0,
        ty: 0.0,
        alpha: spec.alpha,
        beta: spec.beta,
        gamma: spec.gamma,
    };
    params.validate().map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let placement = BodyPlacement {
        center_cam,
        mm_per_px,
    };
    let mask = render_perspective(template, &params, &placement, &cam, spec.image_width, spec.image_height)
        .map_err(|e| match e {
            Error::InvalidSpec(_) => e,
            other => Error::InvalidSpec(other.to_string()),
        })?;
    if mask.is_empty() {
        return Err(Error::InvalidSpec("rendered mask is empty".into()));
    }

    let d = apply_deformation(template, &params)?;
    let kp3 = Keypoints3 {
        head: placement.place(&d.head, &d.center),
        center: center_cam,
        tail: placement.place(&d.tail, &d.center),
    };
    let kp2 = Keypoints2 {
        head: cam.project(&kp3.head)?,
        center: cam.project(&kp3.center)?,
        tail: cam.project(&kp3.tail)?,
    };
    Ok(SyntheticScene {
        spec: spec.clone(),
        camera: cam,
        truth: SceneTruth {
            true_length_mm: spec.length_mm,
            params,
            mm_per_px,
            keypoints_3d: kp3,
            keypoints_2d: kp2,
        },
        mask,
    })
}
