//! Contour point sets for chamfer fitting.
//!
//! Both contours live in a centered frame: the target mask center maps to the
//! origin, and a pixel is identified by its lower-left lattice coordinate. The
//! template contour is rasterized on the same lattice (see [`lattice_phase`]),
//! so both sides share one pixel convention.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nn::Vec2;
use crate::template::PointSet3;

/// Unordered contour points, optionally linked to the 3D points they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourSet {
    pub points: Vec<Vec2>,
    /// For template contours: index into the deformed point set nearest to
    /// each contour point.
    pub source_idx: Option<Vec<usize>>,
}

impl ContourSet {
    pub fn new(points: Vec<Vec2>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("contour is empty".into()));
        }
        Ok(Self {
            points,
            source_idx: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Offset subtracted from whole-image pixel coordinates to reach the centered frame.
pub fn mask_center(mask: &BinaryMask) -> Vec2 {
    Vec2::new(mask.width() as f64 / 2.0, mask.height() as f64 / 2.0)
}

/// Fractional lattice offset of the centered frame of `mask`.
pub fn lattice_phase(mask: &BinaryMask) -> Vec2 {
    let c = mask_center(mask);
    Vec2::new((-c.x).rem_euclid(1.0), (-c.y).rem_euclid(1.0))
}

/// Boundary pixels of the target mask in centered coordinates.
pub fn extract_target_contour(mask: &BinaryMask) -> Result<ContourSet> {
    let c = mask_center(mask);
    let points: Vec<Vec2> = mask
        .boundary_pixels()
        .into_iter()
        .map(|(x, y)| Vec2::new(x as f64 - c.x, y as f64 - c.y))
        .collect();
    if points.is_empty() {
        return Err(Error::InvalidInput("target mask has no foreground".into()));
    }
    ContourSet::new(points)
}

/// A mask placed in the continuous plane: pixel `(i, j)` covers
/// `[origin.x + i, origin.x + i + 1) x [origin.y + j, origin.y + j + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub mask: BinaryMask,
    pub origin: Vec2,
}

impl Raster {
    /// Continuous coordinate of pixel `(i, j)`'s lattice corner.
    pub fn pixel_coord(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(self.origin.x + i as f64, self.origin.y + j as f64)
    }

    #[inline]
    pub fn pixel_of(&self, p: &Vec2) -> (i64, i64) {
        (
            (p.x - self.origin.x).floor() as i64,
            (p.y - self.origin.y).floor() as i64,
        )
    }
}

/// Rasterizes points onto the integer lattice, padded by `pad` pixels.
pub fn rasterize(points: &[Vec2], pad: usize) -> Result<Raster> {
    rasterize_on(points, pad, Vec2::zeros())
}

/// Rasterizes onto the lattice `k + phase`.
pub fn rasterize_on(points: &[Vec2], pad: usize, phase: Vec2) -> Result<Raster> {
    let (raster, _) = rasterize_tracking(points, pad, phase)?;
    Ok(raster)
}

/// Rasterizes and records, per pixel, the point closest to its lattice corner.
fn rasterize_tracking(points: &[Vec2], pad: usize, phase: Vec2) -> Result<(Raster, Vec<u32>)> {
    if points.is_empty() {
        return Err(Error::InvalidInput("cannot rasterize an empty point list".into()));
    }
    if !points.iter().all(|p| p.x.is_finite() && p.y.is_finite()) {
        return Err(Error::InvalidInput("cannot rasterize non-finite points".into()));
    }
    let mut min = Vec2::new(f64::INFINITY, f64::INFINITY);
    let mut max = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        min = min.inf(p);
        max = max.sup(p);
    }
    let pad_f = pad as f64;
    let origin = Vec2::new(
        phase.x + (min.x - phase.x).floor() - pad_f,
        phase.y + (min.y - phase.y).floor() - pad_f,
    );
    let width = (max.x - origin.x).floor() as usize + 1 + pad;
    let height = (max.y - origin.y).floor() as usize + 1 + pad;

    let mut mask = BinaryMask::new(width, height)?;
    let mut owner = vec![u32::MAX; width * height];
    let mut owner_d2 = vec![f64::INFINITY; width * height];
    for (k, p) in points.iter().enumerate() {
        let i = ((p.x - origin.x).floor() as usize).min(width - 1);
        let j = ((p.y - origin.y).floor() as usize).min(height - 1);
        mask.set(i, j, true);
        let corner = Vec2::new(origin.x + i as f64, origin.y + j as f64);
        let d2 = (p - corner).norm_squared();
        let cell = j * width + i;
        if d2 < owner_d2[cell] {
            owner_d2[cell] = d2;
            owner[cell] = k as u32;
        }
    }
    Ok((Raster { mask, origin }, owner))
}

/// Orthographic-projection contour of a deformed point set on the integer lattice.
pub fn project_template_contour(s4: &PointSet3, raster_pad: usize) -> Result<ContourSet> {
    project_template_contour_on(s4, raster_pad, Vec2::zeros())
}

/// Same as [`project_template_contour`] on the lattice `k + phase`, which lets
/// the template contour share the target's pixel grid.
pub fn project_template_contour_on(
    s4: &PointSet3,
    raster_pad: usize,
    phase: Vec2,
) -> Result<ContourSet> {
    let xy: Vec<Vec2> = s4.points().iter().map(|p| Vec2::new(p.x, p.y)).collect();
    // Closing needs one clear pixel of margin on every side.
    let (raster, owner) = rasterize_tracking(&xy, raster_pad.max(1), phase)?;
    let closed = raster.mask.close();
    let w = closed.width();

    let mut points = Vec::new();
    let mut source = Vec::new();
    for (i, j) in closed.boundary_pixels() {
        let corner = raster.pixel_coord(i, j);
        let own = owner[j * w + i];
        let idx = if own != u32::MAX {
            own as usize
        } else {
            nearest_owner(&owner, w, closed.height(), i, j, &xy, &corner)
        };
        points.push(corner);
        source.push(idx);
    }
    Ok(ContourSet {
        points,
        source_idx: Some(source),
    })
}

/// Searches growing windows for the owned point nearest to `corner`.
fn nearest_owner(
    owner: &[u32],
    w: usize,
    h: usize,
    i: usize,
    j: usize,
    xy: &[Vec2],
    corner: &Vec2,
) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for r in 1..(w.max(h) as i64) {
        for dj in -r..=r {
            for di in -r..=r {
                if di.abs() != r && dj.abs() != r {
                    continue;
                }
                let (x, y) = (i as i64 + di, j as i64 + dj);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let own = owner[y as usize * w + x as usize];
                if own == u32::MAX {
                    continue;
                }
                let d2 = (xy[own as usize] - corner).norm_squared();
                if d2 < best.1 {
                    best = (own as usize, d2);
                }
            }
        }
        // Anything in a farther ring is at least (r - 1) pixels away.
        if best.0 != usize::MAX && best.1 <= ((r - 1) as f64).powi(2) {
            break;
        }
        if best.0 != usize::MAX && r >= 3 {
            break;
        }
    }
    best.0
}

/// Orthographic silhouette of `s4` in a `width x height` image, rasterized on
/// the same lattice and with the same closing as the template contour.
/// Points outside the image are dropped.
pub fn render_orthographic(s4: &PointSet3, width: usize, height: usize) -> Result<BinaryMask> {
    let mut image = BinaryMask::new(width, height)?;
    let xy: Vec<Vec2> = s4.points().iter().map(|p| Vec2::new(p.x, p.y)).collect();
    let raster = rasterize_on(&xy, 1, lattice_phase(&image))?;
    let closed = raster.mask.close();
    let c = mask_center(&image);
    let (ox, oy) = ((raster.origin.x + c.x).round() as i64, (raster.origin.y + c.y).round() as i64);
    for (i, j) in closed.foreground() {
        let (x, y) = (ox + i as i64, oy + j as i64);
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            image.set(x as usize, y as usize, true);
        }
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::{apply_deformation, default_template, DeformParams, Unit};

    #[test]
    fn full_three_by_three_has_eight_contour_points() {
        let m = BinaryMask::from_fn(3, 3, |_, _| true).unwrap();
        assert_eq!(extract_target_contour(&m).unwrap().len(), 8);
    }

    #[test]
    fn single_pixel_contour() {
        let m = BinaryMask::from_fn(5, 5, |x, y| x == 0 && y == 0).unwrap();
        let c = extract_target_contour(&m).unwrap();
        assert_eq!(c.points, vec![Vec2::new(-2.5, -2.5)]);
    }

    #[test]
    fn empty_mask_has_no_contour() {
        let m = BinaryMask::new(5, 5).unwrap();
        assert!(matches!(extract_target_contour(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn disk_contour_count_matches_enumeration() {
        let r = 20.0;
        let m = BinaryMask::from_fn(64, 64, |x, y| {
            let (dx, dy) = (x as f64 + 0.5 - 32.0, y as f64 + 0.5 - 32.0);
            dx * dx + dy * dy <= r * r
        })
        .unwrap();
        // Independent count: inside pixels with an outside 4-neighbor.
        let inside = |x: i64, y: i64| {
            let (dx, dy) = (x as f64 + 0.5 - 32.0, y as f64 + 0.5 - 32.0);
            dx * dx + dy * dy <= r * r
        };
        let mut expected = 0;
        for y in 0..64_i64 {
            for x in 0..64_i64 {
                if inside(x, y)
                    && [(1, 0), (-1, 0), (0, 1), (0, -1)]
                        .iter()
                        .any(|(a, b)| !inside(x + a, y + b))
                {
                    expected += 1;
                }
            }
        }
        let n = extract_target_contour(&m).unwrap().len();
        assert_eq!(n, expected);
        assert_eq!(n, 112);
        // An 8-connected digital circle has about 4 * sqrt(2) * r pixels.
        assert!((n as f64 - 4.0 * 2f64.sqrt() * r).abs() <= 8.0);
    }

    #[test]
    fn rasterize_examples() {
        let one = rasterize(&[Vec2::new(3.2, -1.7)], 0).unwrap();
        assert_eq!(one.mask.count(), 1);
        assert_eq!((one.mask.width(), one.mask.height()), (1, 1));

        let two = rasterize(&[Vec2::new(0.0, 0.0), Vec2::new(10.0, 0.0)], 2).unwrap();
        assert_eq!(two.mask.count(), 2);
        assert!(two.mask.width() >= 10 + 2 * 2);
    }

    #[test]
    fn rasterize_respects_phase() {
        let r = rasterize_on(&[Vec2::new(0.2, 0.2)], 0, Vec2::new(0.5, 0.5)).unwrap();
        assert_eq!(r.origin, Vec2::new(-0.5, -0.5));
    }

    #[test]
    fn flat_template_contour_matches_its_mask_boundary() {
        let t = default_template();
        let c = project_template_contour(t.points0(), 2).unwrap();
        let src = t.source_mask();
        let target: Vec<Vec2> = src
            .boundary_pixels()
            .into_iter()
            .map(|(x, y)| {
                let p = t.mask_to_template(x as f64 + 0.5, y as f64 + 0.5);
                Vec2::new(p.x, p.y)
            })
            .collect();
        let centers: Vec<Vec2> = c.points.iter().map(|p| p + Vec2::new(0.5, 0.5)).collect();
        let hausdorff = |a: &[Vec2], b: &[Vec2]| {
            a.iter()
                .map(|p| b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max)
        };
        let h = hausdorff(&centers, &target).max(hausdorff(&target, &centers));
        assert!(h <= 1.0, "hausdorff {h}");
    }

    #[test]
    fn edge_on_sheet_is_a_thin_strip() {
        let t = default_template();
        let p = DeformParams {
            beta: std::f64::consts::FRAC_PI_2,
            ..DeformParams::identity()
        };
        let d = apply_deformation(&t, &p).unwrap();
        let c = project_template_contour(&d.s4, 2).unwrap();
        assert!(!c.points.is_empty());
        let (lo, hi) = c
            .points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.x), h.max(p.x)));
        assert!(hi - lo + 1.0 <= 3.0, "strip width {}", hi - lo + 1.0);
    }

    #[test]
    fn duplicates_do_not_change_contour() {
        let t = default_template();
        let mut pts = t.points0().points().to_vec();
        pts.extend_from_slice(&t.points0().points()[..500]);
        let dup = PointSet3::new(pts, Unit::Pixels).unwrap();
        let a = project_template_contour(t.points0(), 2).unwrap();
        let b = project_template_contour(&dup, 2).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn source_indices_stay_close() {
        let t = default_template();
        let p = DeformParams {
            s: 0.7,
            kappa: 0.005,
            alpha: 0.3,
            beta: -0.2,
            gamma: 0.9,
            ..DeformParams::identity()
        };
        let d = apply_deformation(&t, &p).unwrap();
        for s4 in [t.points0(), &d.s4] {
            let c = project_template_contour(s4, 2).unwrap();
            for (q, &k) in c.points.iter().zip(c.source_idx.as_ref().unwrap()) {
                let p = s4.points()[k];
                assert!((Vec2::new(p.x, p.y) - q).norm() <= 1.5);
            }
        }
    }
}
