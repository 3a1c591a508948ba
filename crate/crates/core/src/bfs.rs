//! Brute-force baseline: a database of orthographic silhouettes over a
//! deformation grid, queried by maximum IoU.
//!
//! Matching is done up to a similarity transform. Every database entry is
//! rendered with a common foreground area and its principal axis along +x,
//! then mapped onto the query's pixel grid by matching centroid, area and
//! principal axis (both head directions). Scale, in-plane rotation and
//! translation are read off that alignment instead of being grid dimensions,
//! so the grid spans bend, alpha and beta.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use nalgebra::Rotation2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contour::{mask_center, rasterize};
use crate::error::{Error, Result};
use crate::geometry::{euler_angles, rot_z, rotation_matrix};
use crate::io::{read_json, read_mask, write_json, write_mask};
use crate::mask::BinaryMask;
use crate::nn::Vec2;
use crate::optimizer::{centered_centroid, place_centroid, Correspondences, RelativePose, TargetContour};
use crate::template::{DeformParams, Deformation, Template};

/// `steps` evenly spaced values from `min` to `max` inclusive, or just `min`
/// for a single step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

impl Axis {
    pub const fn fixed(v: f64) -> Self {
        Self { min: v, max: v, steps: 1 }
    }

    pub fn values(&self) -> Vec<f64> {
        match self.steps {
            0 => vec![],
            1 => vec![self.min],
            n => (0..n)
                .map(|i| self.min + (self.max - self.min) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }

    /// Spacing between neighboring values.
    pub fn step(&self) -> f64 {
        match self.steps {
            0 | 1 => 0.0,
            n => (self.max - self.min) / (n - 1) as f64,
        }
    }
}

/// Grid over the total bend angle (radians across the head-tail arc), alpha
/// and beta. Every entry is rendered with foreground area `canonical_area`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub bend: Axis,
    pub alpha: Axis,
    pub beta: Axis,
    pub canonical_area: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            bend: Axis { min: -FRAC_PI_2, max: FRAC_PI_2, steps: 13 },
            alpha: Axis { min: -0.4, max: 0.4, steps: 9 },
            beta: Axis { min: -0.4, max: 0.4, steps: 9 },
            canonical_area: 8000.0,
        }
    }
}

impl GridSpec {
    pub fn size(&self) -> usize {
        self.bend.steps * self.alpha.steps * self.beta.steps
    }

    fn validate(&self) -> Result<()> {
        if self.size() == 0 {
            return Err(Error::InvalidArgument("grid has no points".into()));
        }
        if !(self.canonical_area.is_finite() && self.canonical_area >= 100.0) {
            return Err(Error::InvalidArgument("canonical_area must be at least 100 pixels".into()));
        }
        let axes = [self.bend, self.alpha, self.beta];
        if !axes.iter().all(|a| a.min.is_finite() && a.max.is_finite()) {
            return Err(Error::InvalidArgument("grid ranges must be finite".into()));
        }
        Ok(())
    }

    /// Grid points in enumeration order: bend outermost, beta innermost.
    pub fn points(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.size());
        for b in self.bend.values() {
            for a in self.alpha.values() {
                for be in self.beta.values() {
                    out.push([b, a, be]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    /// Grid point `[bend, alpha, beta]`; alpha and beta are taken at zero
    /// gamma, before the in-plane turn that aligns the thumbnail.
    pub point: [f64; 3],
    /// Parameters the thumbnail was rendered with (translation zero).
    pub params: DeformParams,
    pub area: usize,
    /// Foreground centroid in thumbnail pixel coordinates.
    pub centroid: Vec2,
    /// Measured principal-axis angle of the thumbnail, close to zero.
    pub axis: f64,
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub meta: EntryMeta,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct ProjectionDatabase {
    pub grid: GridSpec,
    pub entries: Vec<Entry>,
    /// Grid points dropped because they over-bend.
    pub skipped: usize,
}

/// On-disk index stored next to the thumbnail directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    grid: GridSpec,
    skipped: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    #[serde(flatten)]
    meta: EntryMeta,
}

/// `|a & b| / |a | b|` for equally sized masks.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::InvalidInput("IoU needs equally sized masks".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Err(Error::InvalidInput("IoU of two empty masks".into()));
    }
    Ok(inter as f64 / union as f64)
}

fn centroid_px(mask: &BinaryMask) -> Option<Vec2> {
    mask.centroid().map(|(x, y)| Vec2::new(x + 0.5, y + 0.5))
}

/// Orthographic thumbnail of the template under `params` (translation
/// ignored), rendered from source pixels supersampled densely enough that
/// the silhouette has no sampling holes.
pub fn render_thumbnail(template: &Template, params: &DeformParams) -> Result<BinaryMask> {
    let p = DeformParams { tx: 0.0, ty: 0.0, ..*params };
    let factor = ((2.0 * p.s).ceil() as usize).max(1);
    let dense = Deformation::new(&p)?.apply_all(&template.supersampled_points(factor))?;
    let xy: Vec<Vec2> = dense.points().iter().map(|q| Vec2::new(q.x, q.y)).collect();
    Ok(rasterize(&xy, 1)?.mask.close())
}

/// Parameters whose rotation is `base` followed by an in-plane turn `psi`.
fn turned(base: &DeformParams, psi: f64) -> Result<DeformParams> {
    let m = rotation_matrix(base.alpha, base.beta, base.gamma)? * rot_z(psi);
    let (alpha, beta, gamma) = euler_angles(&m);
    Ok(DeformParams {
        alpha,
        beta,
        gamma,
        ..*base
    })
}

fn render_entry(template: &Template, point: [f64; 3], area: f64) -> Result<Entry> {
    let [bend, alpha, beta] = point;
    let arc = template.head_tail_arc();
    let base_at = |s: f64| DeformParams {
        s,
        kappa: bend / (s * arc),
        tx: 0.0,
        ty: 0.0,
        alpha,
        beta,
        gamma: 0.0,
    };
    // An in-plane turn rotates the silhouette rigidly and area grows with
    // s^2, so one unit render fixes both.
    let unit = render_thumbnail(template, &base_at(1.0))?;
    let empty = || Error::InvalidInput("empty thumbnail".into());
    let base = base_at((area / unit.count() as f64).sqrt());
    // Rasterization nudges the measured axis; a few corrective turns bring
    // it close to zero and the closest render is kept.
    let mut psi = -unit.principal_axis_angle().ok_or_else(empty)?;
    let mut best: Option<(f64, DeformParams, BinaryMask)> = None;
    for _ in 0..4 {
        let params = turned(&base, psi)?;
        let mask = render_thumbnail(template, &params)?;
        let a = mask.principal_axis_angle().ok_or_else(empty)?;
        if best.as_ref().is_none_or(|b| a.abs() < b.0.abs()) {
            best = Some((a, params, mask));
        }
        if a.abs() < 1e-3 {
            break;
        }
        psi -= a;
    }
    let (axis, params, mask) = best.expect("at least one render");
    let centroid = centroid_px(&mask).ok_or_else(empty)?;
    Ok(Entry {
        meta: EntryMeta {
            point,
            params,
            area: mask.count(),
            centroid,
            axis,
        },
        mask,
    })
}

/// Renders every grid point. Over-bent points are skipped and counted.
pub fn build_projection_database(template: &Template, grid: &GridSpec) -> Result<ProjectionDatabase> {
    grid.validate()?;
    let rendered: Vec<Result<Entry>> = grid
        .points()
        .into_par_iter()
        .map(|pt| render_entry(template, pt, grid.canonical_area))
        .collect();
    let mut entries = Vec::with_capacity(rendered.len());
    let mut skipped = 0;
    for r in rendered {
        match r {
            Ok(e) => entries.push(e),
            Err(Error::OverBend { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if entries.is_empty() {
        return Err(Error::InvalidArgument("every grid point over-bends".into()));
    }
    Ok(ProjectionDatabase {
        grid: grid.clone(),
        entries,
        skipped,
    })
}

impl ProjectionDatabase {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let masks = dir.join("masks");
        let mut index = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let name = format!("entry_{i:05}.pgm");
            write_mask(&masks.join(&name), &e.mask)?;
            index.push(IndexEntry {
                file: format!("masks/{name}"),
                meta: e.meta.clone(),
            });
        }
        write_json(
            &dir.join("index.json"),
            &Index {
                grid: self.grid.clone(),
                skipped: self.skipped,
                entries: index,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: Index = read_json(&dir.join("index.json"))?;
        let entries = index
            .entries
            .into_par_iter()
            .map(|ie| {
                let mask = read_mask(&dir.join(&ie.file))?;
                if mask.is_empty() {
                    return Err(Error::file(dir.join(&ie.file), "empty thumbnail"));
                }
                Ok(Entry { meta: ie.meta, mask })
            })
            .collect::<Result<Vec<_>>>()?;
        if entries.is_empty() {
            return Err(Error::file(dir, "database has no entries"));
        }
        Ok(Self {
            grid: index.grid,
            entries,
            skipped: index.skipped,
        })
    }
}

/// Query silhouette with the statistics used to align entries onto it.
pub struct QueryFrame<'a> {
    pub mask: &'a BinaryMask,
    pub centroid: Vec2,
    /// Principal-axis angle; the head may point either way along it.
    pub axis: f64,
    pub area: usize,
    bbox: [i64; 4],
}

impl<'a> QueryFrame<'a> {
    pub fn new(mask: &'a BinaryMask) -> Result<Self> {
        let empty = || Error::InvalidInput("query mask is empty".into());
        let centroid = centroid_px(mask).ok_or_else(empty)?;
        let axis = mask.principal_axis_angle().ok_or_else(empty)?;
        let mut bbox = [i64::MAX, i64::MAX, i64::MIN, i64::MIN];
        for (x, y) in mask.foreground() {
            let (x, y) = (x as i64, y as i64);
            bbox = [bbox[0].min(x), bbox[1].min(y), bbox[2].max(x + 1), bbox[3].max(y + 1)];
        }
        Ok(Self {
            mask,
            centroid,
            axis,
            area: mask.count(),
            bbox,
        })
    }

    /// In-plane rotation applied to entries for head direction `flip`.
    pub fn rotation(&self, flip: usize) -> f64 {
        self.axis + PI * flip as f64
    }
}

/// IoU between the query and `entry` mapped onto the query's pixel grid by
/// the similarity that matches centroids, areas and principal axes (head
/// direction `flip`). Each query pixel takes the majority of a subpixel
/// sampling of the entry, so no resampling of the query is involved.
pub fn projected_iou(entry: &Entry, q: &QueryFrame, flip: usize) -> f64 {
    let e = &entry.meta;
    let r = (e.area as f64 / q.area as f64).sqrt();
    let turn = q.rotation(flip) - e.axis;
    let to_query = Rotation2::new(turn);
    let to_entry = Rotation2::new(-turn);

    let [mut x0, mut y0, mut x1, mut y1] = q.bbox;
    let (w, h) = (entry.mask.width() as f64, entry.mask.height() as f64);
    for c in [Vec2::new(0.0, 0.0), Vec2::new(w, 0.0), Vec2::new(0.0, h), Vec2::new(w, h)] {
        let p = q.centroid + to_query * (c - e.centroid) / r;
        x0 = x0.min(p.x.floor() as i64);
        y0 = y0.min(p.y.floor() as i64);
        x1 = x1.max(p.x.ceil() as i64);
        y1 = y1.max(p.y.ceil() as i64);
    }

    let k = (r.ceil() as usize).clamp(1, 4);
    let offsets: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect();
    let (mut inter, mut union) = (0usize, 0usize);
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for &oy in &offsets {
                for &ox in &offsets {
                    let p = e.centroid + to_entry * (Vec2::new(x as f64 + ox, y as f64 + oy) - q.centroid) * r;
                    hits += entry.mask.get_signed(p.x.floor() as i64, p.y.floor() as i64) as usize;
                }
            }
            let a = 2 * hits > k * k;
            let b = q.mask.get_signed(x, y);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone)]
pub struct BfsMatch {
    pub index: usize,
    /// Which head direction of the query matched (0 or 1).
    pub flip: usize,
    pub iou: f64,
    pub pose: RelativePose,
}

/// Best `(entry, flip, iou)` over all entries and both query directions.
/// Ties go to the smaller |kappa|, then the smaller index, then flip 0.
pub fn best_entry(db: &ProjectionDatabase, query: &QueryFrame) -> Result<(usize, usize, f64)> {
    if db.entries.is_empty() {
        return Err(Error::InvalidInput("projection database is empty".into()));
    }
    let scores: Vec<Vec<f64>> = db
        .entries
        .par_iter()
        .map(|e| (0..2).map(|f| projected_iou(e, query, f)).collect())
        .collect();
    let mut best = (0, 0, scores[0][0]);
    for (i, row) in scores.iter().enumerate() {
        for (f, &sc) in row.iter().enumerate() {
            let ki = db.entries[i].meta.params.kappa.abs();
            let kb = db.entries[best.0].meta.params.kappa.abs();
            if sc > best.2 || (sc == best.2 && ki < kb) {
                best = (i, f, sc);
            }
        }
    }
    Ok(best)
}

/// Looks up the best-matching entry and materializes its parameters at the
/// query's scale, orientation and position.
pub fn bfs_estimate(mask: &BinaryMask, db: &ProjectionDatabase, template: &Template) -> Result<BfsMatch> {
    let query = QueryFrame::new(mask)?;
    let (index, flip, score) = best_entry(db, &query)?;
    let e = &db.entries[index].meta;

    let s = e.params.s * (query.area as f64 / e.area as f64).sqrt();
    let resized = DeformParams {
        s,
        // Keep the bend angle: kappa * s is scale-free.
        kappa: e.params.kappa * e.params.s / s,
        ..e.params
    };
    let scaled = turned(&resized, query.rotation(flip) - e.axis)?;
    let params = place_centroid(template, &scaled, centered_centroid(mask)?)?;
    let target = TargetContour::new(mask)?;
    let loss = Correspondences::freeze(template, &target, &params, 2)?.loss;
    let pose = RelativePose::from_params(template, &params, mask_center(mask), loss, vec![loss])?;
    Ok(BfsMatch {
        index,
        flip,
        iou: score,
        pose,
    })
}
