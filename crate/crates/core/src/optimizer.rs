//! Relative pose estimation by chamfer fitting of the deformable template.
//!
//! Each outer iteration renders the deformed template, extracts its projected
//! contour and freezes nearest-neighbor correspondences against the target
//! contour. The inner loop then updates all seven parameters against the
//! frozen loss, whose derivatives come from central finite differences of the
//! deformation chain. Outer steps that fail to lower the true chamfer loss are
//! halved, so the accepted loss trace never increases.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{SMatrix, SVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contour::{
    extract_target_contour, lattice_phase, mask_center, project_template_contour_on, ContourSet,
};
use crate::error::{Error, Result};
use crate::geometry::{rotation_matrix, Vec3};
use crate::mask::BinaryMask;
use crate::nn::{nearest_brute, KdTree, Vec2};
use crate::template::{apply_deformation, DeformParams, Deformation, Template};

type Mat7 = SMatrix<f64, 7, 7>;
type Vec7 = SVector<f64, 7>;

/// Symmetric chamfer distance: squared nearest distances from `a` into `b`
/// plus from `b` into `a`.
pub fn chamfer_distance(a: &ContourSet, b: &ContourSet) -> Result<f64> {
    check_nonempty(a, b)?;
    let ga = KdTree::new(&a.points);
    let gb = KdTree::new(&b.points);
    Ok(sweep(&a.points, &gb) + sweep(&b.points, &ga))
}

/// Sum of squared nearest distances from `queries` into `index`, seeding each
/// search with the previous answer.
fn sweep(queries: &[Vec2], index: &KdTree) -> f64 {
    let mut hint = 0;
    let mut sum = 0.0;
    for q in queries {
        let (i, d2) = index.nearest_from(q, hint);
        hint = i;
        sum += d2;
    }
    sum
}

/// O(nm) chamfer distance, kept as the reference for the kd-tree accelerated path.
pub fn chamfer_distance_brute(a: &ContourSet, b: &ContourSet) -> Result<f64> {
    check_nonempty(a, b)?;
    let ab: f64 = a.points.iter().map(|p| nearest_brute(&b.points, p).1).sum();
    let ba: f64 = b.points.iter().map(|q| nearest_brute(&a.points, q).1).sum();
    Ok(ab + ba)
}

fn check_nonempty(a: &ContourSet, b: &ContourSet) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("chamfer distance needs two nonempty sets".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Levenberg-Marquardt damped Gauss-Newton steps on the frozen residuals.
    GaussNewton,
    /// Gradient descent with per-group learning rates, each parameter
    /// normalized by its Gauss-Newton curvature.
    Gradient,
}

/// Values for the three parameter groups: shape (s, kappa), translation and angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub shape: f64,
    pub translation: f64,
    pub angle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdSteps {
    pub s: f64,
    pub kappa: f64,
    pub translation: f64,
    pub angle: f64,
}

impl FdSteps {
    fn as_array(&self) -> [f64; 7] {
        [
            self.s,
            self.kappa,
            self.translation,
            self.translation,
            self.angle,
            self.angle,
            self.angle,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_outer_iters: usize,
    pub inner_steps: usize,
    pub step_rule: StepRule,
    pub learning_rates: LearningRates,
    pub fd_steps: FdSteps,
    /// Stop once an accepted outer step lowers the loss by less than this
    /// many pixel^2 per contour point.
    pub convergence_tol: f64,
    pub multi_start: usize,
    pub max_halvings: usize,
    pub raster_pad: usize,
    /// Initial total bend angle (radians) across the head-tail arc. The
    /// silhouette is even in kappa at zero, so a flat start never bends.
    pub init_bend: f64,
    /// Initial alpha and beta (radians), nonzero for the same reason.
    pub init_tilt: f64,
    /// Hold kappa at zero (bending ablation).
    pub freeze_kappa: bool,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 60,
            inner_steps: 5,
            step_rule: StepRule::GaussNewton,
            learning_rates: LearningRates {
                shape: 0.5,
                translation: 0.5,
                angle: 0.5,
            },
            fd_steps: FdSteps {
                s: 1e-3,
                kappa: 1e-6,
                translation: 0.5,
                angle: 1e-3,
            },
            convergence_tol: 1e-3,
            multi_start: 6,
            max_halvings: 5,
            raster_pad: 2,
            init_bend: 0.3,
            init_tilt: 0.1,
            freeze_kappa: false,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 || self.inner_steps == 0 || self.multi_start == 0 {
            return Err(Error::InvalidArgument(
                "optimizer iteration counts must be at least 1".into(),
            ));
        }
        let lr = &self.learning_rates;
        let fd = &self.fd_steps;
        let positive = [
            lr.shape,
            lr.translation,
            lr.angle,
            fd.s,
            fd.kappa,
            fd.translation,
            fd.angle,
            self.convergence_tol,
        ];
        if !positive.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rates, finite-difference steps and tolerance must be positive".into(),
            ));
        }
        if !(self.init_bend.is_finite() && self.init_tilt.is_finite()) {
            return Err(Error::InvalidArgument("initial bend and tilt must be finite".into()));
        }
        Ok(())
    }

    fn learning_rate(&self, param: usize) -> f64 {
        match param {
            0 | 1 => self.learning_rates.shape,
            2 | 3 => self.learning_rates.translation,
            _ => self.learning_rates.angle,
        }
    }

    fn is_free(&self, param: usize) -> bool {
        !(self.freeze_kappa && param == 1)
    }
}

/// Fitted relative pose (pixel units, camera-aligned axes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub h: Vec3,
    pub c: Vec3,
    pub t: Vec3,
    pub params: DeformParams,
    pub final_loss: f64,
    /// Head, center and tail `(U, V)` in whole-image pixel coordinates.
    pub h2d: Vec2,
    pub c2d: Vec2,
    pub t2d: Vec2,
    /// Accepted chamfer losses of the winning start, first entry is the
    /// initialization.
    pub loss_trace: Vec<f64>,
}

impl RelativePose {
    /// Materializes a pose from parameters for an image whose centered frame
    /// is offset by `image_center`.
    pub fn from_params(
        template: &Template,
        params: &DeformParams,
        image_center: Vec2,
        final_loss: f64,
        loss_trace: Vec<f64>,
    ) -> Result<Self> {
        let d = apply_deformation(template, params)?;
        let to_image = |p: &Vec3| Vec2::new(p.x, p.y) + image_center;
        Ok(Self {
            h2d: to_image(&d.head),
            c2d: to_image(&d.center),
            t2d: to_image(&d.tail),
            h: d.head,
            c: d.center,
            t: d.tail,
            params: *params,
            final_loss,
            loss_trace,
        })
    }
}

/// Target contour and its lattice, shared by all evaluations for one mask.
pub struct TargetContour {
    contour: ContourSet,
    phase: Vec2,
    center: Vec2,
}

impl TargetContour {
    pub fn new(mask: &BinaryMask) -> Result<Self> {
        Ok(Self {
            contour: extract_target_contour(mask)?,
            phase: lattice_phase(mask),
            center: mask_center(mask),
        })
    }

    pub fn contour(&self) -> &ContourSet {
        &self.contour
    }
}

/// One frozen correspondence: a deformed template point, the lattice offset it
/// carried when frozen, and its matched target point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    /// Index into `Correspondences::sources`.
    pub slot: usize,
    pub anchor: Vec2,
    pub target: Vec2,
}

/// Nearest-neighbor pairs of both chamfer terms, frozen at one parameter state.
#[derive(Debug, Clone)]
pub struct Correspondences {
    /// Undeformed template points referenced by the pairs.
    pub sources: Vec<Vec3>,
    pub pairs: Vec<Pair>,
    /// Chamfer loss at the freezing state.
    pub loss: f64,
    pub template_points: usize,
    pub target_points: usize,
}

impl Correspondences {
    /// Renders the template at `params` and pairs its contour with the target.
    pub fn freeze(
        template: &Template,
        target: &TargetContour,
        params: &DeformParams,
        raster_pad: usize,
    ) -> Result<Self> {
        let d = apply_deformation(template, params)?;
        let tpl = project_template_contour_on(&d.s4, raster_pad, target.phase)?;
        let src_idx = tpl.source_idx.as_ref().expect("template contours carry sources");
        let tgt = &target.contour.points;

        let g_tgt = KdTree::new(tgt);
        let g_tpl = KdTree::new(&tpl.points);

        let mut slot_of = std::collections::HashMap::new();
        let mut sources = Vec::new();
        let mut slot = |k: usize| {
            *slot_of.entry(k).or_insert_with(|| {
                sources.push(template.points0().points()[k]);
                sources.len() - 1
            })
        };

        let s4 = d.s4.points();
        let anchor_of = |i: usize| {
            let k = src_idx[i];
            tpl.points[i] - Vec2::new(s4[k].x, s4[k].y)
        };

        let mut pairs = Vec::with_capacity(tpl.len() + tgt.len());
        let mut loss = 0.0;
        for (i, p) in tpl.points.iter().enumerate() {
            let (j, d2) = g_tgt.nearest(p);
            loss += d2;
            pairs.push(Pair {
                slot: slot(src_idx[i]),
                anchor: anchor_of(i),
                target: tgt[j],
            });
        }
        for q in tgt {
            let (i, d2) = g_tpl.nearest(q);
            loss += d2;
            pairs.push(Pair {
                slot: slot(src_idx[i]),
                anchor: anchor_of(i),
                target: *q,
            });
        }
        Ok(Self {
            sources,
            pairs,
            loss,
            template_points: tpl.len(),
            target_points: tgt.len(),
        })
    }

    pub fn point_count(&self) -> usize {
        self.template_points + self.target_points
    }

    /// Residual vectors `deformed + anchor - target` at `params`.
    pub fn residuals(&self, params: &DeformParams) -> Result<Vec<Vec2>> {
        let def = Deformation::new(params)?;
        let moved = self
            .sources
            .iter()
            .map(|p| def.apply(p).map(|q| Vec2::new(q.x, q.y)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .pairs
            .iter()
            .map(|pr| moved[pr.slot] + pr.anchor - pr.target)
            .collect())
    }

    /// Frozen-correspondence chamfer loss.
    pub fn loss_at(&self, params: &DeformParams) -> Result<f64> {
        Ok(self.residuals(params)?.iter().map(|r| r.norm_squared()).sum())
    }

    /// Jacobian columns of the residuals by central differences, falling back
    /// to a one-sided difference when a perturbation over-bends.
    fn jacobian(&self, params: &DeformParams, cfg: &OptimizerConfig) -> Result<Vec<Vec<Vec2>>> {
        let base = params.to_array();
        let steps = cfg.fd_steps.as_array();
        let center = self.residuals(params)?;
        let mut cols = Vec::with_capacity(7);
        for p in 0..7 {
            if !cfg.is_free(p) {
                cols.push(vec![Vec2::zeros(); self.pairs.len()]);
                continue;
            }
            let h = steps[p];
            let at = |delta: f64| {
                let mut v = base;
                v[p] += delta;
                self.residuals(&DeformParams::from_array(v))
            };
            let col = match (at(h), at(-h)) {
                (Ok(fwd), Ok(bwd)) => diff(&fwd, &bwd, 2.0 * h),
                (Ok(fwd), Err(_)) => diff(&fwd, &center, h),
                (Err(_), Ok(bwd)) => diff(&center, &bwd, h),
                (Err(e), Err(_)) => return Err(e),
            };
            cols.push(col);
        }
        Ok(cols)
    }
}

fn diff(a: &[Vec2], b: &[Vec2], width: f64) -> Vec<Vec2> {
    a.iter().zip(b).map(|(x, y)| (x - y) / width).collect()
}

/// Gradient of the frozen chamfer loss by central finite differences of the
/// loss itself. Correspondences are frozen at `params`.
pub fn fd_gradient(
    mask: &BinaryMask,
    template: &Template,
    params: &DeformParams,
    cfg: &OptimizerConfig,
) -> Result<[f64; 7]> {
    let target = TargetContour::new(mask)?;
    let corr = Correspondences::freeze(template, &target, params, cfg.raster_pad)?;
    frozen_gradient(&corr, params, cfg)
}

/// Central-difference gradient of `corr`'s frozen loss.
pub fn frozen_gradient(
    corr: &Correspondences,
    params: &DeformParams,
    cfg: &OptimizerConfig,
) -> Result<[f64; 7]> {
    let base = params.to_array();
    let steps = cfg.fd_steps.as_array();
    let center = corr.loss_at(params)?;
    let mut grad = [0.0; 7];
    for (p, g) in grad.iter_mut().enumerate() {
        let h = steps[p];
        let at = |delta: f64| {
            let mut v = base;
            v[p] += delta;
            corr.loss_at(&DeformParams::from_array(v))
        };
        *g = match (at(h), at(-h)) {
            (Ok(f), Ok(b)) => (f - b) / (2.0 * h),
            (Ok(f), Err(_)) => (f - center) / h,
            (Err(_), Ok(b)) => (center - b) / h,
            (Err(e), Err(_)) => return Err(e),
        };
    }
    Ok(grad)
}

/// Runs the inner loop against frozen correspondences. Returns the proposed
/// parameters (possibly unchanged).
fn inner_descent(
    corr: &Correspondences,
    start: &DeformParams,
    cfg: &OptimizerConfig,
) -> Result<DeformParams> {
    let mut params = *start;
    let mut loss = corr.loss_at(&params)?;
    let mut damping = 1e-3;
    for _ in 0..cfg.inner_steps {
        let res = corr.residuals(&params)?;
        let cols = corr.jacobian(&params, cfg)?;

        let mut jtj = Mat7::zeros();
        let mut jtr = Vec7::zeros();
        for a in 0..7 {
            jtr[a] = cols[a].iter().zip(&res).map(|(j, r)| j.dot(r)).sum();
            for b in a..7 {
                let v: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| x.dot(y)).sum();
                jtj[(a, b)] = v;
                jtj[(b, a)] = v;
            }
        }

        let mut improved = false;
        match cfg.step_rule {
            StepRule::GaussNewton => {
                for _ in 0..8 {
                    let Some(delta) = damped_step(&jtj, &jtr, damping, cfg) else {
                        damping *= 10.0;
                        continue;
                    };
                    let candidate = offset(&params, &delta);
                    match corr.loss_at(&candidate) {
                        Ok(l) if l < loss => {
                            params = candidate;
                            loss = l;
                            damping = (damping * 0.3).max(1e-9);
                            improved = true;
                            break;
                        }
                        _ => damping *= 10.0,
                    }
                }
            }
            StepRule::Gradient => {
                let mut delta = Vec7::zeros();
                for p in 0..7 {
                    if cfg.is_free(p) && jtj[(p, p)] > 0.0 {
                        delta[p] = -cfg.learning_rate(p) * jtr[p] / jtj[(p, p)];
                    }
                }
                for _ in 0..=cfg.max_halvings {
                    let candidate = offset(&params, &delta);
                    if let Ok(l) = corr.loss_at(&candidate) {
                        if l < loss {
                            params = candidate;
                            loss = l;
                            improved = true;
                            break;
                        }
                    }
                    delta *= 0.5;
                }
            }
        }
        if !improved {
            break;
        }
    }
    Ok(params)
}

fn damped_step(jtj: &Mat7, jtr: &Vec7, damping: f64, cfg: &OptimizerConfig) -> Option<Vec7> {
    let scale = (0..7).map(|i| jtj[(i, i)]).fold(0.0, f64::max).max(1e-300);
    let mut a = *jtj;
    let mut b = -*jtr;
    for i in 0..7 {
        if !cfg.is_free(i) {
            for j in 0..7 {
                a[(i, j)] = 0.0;
                a[(j, i)] = 0.0;
            }
            a[(i, i)] = 1.0;
            b[i] = 0.0;
            continue;
        }
        a[(i, i)] += damping * jtj[(i, i)] + 1e-12 * scale;
    }
    a.cholesky().map(|c| c.solve(&b))
}

fn offset(p: &DeformParams, delta: &Vec7) -> DeformParams {
    let mut v = p.to_array();
    for (x, d) in v.iter_mut().zip(delta.iter()) {
        *x += d;
    }
    DeformParams::from_array(v)
}

/// Outcome of one optimization start.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: DeformParams,
    pub loss: f64,
    pub trace: Vec<f64>,
}

/// Fits from a single initialization.
pub fn fit_from(
    template: &Template,
    target: &TargetContour,
    init: &DeformParams,
    cfg: &OptimizerConfig,
) -> Result<FitResult> {
    let mut params = *init;
    let mut corr = Correspondences::freeze(template, target, &params, cfg.raster_pad)?;
    let mut trace = vec![corr.loss];

    for _ in 0..cfg.max_outer_iters {
        let proposal = inner_descent(&corr, &params, cfg)?;
        let step: Vec<f64> = proposal
            .to_array()
            .iter()
            .zip(params.to_array())
            .map(|(a, b)| a - b)
            .collect();
        if step.iter().all(|d| *d == 0.0) {
            break;
        }

        let mut accepted = None;
        let mut factor = 1.0;
        for _ in 0..=cfg.max_halvings {
            let mut v = params.to_array();
            for (x, d) in v.iter_mut().zip(&step) {
                *x += factor * d;
            }
            let candidate = DeformParams::from_array(v);
            if let Ok(c) = Correspondences::freeze(template, target, &candidate, cfg.raster_pad) {
                if c.loss < corr.loss {
                    accepted = Some((candidate, c));
                    break;
                }
            }
            factor *= 0.5;
        }
        let Some((candidate, c)) = accepted else {
            break;
        };

        let gain = corr.loss - c.loss;
        let tol = cfg.convergence_tol * c.point_count() as f64;
        params = candidate;
        corr = c;
        trace.push(corr.loss);
        if gain < tol {
            break;
        }
    }

    Ok(FitResult {
        params: canonical_angles(&params),
        loss: corr.loss,
        trace,
    })
}

/// Wraps gamma into [0, 2pi) and alpha, beta into (-pi, pi].
fn canonical_angles(p: &DeformParams) -> DeformParams {
    let wrap = |a: f64| {
        let r = a.rem_euclid(TAU);
        if r > PI {
            r - TAU
        } else {
            r
        }
    };
    DeformParams {
        alpha: wrap(p.alpha),
        beta: wrap(p.beta),
        gamma: p.gamma.rem_euclid(TAU),
        ..*p
    }
}

/// Initial parameters for one in-plane rotation seed.
pub fn initial_params(
    mask: &BinaryMask,
    template: &Template,
    gamma: f64,
    cfg: &OptimizerConfig,
) -> Result<DeformParams> {
    let area = mask.count();
    let centroid = centered_centroid(mask)?;

    let s = (area as f64 / template.source_mask().count() as f64).sqrt();
    let kappa = if cfg.freeze_kappa {
        0.0
    } else {
        let k = cfg.init_bend / (s * template.head_tail_arc());
        // Stay well inside the half-cylinder limit.
        k.clamp(-0.5 * PI / (s * template.max_abs_y()), 0.5 * PI / (s * template.max_abs_y()))
    };
    let p = DeformParams {
        s,
        kappa,
        tx: 0.0,
        ty: 0.0,
        alpha: cfg.init_tilt,
        beta: cfg.init_tilt,
        gamma,
    };

    place_centroid(template, &p, centroid)
}

/// Centroid of the foreground in the centered frame. Pixel `j` covers
/// `[j, j + 1)`, so its continuous centroid sits half a pixel in.
pub fn centered_centroid(mask: &BinaryMask) -> Result<Vec2> {
    let (mx, my) = mask
        .centroid()
        .ok_or_else(|| Error::InvalidInput("target mask has no foreground".into()))?;
    let center = mask_center(mask);
    Ok(Vec2::new(mx + 0.5 - center.x, my + 0.5 - center.y))
}

/// Returns `params` with (tx, ty) chosen so the projected body centroid
/// lands on `centroid`.
pub fn place_centroid(template: &Template, params: &DeformParams, centroid: Vec2) -> Result<DeformParams> {
    let mut p = DeformParams { tx: 0.0, ty: 0.0, ..*params };
    let d = apply_deformation(template, &p)?;
    let n = d.s4.len() as f64;
    let body = d.s4.points().iter().fold(Vec2::zeros(), |a, q| a + Vec2::new(q.x, q.y)) / n;
    let m = rotation_matrix(p.alpha, p.beta, p.gamma)?;
    let lhs = nalgebra::Matrix2::new(m[(0, 0)], m[(1, 0)], m[(0, 1)], m[(1, 1)]);
    let t = lhs
        .lu()
        .solve(&(centroid - body))
        .ok_or_else(|| Error::DegenerateGeometry("rotation is edge-on".into()))?;
    p.tx = t.x;
    p.ty = t.y;
    Ok(p)
}

/// Ordered in-plane rotation seeds: the mask's principal axis in both head
/// directions, then the four quarter turns in an order shuffled by `seed`.
pub fn gamma_seeds(mask: &BinaryMask, count: usize, seed: u64) -> Vec<f64> {
    let mut seeds = Vec::with_capacity(6);
    if let Some(axis) = mask.principal_axis_angle() {
        // The template's +y axis turns to angle gamma + pi/2 in the image.
        seeds.push((axis - FRAC_PI_2).rem_euclid(TAU));
        seeds.push((axis + FRAC_PI_2).rem_euclid(TAU));
    }
    let mut quarter = vec![0.0, FRAC_PI_2, PI, 3.0 * FRAC_PI_2];
    quarter.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    seeds.extend(quarter);
    seeds.truncate(count.max(1));
    seeds
}

/// Fits the template to `mask` and returns the best multi-start result.
pub fn estimate_relative_pose(
    mask: &BinaryMask,
    template: &Template,
    cfg: &OptimizerConfig,
) -> Result<RelativePose> {
    cfg.validate()?;
    let target = TargetContour::new(mask)?;
    let seeds = gamma_seeds(mask, cfg.multi_start, cfg.seed);

    let fits: Vec<Result<FitResult>> = seeds
        .par_iter()
        .map(|&g| {
            let init = initial_params(mask, template, g, cfg)?;
            fit_from(template, &target, &init, cfg)
        })
        .collect();

    let mut best: Option<FitResult> = None;
    let mut first_err = None;
    for fit in fits {
        match fit {
            Ok(f) => {
                if best.as_ref().is_none_or(|b| f.loss < b.loss) {
                    best = Some(f);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let best = match (best, first_err) {
        (Some(b), _) => b,
        (None, Some(e)) => return Err(e),
        (None, None) => unreachable!("at least one seed"),
    };
    RelativePose::from_params(template, &best.params, target.center, best.loss, best.trace)
}
