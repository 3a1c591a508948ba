//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fishpose::bfs::{build_projection_database, GridSpec};
use fishpose::contour::{render_orthographic, ContourSet};
use fishpose::geometry::{closest_points_between_lines, rotation_matrix, Line3, Mat3, Vec3};
use fishpose::io::{write_mask, write_toml, CalibrationFile};
use fishpose::localization::{localize, plane_depth, CameraModel};
use fishpose::metrics::{aggregate_clip, compare_histograms, LengthHistogram};
use fishpose::nn::Vec2;
use fishpose::optimizer::{
    chamfer_distance, chamfer_distance_brute, fd_gradient, Correspondences, OptimizerConfig,
    RelativePose, TargetContour,
};
use fishpose::pipeline::{estimate_frame, estimate_frame_bfs};
use fishpose::synth::{render_synthetic, SceneSpec, SyntheticScene};
use fishpose::template::{apply_deformation, bend_points, default_template, DeformParams, PointSet3, Template, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Nearest-rank percentile.
fn percentile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn polyline_length(points: &[Vec3]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

fn bend_isometry() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let half = rng.gen_range(20.0..400.0);
        let kappa = rng.gen_range(-0.95..0.95) * PI / half;
        // Dense enough that chords and arcs of the bent midline agree to
        // well below the tolerance.
        let n = ((kappa.abs() * 2.0 * half / 1e-3).ceil() as usize).max(100);
        let mid: Vec<Vec3> = (0..=n)
            .map(|i| Vec3::new(0.0, -half + 2.0 * half * i as f64 / n as f64, 0.0))
            .collect();
        let flat = polyline_length(&mid);
        let set = PointSet3::new(mid, Unit::Pixels).unwrap();
        let bent = bend_points(&set, kappa).unwrap();
        let rel = (polyline_length(bent.points()) - flat).abs() / flat;
        worst = worst.max(rel);
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-6 && elapsed < Duration::from_secs(5),
        format!("worst relative arc change {worst:.2e}, {:.2} s", elapsed.as_secs_f64()),
    )
}

/// Minimum distance between two lines by successively refined grid search.
fn brute_gap(l1: &Line3, l2: &Line3) -> f64 {
    let (mut c1, mut c2, mut half) = (0.0, 0.0, 2000.0);
    let mut best = f64::INFINITY;
    let steps = 40;
    while half > 1e-10 {
        let (mut b1, mut b2) = (c1, c2);
        for i in -steps..=steps {
            for j in -steps..=steps {
                let t1 = c1 + half * i as f64 / steps as f64;
                let t2 = c2 + half * j as f64 / steps as f64;
                let d = (l1.at(t1) - l2.at(t2)).norm();
                if d < best {
                    best = d;
                    (b1, b2) = (t1, t2);
                }
            }
        }
        (c1, c2) = (b1, b2);
        half *= 0.25;
    }
    best
}

fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_gap: f64 = 0.0;
    let mut pairs = 0;
    while pairs < 100 {
        let o1 = Vec3::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
        let o2 = Vec3::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0));
        let (d1, d2) = (unit_vector(&mut rng), unit_vector(&mut rng));
        if d1.cross(&d2).norm() < 0.2 {
            continue;
        }
        pairs += 1;
        let (l1, l2) = (Line3::new(o1, d1).unwrap(), Line3::new(o2, d2).unwrap());
        let cp = closest_points_between_lines(&l1, &l2).unwrap();
        let brute = brute_gap(&l1, &l2);
        worst_gap = worst_gap.max((cp.gap - brute).abs() / brute.max(1.0));
    }
    let mut worst_ortho: f64 = 0.0;
    for _ in 0..1000 {
        let m = rotation_matrix(rng.gen_range(-PI..PI), rng.gen_range(-PI..PI), rng.gen_range(0.0..TAU)).unwrap();
        worst_ortho = worst_ortho.max((m.transpose() * m - Mat3::identity()).abs().max());
    }
    outcome(
        worst_gap <= 1e-6 && worst_ortho <= 1e-12,
        format!("worst gap deviation {worst_gap:.2e}, worst orthonormality error {worst_ortho:.2e}"),
    )
}

/// Noisy closed curve resembling an extracted contour.
fn random_contour(rng: &mut ChaCha8Rng, n: usize) -> ContourSet {
    let (cx, cy) = (rng.gen_range(0.0..300.0), rng.gen_range(0.0..300.0));
    let (a, b) = (rng.gen_range(20.0..200.0), rng.gen_range(10.0..100.0));
    let points = (0..n)
        .map(|i| {
            let t = TAU * i as f64 / n as f64;
            Vec2::new(
                cx + a * t.cos() + rng.gen_range(-2.0..2.0),
                cy + b * t.sin() + rng.gen_range(-2.0..2.0),
            )
        })
        .collect();
    ContourSet::new(points).unwrap()
}

fn chamfer_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (n, m) = (rng.gen_range(1..=2000), rng.gen_range(1..=2000));
        let a = random_contour(&mut rng, n);
        let b = random_contour(&mut rng, m);
        let fast = chamfer_distance(&a, &b).unwrap();
        let slow = chamfer_distance_brute(&a, &b).unwrap();
        worst = worst.max((fast - slow).abs() / slow.max(1.0));
    }
    let pairs: Vec<(ContourSet, ContourSet)> =
        (0..10).map(|_| (random_contour(&mut rng, 2000), random_contour(&mut rng, 2000))).collect();
    let time = |f: &dyn Fn() -> f64| {
        let start = Instant::now();
        let mut acc = 0.0;
        for _ in 0..20 {
            acc += f();
        }
        (start.elapsed().as_secs_f64() / 20.0, acc)
    };
    let (t_fast, _) = time(&|| pairs.iter().map(|(a, b)| chamfer_distance(a, b).unwrap()).sum());
    let (t_slow, _) = time(&|| pairs.iter().map(|(a, b)| chamfer_distance_brute(a, b).unwrap()).sum());
    let speedup = t_slow / t_fast;
    outcome(
        worst <= 1e-9 && speedup >= 5.0,
        format!("worst relative deviation {worst:.2e}, speedup {speedup:.1}x over 10 pairs at n = m = 2000"),
    )
}

/// The 30 round-trip scenes shared by the core and ablation criteria.
fn scenes(template: &Template) -> Vec<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut out = Vec::new();
    while out.len() < 30 {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let spec = SceneSpec {
            image_width: 1280,
            image_height: 960,
            focal_px: 1200.0,
            plane_tilt_rad: rng.gen_range(-0.3..0.3),
            plane_distance_mm: rng.gen_range(3000.0..8000.0),
            center_world_mm: [rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0)],
            length_mm: rng.gen_range(500.0..1000.0),
            bend_rad: sign * rng.gen_range(0.15..FRAC_PI_2),
            alpha: rng.gen_range(-0.35..0.35),
            beta: rng.gen_range(-0.35..0.35),
            gamma: rng.gen_range(0.0..TAU),
            mm_per_px: None,
        };
        // Scenes that leave the frame are redrawn.
        if let Ok(scene) = render_synthetic(template, &spec) {
            out.push(scene);
        }
    }
    out
}

fn relative_error(length: f64, scene: &SyntheticScene) -> f64 {
    (length - scene.truth.true_length_mm).abs() / scene.truth.true_length_mm
}

struct RoundTrip {
    errors: Vec<f64>,
    slowest: f64,
}

fn round_trip(template: &Template, scenes: &[SyntheticScene], cfg: &OptimizerConfig) -> RoundTrip {
    let mut errors = Vec::new();
    let mut slowest: f64 = 0.0;
    for scene in scenes {
        let start = Instant::now();
        let err = match estimate_frame(&scene.mask, template, &scene.camera, cfg) {
            Ok(r) => relative_error(r.length_mm(), scene),
            Err(_) => f64::INFINITY,
        };
        slowest = slowest.max(start.elapsed().as_secs_f64());
        errors.push(err);
    }
    RoundTrip { errors, slowest }
}

fn core_round_trip(rt: &RoundTrip) -> Outcome {
    let (med, p90) = (median(&rt.errors), percentile(&rt.errors, 0.9));
    outcome(
        med <= 0.03 && p90 <= 0.06 && rt.slowest < 10.0,
        format!(
            "median {:.2}%, p90 {:.2}%, slowest frame {:.2} s",
            100.0 * med,
            100.0 * p90,
            rt.slowest
        ),
    )
}

fn ablation(template: &Template, scenes: &[SyntheticScene], core: &RoundTrip) -> Outcome {
    let frozen_cfg = OptimizerConfig {
        freeze_kappa: true,
        ..OptimizerConfig::default()
    };
    let frozen = round_trip(template, scenes, &frozen_cfg);
    let db = build_projection_database(template, &GridSpec::default()).unwrap();
    let bfs: Vec<f64> = scenes
        .iter()
        .map(|s| match estimate_frame_bfs(&s.mask, template, &s.camera, &db) {
            Ok(r) => relative_error(r.length_mm(), s),
            Err(_) => f64::INFINITY,
        })
        .collect();
    let (m_core, m_frozen, m_bfs) = (median(&core.errors), median(&frozen.errors), median(&bfs));
    let min_bend = scenes
        .iter()
        .map(|s| s.spec.bend_rad.abs())
        .fold(f64::INFINITY, f64::min);
    outcome(
        min_bend >= 0.15 && m_frozen >= 2.0 * m_core && (m_bfs - m_core).abs() <= 0.02,
        format!(
            "medians: fitted {:.2}%, kappa frozen {:.2}% ({:.1}x), BFS {:.2}% over {} entries",
            100.0 * m_core,
            100.0 * m_frozen,
            m_frozen / m_core,
            100.0 * m_bfs,
            db.entries.len()
        ),
    )
}

/// Relative pose whose image keypoints coincide with the true projections.
fn injected_pose(template: &Template, scene: &SyntheticScene) -> RelativePose {
    let spec = &scene.spec;
    let center = Vec2::new(spec.image_width as f64 / 2.0, spec.image_height as f64 / 2.0);
    let p0 = scene.truth.params;
    let d = apply_deformation(template, &p0).unwrap();
    let delta = scene.truth.keypoints_2d.center - center - Vec2::new(d.center.x, d.center.y);
    // Translation enters before the rotation, through its top-left block.
    let m = rotation_matrix(p0.alpha, p0.beta, p0.gamma).unwrap();
    let block = nalgebra::Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let t = block.transpose().try_inverse().unwrap() * delta;
    let params = DeformParams {
        tx: p0.tx + t.x,
        ty: p0.ty + t.y,
        ..p0
    };
    RelativePose::from_params(template, &params, center, 0.0, vec![0.0]).unwrap()
}

fn localization_exactness(template: &Template) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_mm: f64 = 0.0;
    let mut worst_len: f64 = 0.0;
    let mut n = 0;
    while n < 20 {
        let spec = SceneSpec {
            image_width: 1280,
            image_height: 960,
            focal_px: rng.gen_range(800.0..1600.0),
            plane_tilt_rad: 0.0,
            plane_distance_mm: rng.gen_range(3000.0..8000.0),
            center_world_mm: [rng.gen_range(-300.0..300.0), rng.gen_range(-300.0..300.0)],
            length_mm: rng.gen_range(500.0..1000.0),
            bend_rad: 0.0,
            alpha: 0.0,
            beta: 0.0,
            gamma: rng.gen_range(0.0..TAU),
            mm_per_px: None,
        };
        let Ok(scene) = render_synthetic(template, &spec) else { continue };
        n += 1;
        let rel = injected_pose(template, &scene);
        let abs = localize(&rel, &scene.camera, template, None).unwrap();
        let kp = &scene.truth.keypoints_3d;
        worst_mm = worst_mm
            .max((abs.h_abs - kp.head).norm())
            .max((abs.t_abs - kp.tail).norm())
            .max((abs.c_abs - kp.center).norm());
        worst_len = worst_len.max((abs.length_mm - spec.length_mm).abs());
    }

    let mut worst_rt: f64 = 0.0;
    for _ in 0..200 {
        let tilt = rng.gen_range(-0.6..0.6);
        let (s, c) = f64::sin_cos(tilt);
        let r = Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c);
        let f = rng.gen_range(500.0..2000.0);
        let k = Mat3::new(f, 0.0, 640.0, 0.0, f, 480.0, 0.0, 0.0, 1.0);
        let cam = CameraModel::new(k, r, Vec3::new(rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(2000.0..9000.0)))
            .unwrap();
        let world = Vec3::new(rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0), 0.0);
        let pc = cam.world_to_camera(&world);
        let uv = cam.project(&pc).unwrap();
        let (z, x, y) = plane_depth(&cam, uv).unwrap();
        worst_rt = worst_rt
            .max((z - pc.z).abs() / pc.z)
            .max((x - world.x).abs() / world.norm())
            .max((y - world.y).abs() / world.norm());
    }
    outcome(
        worst_mm <= 1e-6 && worst_rt <= 1e-9,
        format!(
            "worst keypoint error {worst_mm:.2e} mm (length {worst_len:.2e} mm), worst plane round trip {worst_rt:.2e}"
        ),
    )
}

fn random_histogram(rng: &mut ChaCha8Rng, n: usize) -> LengthHistogram {
    let edges = (0..=n).map(|i| 500.0 + 25.0 * i as f64).collect();
    let raw: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..1.0) })
        .collect();
    let total: f64 = raw.iter().sum::<f64>().max(1e-12);
    LengthHistogram {
        edges,
        mass: raw.iter().map(|m| m / total).collect(),
    }
}

fn metrics_checks() -> Outcome {
    let mut lengths = vec![700.0; 9];
    lengths.push(1400.0);
    let clip = aggregate_clip(&lengths).unwrap();
    let worked = clip.final_length_mm == 700.0 && clip.n_kept == 9 && !clip.kept_mask[9];

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut min_kl, mut worst_sym, mut worst_tri) = (f64::INFINITY, 0.0f64, f64::NEG_INFINITY);
    for _ in 0..100 {
        let [a, b, c] = [0, 1, 2].map(|_| random_histogram(&mut rng, 20));
        let ab = compare_histograms(&a, &b).unwrap();
        let ba = compare_histograms(&b, &a).unwrap();
        let bc = compare_histograms(&b, &c).unwrap();
        let ac = compare_histograms(&a, &c).unwrap();
        min_kl = min_kl.min(ab.kl).min(ba.kl).min(bc.kl).min(ac.kl);
        worst_sym = worst_sym.max((ab.emd_mm - ba.emd_mm).abs());
        worst_tri = worst_tri.max(ac.emd_mm - ab.emd_mm - bc.emd_mm);
    }
    let p = LengthHistogram {
        edges: vec![500.0, 750.0, 1000.0],
        mass: vec![0.5, 0.5],
    };
    let q = LengthHistogram {
        mass: vec![0.25, 0.75],
        ..p.clone()
    };
    let kl = compare_histograms(&p, &q).unwrap().kl;
    let direct = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    outcome(
        worked && min_kl >= 0.0 && worst_sym <= 1e-12 && worst_tri <= 1e-9 && (kl - 0.1438).abs() <= 1e-4 && (kl - direct).abs() <= 1e-4,
        format!(
            "worked example {}, min kl {min_kl:.2e}, emd asymmetry {worst_sym:.1e}, triangle slack {worst_tri:.1e}, kl example {kl:.4}",
            if worked { "exact" } else { "wrong" }
        ),
    )
}

fn gradient_sanity(template: &Template) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = OptimizerConfig::default();
    let truth = DeformParams {
        s: 0.5,
        kappa: 0.6 / (0.5 * template.head_tail_arc()),
        tx: 0.0,
        ty: 0.0,
        alpha: 0.1,
        beta: -0.15,
        gamma: 1.1,
    };
    let d = apply_deformation(template, &truth).unwrap();
    let mask = render_orthographic(&d.s4, 400, 400).unwrap();
    let target = TargetContour::new(&mask).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = DeformParams {
            s: truth.s * rng.gen_range(0.9..1.1),
            kappa: truth.kappa * rng.gen_range(0.5..1.5),
            tx: rng.gen_range(-8.0..8.0),
            ty: rng.gen_range(-8.0..8.0),
            alpha: truth.alpha + rng.gen_range(-0.1..0.1),
            beta: truth.beta + rng.gen_range(-0.1..0.1),
            gamma: truth.gamma + rng.gen_range(-0.1..0.1),
        };
        let fd = fd_gradient(&mask, template, &p, &cfg).unwrap();
        // The frozen loss is a sum of squared residuals, and a unit
        // translation moves every point by the first two rows of the
        // rotation, so its gradient is 2 r . (M[i][0], M[i][1]).
        let corr = Correspondences::freeze(template, &target, &p, cfg.raster_pad).unwrap();
        let m = rotation_matrix(p.alpha, p.beta, p.gamma).unwrap();
        let res = corr.residuals(&p).unwrap();
        let analytic = |row: usize| -> f64 {
            res.iter()
                .map(|r| 2.0 * (r.x * m[(row, 0)] + r.y * m[(row, 1)]))
                .sum()
        };
        for (k, row) in [(2, 0), (3, 1)] {
            let a = analytic(row);
            worst = worst.max((fd[k] - a).abs() / a.abs().max(1e-9));
        }
    }
    outcome(worst <= 1e-3, format!("worst relative deviation {worst:.2e} over 20 states"))
}

fn determinism(template: &Template) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let masks = dir.path().join("masks");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut calib = None;
    let mut written = 0;
    while written < 4 {
        let spec = SceneSpec {
            image_width: 1280,
            image_height: 960,
            focal_px: 1200.0,
            plane_tilt_rad: 0.15,
            plane_distance_mm: 5000.0,
            center_world_mm: [rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0)],
            length_mm: 800.0,
            bend_rad: rng.gen_range(-1.2..1.2),
            alpha: rng.gen_range(-0.3..0.3),
            beta: rng.gen_range(-0.3..0.3),
            gamma: rng.gen_range(0.0..TAU),
            mm_per_px: None,
        };
        let Ok(scene) = render_synthetic(template, &spec) else { continue };
        write_mask(&masks.join(format!("frame_{written:03}.pgm")), &scene.mask).unwrap();
        calib.get_or_insert(CalibrationFile::from_camera(&scene.camera, 1280, 960));
        written += 1;
    }
    let calib_path = dir.path().join("calib.toml");
    write_toml(&calib_path, &calib.unwrap()).unwrap();

    let run = |out: &Path| {
        Command::new(env!("CARGO_BIN_EXE_fishpose"))
            .args(["estimate-clip", "--seed", "7", "--masks"])
            .arg(&masks)
            .arg("--calib")
            .arg(&calib_path)
            .arg("--out")
            .arg(out)
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    };
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    if !(run(&a) && run(&b)) {
        return outcome(false, "estimate-clip failed".into());
    }
    let (x, y) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    outcome(x == y, format!("{} bytes each, identical: {}", x.len(), x == y))
}

fn main() {
    // Numeric arguments select criteria; everything else (harness flags
    // forwarded by cargo) is ignored.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |k: usize| only.is_empty() || only.contains(&k);

    let template = default_template();
    let needs_scenes = wanted(4) || wanted(5);
    let scenes = if needs_scenes { scenes(&template) } else { Vec::new() };
    let core = needs_scenes.then(|| round_trip(&template, &scenes, &OptimizerConfig::default()));

    let mut failed = 0;
    let mut report = |k: usize, name: &str, run: &dyn Fn() -> Outcome| {
        if !wanted(k) {
            return;
        }
        let o = run();
        println!("{} criterion {k} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.pass as usize;
    };
    report(1, "bending isometry", &bend_isometry);
    report(2, "geometry oracles", &geometry_oracles);
    report(3, "chamfer equivalence", &chamfer_equivalence);
    report(4, "synthetic round trip", &|| core_round_trip(core.as_ref().unwrap()));
    report(5, "ablation ordering", &|| ablation(&template, &scenes, core.as_ref().unwrap()));
    report(6, "localization exactness", &|| localization_exactness(&template));
    report(7, "aggregation and metrics", &metrics_checks);
    report(8, "gradient sanity", &|| gradient_sanity(&template));
    report(9, "determinism", &|| determinism(&template));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
