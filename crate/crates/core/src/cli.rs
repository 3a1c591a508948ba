//! Command line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bfs::{build_projection_database, GridSpec, ProjectionDatabase};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::io::{
    read_calibration, read_length_column, read_mask, read_toml, write_csv, write_json, write_mask,
    write_toml, CalibrationFile,
};
use crate::localization::CameraModel;
use crate::mask::BinaryMask;
use crate::metrics::{build_histogram, compare_histograms, DEFAULT_BINS, DEFAULT_HI_MM, DEFAULT_LO_MM};
use crate::nn::Vec2;
use crate::optimizer::OptimizerConfig;
use crate::pipeline::{estimate_clip, estimate_frame, estimate_frame_bfs, list_masks, FrameResult};
use crate::synth::{render_synthetic, SceneSpec};
use crate::template::{build_template, default_fish_mask, DeformParams, Template};

/// Template subsampling stride used for mask files given with `--template`.
pub const TEMPLATE_STRIDE: usize = 2;

#[derive(Debug, Parser)]
#[command(name = "fishpose", version, about = "Fish pose and length estimation from binary masks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Template silhouette (PGM); the built-in fish when omitted.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Seed for the multi-start ordering.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate pose and length from one mask.
    EstimateFrame {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Optimizer settings (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate every mask in a directory and aggregate the clip length.
    EstimateClip {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render the projection database of the brute-force baseline.
    BfsBuild {
        /// Grid settings (TOML); the default grid when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate one mask by database lookup.
    BfsEstimate {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render a synthetic scene: mask.pgm, truth.json and calib.toml.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare predicted and reference length distributions.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LO_MM)]
        lo: f64,
        #[arg(long, default_value_t = DEFAULT_HI_MM)]
        hi: f64,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the built-in template silhouette.
    Template {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Per-frame result file written by `estimate-frame` and `bfs-estimate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub params: DeformParams,
    /// Relative-pose keypoints (template pixels).
    pub head_rel: Vec3,
    pub center_rel: Vec3,
    pub tail_rel: Vec3,
    /// Image keypoints (pixels).
    pub head_px: Vec2,
    pub center_px: Vec2,
    pub tail_px: Vec2,
    /// Camera-frame keypoints (mm).
    pub head_mm: Vec3,
    pub center_mm: Vec3,
    pub tail_mm: Vec3,
    pub gaps_mm: [f64; 2],
    pub length_mm: f64,
    pub bend_ratio: f64,
    pub final_loss: f64,
    pub low_confidence: bool,
    pub reprojection_iou: Option<f64>,
    /// Plane-to-image homography, row-major.
    pub homography: [f64; 9],
}

impl From<&FrameResult> for FrameReport {
    fn from(r: &FrameResult) -> Self {
        let (rel, abs) = (&r.relative, &r.absolute);
        let mut homography = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                homography[3 * i + j] = r.homography[(i, j)];
            }
        }
        Self {
            params: rel.params,
            head_rel: rel.h,
            center_rel: rel.c,
            tail_rel: rel.t,
            head_px: rel.h2d,
            center_px: rel.c2d,
            tail_px: rel.t2d,
            head_mm: abs.h_abs,
            center_mm: abs.c_abs,
            tail_mm: abs.t_abs,
            gaps_mm: abs.gaps,
            length_mm: abs.length_mm,
            bend_ratio: abs.bend_ratio,
            final_loss: rel.final_loss,
            low_confidence: abs.low_confidence,
            reprojection_iou: r.reprojection_iou,
            homography,
        }
    }
}

/// Column order of `estimate-clip` output. Frame rows come first in file
/// order; the last row has `frame = clip` and carries the aggregate.
pub const CLIP_HEADER: [&str; 8] = [
    "frame",
    "file",
    "length_mm",
    "bend_ratio",
    "final_loss",
    "low_confidence",
    "kept",
    "error",
];

pub const EVAL_HEADER: [&str; 4] = ["bias_mm", "emd_mm", "rmsd", "kl"];

fn load_template(path: Option<&Path>) -> Result<Template> {
    let mask = match path {
        Some(p) => read_mask(p)?,
        None => default_fish_mask(),
    };
    build_template(&mask, TEMPLATE_STRIDE).map_err(|e| match path {
        Some(p) => Error::file(p, e),
        None => e,
    })
}

fn load_config(path: Option<&Path>, seed: u64) -> Result<OptimizerConfig> {
    let mut cfg: OptimizerConfig = match path {
        Some(p) => read_toml(p)?,
        None => OptimizerConfig::default(),
    };
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn check_size(mask: &BinaryMask, calib: &CalibrationFile, path: &Path) -> Result<()> {
    if (mask.width(), mask.height()) != (calib.image_width, calib.image_height) {
        return Err(Error::file(
            path,
            format!(
                "mask is {}x{} but the calibration expects {}x{}",
                mask.width(),
                mask.height(),
                calib.image_width,
                calib.image_height
            ),
        ));
    }
    Ok(())
}

fn load_frame(mask: &Path, calib: &Path) -> Result<(BinaryMask, CameraModel)> {
    let (file, cam) = read_calibration(calib)?;
    let m = read_mask(mask)?;
    check_size(&m, &file, mask)?;
    Ok((m, cam))
}

fn clip_rows(paths: &[PathBuf], template: &Template, cam: &CameraModel, cfg: &OptimizerConfig) -> Result<Vec<Vec<String>>> {
    let result = estimate_clip(paths, template, cam, cfg)?;
    let mut kept = vec![None; result.frames.len()];
    for (k, &i) in result.used.iter().enumerate() {
        kept[i] = Some(result.clip.kept_mask[k]);
    }
    let mut rows = Vec::with_capacity(result.frames.len() + 1);
    for f in &result.frames {
        let file = f
            .path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let row = match &f.result {
            Ok(r) => vec![
                f.index.to_string(),
                file,
                r.absolute.length_mm.to_string(),
                r.absolute.bend_ratio.to_string(),
                r.relative.final_loss.to_string(),
                r.absolute.low_confidence.to_string(),
                kept[f.index].unwrap_or(false).to_string(),
                String::new(),
            ],
            Err(e) => vec![
                f.index.to_string(),
                file,
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                "false".into(),
                e.to_string(),
            ],
        };
        rows.push(row);
    }
    rows.push(vec![
        "clip".into(),
        String::new(),
        result.clip.final_length_mm.to_string(),
        String::new(),
        String::new(),
        String::new(),
        result.clip.n_kept.to_string(),
        String::new(),
    ]);
    Ok(rows)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::EstimateFrame {
            mask,
            calib,
            config,
            out,
            common,
        } => {
            let cfg = load_config(config.as_deref(), common.seed)?;
            let template = load_template(common.template.as_deref())?;
            let (m, cam) = load_frame(&mask, &calib)?;
            let result = estimate_frame(&m, &template, &cam, &cfg)?;
            write_json(&out, &FrameReport::from(&result))
        }
        Command::EstimateClip {
            masks,
            calib,
            config,
            out,
            common,
        } => {
            let cfg = load_config(config.as_deref(), common.seed)?;
            let template = load_template(common.template.as_deref())?;
            let (_, cam) = read_calibration(&calib)?;
            let paths = list_masks(&masks)?;
            let rows = clip_rows(&paths, &template, &cam, &cfg)?;
            write_csv(&out, &CLIP_HEADER, &rows)
        }
        Command::BfsBuild { grid, out, common } => {
            let grid: GridSpec = match grid {
                Some(p) => read_toml(&p)?,
                None => GridSpec::default(),
            };
            let template = load_template(common.template.as_deref())?;
            let db = build_projection_database(&template, &grid)?;
            if db.skipped > 0 {
                eprintln!("warning: skipped {} over-bent grid points", db.skipped);
            }
            db.save(&out)
        }
        Command::BfsEstimate {
            mask,
            db,
            calib,
            out,
            common,
        } => {
            let template = load_template(common.template.as_deref())?;
            let database = ProjectionDatabase::load(&db)?;
            let (m, cam) = load_frame(&mask, &calib)?;
            let result = estimate_frame_bfs(&m, &template, &cam, &database)?;
            write_json(&out, &FrameReport::from(&result))
        }
        Command::Synth { spec, out, common } => {
            let spec: SceneSpec = read_toml(&spec)?;
            let template = load_template(common.template.as_deref())?;
            let scene = render_synthetic(&template, &spec)?;
            write_mask(&out.join("mask.pgm"), &scene.mask)?;
            write_json(&out.join("truth.json"), &scene.truth)?;
            let calib = CalibrationFile::from_camera(&scene.camera, spec.image_width, spec.image_height);
            write_toml(&out.join("calib.toml"), &calib)
        }
        Command::Eval {
            pred,
            gt,
            lo,
            hi,
            bins,
            out,
            seed: _,
        } => {
            let p = build_histogram(&read_length_column(&pred)?, lo, hi, bins)?;
            let g = build_histogram(&read_length_column(&gt)?, lo, hi, bins)?;
            let c = compare_histograms(&p, &g)?;
            let row = [c.bias_mm, c.emd_mm, c.rmsd, c.kl].map(|v| v.to_string()).to_vec();
            write_csv(&out, &EVAL_HEADER, &[row])
        }
        Command::Template { out, seed: _ } => write_mask(&out, &default_fish_mask()),
    }
}
