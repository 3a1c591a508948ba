//! Per-clip aggregation and histogram comparison of length estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LO_MM: f64 = 500.0;
pub const DEFAULT_HI_MM: f64 = 1000.0;
pub const DEFAULT_BINS: usize = 20;
/// Additive smoothing applied to the reference histogram in the KL term.
pub const KL_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEstimate {
    pub frame_lengths: Vec<f64>,
    pub kept_mask: Vec<bool>,
    pub final_length_mm: f64,
    pub n_kept: usize,
}

/// Mean of the frames within two population standard deviations of the
/// mean (strict), in a single pass. Keeps everything when sigma is zero.
pub fn aggregate_clip(frame_lengths: &[f64]) -> Result<ClipEstimate> {
    if frame_lengths.is_empty() {
        return Err(Error::InvalidInput("no frame lengths to aggregate".into()));
    }
    if let Some(bad) = frame_lengths.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("frame length {bad} is not finite")));
    }
    let n = frame_lengths.len() as f64;
    let mu = frame_lengths.iter().sum::<f64>() / n;
    let sigma = (frame_lengths.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();

    let mut kept: Vec<bool> = frame_lengths
        .iter()
        .map(|x| sigma == 0.0 || (x - mu).abs() < 2.0 * sigma)
        .collect();
    if !kept.iter().any(|&k| k) {
        kept.iter_mut().for_each(|k| *k = true);
    }
    let (sum, n_kept) = frame_lengths
        .iter()
        .zip(&kept)
        .filter(|(_, &k)| k)
        .fold((0.0, 0usize), |(s, c), (x, _)| (s + x, c + 1));
    Ok(ClipEstimate {
        frame_lengths: frame_lengths.to_vec(),
        kept_mask: kept,
        final_length_mm: sum / n_kept as f64,
        n_kept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
}

impl LengthHistogram {
    pub fn bin_centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    fn mean(&self) -> f64 {
        self.bin_centers().iter().zip(&self.mass).map(|(c, m)| c * m).sum()
    }
}

/// Equal-width histogram over `[lo, hi)`; values outside are dropped and the
/// mass is normalized over the retained count.
pub fn build_histogram(lengths: &[f64], lo: f64, hi: f64, n_bins: usize) -> Result<LengthHistogram> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::InvalidArgument(format!("invalid histogram range [{lo}, {hi})")));
    }
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    let mut total = 0usize;
    for &x in lengths {
        if x >= lo && x < hi {
            let b = (((x - lo) / width) as usize).min(n_bins - 1);
            counts[b] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidInput(format!("no lengths fall inside [{lo}, {hi})")));
    }
    let edges = (0..=n_bins).map(|i| lo + width * i as f64).collect::<Vec<_>>();
    let mass = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(LengthHistogram { edges, mass })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramComparison {
    pub bias_mm: f64,
    pub emd_mm: f64,
    pub rmsd: f64,
    pub kl: f64,
}

/// Bias, 1D earth mover's distance, mass RMSD and KL(pred || smoothed gt).
pub fn compare_histograms(
    pred: &LengthHistogram,
    gt: &LengthHistogram,
) -> Result<HistogramComparison> {
    if pred.edges != gt.edges || pred.mass.len() != gt.mass.len() {
        return Err(Error::InvalidInput("histograms have different bin edges".into()));
    }
    let n = pred.mass.len();
    let bias_mm = pred.mean() - gt.mean();

    let mut emd_mm = 0.0;
    let (mut cp, mut cg) = (0.0, 0.0);
    for b in 0..n {
        cp += pred.mass[b];
        cg += gt.mass[b];
        emd_mm += (cp - cg).abs() * (pred.edges[b + 1] - pred.edges[b]);
    }

    let rmsd = (pred
        .mass
        .iter()
        .zip(&gt.mass)
        .map(|(p, q)| (p - q).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();

    let norm = 1.0 + KL_EPSILON * n as f64;
    let kl = pred
        .mass
        .iter()
        .zip(&gt.mass)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p / ((q + KL_EPSILON) / norm)).ln())
        .sum();

    Ok(HistogramComparison {
        bias_mm,
        emd_mm,
        rmsd,
        kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(mass: &[f64]) -> LengthHistogram {
        let edges = (0..=mass.len()).map(|i| 500.0 + 100.0 * i as f64).collect();
        LengthHistogram {
            edges,
            mass: mass.to_vec(),
        }
    }

    #[test]
    fn single_frame_clip() {
        let c = aggregate_clip(&[700.0]).unwrap();
        assert_eq!(c.final_length_mm, 700.0);
        assert_eq!(c.n_kept, 1);
    }

    #[test]
    fn outlier_removed() {
        let mut v = vec![700.0; 9];
        v.push(1400.0);
        let c = aggregate_clip(&v).unwrap();
        assert_eq!(c.final_length_mm, 700.0);
        assert_eq!(c.n_kept, 9);
        assert!(!c.kept_mask[9]);
    }

    #[test]
    fn zero_variance_keeps_all() {
        let c = aggregate_clip(&[700.0; 3]).unwrap();
        assert_eq!((c.final_length_mm, c.n_kept), (700.0, 3));
        assert!(aggregate_clip(&[]).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = build_histogram(&[600.0, 600.0], 500.0, 1000.0, 5).unwrap();
        assert_eq!(h.mass, vec![0.0, 1.0, 0.0, 0.0, 0.0]);

        let centers: Vec<f64> = (0..20).map(|i| 512.5 + 25.0 * i as f64).collect();
        let h = build_histogram(&centers, 500.0, 1000.0, 20).unwrap();
        assert!(h.mass.iter().all(|&m| (m - 0.05).abs() < 1e-15));

        let h = build_histogram(&[400.0, 550.0, 1000.0, 950.0, 2000.0], 500.0, 1000.0, 5).unwrap();
        assert_eq!(h.mass, vec![0.5, 0.0, 0.0, 0.0, 0.5]);
        assert!(build_histogram(&[100.0], 500.0, 1000.0, 5).is_err());
    }

    #[test]
    fn identical_histograms_compare_to_zero() {
        let p = hist(&[0.2, 0.3, 0.5]);
        let c = compare_histograms(&p, &p).unwrap();
        assert_eq!((c.bias_mm, c.emd_mm, c.rmsd), (0.0, 0.0, 0.0));
        assert!(c.kl.abs() < 1e-7);
    }

    #[test]
    fn adjacent_point_masses() {
        let c = compare_histograms(&hist(&[1.0, 0.0]), &hist(&[0.0, 1.0])).unwrap();
        assert!((c.emd_mm - 100.0).abs() < 1e-12);
        assert!((c.bias_mm + 100.0).abs() < 1e-12);
    }

    #[test]
    fn kl_example() {
        let c = compare_histograms(&hist(&[0.5, 0.5]), &hist(&[0.25, 0.75])).unwrap();
        let direct = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((c.kl - direct).abs() < 1e-8);
        assert!((c.kl - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn mismatched_edges_rejected() {
        assert!(compare_histograms(&hist(&[1.0]), &hist(&[0.5, 0.5])).is_err());
    }
}
