//! Image quality figures: PSNR, %contrast, coefficient of variation,
//! contrast recovery and voxelwise ensemble statistics.
//!
//! Standard deviations are population (divide by `n`) throughout.

use crate::error::{config, Error, Result};
use crate::geometry::Image;
use crate::phantom::TissueMasks;

/// Named masks for the regions the metrics refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSet {
    pub gm: Vec<bool>,
    pub wm: Vec<bool>,
    /// Small hot region used for contrast recovery.
    pub target: Vec<bool>,
    pub background: Vec<bool>,
}

impl RoiSet {
    pub fn from_masks(m: &TissueMasks) -> Self {
        Self {
            gm: m.gm.clone(),
            wm: m.wm.clone(),
            target: m.putamen.clone(),
            background: m.background.clone(),
        }
    }
}

fn roi_mean(img: &Image, mask: &[bool], name: &str) -> Result<f64> {
    if mask.len() != img.values().len() {
        return config(format!(
            "{name} mask has {} entries for {} voxels",
            mask.len(),
            img.values().len()
        ));
    }
    let (sum, n) = img
        .values()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        return config(format!("{name} mask is empty"));
    }
    Ok(sum / n as f64)
}

/// `10 log10(max(truth)^2 / MSE)`; `f64::INFINITY` when the images agree.
pub fn psnr(truth: &Image, est: &Image) -> Result<f64> {
    est.ensure_grid(truth.grid())?;
    let peak = truth.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::Domain("PSNR needs a non-zero reference".into()));
    }
    let mse = truth
        .values()
        .iter()
        .zip(est.values())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / truth.values().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// `(GM_est / WM_est - 1) / (GM_true / WM_true - 1) * 100`.
pub fn percent_contrast(est: &Image, truth: &Image, rois: &RoiSet) -> Result<f64> {
    est.ensure_grid(truth.grid())?;
    let ratio = |img: &Image| -> Result<f64> {
        let wm = roi_mean(img, &rois.wm, "white-matter")?;
        if wm <= 0.0 {
            return Err(Error::Domain(format!(
                "white-matter mean {wm} must be positive"
            )));
        }
        Ok(roi_mean(img, &rois.gm, "gray-matter")? / wm)
    };
    let truth_contrast = ratio(truth)? - 1.0;
    if truth_contrast == 0.0 {
        return Err(Error::Domain("reference has no gray/white contrast".into()));
    }
    Ok((ratio(est)? - 1.0) / truth_contrast * 100.0)
}

/// White-matter standard deviation over white-matter mean.
pub fn cv(est: &Image, rois: &RoiSet) -> Result<f64> {
    let mean = roi_mean(est, &rois.wm, "white-matter")?;
    if mean == 0.0 {
        return Err(Error::Domain("white-matter mean is zero".into()));
    }
    let (ss, n) = est
        .values()
        .iter()
        .zip(&rois.wm)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| {
            (s + (v - mean).powi(2), n + 1)
        });
    Ok((ss / n as f64).sqrt() / mean)
}

/// `mean_roi(est) / mean_roi(reference)`.
pub fn contrast_recovery(est: &Image, reference: &Image, roi: &[bool]) -> Result<f64> {
    est.ensure_grid(reference.grid())?;
    let r = roi_mean(reference, roi, "recovery")?;
    if r == 0.0 {
        return Err(Error::Domain("reference ROI mean is zero".into()));
    }
    Ok(roi_mean(est, roi, "recovery")? / r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: Image,
    /// `mean - truth`.
    pub bias: Image,
    pub std: Image,
    pub n: usize,
}

pub fn ensemble_stats(realizations: &[Image], truth: &Image) -> Result<EnsembleStats> {
    if realizations.len() < 2 {
        return config("ensemble statistics need at least two realizations");
    }
    let grid = truth.grid();
    for r in realizations {
        r.ensure_grid(grid)?;
    }
    let n = realizations.len() as f64;
    let len = grid.len();
    let mut mean = vec![0.0; len];
    for r in realizations {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; len];
    for r in realizations {
        for ((s, v), m) in var.iter_mut().zip(r.values()).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    let bias = mean
        .iter()
        .zip(truth.values())
        .map(|(m, t)| m - t)
        .collect();
    Ok(EnsembleStats {
        mean: Image::new(grid, mean)?,
        bias: Image::new(grid, bias)?,
        std: Image::new(grid, std)?,
        n: realizations.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    /// Sweep value (iteration count, step size or start step).
    pub sweep: f64,
    pub percent_contrast: f64,
    pub cv: f64,
}

/// Realization-averaged `(%contrast, CV)` per sweep point, in input order.
pub fn contrast_cv_curve(
    points: &[(f64, Vec<Image>)],
    truth: &Image,
    rois: &RoiSet,
) -> Result<Vec<CurvePoint>> {
    points
        .iter()
        .map(|(sweep, images)| {
            if images.is_empty() {
                return config(format!("sweep point {sweep} has no realizations"));
            }
            let mut pc = 0.0;
            let mut c = 0.0;
            for img in images {
                pc += percent_contrast(img, truth, rois)?;
                c += cv(img, rois)?;
            }
            let n = images.len() as f64;
            Ok(CurvePoint {
                sweep: *sweep,
                percent_contrast: pc / n,
                cv: c / n,
            })
        })
        .collect()
}

/// CV of a piecewise-linear curve at the given %contrast, clamped to the
/// end points. Points are sorted by %contrast first.
pub fn cv_at_contrast(curve: &[CurvePoint], contrast: f64) -> Result<f64> {
    if curve.is_empty() {
        return config("empty curve");
    }
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.percent_contrast, p.cv)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if contrast <= pts[0].0 {
        return Ok(pts[0].1);
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if contrast <= x1 {
            if x1 == x0 {
                return Ok(y0.min(y1));
            }
            return Ok(y0 + (y1 - y0) * (contrast - x0) / (x1 - x0));
        }
    }
    Ok(pts[pts.len() - 1].1)
}
