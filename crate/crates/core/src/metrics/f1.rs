//! Edge F1 at optimal dataset scale (ODS) and optimal image scale (OIS).
//!
//! At threshold `t` the predicted edge set is the band pixels with
//! probability `>= t`. A predicted pixel counts as a true positive when a
//! ground-truth edge pixel lies within the match radius; a ground-truth
//! pixel is recalled when a predicted pixel lies within the radius. Matching
//! is greedy, so one prediction may cover several ground-truth pixels.
//! Per-image F1 is `2PR / (P + R)`, zero when either side is empty.

use crate::error::{Error, Result};
use crate::raster::Mask;

use super::check_dims;
use super::edt::squared_edt;

pub const DEFAULT_MATCH_RADIUS: f64 = 2.0;

/// `0.01, 0.02, ..., 0.99`.
pub fn default_thresholds() -> Vec<f32> {
    (1..100).map(|i| i as f32 / 100.0).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct EdgeImage<'a> {
    pub prob: &'a [f32],
    pub gt_edge: &'a Mask,
    pub band: &'a Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Scores {
    pub ods: f64,
    pub ois: f64,
    /// Mean per-image F1 at each threshold, in percent.
    pub curve: Vec<(f32, f64)>,
    /// Images without ground-truth edges, left out of the averages.
    pub skipped: usize,
}

fn f1(tp_pred: usize, n_pred: usize, tp_gt: usize, n_gt: usize) -> f64 {
    if n_pred == 0 || n_gt == 0 || tp_pred == 0 || tp_gt == 0 {
        return 0.0;
    }
    let p = tp_pred as f64 / n_pred as f64;
    let r = tp_gt as f64 / n_gt as f64;
    2.0 * p * r / (p + r)
}

/// Disk offsets with `dy^2 + dx^2 <= r^2`.
fn disk(radius: f64) -> Vec<(i64, i64)> {
    let r = radius.floor() as i64;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= r2 {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// F1 (percent) of one image at every threshold. `None` when the image has
/// no ground-truth edge pixels.
pub fn image_f1_curve(image: &EdgeImage, match_radius: f64, thresholds: &[f32]) -> Result<Option<Vec<f64>>> {
    check_dims("f1_ods_ois", image.gt_edge, image.band)?;
    let (h, w) = image.gt_edge.dims();
    if image.prob.len() != h * w {
        return Err(Error::shape("f1_ods_ois", format!("{} probabilities for a {h}x{w} image", image.prob.len())));
    }
    if match_radius < 0.0 || match_radius.is_nan() {
        return Err(Error::InvalidArgument(format!("match radius {match_radius}")));
    }
    if image.gt_edge.is_empty() {
        return Ok(None);
    }
    let r2 = match_radius * match_radius;
    let d2 = squared_edt(image.gt_edge);
    let band = image.band.data();
    let offsets = disk(match_radius);

    // Predicted pixels: probability and whether they hit the ground truth.
    let preds: Vec<(f32, bool)> =
        (0..h * w).filter(|&i| band[i]).map(|i| (image.prob[i], d2[i] as f64 <= r2)).collect();
    // Ground-truth pixels: the best probability of a band pixel in reach.
    let reach: Vec<f32> = image
        .gt_edge
        .points()
        .map(|(y, x)| {
            offsets
                .iter()
                .filter_map(|&(dy, dx)| {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    (ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w).then(|| ny as usize * w + nx as usize)
                })
                .filter(|&i| band[i])
                .map(|i| image.prob[i])
                .fold(f32::NEG_INFINITY, f32::max)
        })
        .collect();

    Ok(Some(
        thresholds
            .iter()
            .map(|&t| {
                let n_pred = preds.iter().filter(|p| p.0 >= t).count();
                let tp_pred = preds.iter().filter(|p| p.0 >= t && p.1).count();
                let tp_gt = reach.iter().filter(|&&m| m >= t).count();
                100.0 * f1(tp_pred, n_pred, tp_gt, reach.len())
            })
            .collect(),
    ))
}

/// ODS is the best threshold for the mean over images, OIS the mean of each
/// image's best threshold; hence OIS >= ODS. `Ok(None)` when no image has
/// ground-truth edges.
pub fn f1_ods_ois(images: &[EdgeImage], match_radius: f64, thresholds: &[f32]) -> Result<Option<F1Scores>> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("F1 evaluation needs at least one threshold".into()));
    }
    let mut curves = Vec::new();
    let mut skipped = 0;
    for image in images {
        match image_f1_curve(image, match_radius, thresholds)? {
            Some(c) => curves.push(c),
            None => skipped += 1,
        }
    }
    Ok(aggregate(&curves, thresholds, skipped))
}

pub(crate) fn aggregate(curves: &[Vec<f64>], thresholds: &[f32], skipped: usize) -> Option<F1Scores> {
    if curves.is_empty() {
        return None;
    }
    let n = curves.len() as f64;
    let curve: Vec<(f32, f64)> = thresholds
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, curves.iter().map(|c| c[i]).sum::<f64>() / n))
        .collect();
    let ods = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let ois = curves.iter().map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / n;
    Some(F1Scores { ods, ois, curve, skipped })
}
