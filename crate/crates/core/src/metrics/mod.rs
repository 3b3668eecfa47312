//! Evaluation restricted to the coastal band: pixel accuracy, mIoU, mean
//! coastline deviation and edge F1 at optimal dataset / image scale.
//!
//! Accuracy, mIoU and F1 are reported in percent.

pub mod edt;
mod f1;
mod report;

pub use f1::{default_thresholds, f1_ods_ois, image_f1_curve, EdgeImage, F1Scores, DEFAULT_MATCH_RADIUS};
pub use report::{Evaluator, MetricsReport, DEFAULT_BAND_RADIUS_M};

use crate::error::{Error, Result};
use crate::raster::Mask;
use edt::{distance_to, squared_edt};

fn check_dims(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Pixels within Euclidean distance `radius_px` of a ground-truth edge
/// pixel. Empty when there are no edge pixels; callers treat that as "no
/// coastline in this image".
pub fn coastal_band(gt_edge: &Mask, radius_px: f64) -> Mask {
    let (h, w) = gt_edge.dims();
    if gt_edge.is_empty() {
        return Mask::filled(h, w, false);
    }
    let r2 = radius_px * radius_px;
    let d2 = squared_edt(gt_edge);
    Mask::new(h, w, d2.iter().map(|&v| v as f64 <= r2).collect()).expect("same size")
}

/// Confusion counts with land as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub land_land: u64,
    pub land_water: u64,
    pub water_land: u64,
    pub water_water: u64,
}

impl Confusion {
    /// Counts `(predicted, actual)` pairs over band pixels.
    pub fn from_masks(pred: &Mask, gt: &Mask, band: &Mask) -> Result<Self> {
        check_dims("seg_metrics", pred, gt)?;
        check_dims("seg_metrics", pred, band)?;
        let mut c = Confusion::default();
        for ((&p, &g), _) in pred.data().iter().zip(gt.data()).zip(band.data()).filter(|(_, &b)| b) {
            match (p, g) {
                (true, true) => c.land_land += 1,
                (true, false) => c.land_water += 1,
                (false, true) => c.water_land += 1,
                (false, false) => c.water_water += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.land_land + self.land_water + self.water_land + self.water_water
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.land_land += other.land_land;
        self.land_water += other.land_water;
        self.water_land += other.water_land;
        self.water_water += other.water_water;
    }

    /// Accuracy and mIoU in percent; `None` for an empty count. A class that
    /// appears in neither prediction nor ground truth scores IoU 1.
    pub fn scores(&self) -> Option<SegScores> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let iou = |inter: u64, union: u64| if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let land = iou(self.land_land, self.land_land + self.land_water + self.water_land);
        let water = iou(self.water_water, self.water_water + self.land_water + self.water_land);
        Some(SegScores {
            accuracy: 100.0 * (self.land_land + self.water_water) as f64 / total as f64,
            iou_land: 100.0 * land,
            iou_water: 100.0 * water,
            miou: 50.0 * (land + water),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegScores {
    pub accuracy: f64,
    pub iou_land: f64,
    pub iou_water: f64,
    pub miou: f64,
}

/// Accuracy and mIoU of a predicted land mask inside `band`.
pub fn seg_metrics(pred: &Mask, gt: &Mask, band: &Mask) -> Result<SegScores> {
    Confusion::from_masks(pred, gt, band)?
        .scores()
        .ok_or_else(|| Error::InvalidArgument("segmentation metrics over an empty band".into()))
}

/// Boundary pixels of `mask` inside `band`, comparing only neighbours that
/// are themselves inside the band. Content outside the band therefore has
/// no influence.
pub fn edges_within(mask: &Mask, band: &Mask) -> Mask {
    let (h, w) = mask.dims();
    Mask::from_fn(h, w, |y, x| {
        if !band.get(y, x) {
            return false;
        }
        let c = mask.get(y, x);
        let differs = |ny: usize, nx: usize| band.get(ny, nx) && mask.get(ny, nx) != c;
        (y > 0 && differs(y - 1, x))
            || (y + 1 < h && differs(y + 1, x))
            || (x > 0 && differs(y, x - 1))
            || (x + 1 < w && differs(y, x + 1))
    })
}

/// Sum and count of distances (in pixels) from each predicted edge pixel to
/// the nearest ground-truth edge pixel.
pub fn deviation_sum(pred_edge: &Mask, gt_edge: &Mask) -> Result<(f64, usize)> {
    check_dims("avg_deviation", pred_edge, gt_edge)?;
    if gt_edge.is_empty() {
        return Err(Error::InvalidArgument("deviation against an empty coastline".into()));
    }
    let d = distance_to(gt_edge);
    let mut sum = 0.0;
    let mut n = 0;
    for (i, _) in pred_edge.data().iter().enumerate().filter(|(_, &p)| p) {
        sum += d[i];
        n += 1;
    }
    Ok((sum, n))
}

/// Mean distance from predicted to ground-truth coastline pixels in metres.
/// `Ok(None)` means no coastline was predicted. Not symmetric in its
/// arguments.
pub fn avg_deviation(pred_edge: &Mask, gt_edge: &Mask, pixel_size_m: f64) -> Result<Option<f64>> {
    let (sum, n) = deviation_sum(pred_edge, gt_edge)?;
    Ok((n > 0).then(|| sum / n as f64 * pixel_size_m))
}
