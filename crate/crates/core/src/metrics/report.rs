//! Dataset-level accumulation and reporting.

use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::training::derive_edges;

use super::f1::{aggregate, image_f1_curve, EdgeImage};
use super::{coastal_band, deviation_sum, edges_within, Confusion};

/// Coastal band half-width used for every metric.
pub const DEFAULT_BAND_RADIUS_M: f64 = 2000.0;

/// Probability at or above which a pixel is classified as land.
pub const SEG_THRESHOLD: f32 = 0.5;

/// Dataset metrics; `None` marks a value that could not be computed (no
/// coastline in the data, no coastline predicted, or a model without the
/// relevant head).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
    pub deviation_m: Option<f64>,
    pub deviation_px: Option<f64>,
    pub f1_ods: Option<f64>,
    pub f1_ois: Option<f64>,
    pub band_radius_m: f64,
    pub images: usize,
    /// Images without any ground-truth coastline.
    pub skipped: usize,
    #[serde(skip)]
    pub f1_curve: Vec<(f32, f64)>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "accuracy,miou,deviation_m,deviation_px,f1_ods,f1_ois,band_radius_m,images,skipped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            cell(self.accuracy),
            cell(self.miou),
            cell(self.deviation_m),
            cell(self.deviation_px),
            cell(self.f1_ods),
            cell(self.f1_ois),
            self.band_radius_m,
            self.images,
            self.skipped
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        writeln!(w, "{}", self.csv_row())?;
        Ok(())
    }

    /// Threshold sweep behind the F1 scores.
    pub fn write_f1_curve<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "threshold,mean_f1")?;
        for (t, f) in &self.f1_curve {
            writeln!(w, "{t:.2},{f:.6}")?;
        }
        Ok(())
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("Accuracy (%)", cell(self.accuracy)),
            ("mIoU (%)", cell(self.miou)),
            ("Deviation (m)", cell(self.deviation_m)),
            ("Deviation (px)", cell(self.deviation_px)),
            ("F1 ODS (%)", cell(self.f1_ods)),
            ("F1 OIS (%)", cell(self.f1_ois)),
        ];
        writeln!(f, "band radius {} m, {} images ({} without coastline)", self.band_radius_m, self.images, self.skipped)?;
        for (name, value) in rows {
            writeln!(f, "  {name:<16}{value:>12}")?;
        }
        Ok(())
    }
}

/// Accumulates per-image results; segmentation counts and deviations are
/// pooled over all band pixels, F1 is averaged per image.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pixel_size_m: f64,
    band_radius_m: f64,
    match_radius_px: f64,
    thresholds: Vec<f32>,
    confusion: Confusion,
    seg_seen: bool,
    deviation: (f64, usize),
    curves: Vec<Vec<f64>>,
    edge_seen: bool,
    images: usize,
    skipped: usize,
}

impl Evaluator {
    pub fn new(pixel_size_m: f64) -> Self {
        Self::with_settings(pixel_size_m, DEFAULT_BAND_RADIUS_M, super::DEFAULT_MATCH_RADIUS, super::default_thresholds())
    }

    pub fn with_settings(pixel_size_m: f64, band_radius_m: f64, match_radius_px: f64, thresholds: Vec<f32>) -> Self {
        Self {
            pixel_size_m,
            band_radius_m,
            match_radius_px,
            thresholds,
            confusion: Confusion::default(),
            seg_seen: false,
            deviation: (0.0, 0),
            curves: Vec::new(),
            edge_seen: false,
            images: 0,
            skipped: 0,
        }
    }

    pub fn band_radius_px(&self) -> f64 {
        self.band_radius_m / self.pixel_size_m
    }

    /// Adds one image. `seg_prob` is the land probability, `edge_prob` the
    /// coastline probability; either may be absent.
    pub fn add(&mut self, gt_mask: &Mask, seg_prob: Option<&[f32]>, edge_prob: Option<&[f32]>) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidArgument("F1 evaluation needs at least one threshold".into()));
        }
        let (h, w) = gt_mask.dims();
        for p in [seg_prob, edge_prob].into_iter().flatten() {
            if p.len() != h * w {
                return Err(Error::shape("evaluate", format!("{} values for a {h}x{w} image", p.len())));
            }
        }
        self.images += 1;
        self.seg_seen |= seg_prob.is_some();
        self.edge_seen |= edge_prob.is_some();
        let gt_edge = derive_edges(gt_mask);
        let band = coastal_band(&gt_edge, self.band_radius_px());
        if band.is_empty() {
            self.skipped += 1;
            return Ok(());
        }
        if let Some(p) = seg_prob {
            let pred = Mask::new(h, w, p.iter().map(|&v| v >= SEG_THRESHOLD).collect())?;
            self.confusion.merge(&Confusion::from_masks(&pred, gt_mask, &band)?);
            let (sum, n) = deviation_sum(&edges_within(&pred, &band), &gt_edge)?;
            self.deviation.0 += sum;
            self.deviation.1 += n;
        }
        if let Some(p) = edge_prob {
            let image = EdgeImage { prob: p, gt_edge: &gt_edge, band: &band };
            if let Some(c) = image_f1_curve(&image, self.match_radius_px, &self.thresholds)? {
                self.curves.push(c);
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> MetricsReport {
        let seg = self.seg_seen.then(|| self.confusion.scores()).flatten();
        let dev_px = (self.seg_seen && self.deviation.1 > 0).then(|| self.deviation.0 / self.deviation.1 as f64);
        let f1 = self.edge_seen.then(|| aggregate(&self.curves, &self.thresholds, self.skipped)).flatten();
        MetricsReport {
            accuracy: seg.map(|s| s.accuracy),
            miou: seg.map(|s| s.miou),
            deviation_m: dev_px.map(|d| d * self.pixel_size_m),
            deviation_px: dev_px,
            f1_ods: f1.as_ref().map(|f| f.ods),
            f1_ois: f1.as_ref().map(|f| f.ois),
            band_radius_m: self.band_radius_m,
            images: self.images,
            skipped: self.skipped,
            f1_curve: f1.map(|f| f.curve).unwrap_or_default(),
        }
    }
}
