use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SobelParams {
    pub dilation_radius: usize,
    /// Roberts magnitude above which a pixel of the dilated map is an edge.
    pub roberts_threshold: f64,
}

impl Default for SobelParams {
    fn default() -> Self {
        Self { dilation_radius: 2, roberts_threshold: 0.0 }
    }
}

fn clamp(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Sobel gradient magnitude with replicate padding.
///
/// Terms are grouped symmetrically so that the result commutes exactly with
/// quarter turns and mirrors of the input.
pub fn sobel_magnitude(img: &[f32], height: usize, width: usize) -> Vec<f64> {
    let at = |y: usize, x: usize, dy: isize, dx: isize| {
        img[clamp(y as isize + dy, height) * width + clamp(x as isize + dx, width)] as f64
    };
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let col = |d| (at(y, x, -1, d) + at(y, x, 1, d)) + 2.0 * at(y, x, 0, d);
            let row = |d| (at(y, x, d, -1) + at(y, x, d, 1)) + 2.0 * at(y, x, d, 0);
            let gx = col(1) - col(-1);
            let gy = row(1) - row(-1);
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Otsu threshold over a 256-bin histogram spanning `[min, max]`.
/// Values strictly above the returned threshold form the foreground.
/// Returns `None` when all values are equal.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    let scale = OTSU_BINS as f64 / (hi - lo);
    let bin = |v: f64| (((v - lo) * scale) as usize).min(OTSU_BINS - 1);
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[bin(v)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (0, -1.0);
    for (i, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let d = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * d * d;
        if between > best_var {
            best_var = between;
            best = i;
        }
    }
    // Upper edge of the last background bin.
    Some(lo + (best + 1) as f64 / scale)
}

/// Binary dilation by a disc of the given radius; pixels outside the raster
/// contribute nothing.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    let (h, w) = mask.dims();
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> =
        (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).filter(|(dy, dx)| dy * dy + dx * dx <= r * r).collect();
    let mut out = Mask::filled(h, w, false);
    for (y, x) in mask.points() {
        for &(dy, dx) in &offsets {
            let (ty, tx) = (y as isize + dy, x as isize + dx);
            if ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w {
                out.set(ty as usize, tx as usize, true);
            }
        }
    }
    out
}

/// Roberts cross on a binary map with replicate padding.
///
/// The response of a pixel is the largest magnitude over the four 2x2
/// windows that contain it; foreground pixels whose response exceeds
/// `threshold` are edges. This keeps the output on the inner boundary and
/// equivariant under the dihedral group.
pub fn roberts_edges(mask: &Mask, threshold: f64) -> Mask {
    let (h, w) = mask.dims();
    let v = |y: isize, x: isize| if mask.get(clamp(y, h), clamp(x, w)) { 1.0f64 } else { 0.0 };
    Mask::from_fn(h, w, |y, x| {
        if !mask.get(y, x) {
            return false;
        }
        let (y, x) = (y as isize, x as isize);
        let mut best = 0.0f64;
        for (oy, ox) in [(-1, -1), (-1, 0), (0, -1), (0, 0)] {
            let (ty, tx) = (y + oy, x + ox);
            let g1 = v(ty, tx) - v(ty + 1, tx + 1);
            let g2 = v(ty, tx + 1) - v(ty + 1, tx);
            best = best.max((g1 * g1 + g2 * g2).sqrt());
        }
        best > threshold
    })
}

/// Sobel magnitude, Otsu binarisation, disc dilation, then Roberts edges of
/// the binary map.
pub fn sobel_pipeline(channel: &[f32], height: usize, width: usize, params: &SobelParams) -> Result<Mask> {
    if channel.len() != height * width {
        return Err(Error::shape("sobel_pipeline", format!("{} values for {height}x{width}", channel.len())));
    }
    if channel.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "sobel_pipeline" });
    }
    let mag = sobel_magnitude(channel, height, width);
    let Some(t) = otsu_threshold(&mag) else {
        return Ok(Mask::filled(height, width, false));
    };
    let binary = Mask::new(height, width, mag.iter().map(|&m| m > t).collect())?;
    Ok(roberts_edges(&dilate(&binary, params.dilation_radius), params.roberts_threshold))
}
