//! Procedural SAR-like coastline scenes.
//!
//! A scene is built from a seeded fractal height field (diamond-square
//! midpoint displacement) plus a linear trend, thresholded at the quantile
//! that yields the requested land fraction. Backscatter is drawn per class
//! and channel in dB, converted to intensity, multiplied by Gamma speckle and
//! converted back to dB. Icebergs are bright discs stamped into the sea
//! areas of the SAR channels only; the mask still labels them sea.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::edt;
use crate::raster::{Mask, Raster};
use crate::rng::Rng;
use crate::training::derive_edges;

/// DEM cells cover `DEM_FACTOR x DEM_FACTOR` scene pixels.
pub const DEM_FACTOR: usize = 16;
const DB_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    /// Square scene side in pixels; must be a multiple of 32.
    pub size: usize,
    pub land_fraction_range: [f64; 2],
    /// Displacement decay per octave of the fractal field, in (0, 1].
    /// Larger values give rougher coastlines.
    pub roughness: f64,
    /// Amplitude of the linear trend added to the fractal field.
    pub trend: f64,
    /// Speckle equivalent number of looks.
    pub looks: u32,
    pub iceberg_count: [usize; 2],
    pub iceberg_radius: [f64; 2],
    /// Mean sea backscatter per channel (HH, HV) in dB.
    pub sea_mean_db: [f64; 2],
    /// Standard deviation of the per-scene shift of the class means, in dB.
    pub mean_spread_db: [f64; 2],
    /// Land minus sea mean backscatter per channel, in dB.
    pub contrast_db: [f64; 2],
    /// Amplitude of smooth within-class backscatter texture, in dB.
    pub texture_db: f64,
    pub with_dem: bool,
    /// Elevation gain per pixel of distance from the sea, in metres.
    pub dem_slope_m: f64,
    pub dem_noise_m: f64,
    pub pixel_size_m: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            size: 96,
            land_fraction_range: [0.2, 0.8],
            roughness: 0.5,
            trend: 1.5,
            looks: 4,
            iceberg_count: [0, 4],
            iceberg_radius: [1.0, 3.0],
            sea_mean_db: [-17.0, -25.0],
            mean_spread_db: [1.5, 1.5],
            contrast_db: [7.0, 6.0],
            texture_db: 1.0,
            with_dem: false,
            dem_slope_m: 8.0,
            dem_noise_m: 5.0,
            pixel_size_m: 40.0,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("generator params: {m}")));
        let [f0, f1] = self.land_fraction_range;
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return bad("size must be a positive multiple of 32");
        }
        if !(0.0..=1.0).contains(&f0) || !(0.0..=1.0).contains(&f1) || f0 > f1 {
            return bad("land_fraction_range must be ordered within [0, 1]");
        }
        if !(self.roughness > 0.0 && self.roughness <= 1.0) {
            return bad("roughness must lie in (0, 1]");
        }
        if self.looks < 1 {
            return bad("looks must be at least 1");
        }
        if self.iceberg_count[0] > self.iceberg_count[1]
            || self.iceberg_radius[0] > self.iceberg_radius[1]
            || self.iceberg_radius[0] < 0.0
        {
            return bad("iceberg ranges must be ordered and non-negative");
        }
        if self.pixel_size_m <= 0.0 || self.mean_spread_db.iter().any(|s| *s < 0.0) || self.texture_db < 0.0 {
            return bad("spreads and pixel size must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// HH and HV backscatter in dB.
    pub sar: Raster,
    pub mask: Mask,
    pub edge: Mask,
    /// Elevation in metres at `1 / DEM_FACTOR` resolution.
    pub dem: Option<Raster>,
    /// Stamped iceberg footprints (all sea in `mask`).
    pub icebergs: Mask,
    pub pixel_size_m: f64,
    pub seed: u64,
}

/// A training or evaluation crop of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub origin: (usize, usize),
    pub sar: Raster,
    pub mask: Mask,
    pub edge: Mask,
    pub dem: Option<Raster>,
}

impl Scene {
    pub fn as_tile(&self) -> Tile {
        Tile {
            origin: (0, 0),
            sar: self.sar.clone(),
            mask: self.mask.clone(),
            edge: self.edge.clone(),
            dem: self.dem.clone(),
        }
    }
}

/// Diamond-square fractal on a `(2^m + 1)`-sided grid, cropped to `size`.
fn fractal_field(rng: &mut Rng, size: usize, decay: f64) -> Vec<f64> {
    let mut n = 1;
    while n + 1 < size {
        n *= 2;
    }
    let side = n + 1;
    let mut g = vec![0.0; side * side];
    for &(y, x) in &[(0, 0), (0, n), (n, 0), (n, n)] {
        g[y * side + x] = rng.normal();
    }
    let mut step = n;
    let mut amp = 1.0;
    while step > 1 {
        let half = step / 2;
        for y in (half..side).step_by(step) {
            for x in (half..side).step_by(step) {
                let avg = (g[(y - half) * side + x - half]
                    + g[(y - half) * side + x + half]
                    + g[(y + half) * side + x - half]
                    + g[(y + half) * side + x + half])
                    / 4.0;
                g[y * side + x] = avg + amp * rng.normal();
            }
        }
        for y in (0..side).step_by(half) {
            for x in ((y + half) % step..side).step_by(step) {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                if y >= half {
                    sum += g[(y - half) * side + x];
                    cnt += 1.0;
                }
                if y + half < side {
                    sum += g[(y + half) * side + x];
                    cnt += 1.0;
                }
                if x >= half {
                    sum += g[y * side + x - half];
                    cnt += 1.0;
                }
                if x + half < side {
                    sum += g[y * side + x + half];
                    cnt += 1.0;
                }
                g[y * side + x] = sum / cnt + amp * rng.normal();
            }
        }
        step = half;
        amp *= decay;
    }
    (0..size * size).map(|i| g[(i / size) * side + i % size]).collect()
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in v.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

/// Marks the `land` highest-valued pixels; ties broken by index.
fn top_k_mask(field: &[f64], size: usize, land: usize) -> Mask {
    let mut order: Vec<usize> = (0..field.len()).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut data = vec![false; field.len()];
    for &i in &order[..land] {
        data[i] = true;
    }
    Mask::new(size, size, data).expect("square field")
}

pub fn generate_scene(params: &GenParams, seed: u64) -> Result<Scene> {
    params.validate()?;
    let size = params.size;
    let n = size * size;
    let root = Rng::new(seed);

    // Land mask.
    let mut rng = root.fork(1);
    let mut field = fractal_field(&mut rng, size, params.roughness);
    standardize(&mut field);
    let angle = rng.uniform() * std::f64::consts::TAU;
    let (ca, sa) = (angle.cos(), angle.sin());
    let c = (size as f64 - 1.0) / 2.0;
    for (i, v) in field.iter_mut().enumerate() {
        let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
        *v += params.trend * (x * ca + y * sa) / (size as f64 / 2.0);
    }
    let fraction = rng.uniform_range(params.land_fraction_range[0], params.land_fraction_range[1]);
    let mask = top_k_mask(&field, size, (fraction * n as f64).round() as usize);
    let edge = derive_edges(&mask);

    // Class means per channel.
    let mut rng = root.fork(2);
    let mut sea_mean = [0.0; 2];
    let mut land_mean = [0.0; 2];
    for ch in 0..2 {
        sea_mean[ch] = params.sea_mean_db[ch] + params.mean_spread_db[ch] * rng.normal();
        land_mean[ch] = sea_mean[ch] + params.contrast_db[ch];
    }

    // Icebergs: discs restricted to sea pixels.
    let mut rng = root.fork(3);
    let mut icebergs = Mask::filled(size, size, false);
    let count = params.iceberg_count[0] + rng.below(params.iceberg_count[1] - params.iceberg_count[0] + 1);
    let sea_pixels: Vec<(usize, usize)> = mask.not().points().collect();
    if !sea_pixels.is_empty() {
        for _ in 0..count {
            let (cy, cx) = sea_pixels[rng.below(sea_pixels.len())];
            let r = rng.uniform_range(params.iceberg_radius[0], params.iceberg_radius[1]);
            let ri = r.ceil() as isize;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    let (y, x) = (cy as isize + dy, cx as isize + dx);
                    if y < 0 || x < 0 || y >= size as isize || x >= size as isize {
                        continue;
                    }
                    let (y, x) = (y as usize, x as usize);
                    if ((dy * dy + dx * dx) as f64) <= r * r && !mask.get(y, x) {
                        icebergs.set(y, x, true);
                    }
                }
            }
        }
    }

    // Backscatter with texture and speckle.
    let mut rng = root.fork(4);
    let mut sar = Raster::zeros(2, size, size);
    for ch in 0..2 {
        let mut texture = vec![0.0; n];
        if params.texture_db > 0.0 {
            texture = fractal_field(&mut rng, size, 0.6);
            standardize(&mut texture);
        }
        let plane = sar.channel_mut(ch);
        for i in 0..n {
            let (y, x) = (i / size, i % size);
            let bright = mask.get(y, x) || icebergs.get(y, x);
            let mean_db = if bright { land_mean[ch] } else { sea_mean[ch] } + params.texture_db * texture[i];
            let intensity = 10f64.powf(mean_db / 10.0) * rng.gamma_looks(params.looks);
            plane[i] = (10.0 * intensity.max(DB_FLOOR).log10()) as f32;
        }
    }

    let dem = if params.with_dem { Some(make_dem(&mask, params, &mut root.fork(5))) } else { None };

    Ok(Scene { sar, mask, edge, dem, icebergs, pixel_size_m: params.pixel_size_m, seed })
}

/// Elevation grows with distance from the sea; block means at 1/16
/// resolution plus noise on blocks that contain land.
fn make_dem(mask: &Mask, params: &GenParams, rng: &mut Rng) -> Raster {
    let size = mask.width();
    let sea = mask.not();
    let dist = edt::distance_to(&sea);
    let cells = size / DEM_FACTOR;
    let mut out = Raster::zeros(1, cells, cells);
    for cy in 0..cells {
        for cx in 0..cells {
            let mut sum = 0.0;
            let mut land = 0;
            for y in cy * DEM_FACTOR..(cy + 1) * DEM_FACTOR {
                for x in cx * DEM_FACTOR..(cx + 1) * DEM_FACTOR {
                    if mask.get(y, x) {
                        // No sea anywhere: distance to the scene border instead.
                        let d = dist[y * size + x].min(size as f64);
                        sum += d * params.dem_slope_m;
                        land += 1;
                    }
                }
            }
            let noise = rng.normal() * params.dem_noise_m;
            if land > 0 {
                let mean = sum / (DEM_FACTOR * DEM_FACTOR) as f64;
                out.data_mut()[cy * cells + cx] = (mean + noise).max(0.0) as f32;
            }
        }
    }
    out
}

/// Tile offsets along one axis: regular stride, with the last tile anchored
/// to the far edge so every pixel is covered.
fn offsets(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = vec![0];
    while out[out.len() - 1] + tile < extent {
        let next = (out[out.len() - 1] + stride).min(extent - tile);
        out.push(next);
    }
    out
}

/// Cuts a scene into square tiles. Edges are recomputed from the cropped
/// mask. With a DEM present, offsets and size must align to the DEM grid.
pub fn tile(scene: &Scene, tile_size: usize, overlap: f64) -> Result<Vec<Tile>> {
    let (h, w) = scene.mask.dims();
    if tile_size == 0 || tile_size > h || tile_size > w {
        return Err(Error::InvalidArgument(format!("tile {tile_size} does not fit a {h}x{w} scene")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap {overlap} outside [0, 1)")));
    }
    let stride = ((tile_size as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut tiles = Vec::new();
    for &y in &offsets(h, tile_size, stride) {
        for &x in &offsets(w, tile_size, stride) {
            let dem = match &scene.dem {
                None => None,
                Some(d) => {
                    if y % DEM_FACTOR != 0 || x % DEM_FACTOR != 0 || !tile_size.is_multiple_of(DEM_FACTOR) {
                        return Err(Error::InvalidArgument(format!(
                            "tile at ({y}, {x}) of size {tile_size} is not aligned to the DEM grid"
                        )));
                    }
                    let c = tile_size / DEM_FACTOR;
                    Some(d.crop(y / DEM_FACTOR, x / DEM_FACTOR, c, c))
                }
            };
            let mask = scene.mask.crop(y, x, tile_size, tile_size);
            tiles.push(Tile {
                origin: (y, x),
                sar: scene.sar.crop(y, x, tile_size, tile_size),
                edge: derive_edges(&mask),
                mask,
                dem,
            });
        }
    }
    Ok(tiles)
}
