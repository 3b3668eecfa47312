//! Effective receptive field and attention statistics.
//!
//! The ERF of output pixel `(i, j)` is the mean over input samples of the
//! absolute input gradient of that pixel's logit, summed over input
//! channels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_pgm, RasFile, RasterData};
use crate::model::{Merging, Mode, Model};
use crate::rng::Rng;
use crate::synthdata::Tile;
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{batch_input, model_dem, predict_tiles};


#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    #[default]
    Seg,
    Edge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    pub center: (usize, usize),
    pub n_samples: usize,
    /// Mean absolute input gradient, row-major.
    pub values: Vec<f64>,
}

impl ErfMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// `E / max(E)`; all zeros when the map is identically zero.
    pub fn normalized(&self) -> Vec<f64> {
        let m = self.max();
        self.values.iter().map(|&v| if m > 0.0 { v / m } else { 0.0 }).collect()
    }

    /// Number of pixels whose value exceeds `fraction * max`.
    pub fn support(&self, fraction: f64) -> usize {
        let cut = fraction * self.max();
        self.values.iter().filter(|&&v| v > cut && v > 0.0).count()
    }

    /// Inclusive `(y0, x0, y1, x1)` of the `side x side` box centred on the
    /// output pixel, clipped to the raster.
    pub fn centered_box(&self, side: usize) -> (usize, usize, usize, usize) {
        let half = side / 2;
        let (i, j) = self.center;
        (i.saturating_sub(half), j.saturating_sub(half), (i + half).min(self.height - 1), (j + half).min(self.width - 1))
    }

    /// Count of nonzero entries outside the centred `side x side` box.
    pub fn nonzero_outside(&self, side: usize) -> usize {
        let (y0, x0, y1, x1) = self.centered_box(side);
        self.values
            .iter()
            .enumerate()
            .filter(|(k, &v)| {
                let (y, x) = (k / self.width, k % self.width);
                v != 0.0 && (y < y0 || y > y1 || x < x0 || x > x1)
            })
            .count()
    }

    /// Writes the raw map as a one-channel `f32` RAS1 raster.
    pub fn write_raster(&self, path: &Path) -> Result<()> {
        RasFile {
            channels: 1,
            height: self.height as u32,
            width: self.width as u32,
            data: RasterData::F32(self.values.iter().map(|&v| v as f32).collect()),
        }
        .write(path)
    }

    /// Log-scaled preview: `E / max(E)` mapped from `[1e-4, 1]` onto
    /// `0..=255`, with the given box drawn as a mid-grey outline.
    pub fn preview(&self, rf_side: usize) -> Vec<u8> {
        const DECADES: f64 = 4.0;
        let mut px: Vec<u8> = self
            .normalized()
            .iter()
            .map(|&v| {
                let l = (v.max(10f64.powf(-DECADES)).log10() + DECADES) / DECADES;
                if v > 0.0 { (l * 255.0).round() as u8 } else { 0 }
            })
            .collect();
        let (y0, x0, y1, x1) = self.centered_box(rf_side);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if y == y0 || y == y1 || x == x0 || x == x1 {
                    px[y * self.width + x] = 128;
                }
            }
        }
        px
    }

    pub fn write_pgm(&self, path: &Path, rf_side: usize) -> Result<()> {
        write_pgm(path, self.height, self.width, &self.preview(rf_side))
    }
}

/// ERF of an arbitrary differentiable map from `[1, C, H, W]` inputs to a
/// `[1, 1, H, W]` output.
///
/// `f` records the map on the tape given the input variable and the sample
/// index.
pub fn gradient_erf<F>(inputs: &[Tensor], center: (usize, usize), mut f: F) -> Result<ErfMap>
where
    F: FnMut(&mut Tape, &Tensor, usize) -> Result<(Var, Var)>,
{
    let first = inputs.first().ok_or_else(|| Error::InvalidArgument("ERF needs at least one sample".into()))?;
    let (_, _, h, w) = first.dims4()?;
    let (i, j) = center;
    if i >= h || j >= w {
        return Err(Error::InvalidArgument(format!("ERF centre ({i}, {j}) outside {h}x{w}")));
    }
    let mut acc = vec![0.0f64; h * w];
    for (s, input) in inputs.iter().enumerate() {
        let (n, c, hh, ww) = input.dims4()?;
        if n != 1 || hh != h || ww != w {
            return Err(Error::shape("erf", format!("sample {s} has shape {:?}", input.shape())));
        }
        let mut tape = Tape::new();
        let (x, out) = f(&mut tape, input, s)?;
        let (on, oc, oh, ow) = tape.value(out).dims4()?;
        if on != 1 || oc != 1 || oh != h || ow != w {
            return Err(Error::shape("erf", format!("output shape {:?}", tape.value(out).shape())));
        }
        let root = tape.pick(out, i * w + j)?;
        tape.backward(root)?;
        let g = tape.grad(x).ok_or_else(|| Error::InvalidArgument("input is not gradient-tracked".into()))?;
        for ch in 0..c {
            for (a, v) in acc.iter_mut().zip(&g.data()[ch * h * w..(ch + 1) * h * w]) {
                *a += v.abs() as f64;
            }
        }
    }
    let n = inputs.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(ErfMap { height: h, width: w, center, n_samples: inputs.len(), values: acc })
}

/// ERF of one of the model's merged output logits, in inference mode, over
/// the given tiles.
pub fn effective_receptive_field(model: &Model, tiles: &[Tile], center: (usize, usize), head: OutputHead) -> Result<ErfMap> {
    let refs: Vec<&Tile> = tiles.iter().collect();
    let inputs = refs.iter().map(|t| batch_input(&[t])).collect::<Result<Vec<_>>>()?;
    gradient_erf(&inputs, center, |tape, input, s| {
        let dem = model_dem(model, &refs[s..=s])?;
        let out = model.forward(tape, input, dem.as_ref(), Mode::Eval, true)?;
        let logits = match head {
            OutputHead::Seg => out.seg_logits,
            OutputHead::Edge => out.edge_logits,
        };
        Ok((out.input, logits))
    })
}

/// Draws `n` tiles from `pool`: a seeded permutation, repeated as needed.
pub fn sample_tiles(pool: &[Tile], n: usize, seed: u64) -> Result<Vec<Tile>> {
    if pool.is_empty() || n == 0 {
        return Err(Error::InvalidArgument("ERF sampling needs a non-empty pool and n >= 1".into()));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    Ok((0..n).map(|k| pool[order[k % pool.len()]].clone()).collect())
}

/// Mean attention weight per level over three pixel populations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelAttention {
    pub all: Vec<f64>,
    /// Pixels of tiles without any ground-truth coastline; `None` if there
    /// are no such tiles.
    pub edge_free: Option<Vec<f64>>,
    /// Ground-truth coastline pixels; `None` if there are none.
    pub gt_edge: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionStats {
    pub seg: LevelAttention,
    pub edge: LevelAttention,
}

#[derive(Default)]
struct Accum {
    sums: [Vec<f64>; 3],
    counts: [usize; 3],
}

impl Accum {
    fn add(&mut self, bucket: usize, level: usize, levels: usize, v: f64) {
        if self.sums[bucket].is_empty() {
            self.sums[bucket] = vec![0.0; levels];
        }
        self.sums[bucket][level] += v;
    }

    fn finish(self) -> LevelAttention {
        let mean = |b: usize| (self.counts[b] > 0).then(|| self.sums[b].iter().map(|s| s / self.counts[b] as f64).collect());
        LevelAttention { all: mean(0).unwrap_or_default(), edge_free: mean(1), gt_edge: mean(2) }
    }
}

fn accumulate(acc: &mut Accum, attn: &[Tensor], tile: &Tile) {
    let levels = attn.len();
    let edge_free = tile.edge.is_empty();
    let edge = tile.edge.data();
    for p in 0..edge.len() {
        let buckets = [true, edge_free, edge[p]];
        for (b, &on) in buckets.iter().enumerate() {
            if !on {
                continue;
            }
            acc.counts[b] += 1;
            for (k, a) in attn.iter().enumerate() {
                acc.add(b, k, levels, a.data()[p] as f64);
            }
        }
    }
}

/// Per-level mean attention of both heads over `tiles`.
pub fn attention_stats(model: &Model, tiles: &[Tile]) -> Result<AttentionStats> {
    if model.config().merging != Merging::Attention {
        return Err(Error::InvalidArgument("attention statistics need a model with attention merging".into()));
    }
    if tiles.is_empty() {
        return Err(Error::InvalidArgument("attention statistics need at least one tile".into()));
    }
    let (mut seg, mut edge) = (Accum::default(), Accum::default());
    predict_tiles(model, tiles, |_, tile, bundle| {
        accumulate(&mut seg, &bundle.attn_seg, tile);
        accumulate(&mut edge, &bundle.attn_edge, tile);
        Ok(())
    })?;
    Ok(AttentionStats { seg: seg.finish(), edge: edge.finish() })
}
