//! Mini-batch Adam training with per-epoch CSV logging.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Evaluator, MetricsReport};
use crate::model::{ChannelNorm, Mode, Model, PredictionBundle};
use crate::raster::Dihedral;
use crate::rng::Rng;
use crate::synthdata::Tile;
use crate::tensor::{adam_step, kernels::sigmoid, AdamState, Tape, Tensor};

use super::augment::{transform_tile, Augmentation};
use super::loss::{bundle_loss, total_loss, LossBreakdown, LossWeights};
use super::MultiscaleGt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub seed: u64,
    pub weights: LossWeights,
    pub augmentation: Augmentation,
    /// Ground sampling distance used for deviation in metres.
    pub pixel_size_m: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            augmentation: Augmentation::Full,
            pixel_size_m: 40.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
        }
        let w = self.weights;
        if [w.seg, w.edge, w.side].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::InvalidConfig("invalid optimizer hyperparameters".into()));
        }
        if !(self.pixel_size_m > 0.0) {
            return Err(Error::InvalidConfig("pixel size must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log. Metric columns are filled for validation
/// rows only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: LossRecord,
    pub accuracy: Option<f64>,
    pub miou: Option<f64>,
    pub deviation_px: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossRecord {
    pub total: f64,
    pub seg: f64,
    pub edge: f64,
    pub side: f64,
}

impl From<LossBreakdown> for LossRecord {
    fn from(b: LossBreakdown) -> Self {
        Self { total: b.total, seg: b.seg, edge: b.edge, side: b.side }
    }
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,split,loss_total,loss_seg,loss_edge,loss_side,accuracy,miou,deviation_px";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.epoch,
            self.split,
            self.loss.total,
            self.loss.seg,
            self.loss.edge,
            self.loss.side,
            opt(self.accuracy),
            opt(self.miou),
            opt(self.deviation_px)
        )
    }
}

/// `[N, C, H, W]` network input from tiles.
pub fn batch_input(tiles: &[&Tile]) -> Result<Tensor> {
    let items = tiles
        .iter()
        .map(|t| Tensor::new(vec![1, t.sar.channels(), t.sar.height(), t.sar.width()], t.sar.data().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// `[N, 1, H/16, W/16]` DEM batch, or `None` when the tiles carry none.
pub fn batch_dem(tiles: &[&Tile]) -> Result<Option<Tensor>> {
    if tiles.iter().all(|t| t.dem.is_none()) {
        return Ok(None);
    }
    let items = tiles
        .iter()
        .map(|t| {
            let d = t.dem.as_ref().ok_or_else(|| Error::InvalidArgument("some tiles lack a DEM".into()))?;
            Tensor::new(vec![1, 1, d.height(), d.width()], d.channel(0).to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items).map(Some)
}

pub(crate) fn model_dem(model: &Model, tiles: &[&Tile]) -> Result<Option<Tensor>> {
    if model.config().use_dem {
        batch_dem(tiles)?.map(Some).ok_or_else(|| Error::InvalidArgument("model needs DEM tiles".into()))
    } else {
        Ok(None)
    }
}

/// Fits input and DEM standardization on the training tiles.
pub fn fit_normalization(model: &mut Model, tiles: &[Tile]) {
    let channels = model.config().in_channels;
    model.input_norm = ChannelNorm::fit(channels, tiles.iter().map(|t| t.sar.data()));
    model.dem_norm = ChannelNorm::fit(1, tiles.iter().filter_map(|t| t.dem.as_ref()).map(|d| d.data()));
}

/// Per-tile probabilities from one batch prediction.
pub fn probabilities(logits: &Tensor) -> Vec<Vec<f32>> {
    let (n, _, h, w) = logits.dims4().expect("logits are rank 4");
    logits.data().chunks(h * w).take(n).map(|c| c.iter().map(|&v| sigmoid(v)).collect()).collect()
}

pub const EVAL_BATCH: usize = 4;

/// Runs the model over `tiles` in inference mode and calls `visit` with each
/// tile and its slice of the prediction.
pub fn predict_tiles(
    model: &Model,
    tiles: &[Tile],
    mut visit: impl FnMut(usize, &Tile, &PredictionBundle) -> Result<()>,
) -> Result<()> {
    for (chunk_index, chunk) in tiles.chunks(EVAL_BATCH).enumerate() {
        let refs: Vec<&Tile> = chunk.iter().collect();
        let bundle = model.predict(&batch_input(&refs)?, model_dem(model, &refs)?.as_ref())?;
        for (i, tile) in chunk.iter().enumerate() {
            let single = select(&bundle, i)?;
            visit(chunk_index * EVAL_BATCH + i, tile, &single)?;
        }
    }
    Ok(())
}

fn select(b: &PredictionBundle, i: usize) -> Result<PredictionBundle> {
    let pick = |ts: &[Tensor]| ts.iter().map(|t| t.sample(i)).collect::<Result<Vec<_>>>();
    Ok(PredictionBundle {
        seg_logits: b.seg_logits.sample(i)?,
        edge_logits: b.edge_logits.sample(i)?,
        side_seg: pick(&b.side_seg)?,
        side_edge: pick(&b.side_edge)?,
        attn_seg: pick(&b.attn_seg)?,
        attn_edge: pick(&b.attn_edge)?,
    })
}

/// Mean loss and metrics of `model` on `tiles`.
pub fn evaluate(
    model: &Model,
    tiles: &[Tile],
    weights: &LossWeights,
    pixel_size_m: f64,
) -> Result<(LossRecord, MetricsReport)> {
    evaluate_with(model, tiles, weights, Evaluator::new(pixel_size_m))
}

/// [`evaluate`] with caller-chosen metric settings.
pub fn evaluate_with(
    model: &Model,
    tiles: &[Tile],
    weights: &LossWeights,
    mut evaluator: Evaluator,
) -> Result<(LossRecord, MetricsReport)> {
    let mut loss = LossRecord::default();
    predict_tiles(model, tiles, |_, tile, pred| {
        let gt = MultiscaleGt::new(&tile.mask, model.config().levels)?;
        let l = bundle_loss(pred, std::slice::from_ref(&gt), model.config(), weights)?;
        loss.total += l.total;
        loss.seg += l.seg;
        loss.edge += l.edge;
        loss.side += l.side;
        let seg = &probabilities(&pred.seg_logits)[0];
        let edge = &probabilities(&pred.edge_logits)[0];
        evaluator.add(&tile.mask, Some(seg), Some(edge))
    })?;
    let n = tiles.len().max(1) as f64;
    let mean = LossRecord { total: loss.total / n, seg: loss.seg / n, edge: loss.edge / n, side: loss.side / n };
    Ok((mean, evaluator.finish()))
}

fn epoch_items(epoch: usize, n: usize, cfg: &TrainConfig) -> Vec<(usize, Dihedral)> {
    let mut rng = Rng::new(cfg.seed).fork(epoch as u64);
    let mut items: Vec<(usize, Dihedral)> = match cfg.augmentation {
        Augmentation::Off => (0..n).map(|i| (i, Dihedral(0))).collect(),
        Augmentation::Full => (0..n).flat_map(|i| Dihedral::ALL.into_iter().map(move |t| (i, t))).collect(),
        Augmentation::RandomDihedral => (0..n).map(|i| (i, Dihedral(rng.below(8) as u8))).collect(),
    };
    rng.shuffle(&mut items);
    items
}

/// Trains `model` in place and returns the per-epoch log. When `log` is
/// given, the CSV header and each row are written as they are produced.
/// Input standardization is fitted on `train` before the first step.
pub fn train(
    model: &mut Model,
    train: &[Tile],
    val: &[Tile],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for (name, set) in [("training", train), ("validation", val)] {
        if let Some(i) = set.iter().position(|t| !tile_is_finite(t)) {
            return Err(Error::InvalidArgument(format!("{name} tile {i} contains non-finite values")));
        }
    }
    fit_normalization(model, train);
    let mut adam = AdamState::with_hyper(model.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let levels = model.config().levels;
    let mut records = Vec::new();
    if let Some(w) = log.as_mut() {
        writeln!(w, "{}", EpochRecord::CSV_HEADER)?;
    }
    for epoch in 1..=cfg.epochs {
        let items = epoch_items(epoch, train.len(), cfg);
        let mut sums = LossRecord::default();
        for (batch, chunk) in items.chunks(cfg.batch_size).enumerate() {
            let tiles = chunk
                .iter()
                .map(|&(i, t)| transform_tile(&train[i], t))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tile> = tiles.iter().collect();
            let gts = tiles.iter().map(|t| MultiscaleGt::new(&t.mask, levels)).collect::<Result<Vec<_>>>()?;
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch, batch },
                other => other,
            };
            let mut tape = Tape::new();
            let out = model
                .forward(&mut tape, &batch_input(&refs)?, model_dem(model, &refs)?.as_ref(), Mode::Train, false)
                .map_err(diverged)?;
            let terms = total_loss(&mut tape, &out, &gts, model.config(), &cfg.weights).map_err(diverged)?;
            let value = |v| tape.value(v).data()[0] as f64;
            let w = chunk.len() as f64;
            sums.total += value(terms.total) * w;
            sums.seg += value(terms.seg) * w;
            sums.edge += value(terms.edge) * w;
            sums.side += terms.side.map_or(0.0, value) * w;
            if !value(terms.total).is_finite() {
                return Err(Error::Divergence { epoch, batch });
            }
            tape.backward(terms.total).map_err(diverged)?;
            let grads: Vec<Tensor> = out
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            adam_step(model.params_mut(), &grads, &mut adam).map_err(diverged)?;
            model.update_running_stats(&out.bn_stats);
        }
        let n = items.len() as f64;
        let train_row = EpochRecord {
            epoch,
            split: "train",
            loss: LossRecord { total: sums.total / n, seg: sums.seg / n, edge: sums.edge / n, side: sums.side / n },
            accuracy: None,
            miou: None,
            deviation_px: None,
        };
        emit(&mut log, &mut records, train_row)?;
        if !val.is_empty() {
            let batches = items.len().div_ceil(cfg.batch_size);
            let (loss, report) = evaluate(model, val, &cfg.weights, cfg.pixel_size_m).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch, batch: batches },
                other => other,
            })?;
            let row = EpochRecord {
                epoch,
                split: "val",
                loss,
                accuracy: report.accuracy,
                miou: report.miou,
                deviation_px: report.deviation_px,
            };
            emit(&mut log, &mut records, row)?;
        }
    }
    Ok(records)
}

fn tile_is_finite(t: &Tile) -> bool {
    t.sar.data().iter().chain(t.dem.iter().flat_map(|d| d.data())).all(|v| v.is_finite())
}

fn emit(log: &mut Option<&mut dyn Write>, records: &mut Vec<EpochRecord>, row: EpochRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        writeln!(w, "{}", row.csv_row())?;
        w.flush()?;
    }
    records.push(row);
    Ok(())
}
