//! Experiment plumbing: configuration, on-disk datasets, training and
//! evaluation runs, classical baselines and ablation sweeps.

mod ablation;
mod config;
mod dataset;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ablation::{ablation_csv, mean_std, run_ablation, AblationCell, AblationMatrix, AblationRow, ABLATION_HEADER};
pub use config::{DataConfig, ErfConfig, ExperimentConfig, MetricConfig};
pub use dataset::{
    generate_dataset, generate_scenes, load_scene, load_split, scene_seed, Manifest, SceneEntry, Split, SplitTiles,
    MANIFEST_FILE,
};

use crate::baselines::{gmm_segment, sobel_pipeline};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::synthdata::{tile, Tile};
use crate::training::{derive_edges, evaluate_with, train, EpochRecord};


/// Maps `f` over `items` on up to `jobs` scoped threads. Results keep the
/// input order, so the output does not depend on `jobs`.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Train and val tiles of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: SplitTiles,
    pub val: SplitTiles,
}

pub fn load_dataset(dir: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    let manifest = Manifest::read(dir)?;
    if manifest.pixel_size_m != cfg.generator.pixel_size_m {
        return Err(Error::InvalidConfig(format!(
            "dataset pixel size {} m differs from the configured {} m",
            manifest.pixel_size_m, cfg.generator.pixel_size_m
        )));
    }
    if cfg.model.use_dem && !manifest.has_dem() {
        return Err(Error::InvalidConfig("the model uses a DEM but the dataset has none".into()));
    }
    let (size, overlap) = (cfg.data.tile_size, cfg.data.tile_overlap);
    Ok(Dataset {
        train: load_split(dir, &manifest, Split::Train, size, overlap)?,
        val: load_split(dir, &manifest, Split::Val, size, overlap)?,
        manifest,
    })
}

/// In-memory equivalent of generating and loading a dataset.
pub fn synthetic_tiles(cfg: &ExperimentConfig, split: Split, jobs: usize) -> Result<Vec<Tile>> {
    let mut out = Vec::new();
    for scene in generate_scenes(cfg, split, jobs)? {
        out.extend(tile(&scene, cfg.data.tile_size, cfg.data.tile_overlap)?);
    }
    Ok(out)
}

/// Builds a fresh model from `cfg` and trains it.
pub fn train_model(
    cfg: &ExperimentConfig,
    train_tiles: &[Tile],
    val_tiles: &[Tile],
    log: Option<&mut dyn Write>,
) -> Result<(Model, Vec<EpochRecord>)> {
    cfg.validate()?;
    let mut model = Model::build(cfg.model.clone())?;
    let records = train(&mut model, train_tiles, val_tiles, &cfg.train, log)?;
    Ok((model, records))
}

pub fn evaluate_model(model: &Model, tiles: &[Tile], cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let evaluator = cfg.metrics.evaluator(cfg.generator.pixel_size_m);
    Ok(evaluate_with(model, tiles, &cfg.train.weights, evaluator)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    /// Mixture thresholding; its coastline is the boundary of the mask.
    Gmm,
    /// Sobel edge pipeline; produces edges only.
    Sobel,
}

/// Binary outputs of a baseline on one tile, as 0/1 probability maps.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutput {
    pub seg: Option<Vec<f32>>,
    pub edge: Vec<f32>,
}

pub fn baseline_predict(kind: BaselineKind, tile: &Tile, cfg: &ExperimentConfig) -> Result<BaselineOutput> {
    let (h, w) = tile.mask.dims();
    let hh = tile.sar.channel(0);
    match kind {
        BaselineKind::Gmm => {
            let seg = gmm_segment(hh, h, w)?;
            Ok(BaselineOutput { edge: derive_edges(&seg.mask).to_f32(), seg: Some(seg.mask.to_f32()) })
        }
        BaselineKind::Sobel => Ok(BaselineOutput { seg: None, edge: sobel_pipeline(hh, h, w, &cfg.sobel)?.to_f32() }),
    }
}

pub fn run_baseline(kind: BaselineKind, tiles: &[Tile], cfg: &ExperimentConfig, jobs: usize) -> Result<MetricsReport> {
    let outputs = parallel_map(tiles, jobs, |t| baseline_predict(kind, t, cfg));
    let mut evaluator = cfg.metrics.evaluator(cfg.generator.pixel_size_m);
    for (t, out) in tiles.iter().zip(outputs) {
        let out = out?;
        evaluator.add(&t.mask, out.seg.as_deref(), Some(&out.edge))?;
    }
    Ok(evaluator.finish())
}
