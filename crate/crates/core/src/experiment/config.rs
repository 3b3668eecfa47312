use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::SobelParams;
use crate::erf::OutputHead;
use crate::error::{Error, Result};
use crate::metrics::{Evaluator, DEFAULT_BAND_RADIUS_M, DEFAULT_MATCH_RADIUS};
use crate::model::ModelConfig;
use crate::synthdata::GenParams;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Side of the square training and evaluation tiles.
    pub tile_size: usize,
    /// Fractional overlap of neighbouring tiles, in `[0, 1)`.
    pub tile_overlap: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_scenes: 24, val_scenes: 8, tile_size: 96, tile_overlap: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub band_radius_m: f64,
    pub match_radius_px: f64,
    /// Edge thresholds `k / (n + 1)` for `k = 1..=n`.
    pub thresholds: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { band_radius_m: DEFAULT_BAND_RADIUS_M, match_radius_px: DEFAULT_MATCH_RADIUS, thresholds: 99 }
    }
}

impl MetricConfig {
    pub fn threshold_values(&self) -> Vec<f32> {
        let n = self.thresholds as f32 + 1.0;
        (1..=self.thresholds).map(|k| k as f32 / n).collect()
    }

    pub fn evaluator(&self, pixel_size_m: f64) -> Evaluator {
        Evaluator::with_settings(pixel_size_m, self.band_radius_m, self.match_radius_px, self.threshold_values())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErfConfig {
    pub samples: usize,
    pub head: OutputHead,
    pub seed: u64,
}

impl Default for ErfConfig {
    fn default() -> Self {
        Self { samples: 8, head: OutputHead::Seg, seed: 0 }
    }
}

/// Everything needed to regenerate, train and evaluate one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Global seed; scene seeds derive from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub generator: GenParams,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
    pub sobel: SobelParams,
    pub erf: ErfConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("runs"),
            generator: GenParams::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricConfig::default(),
            sobel: SobelParams::default(),
            erf: ErfConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Canonical form: pretty JSON with every field present.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces the global, model and training seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let d = &self.data;
        if d.train_scenes == 0 {
            return bad("at least one training scene is required".into());
        }
        if d.tile_size == 0 || d.tile_size > self.generator.size || !d.tile_size.is_multiple_of(self.model.divisor()) {
            return bad(format!(
                "tile size {} must fit the {} px scenes and be a multiple of {}",
                d.tile_size,
                self.generator.size,
                self.model.divisor()
            ));
        }
        if !(0.0..1.0).contains(&d.tile_overlap) {
            return bad(format!("tile overlap {} outside [0, 1)", d.tile_overlap));
        }
        if self.model.use_dem && !self.generator.with_dem {
            return bad("the model uses a DEM but the generator does not produce one".into());
        }
        if self.train.pixel_size_m != self.generator.pixel_size_m {
            return bad("train.pixel_size_m must equal generator.pixel_size_m".into());
        }
        let m = &self.metrics;
        if m.thresholds == 0 || !(m.band_radius_m > 0.0) || !(m.match_radius_px >= 0.0) {
            return bad("metric settings need thresholds, a positive band and a non-negative radius".into());
        }
        if self.erf.samples == 0 {
            return bad("erf.samples must be positive".into());
        }
        Ok(())
    }
}
