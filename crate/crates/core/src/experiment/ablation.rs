use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::Merging;
use crate::synthdata::Tile;

use super::{evaluate_model, train_model, ExperimentConfig};

pub const ABLATION_HEADER: &str = "Data,Deep Sup.,Levels,Merging,Accuracy,mIoU,Deviation,F1 ODS,F1 OIS";

/// Axes of the sweep; every combination is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationMatrix {
    pub deep_supervision: Vec<bool>,
    pub levels: Vec<usize>,
    pub merging: Vec<Merging>,
    pub dem: Vec<bool>,
    /// Training runs per cell; replicate `r` offsets the model and training
    /// seeds by `r`.
    pub replicates: usize,
}

impl Default for AblationMatrix {
    fn default() -> Self {
        Self {
            deep_supervision: vec![true, false],
            levels: vec![5, 6],
            merging: vec![Merging::None, Merging::Learned, Merging::Attention],
            dem: vec![false, true],
            replicates: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationCell {
    pub dem: bool,
    pub deep_supervision: bool,
    pub levels: usize,
    pub merging: Merging,
}

impl AblationMatrix {
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::new();
        for &dem in &self.dem {
            for &deep_supervision in &self.deep_supervision {
                for &levels in &self.levels {
                    for &merging in &self.merging {
                        out.push(AblationCell { dem, deep_supervision, levels, merging });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub reports: Vec<MetricsReport>,
}

/// Trains and evaluates every cell of `matrix`. Tiles must carry DEMs when
/// any cell enables them. `progress` sees each finished run.
pub fn run_ablation(
    base: &ExperimentConfig,
    matrix: &AblationMatrix,
    train_tiles: &[Tile],
    val_tiles: &[Tile],
    mut progress: impl FnMut(&AblationCell, usize, &MetricsReport),
) -> Result<Vec<AblationRow>> {
    let cells = matrix.cells();
    if cells.is_empty() || matrix.replicates == 0 {
        return Err(Error::InvalidArgument("ablation matrix is empty".into()));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut reports = Vec::with_capacity(matrix.replicates);
        for r in 0..matrix.replicates {
            let mut cfg = base.clone();
            cfg.model.deep_supervision = cell.deep_supervision;
            cfg.model.levels = cell.levels;
            cfg.model.merging = cell.merging;
            cfg.model.use_dem = cell.dem;
            cfg.generator.with_dem |= cell.dem;
            cfg.model.seed = base.model.seed.wrapping_add(r as u64);
            cfg.train.seed = base.train.seed.wrapping_add(r as u64);
            let (model, _) = train_model(&cfg, train_tiles, val_tiles, None)?;
            let report = evaluate_model(&model, val_tiles, &cfg)?;
            progress(&cell, r, &report);
            reports.push(report);
        }
        rows.push(AblationRow { cell, reports });
    }
    Ok(rows)
}

/// Sample mean and standard deviation (`n - 1` denominator) of the present
/// values. The deviation is `None` for fewer than two values.
pub fn mean_std(values: &[Option<f64>]) -> Option<(f64, Option<f64>)> {
    let xs: Vec<f64> = values.iter().flatten().copied().collect();
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    Some((mean, std))
}

fn summary(values: &[Option<f64>]) -> String {
    match mean_std(values) {
        None => "n/a".into(),
        Some((m, None)) => format!("{m:.2}"),
        Some((m, Some(s))) => format!("{m:.2} ± {s:.2}"),
    }
}

/// Table-shaped CSV: one row per cell, metrics as `mean ± std`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for row in rows {
        let c = row.cell;
        let col = |f: fn(&MetricsReport) -> Option<f64>| summary(&row.reports.iter().map(f).collect::<Vec<_>>());
        let merging = match c.merging {
            Merging::None => "None",
            Merging::Learned => "Learned",
            Merging::Attention => "Attention",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            if c.dem { "SAR+DEM" } else { "SAR" },
            if c.deep_supervision { "yes" } else { "no" },
            c.levels,
            merging,
            col(|r| r.accuracy),
            col(|r| r.miou),
            col(|r| r.deviation_m),
            col(|r| r.f1_ods),
            col(|r| r.f1_ois),
        ));
    }
    out
}
