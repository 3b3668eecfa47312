use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_mask, read_raster, write_mask, write_raster};
use crate::rng::mix;
use crate::synthdata::{generate_scene, tile, Scene, Tile};

use super::{parallel_map, ExperimentConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One generated scene; raster paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub sar: String,
    pub mask: String,
    pub edge: String,
    pub icebergs: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dem: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub size: usize,
    pub pixel_size_m: f64,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::format("manifest", format!("unsupported format {}", m.format)));
        }
        Ok(m)
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &SceneEntry> {
        self.scenes.iter().filter(move |e| e.split == split)
    }

    pub fn has_dem(&self) -> bool {
        !self.scenes.is_empty() && self.scenes.iter().all(|e| e.dem.is_some())
    }
}

/// Seed of scene `index` of `split` under the global seed.
pub fn scene_seed(global: u64, split: Split, index: usize) -> u64 {
    let tag = ((split as u64) << 32) | index as u64;
    mix(global ^ mix(tag))
}

/// All scenes of an experiment, generated in memory.
pub fn generate_scenes(cfg: &ExperimentConfig, split: Split, jobs: usize) -> Result<Vec<Scene>> {
    let count = match split {
        Split::Train => cfg.data.train_scenes,
        Split::Val => cfg.data.val_scenes,
    };
    let seeds: Vec<u64> = (0..count).map(|i| scene_seed(cfg.seed, split, i)).collect();
    parallel_map(&seeds, jobs, |&s| generate_scene(&cfg.generator, s)).into_iter().collect()
}

/// Generates the train and val scenes and writes them with a manifest.
pub fn generate_dataset(cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<Manifest> {
    cfg.validate()?;
    let mut scenes = Vec::new();
    for split in [Split::Train, Split::Val] {
        fs::create_dir_all(dir.join(split.name()))?;
        for (i, scene) in generate_scenes(cfg, split, jobs)?.into_iter().enumerate() {
            let id = format!("{}_{i:03}", split.name());
            let rel = |role: &str| format!("{}/{id}_{role}.ras", split.name());
            write_raster(&dir.join(rel("sar")), &scene.sar)?;
            write_mask(&dir.join(rel("mask")), &scene.mask)?;
            write_mask(&dir.join(rel("edge")), &scene.edge)?;
            write_mask(&dir.join(rel("icebergs")), &scene.icebergs)?;
            let dem = match &scene.dem {
                Some(d) => {
                    write_raster(&dir.join(rel("dem")), d)?;
                    Some(rel("dem"))
                }
                None => None,
            };
            scenes.push(SceneEntry {
                id: id.clone(),
                split,
                seed: scene.seed,
                sar: rel("sar"),
                mask: rel("mask"),
                edge: rel("edge"),
                icebergs: rel("icebergs"),
                dem,
            });
        }
    }
    let manifest =
        Manifest { format: MANIFEST_FORMAT, size: cfg.generator.size, pixel_size_m: cfg.generator.pixel_size_m, scenes };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_scene(dir: &Path, manifest: &Manifest, entry: &SceneEntry) -> Result<Scene> {
    let scene = Scene {
        sar: read_raster(&dir.join(&entry.sar))?,
        mask: read_mask(&dir.join(&entry.mask))?,
        edge: read_mask(&dir.join(&entry.edge))?,
        icebergs: read_mask(&dir.join(&entry.icebergs))?,
        dem: entry.dem.as_ref().map(|p| read_raster(&dir.join(p))).transpose()?,
        pixel_size_m: manifest.pixel_size_m,
        seed: entry.seed,
    };
    let (h, w) = scene.mask.dims();
    if scene.sar.height() != h || scene.sar.width() != w || scene.edge.dims() != (h, w) || scene.icebergs.dims() != (h, w) {
        return Err(Error::format("dataset", format!("rasters of scene {} disagree in size", entry.id)));
    }
    Ok(scene)
}

/// A loaded split: scene ids and their tiles, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitTiles {
    pub ids: Vec<String>,
    pub tiles: Vec<Tile>,
}

pub fn load_split(dir: &Path, manifest: &Manifest, split: Split, tile_size: usize, overlap: f64) -> Result<SplitTiles> {
    let mut out = SplitTiles { ids: Vec::new(), tiles: Vec::new() };
    for entry in manifest.entries(split) {
        let scene = load_scene(dir, manifest, entry)?;
        let tiles = tile(&scene, tile_size, overlap)?;
        let single = tiles.len() == 1;
        for (k, t) in tiles.into_iter().enumerate() {
            out.ids.push(if single { entry.id.clone() } else { format!("{}_t{k:02}", entry.id) });
            out.tiles.push(t);
        }
    }
    Ok(out)
}
