//! Dihedral data augmentation.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::raster::Dihedral;
use crate::synthdata::Tile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Augmentation {
    Off,
    /// Every tile contributes all eight dihedral images per epoch.
    Full,
    /// Every tile contributes one randomly drawn dihedral image per epoch.
    RandomDihedral,
}

/// Applies `t` to every raster of a square tile, DEM included.
pub fn transform_tile(tile: &Tile, t: Dihedral) -> Result<Tile> {
    Ok(Tile {
        origin: tile.origin,
        sar: t.apply_raster(&tile.sar)?,
        mask: t.apply_mask(&tile.mask)?,
        edge: t.apply_mask(&tile.edge)?,
        dem: tile.dem.as_ref().map(|d| t.apply_raster(d)).transpose()?,
    })
}

/// The eight rotations and mirror images of a square tile, identity first.
pub fn augment_8fold(tile: &Tile) -> Result<Vec<Tile>> {
    Dihedral::ALL.iter().map(|&t| transform_tile(tile, t)).collect()
}
