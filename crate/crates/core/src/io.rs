//! On-disk formats: RAS1 rasters and binary PGM previews.
//!
//! RAS1 layout (all integers little-endian):
//!
//! | offset | size | field                           |
//! |--------|------|---------------------------------|
//! | 0      | 4    | magic `RAS1`                    |
//! | 4      | 4    | `u32` channels                  |
//! | 8      | 4    | `u32` height                    |
//! | 12     | 4    | `u32` width                     |
//! | 16     | 4    | `u32` dtype: 0 = `f32`, 1 = `u8` |
//! | 20     | ...  | payload, channel-major, row-major |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};

const RAS_MAGIC: &[u8; 4] = b"RAS1";

#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasFile {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub data: RasterData,
}

impl RasFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20);
        out.extend_from_slice(RAS_MAGIC);
        out.extend_from_slice(&self.channels.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        match &self.data {
            RasterData::F32(d) => {
                out.extend_from_slice(&0u32.to_le_bytes());
                for v in d {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            RasterData::U8(d) => {
                out.extend_from_slice(&1u32.to_le_bytes());
                out.extend_from_slice(d);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != RAS_MAGIC {
            return Err(Error::format("RAS1", "missing magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let (channels, height, width, dtype) = (u32_at(4), u32_at(8), u32_at(12), u32_at(16));
        let n = channels as usize * height as usize * width as usize;
        let payload = &bytes[20..];
        let data = match dtype {
            0 => {
                if payload.len() != n * 4 {
                    return Err(Error::format("RAS1", format!("expected {} payload bytes", n * 4)));
                }
                RasterData::F32(
                    payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
                )
            }
            1 => {
                if payload.len() != n {
                    return Err(Error::format("RAS1", format!("expected {n} payload bytes")));
                }
                RasterData::U8(payload.to_vec())
            }
            other => return Err(Error::format("RAS1", format!("unknown dtype code {other}"))),
        };
        Ok(Self { channels, height, width, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::File::create(path)?.write_all(&self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn into_raster(self) -> Result<Raster> {
        let (c, h, w) = (self.channels as usize, self.height as usize, self.width as usize);
        match self.data {
            RasterData::F32(d) => Raster::new(c, h, w, d),
            RasterData::U8(d) => Raster::new(c, h, w, d.into_iter().map(f32::from).collect()),
        }
    }

    pub fn into_mask(self) -> Result<Mask> {
        if self.channels != 1 {
            return Err(Error::format("RAS1", "masks have exactly one channel"));
        }
        let (h, w) = (self.height as usize, self.width as usize);
        match self.data {
            RasterData::U8(d) => Mask::new(h, w, d.into_iter().map(|v| v != 0).collect()),
            RasterData::F32(_) => Err(Error::format("RAS1", "masks are stored as u8")),
        }
    }
}

impl From<&Raster> for RasFile {
    fn from(r: &Raster) -> Self {
        RasFile {
            channels: r.channels() as u32,
            height: r.height() as u32,
            width: r.width() as u32,
            data: RasterData::F32(r.data().to_vec()),
        }
    }
}

impl From<&Mask> for RasFile {
    fn from(m: &Mask) -> Self {
        RasFile {
            channels: 1,
            height: m.height() as u32,
            width: m.width() as u32,
            data: RasterData::U8(m.data().iter().map(|&v| v as u8).collect()),
        }
    }
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    RasFile::from(r).write(path)
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    RasFile::from(m).write(path)
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    RasFile::read(path)?.into_raster()
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    RasFile::read(path)?.into_mask()
}

/// Binary (P5) 8-bit PGM.
pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::shape("pgm", "pixel count"));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Linear min-max stretch to 0..=255.
pub fn to_gray(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    values.iter().map(|&v| (((v - lo) / span) * 255.0).round() as u8).collect()
}

pub fn mask_to_gray(mask: &Mask) -> Vec<u8> {
    mask.data().iter().map(|&v| if v { 255 } else { 0 }).collect()
}
