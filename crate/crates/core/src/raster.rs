//! Plain 2-D rasters: binary masks and multi-channel float images.

use crate::error::{Error, Result};

/// Binary raster, row-major. `true` is land (or edge, depending on role).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("mask", format!("{height}x{width} needs {} values", height * width)));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn not(&self) -> Mask {
        Mask { data: self.data.iter().map(|v| !v).collect(), ..*self }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        debug_assert_eq!(self.dims(), other.dims());
        Mask { data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(), ..*self }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }

    /// Coordinates of set pixels in row-major order.
    pub fn points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data.iter().enumerate().filter(|(_, &v)| v).map(move |(i, _)| (i / self.width, i % self.width))
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

/// Multi-channel float raster, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "raster",
                format!("{channels}x{height}x{width} needs {} values", channels * height * width),
            ));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Rectangular crop of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Raster {
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            let plane = self.channel(c);
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + w]);
            }
        }
        Raster { channels: self.channels, height: h, width: w, data }
    }
}

impl Mask {
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x))
    }
}

/// Square-tile symmetries: the 8 elements of the dihedral group D4.
///
/// Element `k` is a rotation by `k % 4` quarter turns (counter-clockwise),
/// followed by a horizontal mirror when `k >= 4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral(pub u8);

impl Dihedral {
    pub const ALL: [Dihedral; 8] =
        [Dihedral(0), Dihedral(1), Dihedral(2), Dihedral(3), Dihedral(4), Dihedral(5), Dihedral(6), Dihedral(7)];

    /// Source coordinate read for destination `(y, x)` of an `n x n` plane.
    fn source(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let x = if self.0 >= 4 { n - 1 - x } else { x };
        match self.0 % 4 {
            0 => (y, x),
            1 => (x, n - 1 - y),
            2 => (n - 1 - y, n - 1 - x),
            _ => (n - 1 - x, y),
        }
    }

    /// Applies the transform to each `n x n` plane of `data`.
    pub fn apply<T: Copy>(self, data: &[T], n: usize) -> Vec<T> {
        let plane = n * n;
        let mut out = Vec::with_capacity(data.len());
        for p in data.chunks(plane) {
            for y in 0..n {
                for x in 0..n {
                    let (sy, sx) = self.source(y, x, n);
                    out.push(p[sy * n + sx]);
                }
            }
        }
        out
    }

    pub fn apply_mask(self, mask: &Mask) -> Result<Mask> {
        if mask.height != mask.width {
            return Err(Error::shape("dihedral", format!("non-square {}x{}", mask.height, mask.width)));
        }
        Ok(Mask { data: self.apply(&mask.data, mask.width), ..*mask })
    }

    pub fn apply_raster(self, r: &Raster) -> Result<Raster> {
        if r.height != r.width {
            return Err(Error::shape("dihedral", format!("non-square {}x{}", r.height, r.width)));
        }
        Ok(Raster { data: self.apply(&r.data, r.width), ..*r })
    }
}
