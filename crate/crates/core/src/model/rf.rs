//! Theoretical receptive fields.
//!
//! Dependencies are traced backwards on an unbounded 1D line: for an output
//! position `o` each layer maps the interval of outputs it must produce to
//! the interval of inputs they read. The receptive field side is
//! `2 * h + 1`, where `h` is the largest distance from `o` to either end of
//! that input interval, maximised over one period of output positions.

use super::{Merging, ModelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfOp {
    /// Stride-1 "same" convolution with an odd square kernel.
    Conv(usize),
    /// 2x2 max pooling with stride 2.
    Pool2,
    /// Bilinear upsampling (align corners off) by a power-of-two factor.
    Upsample(usize),
}

type Span = (i64, i64);

fn back(op: RfOp, (lo, hi): Span) -> Span {
    match op {
        RfOp::Conv(k) => {
            let r = (k as i64 - 1) / 2;
            (lo - r, hi + r)
        }
        RfOp::Pool2 => (2 * lo, 2 * hi + 1),
        RfOp::Upsample(f) => {
            // Source coordinate (o + 0.5) / f - 0.5 reads floor(src) and the
            // next sample. In units of 1/(2f) it is (2o + 1 - f) / (2f).
            let f = f as i64;
            let src = |o: i64| (2 * o + 1 - f).div_euclid(2 * f);
            (src(lo), src(hi) + 1)
        }
    }
}

fn hull(a: Span, b: Span) -> Span {
    (a.0.min(b.0), a.1.max(b.1))
}

fn side_from_spans(spans: impl Iterator<Item = (i64, Span)>) -> usize {
    let h = spans.map(|(o, (lo, hi))| (o - lo).max(hi - o)).max().unwrap_or(0);
    (2 * h + 1) as usize
}

/// Receptive field side of a sequential chain (ops listed input to output).
/// The chain must preserve resolution overall.
pub fn chain_receptive_field(ops: &[RfOp]) -> Result<usize> {
    let mut scale = 1.0f64;
    for op in ops {
        match *op {
            RfOp::Conv(k) if k % 2 == 0 => {
                return Err(Error::InvalidArgument(format!("kernel size {k} must be odd")));
            }
            RfOp::Pool2 => scale /= 2.0,
            RfOp::Upsample(f) if !f.is_power_of_two() || f < 2 => {
                return Err(Error::InvalidArgument(format!("upsample factor {f} must be a power of two")));
            }
            RfOp::Upsample(f) => scale *= f as f64,
            RfOp::Conv(_) => {}
        }
    }
    if scale != 1.0 {
        return Err(Error::InvalidArgument(format!("chain changes resolution by {scale}")));
    }
    Ok(side_from_spans((0..64).map(|o| {
        let span = ops.iter().rev().fold((o, o), |s, &op| back(op, s));
        (o, span)
    })))
}

struct Net {
    levels: usize,
}

impl Net {
    fn double_conv(s: Span) -> Span {
        back(RfOp::Conv(3), back(RfOp::Conv(3), s))
    }

    fn encoder(&self, k: usize, s: Span) -> Span {
        let s = Self::double_conv(s);
        if k == 0 { s } else { self.encoder(k - 1, back(RfOp::Pool2, s)) }
    }

    fn decoder(&self, k: usize, s: Span) -> Span {
        if k == self.levels - 1 {
            return self.encoder(k, s);
        }
        let s = Self::double_conv(s);
        hull(self.encoder(k, s), self.decoder(k + 1, back(RfOp::Upsample(2), s)))
    }

    fn side(&self, k: usize, s: Span) -> Span {
        let s = if k == 0 { s } else { back(RfOp::Upsample(1 << k), s) };
        self.decoder(k, s)
    }
}

/// Side length, in input pixels, of the region that can influence one
/// full-resolution output pixel of the merged heads. The DEM branch is not
/// counted.
pub fn theoretical_rf(config: &ModelConfig) -> usize {
    let net = Net { levels: config.levels.max(1) };
    let used = if config.merging == Merging::None { 1 } else { net.levels };
    side_from_spans((0..64).map(|o| {
        let span = (0..used).map(|k| net.side(k, (o, o))).reduce(hull).expect("at least one level");
        (o, span)
    }))
}
