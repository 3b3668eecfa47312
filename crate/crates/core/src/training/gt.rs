//! Ground-truth construction: boundary extraction, mask pyramids.

use crate::error::{Error, Result};
use crate::raster::Mask;

/// A pixel is an edge iff at least one in-bounds 4-neighbour has the other
/// class. Boundaries are therefore two pixels thick, one on each side.
pub fn derive_edges(mask: &Mask) -> Mask {
    let (h, w) = mask.dims();
    Mask::from_fn(h, w, |y, x| {
        let c = mask.get(y, x);
        (y > 0 && mask.get(y - 1, x) != c)
            || (y + 1 < h && mask.get(y + 1, x) != c)
            || (x > 0 && mask.get(y, x - 1) != c)
            || (x + 1 < w && mask.get(y, x + 1) != c)
    })
}

/// 2x2 majority vote; a 2-2 tie resolves to land.
pub fn downsample_mask(mask: &Mask) -> Result<Mask> {
    let (h, w) = mask.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("downsample_mask", format!("odd extent {h}x{w}")));
    }
    Ok(Mask::from_fn(h / 2, w / 2, |y, x| {
        let votes = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .filter(|&&(dy, dx)| mask.get(2 * y + dy, 2 * x + dx))
            .count();
        votes >= 2
    }))
}

/// Segmentation and edge targets for every pyramid level; level `k` has
/// `1 / 2^k` of the full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleGt {
    pub seg: Vec<Mask>,
    pub edge: Vec<Mask>,
}

impl MultiscaleGt {
    pub fn new(mask: &Mask, levels: usize) -> Result<Self> {
        let mut seg = vec![mask.clone()];
        for k in 1..levels {
            let next = downsample_mask(&seg[k - 1])?;
            seg.push(next);
        }
        let edge = seg.iter().map(derive_edges).collect();
        Ok(Self { seg, edge })
    }

    pub fn levels(&self) -> usize {
        self.seg.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Brute-force neighbourhood scan, written independently of the
    /// implementation above.
    fn brute_edges(mask: &Mask) -> Mask {
        let (h, w) = mask.dims();
        let mut out = Mask::filled(h, w, false);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64
                        && mask.get(ny as usize, nx as usize) != mask.get(y as usize, x as usize) {
                            out.set(y as usize, x as usize, true);
                        }
                }
            }
        }
        out
    }

    #[test]
    fn uniform_mask_has_no_edges() {
        assert!(derive_edges(&Mask::filled(6, 5, true)).is_empty());
        assert!(derive_edges(&Mask::filled(6, 5, false)).is_empty());
    }

    #[test]
    fn vertical_split_gives_two_columns() {
        let c = 4;
        let m = Mask::from_fn(6, 9, |_, x| x >= c);
        let e = derive_edges(&m);
        assert_eq!(e, brute_edges(&m));
        assert_eq!(e, Mask::from_fn(6, 9, |_, x| x == c - 1 || x == c));
    }

    #[test]
    fn single_land_pixel_plus_shape() {
        let m = Mask::from_fn(5, 5, |y, x| y == 2 && x == 2);
        let e = derive_edges(&m);
        assert_eq!(e, brute_edges(&m));
        let expected: Vec<(usize, usize)> = vec![(1, 2), (2, 1), (2, 2), (2, 3), (3, 2)];
        assert_eq!(e.points().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn random_masks_match_brute_force() {
        let mut rng = Rng::new(5);
        for _ in 0..30 {
            let (h, w) = (1 + rng.below(12), 1 + rng.below(12));
            let m = Mask::new(h, w, (0..h * w).map(|_| rng.uniform() < 0.5).collect()).unwrap();
            let e = derive_edges(&m);
            assert_eq!(e, brute_edges(&m));
            // Every edge pixel touches both classes.
            for (y, x) in e.points() {
                let c = m.get(y, x);
                let mut other = false;
                if y > 0 { other |= m.get(y - 1, x) != c; }
                if y + 1 < h { other |= m.get(y + 1, x) != c; }
                if x > 0 { other |= m.get(y, x - 1) != c; }
                if x + 1 < w { other |= m.get(y, x + 1) != c; }
                assert!(other);
            }
        }
    }

    #[test]
    fn downsample_rules() {
        assert_eq!(downsample_mask(&Mask::filled(4, 4, true)).unwrap(), Mask::filled(2, 2, true));
        assert_eq!(downsample_mask(&Mask::filled(4, 4, false)).unwrap(), Mask::filled(2, 2, false));
        let checker = Mask::from_fn(4, 6, |y, x| (y + x) % 2 == 0);
        assert_eq!(downsample_mask(&checker).unwrap(), Mask::filled(2, 3, true));
        let three = Mask::new(2, 2, vec![true, true, true, false]).unwrap();
        assert_eq!(downsample_mask(&three).unwrap(), Mask::filled(1, 1, true));
        let one = Mask::new(2, 2, vec![false, false, true, false]).unwrap();
        assert_eq!(downsample_mask(&one).unwrap(), Mask::filled(1, 1, false));
        assert!(downsample_mask(&Mask::filled(3, 4, true)).is_err());
    }

    #[test]
    fn pyramid_is_composition_of_downsample_and_edges() {
        let mut rng = Rng::new(8);
        let m = Mask::new(32, 32, (0..1024).map(|_| rng.uniform() < 0.4).collect()).unwrap();
        let gt = MultiscaleGt::new(&m, 4).unwrap();
        assert_eq!(gt.seg[0], m);
        assert_eq!(gt.edge[0], derive_edges(&m));
        let mut cur = m.clone();
        for k in 1..4 {
            cur = downsample_mask(&cur).unwrap();
            assert_eq!(gt.seg[k], cur);
            assert_eq!(gt.edge[k], derive_edges(&cur));
            assert_eq!(gt.seg[k].dims(), (32 >> k, 32 >> k));
        }
    }
}
