//! Exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher
//! lower envelope of parabolas, separable in rows and columns).
//!
//! All arithmetic is integer; envelope breakpoints are compared as exact
//! rationals, so the result equals brute force bit for bit.

use crate::raster::Mask;

/// Marker for "no feature pixel reachable".
pub const UNREACHABLE: u64 = u64::MAX;

/// Squared distance from every pixel to the nearest set pixel of `features`.
/// Every entry is [`UNREACHABLE`] when `features` is empty.
pub fn squared_edt(features: &Mask) -> Vec<u64> {
    let (h, w) = features.dims();
    let mut grid: Vec<u64> = features.data().iter().map(|&f| if f { 0 } else { UNREACHABLE }).collect();
    let mut line = vec![0u64; h.max(w)];
    let mut out = vec![0u64; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            line[y] = grid[y * w + x];
        }
        envelope(&line[..h], &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        line[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        envelope(&line[..w], &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Euclidean distance (in pixels) to the nearest set pixel; `f64::INFINITY`
/// where none exists.
pub fn distance_to(features: &Mask) -> Vec<f64> {
    squared_edt(features)
        .into_iter()
        .map(|d| if d == UNREACHABLE { f64::INFINITY } else { (d as f64).sqrt() })
        .collect()
}

/// Breakpoint between parabolas rooted at `q` and `v` (`v < q`) as the
/// rational `num / den`, `den > 0`.
fn intersection(f: &[u64], q: usize, v: usize) -> (i128, i128) {
    let (qi, vi) = (q as i128, v as i128);
    let num = (f[q] as i128 + qi * qi) - (f[v] as i128 + vi * vi);
    (num, 2 * (qi - vi))
}

fn envelope(f: &[u64], out: &mut [u64]) {
    let sites: Vec<usize> = (0..f.len()).filter(|&i| f[i] != UNREACHABLE).collect();
    if sites.is_empty() {
        out.fill(UNREACHABLE);
        return;
    }
    // v: parabola roots on the envelope; z[k]: left breakpoint of v[k]
    // (None = -inf).
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<Option<(i128, i128)>> = Vec::with_capacity(sites.len());
    for &q in &sites {
        loop {
            let Some(&top) = v.last() else {
                v.push(q);
                z.push(None);
                break;
            };
            let s = intersection(f, q, top);
            let dominated = match z[v.len() - 1] {
                None => false,
                // s <= z_k  <=>  s.num * z.den <= z.num * s.den
                Some(zk) => s.0 * zk.1 <= zk.0 * s.1,
            };
            if dominated {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(Some(s));
                break;
            }
        }
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        // Advance while the next breakpoint lies strictly left of p.
        while k + 1 < v.len() {
            let (num, den) = z[k + 1].expect("only the first breakpoint is -inf");
            if num < p as i128 * den {
                k += 1;
            } else {
                break;
            }
        }
        let d = p as i128 - v[k] as i128;
        *o = (d * d) as u64 + f[v[k]];
    }
}
