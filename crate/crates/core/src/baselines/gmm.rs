use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

/// Components whose variance falls below this are considered collapsed.
pub const VARIANCE_FLOOR: f64 = 1e-8;
const BISECTION_STEPS: usize = 200;

/// Two-component 1-D Gaussian mixture with `means[0] <= means[1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gmm1D {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
}

impl Gmm1D {
    /// `ln(pi_k) + ln N(x; mu_k, var_k)`.
    pub fn log_component(&self, k: usize, x: f64) -> f64 {
        let d = x - self.means[k];
        self.weights[k].ln() - 0.5 * (2.0 * PI * self.variances[k]).ln() - d * d / (2.0 * self.variances[k])
    }

    pub fn log_density(&self, x: f64) -> f64 {
        log_add(self.log_component(0, x), self.log_component(1, x))
    }

    fn ordered(mut self) -> Self {
        if self.means[0] > self.means[1] {
            self.weights.swap(0, 1);
            self.means.swap(0, 1);
            self.variances.swap(0, 1);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: Gmm1D,
    /// Mean per-sample log-likelihood after initialisation and after every
    /// EM step.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// True when the first initialisation collapsed and the fit restarted.
    pub reseeded: bool,
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn mean_log_likelihood(g: &Gmm1D, samples: &[f64]) -> f64 {
    samples.iter().map(|&x| g.log_density(x)).sum::<f64>() / samples.len() as f64
}

enum Attempt {
    Done(GmmFit),
    Collapsed,
}

fn run_em(samples: &[f64], init: Gmm1D, max_iter: usize, tol: f64) -> Attempt {
    let n = samples.len() as f64;
    let mut g = init;
    if g.variances.iter().any(|v| *v < VARIANCE_FLOOR) {
        return Attempt::Collapsed;
    }
    let mut trace = vec![mean_log_likelihood(&g, samples)];
    let mut converged = false;
    for _ in 0..max_iter {
        let mut r_sum = [0.0f64; 2];
        let mut rx_sum = [0.0f64; 2];
        for &x in samples {
            let l0 = g.log_component(0, x);
            let l1 = g.log_component(1, x);
            let r1 = (l1 - log_add(l0, l1)).exp();
            let r = [1.0 - r1, r1];
            for k in 0..2 {
                r_sum[k] += r[k];
                rx_sum[k] += r[k] * x;
            }
        }
        if r_sum.iter().any(|s| *s <= 0.0) {
            return Attempt::Collapsed;
        }
        let means = [rx_sum[0] / r_sum[0], rx_sum[1] / r_sum[1]];
        let mut rd_sum = [0.0f64; 2];
        for &x in samples {
            let l0 = g.log_component(0, x);
            let l1 = g.log_component(1, x);
            let r1 = (l1 - log_add(l0, l1)).exp();
            let r = [1.0 - r1, r1];
            for k in 0..2 {
                let d = x - means[k];
                rd_sum[k] += r[k] * d * d;
            }
        }
        let next = Gmm1D {
            weights: [r_sum[0] / n, r_sum[1] / n],
            means,
            variances: [rd_sum[0] / r_sum[0], rd_sum[1] / r_sum[1]],
        };
        if next.variances.iter().any(|v| !(*v >= VARIANCE_FLOOR)) || next.weights.iter().any(|w| *w <= 0.0) {
            return Attempt::Collapsed;
        }
        g = next;
        let ll = mean_log_likelihood(&g, samples);
        let prev = *trace.last().unwrap();
        debug_assert!(ll >= prev - 1e-9 * prev.abs().max(1.0), "EM log-likelihood decreased: {prev} -> {ll}");
        trace.push(ll);
        if (ll - prev).abs() < tol {
            converged = true;
            break;
        }
    }
    Attempt::Done(GmmFit { model: g.ordered(), trace, converged, reseeded: false })
}

/// Fits a two-component mixture by expectation maximisation.
///
/// Components start at the 25th and 75th percentiles with the pooled
/// variance and equal weights. Iteration stops once the mean per-sample
/// log-likelihood changes by less than `tol`, or after `max_iter` steps.
/// If a variance collapses the fit restarts once from the 10th and 90th
/// percentiles; a second collapse is an error.
pub fn fit_gmm_em(samples: &[f64], max_iter: usize, tol: f64) -> Result<GmmFit> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!("mixture fit needs at least 2 samples, got {}", samples.len())));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "fit_gmm_em" });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let init = |lo: f64, hi: f64, var: f64| Gmm1D {
        weights: [0.5, 0.5],
        means: [quantile(&sorted, lo), quantile(&sorted, hi)],
        variances: [var, var],
    };
    if let Attempt::Done(fit) = run_em(samples, init(0.25, 0.75, var), max_iter, tol) {
        return Ok(fit);
    }
    match run_em(samples, init(0.1, 0.9, var / 4.0), max_iter, tol) {
        Attempt::Done(fit) => Ok(GmmFit { reseeded: true, ..fit }),
        Attempt::Collapsed => Err(Error::DegenerateVariance { floor: VARIANCE_FLOOR }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmThreshold {
    pub value: f64,
    /// True when the weighted densities do not cross between the means and
    /// the midpoint was used instead.
    pub fallback: bool,
}

/// Point between the means where the weighted component densities are
/// equal, found by bisection on their log ratio.
pub fn gmm_threshold(g: &Gmm1D) -> GmmThreshold {
    let [m0, m1] = g.means;
    let mid = 0.5 * (m0 + m1);
    let f = |x: f64| g.log_component(0, x) - g.log_component(1, x);
    let (f_lo, f_hi) = (f(m0), f(m1));
    if !(m0 < m1) || !(f_lo > 0.0 && f_hi < 0.0) {
        return GmmThreshold { value: mid, fallback: true };
    }
    let (mut lo, mut hi) = (m0, m1);
    for _ in 0..BISECTION_STEPS {
        let m = 0.5 * (lo + hi);
        if m <= lo || m >= hi {
            break;
        }
        if f(m) > 0.0 {
            lo = m;
        } else {
            hi = m;
        }
    }
    GmmThreshold { value: 0.5 * (lo + hi), fallback: false }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmSegmentation {
    /// Land where the backscatter exceeds the threshold.
    pub mask: Mask,
    pub fit: GmmFit,
    pub threshold: GmmThreshold,
}

/// Fits a mixture to one channel of dB values and thresholds it.
pub fn gmm_segment(channel: &[f32], height: usize, width: usize) -> Result<GmmSegmentation> {
    if channel.len() != height * width {
        return Err(Error::shape("gmm_segment", format!("{} values for {height}x{width}", channel.len())));
    }
    let samples: Vec<f64> = channel.iter().map(|&v| v as f64).collect();
    let fit = fit_gmm_em(&samples, 500, 1e-9)?;
    let threshold = gmm_threshold(&fit.model);
    let mask = Mask::new(height, width, samples.iter().map(|&x| x > threshold.value).collect())?;
    Ok(GmmSegmentation { mask, fit, threshold })
}
