//! Class-balanced cross-entropy and the total training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Merging, ModelConfig, PredictionBundle};
use crate::tensor::{kernels::bce_log_terms, Tape, Tensor, Var};

use super::MultiscaleGt;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f32 = 1e-6;

/// Class-balanced binary cross-entropy of one image:
///
/// ```text
/// L = -(|Y-| / |Y|) * sum_{Y+} ln p  -  (|Y+| / |Y|) * sum_{Y-} ln(1 - p)
/// ```
///
/// `prob` holds the positive-class probability, `target` marks `Y+`.
pub fn balanced_bce(prob: &[f32], target: &[bool], eps: f32) -> Result<f64> {
    if prob.len() != target.len() {
        return Err(Error::shape("balanced_bce", format!("{} predictions, {} targets", prob.len(), target.len())));
    }
    if prob.is_empty() {
        return Err(Error::InvalidArgument("balanced BCE over an empty pixel set".into()));
    }
    let n = prob.len() as f64;
    let pos = target.iter().filter(|&&t| t).count() as f64;
    let (mut pos_sum, mut neg_sum) = (0.0f64, 0.0f64);
    for (&p, &t) in prob.iter().zip(target) {
        let p = p.clamp(eps, 1.0 - eps) as f64;
        if t {
            pos_sum += p.ln();
        } else {
            neg_sum += (1.0 - p).ln();
        }
    }
    Ok(-((n - pos) / n) * pos_sum - (pos / n) * neg_sum)
}

/// [`balanced_bce`] of `sigmoid(logits)`, evaluated in log space.
pub fn balanced_bce_logits(logits: &[f32], target: &[bool], eps: f32) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::shape("balanced_bce", format!("{} predictions, {} targets", logits.len(), target.len())));
    }
    if logits.is_empty() {
        return Err(Error::InvalidArgument("balanced BCE over an empty pixel set".into()));
    }
    let n = logits.len() as f64;
    let pos = target.iter().filter(|&&t| t).count() as f64;
    let (mut pos_sum, mut neg_sum) = (0.0f64, 0.0f64);
    for (&x, &t) in logits.iter().zip(target) {
        let (ln_p, ln_q, _) = bce_log_terms(x, eps);
        if t {
            pos_sum += ln_p;
        } else {
            neg_sum += ln_q;
        }
    }
    Ok(-((n - pos) / n) * pos_sum - (pos / n) * neg_sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub seg: f32,
    pub edge: f32,
    pub side: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { seg: 1.0, edge: 1.0, side: 1.0 }
    }
}

/// Side-output levels that carry their own loss term. Without merging the
/// level-0 side output is already the final output and is not counted twice.
pub fn side_levels(config: &ModelConfig) -> std::ops::Range<usize> {
    if !config.deep_supervision {
        return 0..0;
    }
    let first = usize::from(config.merging == Merging::None);
    first..config.levels
}

fn targets(gts: &[MultiscaleGt], level: usize, edge: bool) -> Vec<bool> {
    gts.iter().flat_map(|g| if edge { &g.edge[level] } else { &g.seg[level] }.data().iter().copied()).collect()
}

/// Loss handles recorded on a tape.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub seg: Var,
    pub edge: Var,
    /// Mean over supervised side levels of the summed task losses.
    pub side: Option<Var>,
    /// Number of individual balanced-BCE terms.
    pub terms: usize,
}

/// `λ_seg L(seg) + λ_edge L(edge) + λ_side mean_k (L(side_seg_k) + L(side_edge_k))`,
/// each `L` averaged over the batch.
pub fn total_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    gts: &[MultiscaleGt],
    config: &ModelConfig,
    weights: &LossWeights,
) -> Result<LossTerms> {
    if gts.iter().any(|g| g.levels() != config.levels) {
        return Err(Error::shape("total_loss", "ground-truth pyramid depth differs from the model"));
    }
    let seg = tape.balanced_bce_logits(out.seg_logits, &targets(gts, 0, false), PROB_CLAMP)?;
    let edge = tape.balanced_bce_logits(out.edge_logits, &targets(gts, 0, true), PROB_CLAMP)?;
    let a = tape.scale(seg, weights.seg)?;
    let b = tape.scale(edge, weights.edge)?;
    let mut total = tape.add(a, b)?;
    let mut terms = 2;
    let levels = side_levels(config);
    let count = levels.len();
    let mut side = None;
    for k in levels {
        let s = tape.balanced_bce_logits(out.side_seg[k], &targets(gts, k, false), PROB_CLAMP)?;
        let e = tape.balanced_bce_logits(out.side_edge[k], &targets(gts, k, true), PROB_CLAMP)?;
        let pair = tape.add(s, e)?;
        side = Some(match side {
            None => pair,
            Some(acc) => tape.add(acc, pair)?,
        });
        terms += 2;
    }
    if let Some(sum) = side {
        let mean = tape.scale(sum, 1.0 / count as f32)?;
        side = Some(mean);
        let weighted = tape.scale(mean, weights.side)?;
        total = tape.add(total, weighted)?;
    }
    Ok(LossTerms { total, seg, edge, side, terms })
}

/// Loss values computed directly from predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg: f64,
    pub edge: f64,
    pub side: f64,
    pub terms: usize,
}

fn batch_bce(logits: &Tensor, gts: &[MultiscaleGt], level: usize, edge: bool) -> Result<f64> {
    let (n, _, h, w) = logits.dims4()?;
    if n != gts.len() {
        return Err(Error::shape("total_loss", format!("{n} predictions, {} targets", gts.len())));
    }
    let plane = h * w;
    let mut sum = 0.0;
    for (b, g) in gts.iter().enumerate() {
        let t = if edge { &g.edge[level] } else { &g.seg[level] };
        sum += balanced_bce_logits(&logits.data()[b * plane..(b + 1) * plane], t.data(), PROB_CLAMP)?;
    }
    Ok(sum / n as f64)
}

/// Same objective as [`total_loss`], evaluated without a tape.
pub fn bundle_loss(
    bundle: &PredictionBundle,
    gts: &[MultiscaleGt],
    config: &ModelConfig,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if gts.iter().any(|g| g.levels() != config.levels) {
        return Err(Error::shape("total_loss", "ground-truth pyramid depth differs from the model"));
    }
    let seg = batch_bce(&bundle.seg_logits, gts, 0, false)?;
    let edge = batch_bce(&bundle.edge_logits, gts, 0, true)?;
    let mut out = LossBreakdown {
        total: weights.seg as f64 * seg + weights.edge as f64 * edge,
        seg,
        edge,
        side: 0.0,
        terms: 2,
    };
    let levels = side_levels(config);
    if !levels.is_empty() {
        let count = levels.len() as f64;
        let mut sum = 0.0;
        for k in levels {
            sum += batch_bce(&bundle.side_seg[k], gts, k, false)? + batch_bce(&bundle.side_edge[k], gts, k, true)?;
            out.terms += 2;
        }
        out.side = sum / count;
        out.total += weights.side as f64 * out.side;
    }
    Ok(out)
}
