//! The HED-UNet network.
//!
//! A UNet-style encoder-decoder produces a feature pyramid `F_0 .. F_{L-1}`
//! (decoder maps, `F_{L-1}` being the bottleneck). Every level carries a
//! 1x1 side-output layer per task. Two merging heads, one per task, turn the
//! side outputs into full-resolution logits: either the level-0 side output
//! alone (`None`), a learned 1x1 convolution over the upsampled stack
//! (`Learned`), or a per-pixel softmax attention over levels (`Attention`):
//!
//! ```text
//! logit(i, j) = sum_k  up(f_k(F_k))(i, j) * softmax_k( up(g_k(F_k)) )(i, j)
//! ```

mod checkpoint;
mod rf;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use rf::{chain_receptive_field, theoretical_rf, RfOp};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix, Rng};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
/// Clamp applied before `logit` when merging in probability space.
pub const PROB_EPS: f32 = 1e-6;
/// Encoder level whose input receives the DEM channel (after the fourth
/// downsampling step).
pub const DEM_LEVEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Merging {
    None,
    Learned,
    Attention,
}

/// Whether merging heads combine side-output logits or probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MergeSpace {
    Logits,
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub merging: Merging,
    pub merge_space: MergeSpace,
    pub deep_supervision: bool,
    pub use_dem: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 6,
            base_channels: 16,
            in_channels: 2,
            merging: Merging::Attention,
            merge_space: MergeSpace::Logits,
            deep_supervision: true,
            use_dem: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.levels) {
            return Err(Error::InvalidConfig(format!("levels must be in 2..=6, got {}", self.levels)));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        if self.use_dem && self.levels <= DEM_LEVEL {
            return Err(Error::InvalidConfig(format!(
                "the DEM joins after downsampling step {DEM_LEVEL}, which needs at least {} levels",
                DEM_LEVEL + 1
            )));
        }
        Ok(())
    }

    /// Feature width at pyramid level `k`.
    pub fn channels(&self, k: usize) -> usize {
        self.base_channels << k.min(4)
    }

    /// Input extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated by the
    /// trainer from [`ForwardOutput::bn_stats`].
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Debug, Clone, Copy)]
struct DoubleConv {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct TaskHead {
    learned: Option<Conv>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Per-channel standardization applied to an input before the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNorm {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelNorm {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Mean and standard deviation per channel over `[c, h, w]`-shaped
    /// samples. A zero spread falls back to 1.
    pub fn fit<'a>(channels: usize, samples: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        let mut count = 0usize;
        for s in samples {
            let plane = s.len() / channels;
            for c in 0..channels {
                for &v in &s[c * plane..(c + 1) * plane] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        if count == 0 {
            return Self::identity(channels);
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std = (0..channels)
            .map(|c| {
                let var = (sq[c] / n - (sum[c] / n).powi(2)).max(0.0);
                if var > 1e-12 { var.sqrt() as f32 } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    fn scale_shift(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self.std.iter().map(|s| 1.0 / s).collect();
        let shift = self.mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
        (scale, shift)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    norm_names: Vec<String>,
    norms: Vec<RunningStats>,
    pub input_norm: ChannelNorm,
    pub dem_norm: ChannelNorm,
    encoder: Vec<DoubleConv>,
    decoder: Vec<DoubleConv>,
    /// `skip[k]` maps level `k + 1` features to the width of level `k`.
    skip: Vec<Conv>,
    side_seg: Vec<Conv>,
    side_edge: Vec<Conv>,
    attn_seg: Vec<Conv>,
    attn_edge: Vec<Conv>,
    head_seg: TaskHead,
    head_edge: TaskHead,
}

/// Stable FNV-1a hash of a parameter name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

struct Builder {
    seed: u64,
    names: Vec<String>,
    params: Vec<Tensor>,
    norm_names: Vec<String>,
    norms: Vec<RunningStats>,
}

impl Builder {
    fn param(&mut self, name: String, value: Tensor) -> usize {
        self.names.push(name);
        self.params.push(value);
        self.params.len() - 1
    }

    /// Kaiming (fan-in) normal weights, zero bias. Each tensor draws from a
    /// stream keyed by its name, so equally named parameters of different
    /// configurations start identical.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Conv {
        let mut rng = Rng::new(mix(self.seed ^ name_hash(name)));
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w: Vec<f32> = (0..cout * cin * k * k).map(|_| (rng.normal() * std) as f32).collect();
        let weight = self.param(format!("{name}.weight"), Tensor::from_parts(vec![cout, cin, k, k], w));
        let bias = bias.then(|| self.param(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv { weight, bias, pad: k / 2 }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self.param(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let beta = self.param(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.norm_names.push(name.to_string());
        self.norms.push(RunningStats { mean: vec![0.0; c], var: vec![1.0; c] });
        Norm { gamma, beta, state: self.norms.len() - 1 }
    }

    fn double_conv(&mut self, name: &str, cin: usize, cout: usize) -> DoubleConv {
        DoubleConv {
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, false),
            norm1: self.norm(&format!("{name}.bn1"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, false),
            norm2: self.norm(&format!("{name}.bn2"), cout),
        }
    }
}

/// Recorded forward pass: handles into the tape plus side information the
/// trainer needs.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub seg_logits: Var,
    pub edge_logits: Var,
    pub side_seg: Vec<Var>,
    pub side_edge: Vec<Var>,
    /// Stacked `[N, K, H, W]` attention weights (Attention merging only).
    pub attn_seg: Option<Var>,
    pub attn_edge: Option<Var>,
    pub input: Var,
    /// Tape handles of all parameters, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics per norm layer (training mode only).
    pub bn_stats: Vec<(usize, BatchStats)>,
}

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBundle {
    pub seg_logits: Tensor,
    pub edge_logits: Tensor,
    pub side_seg: Vec<Tensor>,
    pub side_edge: Vec<Tensor>,
    /// Per-level `[N, 1, H, W]` weight maps (Attention merging only).
    pub attn_seg: Vec<Tensor>,
    pub attn_edge: Vec<Tensor>,
}

fn split_channels(t: &Tensor) -> Vec<Tensor> {
    let (n, k, h, w) = t.dims4().expect("stacked attention is rank 4");
    let plane = h * w;
    (0..k)
        .map(|c| {
            let mut data = Vec::with_capacity(n * plane);
            for b in 0..n {
                data.extend_from_slice(&t.data()[(b * k + c) * plane..(b * k + c + 1) * plane]);
            }
            Tensor::from_parts(vec![n, 1, h, w], data)
        })
        .collect()
}

impl PredictionBundle {
    pub fn from_forward(tape: &Tape, out: &ForwardOutput) -> Self {
        let vals = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect();
        Self {
            seg_logits: tape.value(out.seg_logits).clone(),
            edge_logits: tape.value(out.edge_logits).clone(),
            side_seg: vals(&out.side_seg),
            side_edge: vals(&out.side_edge),
            attn_seg: out.attn_seg.map(|a| split_channels(tape.value(a))).unwrap_or_default(),
            attn_edge: out.attn_edge.map(|a| split_channels(tape.value(a))).unwrap_or_default(),
        }
    }
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    params: &'a [Var],
    mode: Mode,
    bn_stats: Vec<(usize, BatchStats)>,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let levels = config.levels;
        let mut b = Builder {
            seed: config.seed,
            names: Vec::new(),
            params: Vec::new(),
            norm_names: Vec::new(),
            norms: Vec::new(),
        };
        let mut encoder = Vec::with_capacity(levels);
        for k in 0..levels {
            let mut cin = if k == 0 { config.in_channels } else { config.channels(k - 1) };
            if config.use_dem && k == DEM_LEVEL {
                cin += 1;
            }
            encoder.push(b.double_conv(&format!("enc{k}"), cin, config.channels(k)));
        }
        let mut decoder = Vec::with_capacity(levels - 1);
        let mut skip = Vec::with_capacity(levels - 1);
        for k in 0..levels - 1 {
            skip.push(b.conv(&format!("skip{k}"), config.channels(k + 1), config.channels(k), 1, true));
            decoder.push(b.double_conv(&format!("dec{k}"), config.channels(k), config.channels(k)));
        }
        let side = |b: &mut Builder, prefix: &str| -> Vec<Conv> {
            (0..levels).map(|k| b.conv(&format!("{prefix}{k}"), config.channels(k), 1, 1, true)).collect()
        };
        let side_seg = side(&mut b, "side_seg");
        let side_edge = side(&mut b, "side_edge");
        let (attn_seg, attn_edge) = if config.merging == Merging::Attention {
            (side(&mut b, "attn_seg"), side(&mut b, "attn_edge"))
        } else {
            (Vec::new(), Vec::new())
        };
        let head = |b: &mut Builder, name: &str| TaskHead {
            learned: (config.merging == Merging::Learned).then(|| b.conv(name, levels, 1, 1, false)),
        };
        let head_seg = head(&mut b, "merge_seg");
        let head_edge = head(&mut b, "merge_edge");
        Ok(Self {
            input_norm: ChannelNorm::identity(config.in_channels),
            dem_norm: ChannelNorm::identity(1),
            config,
            names: b.names,
            params: b.params,
            norm_names: b.norm_names,
            norms: b.norms,
            encoder,
            decoder,
            skip,
            side_seg,
            side_edge,
            attn_seg,
            attn_edge,
            head_seg,
            head_edge,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.param_index(name).map(|i| &mut self.params[i])
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.norms
    }

    pub fn norm_names(&self) -> &[String] {
        &self.norm_names
    }

    pub(crate) fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.norms
    }

    /// Blends batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (i, s) in stats {
            let r = &mut self.norms[*i];
            for c in 0..r.mean.len() {
                r.mean[c] = (1.0 - BN_MOMENTUM) * r.mean[c] + BN_MOMENTUM * s.mean[c];
                r.var[c] = (1.0 - BN_MOMENTUM) * r.var[c] + BN_MOMENTUM * s.var[c];
            }
        }
    }

    /// Overwrites the attention layers so every level gets the same constant
    /// logit; the attention merge then averages the side outputs.
    pub fn zero_attention(&mut self) {
        for c in self.attn_seg.clone().iter().chain(self.attn_edge.clone().iter()) {
            self.params[c.weight].data_mut().fill(0.0);
            if let Some(b) = c.bias {
                self.params[b].data_mut().fill(0.0);
            }
        }
    }

    fn check_input(&self, input: &Tensor, dem: Option<&Tensor>) -> Result<()> {
        let (_, c, h, w) = input.dims4()?;
        let d = self.config.divisor();
        if c != self.config.in_channels {
            return Err(Error::shape("forward", format!("expected {} input channels, got {c}", self.config.in_channels)));
        }
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::shape("forward", format!("extent {h}x{w} not divisible by {d}")));
        }
        match (self.config.use_dem, dem) {
            (true, None) => Err(Error::shape("forward", "model expects a DEM")),
            (false, Some(_)) => Err(Error::shape("forward", "model was built without a DEM input")),
            (true, Some(dem)) => {
                let (dn, dc, dh, dw) = dem.dims4()?;
                if dn != input.shape()[0] || dc != 1 || dh * 16 != h || dw * 16 != w {
                    return Err(Error::shape("forward", format!("DEM {:?} must be [N, 1, H/16, W/16]", dem.shape())));
                }
                Ok(())
            }
            (false, None) => Ok(()),
        }
    }

    /// Records a forward pass on `tape`. Parameters enter as gradient-tracked
    /// leaves; the input does when `input_grad` is set.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        dem: Option<&Tensor>,
        mode: Mode,
        input_grad: bool,
    ) -> Result<ForwardOutput> {
        self.check_input(input, dem)?;
        let finite = |t: &Tensor| t.data().iter().all(|v| v.is_finite());
        if !self.params.iter().all(finite) {
            return Err(Error::NonFinite { op: "parameter" });
        }
        if !finite(input) || !dem.is_none_or(finite) {
            return Err(Error::NonFinite { op: "input" });
        }
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let mut ctx = Ctx { tape, params: &params, mode, bn_stats: Vec::new() };
        let levels = self.config.levels;

        let x = ctx.tape.leaf(input.clone(), input_grad);
        let (scale, shift) = self.input_norm.scale_shift();
        let mut h = ctx.tape.affine_channels(x, &scale, &shift)?;
        let dem_var = match dem {
            Some(d) => {
                let raw = ctx.tape.leaf(d.clone(), false);
                let (s, t) = self.dem_norm.scale_shift();
                Some(ctx.tape.affine_channels(raw, &s, &t)?)
            }
            None => None,
        };

        let mut enc = Vec::with_capacity(levels);
        for k in 0..levels {
            if k > 0 {
                h = ctx.tape.max_pool2(enc[k - 1])?;
                if k == DEM_LEVEL {
                    if let Some(d) = dem_var {
                        h = ctx.tape.concat_channels(&[h, d])?;
                    }
                }
            }
            h = self.double_conv(&mut ctx, &self.encoder[k], h)?;
            enc.push(h);
        }

        let mut dec = enc.clone();
        for k in (0..levels - 1).rev() {
            let proj = self.conv(&mut ctx, &self.skip[k], dec[k + 1])?;
            let up = ctx.tape.bilinear_upsample(proj, 2)?;
            let sum = ctx.tape.add(up, enc[k])?;
            dec[k] = self.double_conv(&mut ctx, &self.decoder[k], sum)?;
        }

        let side = |ctx: &mut Ctx, layers: &[Conv]| -> Result<Vec<Var>> {
            layers.iter().zip(&dec).map(|(l, &f)| self.conv(ctx, l, f)).collect()
        };
        let side_seg = side(&mut ctx, &self.side_seg)?;
        let side_edge = side(&mut ctx, &self.side_edge)?;
        let attn_seg_logits = side(&mut ctx, &self.attn_seg)?;
        let attn_edge_logits = side(&mut ctx, &self.attn_edge)?;

        let (seg_logits, attn_seg) = self.merge(&mut ctx, &self.head_seg, &side_seg, &attn_seg_logits)?;
        let (edge_logits, attn_edge) = self.merge(&mut ctx, &self.head_edge, &side_edge, &attn_edge_logits)?;

        let bn_stats = ctx.bn_stats;
        Ok(ForwardOutput {
            seg_logits,
            edge_logits,
            side_seg,
            side_edge,
            attn_seg,
            attn_edge,
            input: x,
            params,
            bn_stats,
        })
    }

    /// Inference-mode forward pass returning plain values.
    pub fn predict(&self, input: &Tensor, dem: Option<&Tensor>) -> Result<PredictionBundle> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input, dem, Mode::Eval, false)?;
        Ok(PredictionBundle::from_forward(&tape, &out))
    }

    fn conv(&self, ctx: &mut Ctx, c: &Conv, x: Var) -> Result<Var> {
        let bias = c.bias.map(|b| ctx.params[b]);
        ctx.tape.conv2d(x, ctx.params[c.weight], bias, 1, c.pad)
    }

    fn norm(&self, ctx: &mut Ctx, n: &Norm, x: Var) -> Result<Var> {
        let (g, b) = (ctx.params[n.gamma], ctx.params[n.beta]);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, g, b, BN_EPS)?;
                ctx.bn_stats.push((n.state, stats));
                Ok(y)
            }
            Mode::Eval => {
                let r = &self.norms[n.state];
                ctx.tape.batch_norm_eval(x, g, b, &r.mean, &r.var, BN_EPS)
            }
        }
    }

    fn double_conv(&self, ctx: &mut Ctx, block: &DoubleConv, x: Var) -> Result<Var> {
        let y = self.conv(ctx, &block.conv1, x)?;
        let y = self.norm(ctx, &block.norm1, y)?;
        let y = ctx.tape.relu(y)?;
        let y = self.conv(ctx, &block.conv2, y)?;
        let y = self.norm(ctx, &block.norm2, y)?;
        ctx.tape.relu(y)
    }

    fn upsample_to_full(&self, ctx: &mut Ctx, maps: &[Var]) -> Result<Vec<Var>> {
        maps.iter()
            .enumerate()
            .map(|(k, &m)| if k == 0 { Ok(m) } else { ctx.tape.bilinear_upsample(m, 1 << k) })
            .collect()
    }

    fn merge(&self, ctx: &mut Ctx, head: &TaskHead, sides: &[Var], attn: &[Var]) -> Result<(Var, Option<Var>)> {
        if self.config.merging == Merging::None {
            return Ok((sides[0], None));
        }
        let probs = self.config.merge_space == MergeSpace::Probabilities;
        let mut ups = self.upsample_to_full(ctx, sides)?;
        if probs {
            ups = ups.into_iter().map(|u| ctx.tape.sigmoid(u)).collect::<Result<_>>()?;
        }
        let stacked = ctx.tape.concat_channels(&ups)?;
        let (merged, weights) = match self.config.merging {
            Merging::Learned => {
                let conv = head.learned.expect("learned head exists for learned merging");
                (self.conv(ctx, &conv, stacked)?, None)
            }
            Merging::Attention => {
                let att = self.upsample_to_full(ctx, attn)?;
                let w = ctx.tape.softmax_over(&att)?;
                let prod = ctx.tape.mul(stacked, w)?;
                (ctx.tape.sum_channels(prod)?, Some(w))
            }
            Merging::None => unreachable!("handled above"),
        };
        let logits = if probs { ctx.tape.logit(merged, PROB_EPS)? } else { merged };
        Ok((logits, weights))
    }
}

#[cfg(test)]
mod tests;
