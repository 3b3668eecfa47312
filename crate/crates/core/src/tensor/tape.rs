use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel batch statistics from a training-mode batch norm; the variance
/// is the unbiased estimate used for running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample { x: Var, factor: usize },
    Relu { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: f32 },
    Concat { xs: Vec<Var> },
    SoftmaxChannels { x: Var },
    SumChannels { x: Var },
    SumAll { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    ChannelAffine { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    /// Gradient w.r.t. the logits is computed during the forward pass.
    BalancedBce { logits: Var, dlogits: Vec<f32> },
    Logit { x: Var, eps: f32 },
    AffineChannels { x: Var, scale: Vec<f32> },
    Pick { x: Var, index: usize },
}

/// Records a forward computation and replays it backwards.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. One backward pass is allowed per tape.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f32>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
    backward_done: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires: bool) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    /// Adds an input. Panics if `value` holds a non-finite entry, which
    /// only mutable access through [`Tensor::data_mut`] can produce.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push("leaf", value, Op::Leaf, requires_grad).expect("leaf values must be finite")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the backward root w.r.t. `v`; `None` before backward or
    /// when `v` does not influence the root.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.values[v.0].shape().to_vec(), g.clone()))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (batch, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, kernel {wcin}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.value(b).shape())));
            }
        }
        let (ph, pw) = (h + 2 * padding, wd + 2 * padding);
        if ph < kh || pw < kw {
            return Err(Error::shape("conv2d", "non-positive output extent"));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_parts(vec![batch, cout, geom.oh, geom.ow], out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let requires = self.req(&deps);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, requires)
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2", format!("odd extent {h}x{w}")));
        }
        let (out, argmax) = kernels::max_pool2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::from_parts(vec![n, c, h / 2, w / 2], out);
        let requires = self.req(&[x]);
        self.push("max_pool2", value, Op::MaxPool2 { x, argmax }, requires)
    }

    /// Bilinear upsampling with the align-corners-false (pixel-center)
    /// convention and edge clamping.
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if ![2, 4, 8, 16, 32].contains(&factor) {
            return Err(Error::InvalidArgument(format!("unsupported upsampling factor {factor}")));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::upsample_forward(self.value(x).data(), n * c, h, w, factor);
        let value = Tensor::from_parts(vec![n, c, h * factor, w * factor], out);
        let requires = self.req(&[x]);
        self.push("bilinear_upsample", value, Op::Upsample { x, factor }, requires)
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect());
        let requires = self.req(&[x]);
        self.push(name, value, op, requires)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, kernels::sigmoid, Op::Sigmoid { x })
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        self.map("scale", x, |v| v * s, Op::Scale { x, s })
    }

    /// `ln(p / (1 - p))` with `p` clamped to `[eps, 1 - eps]`.
    pub fn logit(&mut self, x: Var, eps: f32) -> Result<Var> {
        self.map(
            "logit",
            x,
            |p| {
                let p = p.clamp(eps, 1.0 - eps);
                (p / (1.0 - p)).ln()
            },
            Op::Logit { x, eps },
        )
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let requires = self.req(&[a, b]);
        self.push(name, value, op, requires)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let (xn, xc, xh, xw) = self.value(x).dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::shape("concat", format!("{:?}", self.value(x).shape())));
            }
            channels.push(xc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (&x, &c) in xs.iter().zip(&channels) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::from_parts(vec![n, total, h, w], data);
        let requires = self.req(xs);
        self.push("concat", value, Op::Concat { xs: xs.to_vec() }, requires)
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if c == 0 {
            return Err(Error::shape("softmax", "no channels"));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let mut m = f32::NEG_INFINITY;
                for k in 0..c {
                    m = m.max(src[base + k * plane + p]);
                }
                let mut sum = 0.0;
                for k in 0..c {
                    let e = (src[base + k * plane + p] - m).exp();
                    out[base + k * plane + p] = e;
                    sum += e;
                }
                for k in 0..c {
                    out[base + k * plane + p] /= sum;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        let requires = self.req(&[x]);
        self.push("softmax", value, Op::SoftmaxChannels { x }, requires)
    }

    /// Per-pixel softmax across `K` same-shaped maps, returned stacked along
    /// the channel axis in input order.
    pub fn softmax_over(&mut self, logits: &[Var]) -> Result<Var> {
        if logits.is_empty() {
            return Err(Error::InvalidArgument("softmax over zero maps".into()));
        }
        let first = self.value(logits[0]).shape().to_vec();
        for &l in logits {
            same_shape("softmax_over", self.value(l), &Tensor::zeros(&first))?;
        }
        let stacked = self.concat_channels(logits)?;
        self.softmax_channels(stacked)
    }

    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * plane];
        for b in 0..n {
            let dst = &mut out[b * plane..(b + 1) * plane];
            for k in 0..c {
                let s = &src[(b * c + k) * plane..(b * c + k + 1) * plane];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += v;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, 1, h, w], out);
        let requires = self.req(&[x]);
        self.push("sum_channels", value, Op::SumChannels { x }, requires)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f32 = self.value(x).data().iter().sum();
        let requires = self.req(&[x]);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll { x }, requires)
    }

    /// `x * scale[c] + shift[c]` with constant per-channel coefficients.
    pub fn affine_channels(&mut self, x: Var, scale: &[f32], shift: &[f32]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape("affine_channels", format!("{c} channels, {} coefficients", scale.len())));
        }
        let plane = h * w;
        let mut data = self.value(x).data().to_vec();
        for b in 0..n {
            for k in 0..c {
                for v in &mut data[(b * c + k) * plane..(b * c + k + 1) * plane] {
                    *v = *v * scale[k] + shift[k];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], data);
        let requires = self.req(&[x]);
        self.push("affine_channels", value, Op::AffineChannels { x, scale: scale.to_vec() }, requires)
    }

    /// Selects one element (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data()
            .get(index)
            .ok_or_else(|| Error::shape("pick", format!("index {index} out of range")))?;
        let requires = self.req(&[x]);
        self.push("pick", Tensor::scalar(v), Op::Pick { x, index }, requires)
    }

    fn channel_params(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(op, format!("expected per-channel params of length {c}")));
        }
        Ok((n, c, h * w))
    }

    /// Batch normalization with statistics of the current batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BatchStats)> {
        let (n, c, plane) = self.channel_params("batch_norm", x, gamma, beta)?;
        let m = (n * plane) as f32;
        let src = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut stats = BatchStats { mean: vec![0.0; c], var: vec![0.0; c] };
        let mut inv_std = vec![0.0; c];
        for k in 0..c {
            let chans = || (0..n).flat_map(move |b| ((b * c + k) * plane)..((b * c + k + 1) * plane));
            let mean = chans().map(|i| src[i]).sum::<f32>() / m;
            let var = chans().map(|i| (src[i] - mean).powi(2)).sum::<f32>() / m;
            let is = 1.0 / (var + eps).sqrt();
            for i in chans() {
                xhat[i] = (src[i] - mean) * is;
                out[i] = g[k] * xhat[i] + bt[k];
            }
            inv_std[k] = is;
            stats.mean[k] = mean;
            stats.var[k] = if m > 1.0 { var * m / (m - 1.0) } else { var };
        }
        let value = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        let requires = self.req(&[x, gamma, beta]);
        let v = self.push("batch_norm", value, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, requires)?;
        Ok((v, stats))
    }

    /// Batch normalization with frozen running statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let (n, c, plane) = self.channel_params("batch_norm", x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let src = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<f32> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            for k in 0..c {
                for i in ((b * c + k) * plane)..((b * c + k + 1) * plane) {
                    xhat[i] = (src[i] - running_mean[k]) * inv_std[k];
                    out[i] = g[k] * xhat[i] + bt[k];
                }
            }
        }
        let value = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        let requires = self.req(&[x, gamma, beta]);
        self.push("batch_norm", value, Op::ChannelAffine { x, gamma, beta, xhat, inv_std }, requires)
    }

    /// Class-balanced binary cross-entropy on logits of shape `[N, 1, H, W]`,
    /// averaged over the batch. See [`crate::training::balanced_bce`] for the
    /// per-image definition; probabilities are clamped to `[eps, 1 - eps]`
    /// and clamped pixels pass no gradient.
    pub fn balanced_bce_logits(&mut self, logits: Var, target: &[bool], eps: f32) -> Result<Var> {
        let (n, c, h, w) = self.value(logits).dims4()?;
        if c != 1 || target.len() != n * h * w {
            return Err(Error::shape(
                "balanced_bce",
                format!("logits {:?} vs {} targets", self.value(logits).shape(), target.len()),
            ));
        }
        let plane = h * w;
        if plane == 0 {
            return Err(Error::InvalidArgument("balanced BCE over an empty pixel set".into()));
        }
        let src = self.value(logits).data();
        let mut dlogits = vec![0.0; src.len()];
        let mut total = 0.0f64;
        for b in 0..n {
            let range = b * plane..(b + 1) * plane;
            let pos = target[range.clone()].iter().filter(|&&t| t).count();
            let neg = plane - pos;
            let (pos_w, neg_w) = (neg as f64 / plane as f64, pos as f64 / plane as f64);
            let (mut pos_sum, mut neg_sum) = (0.0f64, 0.0f64);
            for i in range {
                let (ln_p, ln_q, inside) = kernels::bce_log_terms(src[i], eps);
                let p = 1.0 / (1.0 + (-(src[i] as f64)).exp());
                if target[i] {
                    pos_sum += ln_p;
                    if inside {
                        dlogits[i] = (-pos_w * (1.0 - p) / n as f64) as f32;
                    }
                } else {
                    neg_sum += ln_q;
                    if inside {
                        dlogits[i] = (neg_w * p / n as f64) as f32;
                    }
                }
            }
            total += -(pos_w * pos_sum) - neg_w * neg_sum;
        }
        let value = Tensor::scalar((total / n as f64) as f32);
        let requires = self.req(&[logits]);
        self.push("balanced_bce", value, Op::BalancedBce { logits, dlogits }, requires)
    }

    /// Fingerprint of the branch decisions recorded so far: ReLU input signs,
    /// max-pool winners and probability clamps. Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the computed function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, op) in self.ops.iter().enumerate() {
            match op {
                Op::Relu { x } => {
                    i.hash(&mut h);
                    for &v in self.value(*x).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Logit { x, eps } => {
                    i.hash(&mut h);
                    for &v in self.value(*x).data() {
                        (v < *eps, v > 1.0 - eps).hash(&mut h);
                    }
                }
                Op::BalancedBce { dlogits, .. } => {
                    i.hash(&mut h);
                    for &d in dlogits {
                        (d == 0.0).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Runs reverse-mode differentiation from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.values[root.0].len() != 1 {
            return Err(Error::NonScalarRoot(self.values[root.0].shape().to_vec()));
        }
        self.backward_done = true;
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.requires[v.0] {
            return;
        }
        let len = self.values[v.0].len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }

    fn propagate(&mut self, i: usize, g: &[f32]) {
        // Ops are moved out while their inputs' grads are written.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let (rx, rw) = (self.requires[x.0], self.requires[w.0]);
                let rb = b.is_some_and(|b| self.requires[b.0]);
                let mut dx = rx.then(|| vec![0.0; self.values[x.0].len()]);
                let mut dw = rw.then(|| vec![0.0; self.values[w.0].len()]);
                let mut db = rb.then(|| vec![0.0; geom.cout]);
                kernels::conv2d_backward(
                    self.values[x.0].data(),
                    self.values[w.0].data(),
                    g,
                    &geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(Some(x), dx), (Some(w), dw), (b, db)] {
                    if let (Some(v), Some(d)) = (v, d) {
                        self.accumulate(v, |buf| add_into(buf, &d));
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(*x, |buf| {
                    for (&a, &gv) in argmax.iter().zip(g) {
                        buf[a as usize] += gv;
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let (n, c, h, w) = self.values[x.0].dims4().expect("rank checked in forward");
                let factor = *factor;
                self.accumulate(*x, |buf| kernels::upsample_backward(g, n * c, h, w, factor, buf));
            }
            Op::Relu { x } => {
                let x = *x;
                let out = self.values[i].data().to_vec();
                self.accumulate(x, |buf| {
                    for ((b, &gv), &o) in buf.iter_mut().zip(g).zip(&out) {
                        if o > 0.0 {
                            *b += gv;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let out = self.values[i].data().to_vec();
                self.accumulate(x, |buf| {
                    for ((b, &gv), &s) in buf.iter_mut().zip(g).zip(&out) {
                        *b += gv * s * (1.0 - s);
                    }
                });
            }
            Op::Logit { x, eps } => {
                let (x, eps) = (*x, *eps);
                let inp = self.values[x.0].data().to_vec();
                self.accumulate(x, |buf| {
                    for ((b, &gv), &p) in buf.iter_mut().zip(g).zip(&inp) {
                        if p > eps && p < 1.0 - eps {
                            *b += gv / (p * (1.0 - p));
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(*a, |buf| add_into(buf, g));
                self.accumulate(*b, |buf| add_into(buf, g));
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let va = self.values[a.0].data().to_vec();
                let vb = self.values[b.0].data().to_vec();
                self.accumulate(a, |buf| {
                    for ((d, &gv), &y) in buf.iter_mut().zip(g).zip(&vb) {
                        *d += gv * y;
                    }
                });
                self.accumulate(b, |buf| {
                    for ((d, &gv), &y) in buf.iter_mut().zip(g).zip(&va) {
                        *d += gv * y;
                    }
                });
            }
            Op::Scale { x, s } => {
                let s = *s;
                self.accumulate(*x, |buf| {
                    for (d, &gv) in buf.iter_mut().zip(g) {
                        *d += gv * s;
                    }
                });
            }
            Op::Concat { xs } => {
                let (n, total, h, w) = self.values[i].dims4().expect("rank checked in forward");
                let plane = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.values[x.0].shape()[1];
                    self.accumulate(x, |buf| {
                        for b in 0..n {
                            let src = &g[(b * total + offset) * plane..(b * total + offset + c) * plane];
                            add_into(&mut buf[b * c * plane..(b + 1) * c * plane], src);
                        }
                    });
                    offset += c;
                }
            }
            Op::SoftmaxChannels { x } => {
                let (n, c, h, w) = self.values[i].dims4().expect("rank checked in forward");
                let plane = h * w;
                let s = self.values[i].data().to_vec();
                self.accumulate(*x, |buf| {
                    for b in 0..n {
                        let base = b * c * plane;
                        for p in 0..plane {
                            let dot: f32 = (0..c).map(|k| g[base + k * plane + p] * s[base + k * plane + p]).sum();
                            for k in 0..c {
                                let j = base + k * plane + p;
                                buf[j] += s[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::SumChannels { x } => {
                let (n, c, h, w) = self.values[x.0].dims4().expect("rank checked in forward");
                let plane = h * w;
                self.accumulate(*x, |buf| {
                    for b in 0..n {
                        for k in 0..c {
                            add_into(
                                &mut buf[(b * c + k) * plane..(b * c + k + 1) * plane],
                                &g[b * plane..(b + 1) * plane],
                            );
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let gv = g[0];
                self.accumulate(*x, |buf| buf.iter_mut().for_each(|d| *d += gv));
            }
            Op::AffineChannels { x, scale } => {
                let (n, c, h, w) = self.values[x.0].dims4().expect("rank checked in forward");
                let plane = h * w;
                self.accumulate(*x, |buf| {
                    for b in 0..n {
                        for k in 0..c {
                            let r = (b * c + k) * plane..(b * c + k + 1) * plane;
                            for (d, &gv) in buf[r.clone()].iter_mut().zip(&g[r]) {
                                *d += gv * scale[k];
                            }
                        }
                    }
                });
            }
            Op::Pick { x, index } => {
                let (gv, index) = (g[0], *index);
                self.accumulate(*x, |buf| buf[index] += gv);
            }
            Op::BalancedBce { logits, dlogits } => {
                let gv = g[0];
                self.accumulate(*logits, |buf| {
                    for (d, &dl) in buf.iter_mut().zip(dlogits) {
                        *d += gv * dl;
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                self.norm_backward(*x, *gamma, *beta, xhat, inv_std, g, true);
            }
            Op::ChannelAffine { x, gamma, beta, xhat, inv_std } => {
                self.norm_backward(*x, *gamma, *beta, xhat, inv_std, g, false);
            }
        }
        self.ops[i] = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f32],
        inv_std: &[f32],
        g: &[f32],
        batch_stats: bool,
    ) {
        let (n, c, h, w) = self.values[x.0].dims4().expect("rank checked in forward");
        let plane = h * w;
        let m = (n * plane) as f32;
        let idx = |k: usize| (0..n).flat_map(move |b| ((b * c + k) * plane)..((b * c + k + 1) * plane));
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for k in 0..c {
            for i in idx(k) {
                dgamma[k] += g[i] * xhat[i];
                dbeta[k] += g[i];
            }
        }
        let gam = self.values[gamma.0].data().to_vec();
        self.accumulate(x, |buf| {
            for k in 0..c {
                let scale = gam[k] * inv_std[k];
                if batch_stats {
                    for i in idx(k) {
                        buf[i] += scale / m * (m * g[i] - dbeta[k] - xhat[i] * dgamma[k]);
                    }
                } else {
                    for i in idx(k) {
                        buf[i] += scale * g[i];
                    }
                }
            }
        });
        self.accumulate(gamma, |buf| add_into(buf, &dgamma));
        self.accumulate(beta, |buf| add_into(buf, &dbeta));
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
