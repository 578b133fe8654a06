//! Trainable networks.
//!
//! Master weights stay real-valued. Every forward pass re-quantizes them from
//! scratch (tanh / channel max for k >= 2, per-channel binarization for k = 1)
//! and quantizes clamp outputs to `k_a` bits. The backward pass replaces each
//! quantizer by its straight-through surrogate, so gradients land on the masters.

mod deploy;
mod linalg;
mod optim;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{LayerDef, LayerKind, NetworkDef};
use crate::error::{invalid, QbitError, Result};
use crate::kernels::{col2im, im2col, ConvGeometry};
use crate::quant::{
    binarize_channels, binarize_rows_into, fake_quantize_weight_rows, levels, quantize_weights, unit_code,
    weight_surrogate_grad_rows, QuantizedTensor, FULL_PRECISION_BITS,
};
use crate::schedule::BitwidthSchedule;
use crate::tensor::RealTensor;

pub use deploy::{deploy, fold_scales, InputMode, Op, PackedModel, WeightStore, WeightedOp};
pub use optim::{lr_at, Optimizer, OptimizerKind, TrainConfig};
pub use train::{argmax, evaluate, softmax_cross_entropy, train, Classifier, EpochMetrics, TrainReport, METRICS_HEADER};

pub(crate) use linalg::gemm;

/// Batch-norm running-average momentum.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running averages are updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvShape {
    pub geom: ConvGeometry,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Convolution or fully-connected layer; weights are `[out x fan_in]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    pub name: String,
    pub index: usize,
    pub slot: usize,
    pub conv: Option<ConvShape>,
    pub out: usize,
    pub fan_in: usize,
    pub in_len: usize,
    pub out_len: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub bits: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BatchNorm {
    pub name: String,
    pub index: usize,
    pub slot: usize,
    pub channels: usize,
    pub pix: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Clamp {
    pub name: String,
    pub index: usize,
    pub bits: u8,
    pub len: usize,
}

/// Pooling window geometry over `[C x H x W]`. Padded positions are skipped by
/// max pooling and count as zeros for average pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub max: bool,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Pool {
    pub name: String,
    pub index: usize,
    pub spec: PoolSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Residual {
    pub name: String,
    pub index: usize,
    pub body: Vec<Node>,
    pub shortcut: Vec<Node>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Node {
    Dense(Dense),
    BatchNorm(BatchNorm),
    Clamp(Clamp),
    Pool(Pool),
    Residual(Residual),
}

impl Node {
    fn index(&self) -> usize {
        match self {
            Node::Dense(d) => d.index,
            Node::BatchNorm(b) => b.index,
            Node::Clamp(c) => c.index,
            Node::Pool(p) => p.index,
            Node::Residual(r) => r.index,
        }
    }

    fn name(&self) -> &str {
        match self {
            Node::Dense(d) => &d.name,
            Node::BatchNorm(b) => &b.name,
            Node::Clamp(c) => &c.name,
            Node::Pool(p) => &p.name,
            Node::Residual(r) => &r.name,
        }
    }
}

impl Dense {
    /// Weights as seen by the forward pass.
    pub(crate) fn effective_weight(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.weight.len()];
        match self.bits {
            FULL_PRECISION_BITS => out.copy_from_slice(&self.weight),
            1 => {
                let mut scales = Vec::with_capacity(self.out);
                binarize_rows_into(&self.weight, self.out, self.fan_in, &mut scales, Some(&mut out));
            }
            b => fake_quantize_weight_rows(&self.weight, self.out, self.fan_in, b, &mut out),
        }
        out
    }

    /// Straight-through gradient with respect to the master weights.
    fn master_grad(&self, g_eff: Vec<f64>) -> Vec<f64> {
        match self.bits {
            FULL_PRECISION_BITS => g_eff,
            1 => g_eff
                .iter()
                .zip(&self.weight)
                .map(|(&g, &w)| if w.abs() < 1.0 { g } else { 0.0 })
                .collect(),
            _ => {
                let mut out = vec![0.0; g_eff.len()];
                weight_surrogate_grad_rows(&self.weight, self.out, self.fan_in, &g_eff, &mut out);
                out
            }
        }
    }

    /// Quantized weights `[out x fan_in]` for deployment.
    pub(crate) fn quantize(&self) -> Result<QuantizedTensor> {
        let w = RealTensor::new(vec![self.out, self.fan_in], self.weight.clone())?;
        if self.bits == 1 {
            binarize_channels(&w)
        } else {
            quantize_weights(&w, self.bits)
        }
    }
}

/// Intermediates recorded by a forward pass for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    batch: usize,
    mode: Mode,
    nodes: Vec<NodeCache>,
}

#[derive(Debug, Clone)]
enum NodeCache {
    Dense { input: Vec<f64>, w_eff: Vec<f64> },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Clamp { input: Vec<f64> },
    MaxPool { argmax: Vec<usize> },
    AvgPool,
    Residual { body: Vec<NodeCache>, shortcut: Vec<NodeCache> },
}

/// Parameter gradients in [`Network::param_info`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub len: usize,
    /// Weight decay applies (conv / linear weights only).
    pub decay: bool,
}

struct BnUpdate {
    index: usize,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    def: NetworkDef,
    nodes: Vec<Node>,
    n_params: usize,
    version: u64,
}

impl Network {
    /// Builds a network with fan-in uniform initialization in `[-1/sqrt(n), 1/sqrt(n)]`,
    /// zero biases, unit BN scale and zero BN shift. Bitwidths come from `def`.
    pub fn new(def: NetworkDef, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut index = 0;
        let mut slot = 0;
        let nodes = build(&def.layers, &mut index, &mut slot, &mut rng)?;
        Ok(Self {
            def,
            nodes,
            n_params: slot,
            version: 0,
        })
    }

    /// Applies `schedule` to `def` (activation bits from its quantized entries)
    /// and builds the network.
    pub fn with_schedule(mut def: NetworkDef, schedule: &BitwidthSchedule, seed: u64) -> Result<Self> {
        let k_a = schedule.activation_bits().unwrap_or(FULL_PRECISION_BITS);
        def.set_bitwidths(&|g| schedule.weight_bits(g), k_a)?;
        Self::new(def, seed)
    }

    pub fn def(&self) -> &NetworkDef {
        &self.def
    }

    pub(crate) fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn input_len(&self) -> usize {
        self.def.input.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.def.classes
    }

    /// Incremented whenever parameters may have changed.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::with_capacity(self.n_params);
        walk(&self.nodes, &mut |n| match n {
            Node::Dense(d) => {
                out.push(ParamInfo {
                    name: format!("{}.weight", d.name),
                    len: d.weight.len(),
                    decay: true,
                });
                if let Some(b) = &d.bias {
                    out.push(ParamInfo {
                        name: format!("{}.bias", d.name),
                        len: b.len(),
                        decay: false,
                    });
                }
            }
            Node::BatchNorm(b) => {
                for what in ["gamma", "beta"] {
                    out.push(ParamInfo {
                        name: format!("{}.{what}", b.name),
                        len: b.channels,
                        decay: false,
                    });
                }
            }
            _ => {}
        });
        out
    }

    /// Trainable parameters in [`Network::param_info`] order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.n_params);
        walk(&self.nodes, &mut |n| match n {
            Node::Dense(d) => {
                out.push(d.weight.as_slice());
                if let Some(b) = &d.bias {
                    out.push(b.as_slice());
                }
            }
            Node::BatchNorm(b) => {
                out.push(b.gamma.as_slice());
                out.push(b.beta.as_slice());
            }
            _ => {}
        });
        out
    }

    /// Mutable trainable parameters; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.version += 1;
        let mut out = Vec::with_capacity(self.n_params);
        walk_mut(&mut self.nodes, &mut |n| match n {
            Node::Dense(d) => {
                out.push(&mut d.weight);
                if let Some(b) = &mut d.bias {
                    out.push(b);
                }
            }
            Node::BatchNorm(b) => {
                out.push(&mut b.gamma);
                out.push(&mut b.beta);
            }
            _ => {}
        });
        out
    }

    /// Batch-norm running means and variances, alternating.
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        walk(&self.nodes, &mut |n| {
            if let Node::BatchNorm(b) = n {
                out.push(b.mean.as_slice());
                out.push(b.var.as_slice());
            }
        });
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.version += 1;
        let mut out = Vec::new();
        walk_mut(&mut self.nodes, &mut |n| {
            if let Node::BatchNorm(b) = n {
                out.push(&mut b.mean);
                out.push(&mut b.var);
            }
        });
        out
    }

    /// Replaces parameters and buffers, checking every length.
    pub fn load_state(&mut self, params: Vec<Vec<f64>>, buffers: Vec<Vec<f64>>) -> Result<()> {
        let info = self.param_info();
        if params.len() != info.len() {
            return Err(invalid(format!("expected {} parameter tensors, got {}", info.len(), params.len())));
        }
        for (p, i) in params.iter().zip(&info) {
            if p.len() != i.len {
                return Err(invalid(format!("`{}` expects {} values, got {}", i.name, i.len, p.len())));
            }
        }
        let lens: Vec<usize> = self.buffers().iter().map(|b| b.len()).collect();
        if buffers.len() != lens.len() || buffers.iter().zip(&lens).any(|(b, &l)| b.len() != l) {
            return Err(invalid("batch-norm buffer layout does not match the network"));
        }
        for (dst, src) in self.params_mut().into_iter().zip(params) {
            *dst = src;
        }
        for (dst, src) in self.buffers_mut().into_iter().zip(buffers) {
            *dst = src;
        }
        Ok(())
    }

    /// Forward pass recording a cache. In [`Mode::Train`] batch-norm running
    /// statistics are updated afterwards.
    pub fn forward(&mut self, input: &[f64], batch: usize, mode: Mode) -> Result<(Vec<f64>, ForwardCache)> {
        let (logits, cache, updates) = self.run(input, batch, mode, true)?;
        if !updates.is_empty() {
            apply_bn_updates(&mut self.nodes, &updates);
        }
        let cache = ForwardCache {
            version: self.version,
            ..cache.expect("cache requested")
        };
        Ok((logits, cache))
    }

    /// Forward pass without side effects. [`Mode::Train`] uses batch statistics
    /// but leaves the running averages alone.
    pub fn forward_pure(&self, input: &[f64], batch: usize, mode: Mode) -> Result<Vec<f64>> {
        Ok(self.run(input, batch, mode, false)?.0)
    }

    /// Inference with running batch-norm statistics.
    pub fn infer(&self, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.forward_pure(input, batch, Mode::Eval)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        input: &[f64],
        batch: usize,
        mode: Mode,
        record: bool,
    ) -> Result<(Vec<f64>, Option<ForwardCache>, Vec<BnUpdate>)> {
        if input.len() != batch * self.input_len() {
            return Err(invalid(format!(
                "input holds {} values, expected {} x {}",
                input.len(),
                batch,
                self.input_len()
            )));
        }
        if let Some(i) = input.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite input value at {i}")));
        }
        let mut ctx = Ctx {
            batch,
            mode,
            record,
            updates: Vec::new(),
        };
        let mut caches = Vec::new();
        let logits = forward_nodes(&self.nodes, input.to_vec(), &mut ctx, &mut caches)?;
        let cache = record.then_some(ForwardCache {
            version: self.version,
            batch,
            mode,
            nodes: caches,
        });
        Ok((logits, cache, ctx.updates))
    }

    /// Straight-through backward pass from the logit gradient.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64]) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(QbitError::InvalidState(format!(
                "forward cache from parameter version {} used at version {}",
                cache.version, self.version
            )));
        }
        if grad_logits.len() != cache.batch * self.classes() {
            return Err(invalid("logit gradient has the wrong length"));
        }
        let mut tensors = vec![Vec::new(); self.n_params];
        backward_nodes(
            &self.nodes,
            &cache.nodes,
            grad_logits.to_vec(),
            cache.batch,
            cache.mode,
            false,
            &mut tensors,
        );
        Ok(Gradients { tensors })
    }
}

fn walk<'a>(nodes: &'a [Node], f: &mut dyn FnMut(&'a Node)) {
    for n in nodes {
        f(n);
        if let Node::Residual(r) = n {
            walk(&r.body, f);
            walk(&r.shortcut, f);
        }
    }
}

fn walk_mut<'a>(nodes: &'a mut [Node], f: &mut dyn FnMut(&'a mut Node)) {
    for n in nodes {
        if let Node::Residual(r) = n {
            walk_mut(&mut r.body, f);
            walk_mut(&mut r.shortcut, f);
        } else {
            f(n);
        }
    }
}

fn apply_bn_updates(nodes: &mut [Node], updates: &[BnUpdate]) {
    walk_mut(nodes, &mut |n| {
        if let Node::BatchNorm(b) = n {
            if let Some(u) = updates.iter().find(|u| u.index == b.index) {
                for c in 0..b.channels {
                    b.mean[c] = BN_MOMENTUM * b.mean[c] + (1.0 - BN_MOMENTUM) * u.mean[c];
                    b.var[c] = BN_MOMENTUM * b.var[c] + (1.0 - BN_MOMENTUM) * u.var[c];
                }
            }
        }
    });
}

fn build(layers: &[LayerDef], index: &mut usize, slot: &mut usize, rng: &mut ChaCha8Rng) -> Result<Vec<Node>> {
    let mut nodes = Vec::with_capacity(layers.len());
    for l in layers {
        let idx = *index;
        *index += 1;
        let in_len: usize = l.in_shape.iter().product();
        let out_len: usize = l.out_shape.iter().product();
        let node = match &l.kind {
            LayerKind::Conv2d { geometry, groups, bias } => {
                if *groups != 1 {
                    return Err(QbitError::Unsupported(format!(
                        "layer `{}`: grouped convolution is only supported for size accounting",
                        l.name
                    )));
                }
                let conv = ConvShape {
                    geom: *geometry,
                    h: l.in_shape[1],
                    w: l.in_shape[2],
                    oh: l.out_shape[1],
                    ow: l.out_shape[2],
                };
                dense(l, idx, slot, Some(conv), geometry.out_channels, geometry.patch_len(), in_len, out_len, *bias, rng)
            }
            LayerKind::Linear {
                in_features,
                out_features,
                bias,
            } => dense(l, idx, slot, None, *out_features, *in_features, in_len, out_len, *bias, rng),
            LayerKind::BatchNorm { channels } => {
                let s = *slot;
                *slot += 2;
                Node::BatchNorm(BatchNorm {
                    name: l.name.clone(),
                    index: idx,
                    slot: s,
                    channels: *channels,
                    pix: l.in_shape[1] * l.in_shape[2],
                    gamma: vec![1.0; *channels],
                    beta: vec![0.0; *channels],
                    mean: vec![0.0; *channels],
                    var: vec![1.0; *channels],
                    eps: BN_EPS,
                })
            }
            LayerKind::Clamp => Node::Clamp(Clamp {
                name: l.name.clone(),
                index: idx,
                bits: l.activation.bits.get(),
                len: in_len,
            }),
            LayerKind::MaxPool { kernel, stride, padding } | LayerKind::AvgPool { kernel, stride, padding } => {
                Node::Pool(Pool {
                    name: l.name.clone(),
                    index: idx,
                    spec: PoolSpec {
                        max: matches!(l.kind, LayerKind::MaxPool { .. }),
                        c: l.in_shape[0],
                        h: l.in_shape[1],
                        w: l.in_shape[2],
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                        oh: l.out_shape[1],
                        ow: l.out_shape[2],
                    },
                })
            }
            LayerKind::Residual { body, shortcut, .. } => {
                let body = build(body, index, slot, rng)?;
                let shortcut = build(shortcut, index, slot, rng)?;
                Node::Residual(Residual {
                    name: l.name.clone(),
                    index: idx,
                    body,
                    shortcut,
                    len: out_len,
                })
            }
        };
        nodes.push(node);
    }
    Ok(nodes)
}

#[allow(clippy::too_many_arguments)]
fn dense(
    l: &LayerDef,
    index: usize,
    slot: &mut usize,
    conv: Option<ConvShape>,
    out: usize,
    fan_in: usize,
    in_len: usize,
    out_len: usize,
    bias: bool,
    rng: &mut ChaCha8Rng,
) -> Node {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let weight = (0..out * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
    let s = *slot;
    *slot += 1 + usize::from(bias);
    Node::Dense(Dense {
        name: l.name.clone(),
        index,
        slot: s,
        conv,
        out,
        fan_in,
        in_len,
        out_len,
        weight,
        bias: bias.then(|| vec![0.0; out]),
        bits: l.weight.bits.get(),
    })
}

struct Ctx {
    batch: usize,
    mode: Mode,
    record: bool,
    updates: Vec<BnUpdate>,
}

fn forward_nodes(nodes: &[Node], mut x: Vec<f64>, ctx: &mut Ctx, caches: &mut Vec<NodeCache>) -> Result<Vec<f64>> {
    for node in nodes {
        let (y, cache) = forward_node(node, x, ctx)?;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(QbitError::NumericFailure {
                layer: node.index(),
                detail: format!("`{}` produced {} at {i}", node.name(), y[i]),
            });
        }
        if ctx.record {
            caches.push(cache);
        }
        x = y;
    }
    Ok(x)
}

fn forward_node(node: &Node, x: Vec<f64>, ctx: &mut Ctx) -> Result<(Vec<f64>, NodeCache)> {
    let b = ctx.batch;
    Ok(match node {
        Node::Dense(d) => {
            let w_eff = d.effective_weight();
            let y = dense_forward(d, &x, &w_eff, b);
            (y, NodeCache::Dense { input: x, w_eff })
        }
        Node::BatchNorm(bn) => {
            let (y, xhat, inv_std, update) = bn_forward(bn, &x, b, ctx.mode);
            if let Some((mean, var)) = update {
                ctx.updates.push(BnUpdate {
                    index: bn.index,
                    mean,
                    var,
                });
            }
            let cache = if ctx.record {
                NodeCache::BatchNorm { xhat, inv_std }
            } else {
                NodeCache::AvgPool
            };
            (y, cache)
        }
        Node::Clamp(c) => {
            let y = clamp_forward(c.bits, &x);
            (y, NodeCache::Clamp { input: x })
        }
        Node::Pool(p) => {
            let p = &p.spec;
            let (y, argmax) = pool_forward(p, &x, b);
            let cache = if p.max {
                NodeCache::MaxPool { argmax }
            } else {
                NodeCache::AvgPool
            };
            (y, cache)
        }
        Node::Residual(r) => {
            let mut body = Vec::new();
            let mut shortcut = Vec::new();
            let mut y = forward_nodes(&r.body, x.clone(), ctx, &mut body)?;
            let s = forward_nodes(&r.shortcut, x, ctx, &mut shortcut)?;
            for (a, v) in y.iter_mut().zip(&s) {
                *a += v;
            }
            (y, NodeCache::Residual { body, shortcut })
        }
    })
}

pub(crate) fn clamp_forward(bits: u8, x: &[f64]) -> Vec<f64> {
    if bits == FULL_PRECISION_BITS {
        x.iter().map(|v| v.clamp(0.0, 1.0)).collect()
    } else {
        let l = levels(bits) as f64;
        x.iter().map(|v| unit_code(v.clamp(0.0, 1.0), l) / l).collect()
    }
}

fn dense_forward(d: &Dense, x: &[f64], w: &[f64], batch: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * d.out_len];
    match &d.conv {
        None => gemm(batch, d.fan_in, d.out, x, false, w, true, 0.0, &mut y),
        Some(cs) => {
            let pix = cs.oh * cs.ow;
            let mut cols = vec![0.0; d.fan_in * pix];
            for s in 0..batch {
                im2col(&x[s * d.in_len..(s + 1) * d.in_len], cs.h, cs.w, &cs.geom, cs.oh, cs.ow, 0.0, pix, &mut cols);
                gemm(d.out, d.fan_in, pix, w, false, &cols, false, 0.0, &mut y[s * d.out_len..(s + 1) * d.out_len]);
            }
        }
    }
    if let Some(bias) = &d.bias {
        let pix = d.out_len / d.out;
        for s in 0..batch {
            for (o, &bo) in bias.iter().enumerate() {
                let start = s * d.out_len + o * pix;
                y[start..start + pix].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    y
}

#[allow(clippy::type_complexity)]
fn bn_forward(
    bn: &BatchNorm,
    x: &[f64],
    batch: usize,
    mode: Mode,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Option<(Vec<f64>, Vec<f64>)>) {
    let (c_n, pix) = (bn.channels, bn.pix);
    let count = (batch * pix) as f64;
    let (mean, var, update) = match mode {
        Mode::Eval => (bn.mean.clone(), bn.var.clone(), None),
        Mode::Train => {
            let mut mean = vec![0.0; c_n];
            let mut var = vec![0.0; c_n];
            for c in 0..c_n {
                let mut sum = 0.0;
                for s in 0..batch {
                    let start = (s * c_n + c) * pix;
                    sum += x[start..start + pix].iter().sum::<f64>();
                }
                mean[c] = sum / count;
                let mut sq = 0.0;
                for s in 0..batch {
                    let start = (s * c_n + c) * pix;
                    sq += x[start..start + pix].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
                var[c] = sq / count;
            }
            let unbiased = if count > 1.0 {
                var.iter().map(|v| v * count / (count - 1.0)).collect()
            } else {
                var.clone()
            };
            let upd = Some((mean.clone(), unbiased));
            (mean, var, upd)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for s in 0..batch {
        for c in 0..c_n {
            let start = (s * c_n + c) * pix;
            for i in start..start + pix {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = bn.gamma[c] * h + bn.beta[c];
            }
        }
    }
    (y, xhat, inv_std, update)
}

pub(crate) fn pool_forward(p: &PoolSpec, x: &[f64], batch: usize) -> (Vec<f64>, Vec<usize>) {
    let (in_img, out_img) = (p.c * p.h * p.w, p.c * p.oh * p.ow);
    let mut y = vec![0.0; batch * out_img];
    let mut argmax = if p.max { vec![0; batch * out_img] } else { Vec::new() };
    let area = (p.kernel * p.kernel) as f64;
    for s in 0..batch {
        for c in 0..p.c {
            let base = s * in_img + c * p.h * p.w;
            for oy in 0..p.oh {
                for ox in 0..p.ow {
                    let o = s * out_img + (c * p.oh + oy) * p.ow + ox;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base;
                    let mut sum = 0.0;
                    for_window(p, oy, ox, |iy, ix| {
                        let i = base + iy * p.w + ix;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                        sum += x[i];
                    });
                    if p.max {
                        y[o] = best;
                        argmax[o] = best_i;
                    } else {
                        y[o] = sum / area;
                    }
                }
            }
        }
    }
    (y, argmax)
}

/// Visits the in-bounds input positions of one pooling window.
#[inline]
pub(crate) fn for_window(p: &PoolSpec, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
    for ky in 0..p.kernel {
        let iy = (oy * p.stride + ky) as isize - p.padding as isize;
        if iy < 0 || iy >= p.h as isize {
            continue;
        }
        for kx in 0..p.kernel {
            let ix = (ox * p.stride + kx) as isize - p.padding as isize;
            if ix >= 0 && (ix as usize) < p.w {
                f(iy as usize, ix as usize);
            }
        }
    }
}

/// Returns the input gradient (empty when `skip_input` is set and the first
/// node does not need one).
fn backward_nodes(
    nodes: &[Node],
    caches: &[NodeCache],
    mut dy: Vec<f64>,
    batch: usize,
    mode: Mode,
    need_input: bool,
    grads: &mut Vec<Vec<f64>>,
) -> Vec<f64> {
    for (i, (node, cache)) in nodes.iter().zip(caches).enumerate().rev() {
        let need_dx = i > 0 || need_input;
        dy = backward_node(node, cache, dy, batch, mode, need_dx, grads);
    }
    dy
}

fn backward_node(
    node: &Node,
    cache: &NodeCache,
    dy: Vec<f64>,
    batch: usize,
    mode: Mode,
    need_dx: bool,
    grads: &mut Vec<Vec<f64>>,
) -> Vec<f64> {
    match (node, cache) {
        (Node::Dense(d), NodeCache::Dense { input, w_eff }) => {
            let mut g_eff = vec![0.0; d.weight.len()];
            let mut dx = if need_dx { vec![0.0; input.len()] } else { Vec::new() };
            match &d.conv {
                None => {
                    gemm(d.out, batch, d.fan_in, &dy, true, input, false, 0.0, &mut g_eff);
                    if need_dx {
                        gemm(batch, d.out, d.fan_in, &dy, false, w_eff, false, 0.0, &mut dx);
                    }
                }
                Some(cs) => {
                    let pix = cs.oh * cs.ow;
                    let mut cols = vec![0.0; d.fan_in * pix];
                    let mut dcols = vec![0.0; d.fan_in * pix];
                    for s in 0..batch {
                        let dys = &dy[s * d.out_len..(s + 1) * d.out_len];
                        im2col(&input[s * d.in_len..(s + 1) * d.in_len], cs.h, cs.w, &cs.geom, cs.oh, cs.ow, 0.0, pix, &mut cols);
                        gemm(d.out, pix, d.fan_in, dys, false, &cols, true, 1.0, &mut g_eff);
                        if need_dx {
                            gemm(d.fan_in, d.out, pix, w_eff, true, dys, false, 0.0, &mut dcols);
                            col2im(&dcols, cs.h, cs.w, &cs.geom, cs.oh, cs.ow, pix, &mut dx[s * d.in_len..(s + 1) * d.in_len]);
                        }
                    }
                }
            }
            grads[d.slot] = d.master_grad(g_eff);
            if d.bias.is_some() {
                let pix = d.out_len / d.out;
                let mut db = vec![0.0; d.out];
                for s in 0..batch {
                    for (o, acc) in db.iter_mut().enumerate() {
                        let start = s * d.out_len + o * pix;
                        *acc += dy[start..start + pix].iter().sum::<f64>();
                    }
                }
                grads[d.slot + 1] = db;
            }
            dx
        }
        (Node::BatchNorm(bn), NodeCache::BatchNorm { xhat, inv_std }) => {
            let (c_n, pix) = (bn.channels, bn.pix);
            let count = (batch * pix) as f64;
            let mut dgamma = vec![0.0; c_n];
            let mut dbeta = vec![0.0; c_n];
            for s in 0..batch {
                for c in 0..c_n {
                    let start = (s * c_n + c) * pix;
                    for i in start..start + pix {
                        dgamma[c] += dy[i] * xhat[i];
                        dbeta[c] += dy[i];
                    }
                }
            }
            let mut dx = vec![0.0; dy.len()];
            for s in 0..batch {
                for c in 0..c_n {
                    let start = (s * c_n + c) * pix;
                    let k = bn.gamma[c] * inv_std[c];
                    for i in start..start + pix {
                        dx[i] = match mode {
                            Mode::Eval => k * dy[i],
                            Mode::Train => k / count * (count * dy[i] - dbeta[c] - xhat[i] * dgamma[c]),
                        };
                    }
                }
            }
            grads[bn.slot] = dgamma;
            grads[bn.slot + 1] = dbeta;
            dx
        }
        (Node::Clamp(_), NodeCache::Clamp { input }) => dy
            .iter()
            .zip(input)
            .map(|(&g, &s)| if (0.0..=1.0).contains(&s) { g } else { 0.0 })
            .collect(),
        (Node::Pool(p), c) => {
            let p = &p.spec;
            let in_img = p.c * p.h * p.w;
            let out_img = p.c * p.oh * p.ow;
            let mut dx = vec![0.0; batch * in_img];
            match c {
                NodeCache::MaxPool { argmax } => {
                    for (o, &i) in argmax.iter().enumerate() {
                        dx[i] += dy[o];
                    }
                }
                _ => {
                    let area = (p.kernel * p.kernel) as f64;
                    for s in 0..batch {
                        for ch in 0..p.c {
                            let base = s * in_img + ch * p.h * p.w;
                            for oy in 0..p.oh {
                                for ox in 0..p.ow {
                                    let g = dy[s * out_img + (ch * p.oh + oy) * p.ow + ox] / area;
                                    for_window(p, oy, ox, |iy, ix| dx[base + iy * p.w + ix] += g);
                                }
                            }
                        }
                    }
                }
            }
            dx
        }
        (Node::Residual(r), NodeCache::Residual { body, shortcut }) => {
            let mut dx = backward_nodes(&r.body, body, dy.clone(), batch, mode, need_dx, grads);
            let ds = if r.shortcut.is_empty() {
                dy
            } else {
                backward_nodes(&r.shortcut, shortcut, dy, batch, mode, need_dx, grads)
            };
            if need_dx {
                for (a, v) in dx.iter_mut().zip(&ds) {
                    *a += v;
                }
            }
            dx
        }
        _ => unreachable!("cache does not match network structure"),
    }
}
