//! Scale folding and packed deployment.
//!
//! Each conv / linear layer becomes one [`WeightedOp`] computing
//! `y_o = acc_o * mult_o + bias_o`, where `acc_o` is the dot product of the
//! stored weight values (codes for quantized layers) with the input values
//! (codes after a quantized activation). `mult_o` absorbs the weight channel
//! factor, the input activation factor and the following batch norm; `bias_o`
//! absorbs the layer bias and the batch-norm shift.

use crate::arch::NetworkDef;
use crate::bits::{pack, unpack, PackedTensor};
use crate::error::{invalid, Result};
use crate::kernels::{conv2d_real_raw, conv_codes_acc, ConvGeometry, ConvWeights};
use crate::net::train::Classifier;
use crate::net::{clamp_forward, for_window, pool_forward, BatchNorm, Dense, Network, Node, PoolSpec};
use crate::quant::{levels, unit_code, QuantizedTensor, FULL_PRECISION_BITS};

/// Value domain a weighted op reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Real,
    /// Unsigned activation codes of the given width.
    Codes { bits: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightStore {
    /// Full-precision weights `[out x fan_in]`.
    Real(Vec<f64>),
    /// Unpacked codes with channel scales.
    Codes(QuantizedTensor),
    Packed(PackedTensor),
}

impl WeightStore {
    pub fn bits(&self) -> u8 {
        match self {
            WeightStore::Real(_) => FULL_PRECISION_BITS,
            WeightStore::Codes(q) => q.bits(),
            WeightStore::Packed(p) => p.bits(),
        }
    }
}

#[derive(Debug, Clone)]
enum Prepared {
    Int(ConvWeights),
    Values(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct WeightedOp {
    pub name: String,
    /// Convolution geometry and input height / width; `None` for linear layers.
    pub conv: Option<(ConvGeometry, usize, usize)>,
    pub out: usize,
    pub fan_in: usize,
    pub input: InputMode,
    pub weights: WeightStore,
    pub mult: Vec<f64>,
    pub bias: Vec<f64>,
    /// A batch norm was folded into `mult` / `bias`.
    pub bn_folded: bool,
    prepared: Prepared,
}

impl PartialEq for WeightedOp {
    fn eq(&self, o: &Self) -> bool {
        self.name == o.name
            && self.conv == o.conv
            && self.out == o.out
            && self.fan_in == o.fan_in
            && self.input == o.input
            && self.weights == o.weights
            && self.mult == o.mult
            && self.bias == o.bias
            && self.bn_folded == o.bn_folded
    }
}

impl WeightedOp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: String,
        conv: Option<(ConvGeometry, usize, usize)>,
        out: usize,
        fan_in: usize,
        input: InputMode,
        weights: WeightStore,
        mult: Vec<f64>,
        bias: Vec<f64>,
        bn_folded: bool,
    ) -> Result<Self> {
        if mult.len() != out || bias.len() != out {
            return Err(invalid(format!("`{name}`: per-channel arrays must have {out} entries")));
        }
        if let Some((g, _, _)) = &conv {
            if g.out_channels != out || g.patch_len() != fan_in {
                return Err(invalid(format!("`{name}`: geometry does not match weight shape")));
            }
        }
        let prepared = match (&weights, input) {
            (WeightStore::Real(w), _) => {
                if w.len() != out * fan_in {
                    return Err(invalid(format!("`{name}`: expected {} weights", out * fan_in)));
                }
                Prepared::Values(w.clone())
            }
            (store, mode) => {
                let q = match store {
                    WeightStore::Codes(q) => q.clone(),
                    WeightStore::Packed(p) => unpack(p)?,
                    WeightStore::Real(_) => unreachable!(),
                };
                if q.shape() != [out, fan_in] {
                    return Err(invalid(format!("`{name}`: weight codes have shape {:?}", q.shape())));
                }
                match (store, mode) {
                    (WeightStore::Packed(_), InputMode::Codes { .. }) => {
                        Prepared::Int(ConvWeights::prepare(&q, out, fan_in)?)
                    }
                    _ => Prepared::Values(q.codes().iter().map(|&c| f64::from(c)).collect()),
                }
            }
        };
        Ok(Self {
            name,
            conv,
            out,
            fan_in,
            input,
            weights,
            mult,
            bias,
            bn_folded,
            prepared,
        })
    }

    fn geometry(&self) -> (ConvGeometry, usize, usize) {
        self.conv.unwrap_or((
            ConvGeometry {
                in_channels: self.fan_in,
                out_channels: self.out,
                kernel_h: 1,
                kernel_w: 1,
                stride: 1,
                padding: 0,
            },
            1,
            1,
        ))
    }

    fn forward(&self, x: Act, batch: usize) -> Result<Vec<f64>> {
        let (g, h, w) = self.geometry();
        let (oh, ow) = g.output_hw(h, w)?;
        let pix = oh * ow;
        let out_len = self.out * pix;
        let in_len = g.in_channels * h * w;
        let mut y = vec![0.0; batch * out_len];
        match (&self.prepared, x) {
            (Prepared::Int(cw), Act::Codes(codes, bits)) => {
                for s in 0..batch {
                    let (acc, _, _) = conv_codes_acc(&codes[s * in_len..(s + 1) * in_len], h, w, &g, cw, bits)?;
                    for (i, &a) in acc.iter().enumerate() {
                        let o = i / pix;
                        y[s * out_len + i] = a as f64 * self.mult[o] + self.bias[o];
                    }
                }
            }
            (Prepared::Values(wv), x) => {
                let xv = match x {
                    Act::Real(v) => v,
                    Act::Codes(c, _) => c.iter().map(|&v| f64::from(v)).collect(),
                };
                let acc = conv2d_real_raw(&xv, batch, h, w, &g, wv)?;
                for (i, &a) in acc.iter().enumerate() {
                    let o = (i % out_len) / pix;
                    y[i] = a * self.mult[o] + self.bias[o];
                }
            }
            (Prepared::Int(_), Act::Real(_)) => {
                return Err(invalid(format!("`{}` expects activation codes", self.name)));
            }
        }
        Ok(y)
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Weighted(WeightedOp),
    /// `Q(clamp(x, 0, 1))` to codes.
    QuantAct { name: String, bits: u8 },
    /// Full-precision `clamp(x, 0, 1)`.
    Clamp { name: String },
    Pool { name: String, spec: PoolSpec },
    Residual { name: String, body: Vec<Op>, shortcut: Vec<Op> },
}

/// Deployed network: folded scales and (optionally packed) weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub def: NetworkDef,
    pub ops: Vec<Op>,
}

enum Act {
    Real(Vec<f64>),
    Codes(Vec<i32>, u8),
}

impl Act {
    fn into_real(self) -> Vec<f64> {
        match self {
            Act::Real(v) => v,
            Act::Codes(c, bits) => {
                let l = levels(bits) as f64;
                c.iter().map(|&v| f64::from(v) / l).collect()
            }
        }
    }
}

impl PackedModel {
    pub fn input_len(&self) -> usize {
        self.def.input.iter().product()
    }

    pub fn infer(&self, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        if input.len() != batch * self.input_len() {
            return Err(invalid(format!(
                "input holds {} values, expected {} x {}",
                input.len(),
                batch,
                self.input_len()
            )));
        }
        Ok(run_ops(&self.ops, Act::Real(input.to_vec()), batch)?.into_real())
    }

    /// Weighted ops in execution order.
    pub fn weighted_ops(&self) -> Vec<&WeightedOp> {
        fn walk<'a>(ops: &'a [Op], out: &mut Vec<&'a WeightedOp>) {
            for op in ops {
                match op {
                    Op::Weighted(w) => out.push(w),
                    Op::Residual { body, shortcut, .. } => {
                        walk(body, out);
                        walk(shortcut, out);
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.ops, &mut out);
        out
    }

    /// Payload bytes of all packed weight tensors.
    pub fn packed_weight_bytes(&self) -> u64 {
        self.weighted_ops()
            .iter()
            .map(|w| match &w.weights {
                WeightStore::Packed(p) => p.payload().len() as u64,
                _ => 0,
            })
            .sum()
    }
}

impl Classifier for PackedModel {
    fn logits(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.infer(inputs, batch)
    }

    fn classes(&self) -> usize {
        self.def.classes
    }
}

fn run_ops(ops: &[Op], mut x: Act, batch: usize) -> Result<Act> {
    for op in ops {
        x = match op {
            Op::Weighted(w) => Act::Real(w.forward(x, batch)?),
            Op::QuantAct { bits, .. } => {
                let l = levels(*bits) as f64;
                let v = x.into_real();
                Act::Codes(v.iter().map(|&s| unit_code(s.clamp(0.0, 1.0), l) as i32).collect(), *bits)
            }
            Op::Clamp { .. } => Act::Real(clamp_forward(FULL_PRECISION_BITS, &x.into_real())),
            Op::Pool { spec, .. } => match x {
                Act::Codes(c, bits) if spec.max => Act::Codes(max_pool_codes(spec, &c, batch), bits),
                other => Act::Real(pool_forward(spec, &other.into_real(), batch).0),
            },
            Op::Residual { body, shortcut, .. } => {
                let copy = match &x {
                    Act::Real(v) => Act::Real(v.clone()),
                    Act::Codes(c, b) => Act::Codes(c.clone(), *b),
                };
                let mut y = run_ops(body, copy, batch)?.into_real();
                let s = run_ops(shortcut, x, batch)?.into_real();
                for (a, v) in y.iter_mut().zip(&s) {
                    *a += v;
                }
                Act::Real(y)
            }
        };
    }
    Ok(x)
}

fn max_pool_codes(p: &PoolSpec, x: &[i32], batch: usize) -> Vec<i32> {
    let (in_img, out_img) = (p.c * p.h * p.w, p.c * p.oh * p.ow);
    let mut y = vec![0; batch * out_img];
    for s in 0..batch {
        for c in 0..p.c {
            let base = s * in_img + c * p.h * p.w;
            for oy in 0..p.oh {
                for ox in 0..p.ow {
                    let mut best = i32::MIN;
                    for_window(p, oy, ox, |iy, ix| best = best.max(x[base + iy * p.w + ix]));
                    y[s * out_img + (c * p.oh + oy) * p.ow + ox] = best;
                }
            }
        }
    }
    y
}

/// Folds weight channel factors, activation factors and batch norms into
/// per-channel multipliers. Weights stay unpacked.
pub fn fold_scales(net: &Network) -> Result<PackedModel> {
    let (ops, _) = fold_nodes(net.nodes(), InputMode::Real)?;
    Ok(PackedModel {
        def: net.def().clone(),
        ops,
    })
}

/// [`fold_scales`], then packs every quantized weight tensor.
pub fn deploy(net: &Network) -> Result<PackedModel> {
    let mut model = fold_scales(net)?;
    pack_ops(&mut model.ops)?;
    Ok(model)
}

fn pack_ops(ops: &mut [Op]) -> Result<()> {
    for op in ops {
        match op {
            Op::Weighted(w) => {
                if let WeightStore::Codes(q) = &w.weights {
                    let packed = WeightStore::Packed(pack(q)?);
                    *w = WeightedOp::new(
                        std::mem::take(&mut w.name),
                        w.conv,
                        w.out,
                        w.fan_in,
                        w.input,
                        packed,
                        std::mem::take(&mut w.mult),
                        std::mem::take(&mut w.bias),
                        w.bn_folded,
                    )?;
                }
            }
            Op::Residual { body, shortcut, .. } => {
                pack_ops(body)?;
                pack_ops(shortcut)?;
            }
            _ => {}
        }
    }
    Ok(())
}

fn fold_nodes(nodes: &[Node], mut mode: InputMode) -> Result<(Vec<Op>, InputMode)> {
    let mut ops = Vec::new();
    let mut i = 0;
    while i < nodes.len() {
        match &nodes[i] {
            Node::Dense(d) => {
                let bn = match nodes.get(i + 1) {
                    Some(Node::BatchNorm(b)) => {
                        i += 1;
                        Some(b)
                    }
                    _ => None,
                };
                ops.push(Op::Weighted(fold_dense(d, bn, mode)?));
                mode = InputMode::Real;
            }
            Node::BatchNorm(b) => {
                return Err(invalid(format!("batch norm `{}` has no preceding weight layer", b.name)));
            }
            Node::Clamp(c) => {
                if c.bits == FULL_PRECISION_BITS {
                    ops.push(Op::Clamp { name: c.name.clone() });
                    mode = InputMode::Real;
                } else {
                    ops.push(Op::QuantAct {
                        name: c.name.clone(),
                        bits: c.bits,
                    });
                    mode = InputMode::Codes { bits: c.bits };
                }
            }
            Node::Pool(p) => {
                ops.push(Op::Pool {
                    name: p.name.clone(),
                    spec: p.spec,
                });
                if !p.spec.max {
                    mode = InputMode::Real;
                }
            }
            Node::Residual(r) => {
                let (body, _) = fold_nodes(&r.body, mode)?;
                let (shortcut, _) = fold_nodes(&r.shortcut, mode)?;
                ops.push(Op::Residual {
                    name: r.name.clone(),
                    body,
                    shortcut,
                });
                mode = InputMode::Real;
            }
        }
        i += 1;
    }
    Ok((ops, mode))
}

fn fold_dense(d: &Dense, bn: Option<&BatchNorm>, mode: InputMode) -> Result<WeightedOp> {
    let (weights, w_factor): (WeightStore, Vec<f64>) = if d.bits == FULL_PRECISION_BITS {
        (WeightStore::Real(d.weight.clone()), vec![1.0; d.out])
    } else {
        let q = d.quantize()?;
        let f = (0..d.out).map(|o| q.channel_factor(o)).collect();
        (WeightStore::Codes(q), f)
    };
    let x_factor = match mode {
        InputMode::Real => 1.0,
        InputMode::Codes { bits } => 1.0 / levels(bits) as f64,
    };
    let b0 = d.bias.clone().unwrap_or_else(|| vec![0.0; d.out]);
    let (mult, bias) = match bn {
        Some(bn) => {
            let mut mult = Vec::with_capacity(d.out);
            let mut bias = Vec::with_capacity(d.out);
            for o in 0..d.out {
                let a = bn.gamma[o] / (bn.var[o] + bn.eps).sqrt();
                mult.push(a * (w_factor[o] * x_factor));
                bias.push(a * b0[o] + (bn.beta[o] - a * bn.mean[o]));
            }
            (mult, bias)
        }
        None => (w_factor.iter().map(|f| f * x_factor).collect(), b0),
    };
    let conv = d.conv.as_ref().map(|c| (c.geom, c.h, c.w));
    WeightedOp::new(
        d.name.clone(),
        conv,
        d.out,
        d.fan_in,
        mode,
        weights,
        mult,
        bias,
        bn.is_some(),
    )
}
