//! Network topology: layer list, shape propagation, weight groups and the
//! plain-text architecture format.
//!
//! ```text
//! [network]
//! name = lenet
//! input = 1x28x28
//! classes = 10
//!
//! [layers]
//! conv1 = conv 8 k=3 p=1        # out channels, kernel, stride (s=), padding (p=)
//! bn1   = bn
//! act1  = clamp
//! pool1 = maxpool 2
//! res1  = residual 16 s=2 group=stage2
//! fc    = linear 10 bias
//! ```
//!
//! Weight layers are quantized unless marked `fp`, except the last weight layer,
//! which stays full precision unless marked `q`. A `clamp` marked `fp` keeps
//! full-precision activations. Layers sharing a `group=` receive one schedule
//! entry; the default group is the layer name.

use std::fmt::Write as _;

use crate::config::{ConfigFile, Section};
use crate::error::{invalid, QbitError, Result};
use crate::kernels::ConvGeometry;
use crate::quant::{QuantSpec, Role};

/// Activation shape `[C, H, W]`; fully-connected outputs are `[F, 1, 1]`.
pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d {
        geometry: ConvGeometry,
        groups: usize,
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    /// `clamp(x, 0, 1)` followed by the activation quantizer.
    Clamp,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        out_channels: usize,
        stride: usize,
        body: Vec<LayerDef>,
        shortcut: Vec<LayerDef>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDef {
    pub name: String,
    pub kind: LayerKind,
    pub group: String,
    pub quantized: bool,
    /// Weight quantizer (conv / linear only).
    pub weight: QuantSpec,
    /// Output activation quantizer (clamp only).
    pub activation: QuantSpec,
    pub in_shape: Shape3,
    pub out_shape: Shape3,
    /// Set when the user marked the layer explicitly (`fp` / `q`).
    explicit_quant: Option<bool>,
}

impl LayerDef {
    pub fn is_weight_layer(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }

    /// Number of weight parameters (biases excluded).
    pub fn weight_params(&self) -> u64 {
        match &self.kind {
            LayerKind::Conv2d { geometry: g, groups, .. } => {
                (g.out_channels * (g.in_channels / groups) * g.kernel_h * g.kernel_w) as u64
            }
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            } => (*in_features * *out_features) as u64,
            _ => 0,
        }
    }

    /// Number of output channels of a weight layer (rows of its weight matrix).
    pub fn out_channels(&self) -> usize {
        match &self.kind {
            LayerKind::Conv2d { geometry, .. } => geometry.out_channels,
            LayerKind::Linear { out_features, .. } => *out_features,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Conv,
    FullyConnected,
    Mixed,
}

/// Layers sharing one schedule entry.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGroup {
    pub name: String,
    pub kind: GroupKind,
    pub quantized: bool,
    pub params: u64,
    pub layers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDef {
    pub name: String,
    pub input: Shape3,
    pub classes: usize,
    pub layers: Vec<LayerDef>,
}

impl NetworkDef {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_config(&ConfigFile::parse(text)?)
    }

    pub fn from_config(cfg: &ConfigFile) -> Result<Self> {
        let net = cfg.require_section("network")?;
        let name = net.get("name").map_or_else(|| "network".to_string(), |e| e.value.clone());
        let input = parse_shape(net, "input")?;
        let classes: usize = net.require("classes")?;
        let layers = cfg.require_section("layers")?;
        let raw = layers
            .entries
            .iter()
            .map(|e| parse_layer_line(&e.key, &e.value, e.line))
            .collect::<Result<Vec<_>>>()?;
        if raw.is_empty() {
            return Err(layers.error("", "no layers"));
        }
        let mut def = NetworkDef {
            name,
            input,
            classes,
            layers: Vec::new(),
        };
        let mut shape = input;
        for r in raw {
            let layer = resolve(r, shape)?;
            shape = layer.out_shape;
            def.layers.push(layer);
        }
        def.validate()?;
        def.apply_default_quantization();
        Ok(def)
    }

    pub fn output_shape(&self) -> Shape3 {
        self.layers.last().map_or(self.input, |l| l.out_shape)
    }

    fn validate(&self) -> Result<()> {
        let out = self.output_shape();
        if out[0] * out[1] * out[2] != self.classes {
            return Err(invalid(format!(
                "network ends with shape {:?}, expected {} classes",
                out, self.classes
            )));
        }
        let mut names = std::collections::HashSet::new();
        let mut dup = None;
        visit(&self.layers, &mut |l| {
            if !names.insert(l.name.clone()) {
                dup = Some(l.name.clone());
            }
        });
        if let Some(d) = dup {
            return Err(invalid(format!("duplicate layer name `{d}`")));
        }
        check_bn_placement(&self.layers)
    }

    fn apply_default_quantization(&mut self) {
        let mut weight_names = Vec::new();
        visit(&self.layers, &mut |l| {
            if l.is_weight_layer() {
                weight_names.push(l.name.clone());
            }
        });
        let last = weight_names.last().cloned();
        visit_mut(&mut self.layers, &mut |l| {
            if l.is_weight_layer() {
                let default = Some(&l.name) != last.as_ref();
                l.quantized = l.explicit_quant.unwrap_or(default);
            } else if matches!(l.kind, LayerKind::Clamp) {
                l.quantized = l.explicit_quant.unwrap_or(true);
            }
        });
    }

    /// Weight groups in order of first appearance.
    pub fn weight_groups(&self) -> Vec<WeightGroup> {
        let mut groups: Vec<WeightGroup> = Vec::new();
        visit(&self.layers, &mut |l| {
            if !l.is_weight_layer() {
                return;
            }
            let kind = match l.kind {
                LayerKind::Conv2d { .. } => GroupKind::Conv,
                _ => GroupKind::FullyConnected,
            };
            match groups.iter_mut().find(|g| g.name == l.group) {
                Some(g) => {
                    g.params += l.weight_params();
                    g.quantized |= l.quantized;
                    g.layers.push(l.name.clone());
                    if g.kind != kind {
                        g.kind = GroupKind::Mixed;
                    }
                }
                None => groups.push(WeightGroup {
                    name: l.group.clone(),
                    kind,
                    quantized: l.quantized,
                    params: l.weight_params(),
                    layers: vec![l.name.clone()],
                }),
            }
        });
        groups
    }

    pub fn total_weight_params(&self) -> u64 {
        let mut n = 0;
        visit(&self.layers, &mut |l| n += l.weight_params());
        n
    }

    /// All layers, depth first, residual bodies before shortcuts.
    pub fn flat_layers(&self) -> Vec<&LayerDef> {
        fn walk<'a>(layers: &'a [LayerDef], out: &mut Vec<&'a LayerDef>) {
            for l in layers {
                out.push(l);
                if let LayerKind::Residual { body, shortcut, .. } = &l.kind {
                    walk(body, out);
                    walk(shortcut, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    /// Assigns weight bitwidths per group and the activation bitwidth to every
    /// quantized clamp.
    pub fn set_bitwidths(&mut self, weight_bits: &dyn Fn(&str) -> Option<u8>, act_bits: u8) -> Result<()> {
        let mut err = None;
        visit_mut(&mut self.layers, &mut |l| {
            if l.is_weight_layer() {
                let bits = if l.quantized {
                    weight_bits(&l.group).unwrap_or(32)
                } else {
                    32
                };
                match QuantSpec::new(bits, Role::Weight) {
                    Ok(s) => l.weight = s,
                    Err(e) => err = Some(e),
                }
            } else if matches!(l.kind, LayerKind::Clamp) {
                let bits = if l.quantized { act_bits } else { 32 };
                match QuantSpec::new(bits, Role::Activation) {
                    Ok(s) => l.activation = s,
                    Err(e) => err = Some(e),
                }
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// `(weight bits, activation bits)` of every non-residual layer, depth first.
    pub fn layer_bits(&self) -> Vec<(u8, u8)> {
        let mut out = Vec::new();
        visit(&self.layers, &mut |l| out.push((l.weight.bits.get(), l.activation.bits.get())));
        out
    }

    /// Inverse of [`NetworkDef::layer_bits`].
    pub fn apply_layer_bits(&mut self, bits: &[(u8, u8)]) -> Result<()> {
        let mut n = 0;
        visit(&self.layers, &mut |_| n += 1);
        if n != bits.len() {
            return Err(invalid(format!("{} bitwidth records for {n} layers", bits.len())));
        }
        let mut it = bits.iter();
        let mut err = None;
        visit_mut(&mut self.layers, &mut |l| {
            let &(w, a) = it.next().expect("length checked");
            match (QuantSpec::new(w, Role::Weight), QuantSpec::new(a, Role::Activation)) {
                (Ok(ws), Ok(asp)) => {
                    l.weight = ws;
                    l.activation = asp;
                }
                (Err(e), _) | (_, Err(e)) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Canonical text form, readable by [`NetworkDef::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[network]");
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "input = {}x{}x{}", self.input[0], self.input[1], self.input[2]);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "\n[layers]");
        for l in &self.layers {
            let _ = writeln!(s, "{} = {}", l.name, layer_line(l));
        }
        s
    }
}

fn layer_line(l: &LayerDef) -> String {
    let mut parts = match &l.kind {
        LayerKind::Conv2d { geometry: g, groups, bias } => {
            let mut v = vec![
                "conv".to_string(),
                g.out_channels.to_string(),
                format!("k={}", g.kernel_h),
                format!("s={}", g.stride),
                format!("p={}", g.padding),
            ];
            if *groups != 1 {
                v.push(format!("g={groups}"));
            }
            if *bias {
                v.push("bias".into());
            }
            v
        }
        LayerKind::Linear { out_features, bias, .. } => {
            let mut v = vec!["linear".to_string(), out_features.to_string()];
            if *bias {
                v.push("bias".into());
            }
            v
        }
        LayerKind::BatchNorm { .. } => vec!["bn".into()],
        LayerKind::Clamp => vec!["clamp".into()],
        LayerKind::MaxPool { kernel, stride, padding } => vec![
            "maxpool".into(),
            kernel.to_string(),
            format!("s={stride}"),
            format!("p={padding}"),
        ],
        LayerKind::AvgPool { kernel, stride, padding } => vec![
            "avgpool".into(),
            kernel.to_string(),
            format!("s={stride}"),
            format!("p={padding}"),
        ],
        LayerKind::Residual { out_channels, stride, .. } => {
            vec!["residual".into(), out_channels.to_string(), format!("s={stride}")]
        }
    };
    if (l.is_weight_layer() || matches!(l.kind, LayerKind::Residual { .. }))
        && l.group != l.name {
            parts.push(format!("group={}", l.group));
        }
    match l.explicit_quant {
        Some(true) => parts.push("q".into()),
        Some(false) => parts.push("fp".into()),
        None => {}
    }
    parts.join(" ")
}

fn visit<'a>(layers: &'a [LayerDef], f: &mut dyn FnMut(&'a LayerDef)) {
    for l in layers {
        if let LayerKind::Residual { body, shortcut, .. } = &l.kind {
            visit(body, f);
            visit(shortcut, f);
        } else {
            f(l);
        }
    }
}

fn visit_mut(layers: &mut [LayerDef], f: &mut dyn FnMut(&mut LayerDef)) {
    for l in layers {
        if let LayerKind::Residual { body, shortcut, .. } = &mut l.kind {
            visit_mut(body, f);
            visit_mut(shortcut, f);
        } else {
            f(l);
        }
    }
}

fn check_bn_placement(layers: &[LayerDef]) -> Result<()> {
    for (i, l) in layers.iter().enumerate() {
        match &l.kind {
            LayerKind::BatchNorm { .. } => {
                let ok = i > 0 && layers[i - 1].is_weight_layer();
                if !ok {
                    return Err(invalid(format!(
                        "batch-norm `{}` must directly follow a conv or linear layer",
                        l.name
                    )));
                }
            }
            LayerKind::Residual { body, shortcut, .. } => {
                check_bn_placement(body)?;
                check_bn_placement(shortcut)?;
            }
            _ => {}
        }
    }
    Ok(())
}

fn parse_shape(sec: &Section, key: &str) -> Result<Shape3> {
    let v: String = sec.require(key)?;
    let dims: Vec<usize> = v
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| sec.error(key, format!("expected CxHxW, got `{v}`")))?;
    match dims.as_slice() {
        [c, h, w] if *c > 0 && *h > 0 && *w > 0 => Ok([*c, *h, *w]),
        _ => Err(sec.error(key, format!("expected CxHxW, got `{v}`"))),
    }
}

/// One `[layers]` line before shape resolution.
struct RawLayer {
    name: String,
    line: usize,
    kind: String,
    positional: Vec<usize>,
    options: Vec<(String, String)>,
    flags: Vec<String>,
}

impl RawLayer {
    fn err(&self, message: impl Into<String>) -> QbitError {
        QbitError::Config {
            line: self.line,
            field: format!("layers.{}", self.name),
            message: message.into(),
        }
    }

    fn opt(&self, key: &str) -> Result<Option<usize>> {
        match self.options.iter().find(|(k, _)| k == key) {
            None => Ok(None),
            Some((_, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| self.err(format!("`{key}` expects an integer, got `{v}`"))),
        }
    }

    fn group(&self) -> String {
        self.options
            .iter()
            .find(|(k, _)| k == "group")
            .map_or_else(|| self.name.clone(), |(_, v)| v.clone())
    }

    fn first(&self, what: &str) -> Result<usize> {
        self.positional
            .first()
            .copied()
            .ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn explicit_quant(&self) -> Option<bool> {
        if self.flags.iter().any(|f| f == "fp") {
            Some(false)
        } else if self.flags.iter().any(|f| f == "q") {
            Some(true)
        } else {
            None
        }
    }
}

fn parse_layer_line(name: &str, value: &str, line: usize) -> Result<RawLayer> {
    let mut tokens = value.split_whitespace();
    let kind = tokens
        .next()
        .ok_or_else(|| QbitError::Config {
            line,
            field: format!("layers.{name}"),
            message: "missing layer kind".into(),
        })?
        .to_string();
    let mut raw = RawLayer {
        name: name.to_string(),
        line,
        kind,
        positional: Vec::new(),
        options: Vec::new(),
        flags: Vec::new(),
    };
    for tok in tokens {
        if let Some((k, v)) = tok.split_once('=') {
            raw.options.push((k.to_string(), v.to_string()));
        } else if let Ok(n) = tok.parse::<usize>() {
            raw.positional.push(n);
        } else if matches!(tok, "fp" | "q" | "bias" | "global") {
            raw.flags.push(tok.to_string());
        } else {
            return Err(raw.err(format!("unexpected token `{tok}`")));
        }
    }
    let allowed: &[&str] = match raw.kind.as_str() {
        "conv" => &["k", "s", "p", "g", "group"],
        "linear" => &["group"],
        "maxpool" | "avgpool" => &["s", "p"],
        "residual" => &["s", "group"],
        _ => &[],
    };
    if let Some((k, _)) = raw.options.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
        return Err(raw.err(format!("option `{k}` not valid for `{}`", raw.kind)));
    }
    Ok(raw)
}

fn base_layer(raw: &RawLayer, kind: LayerKind, in_shape: Shape3, out_shape: Shape3) -> LayerDef {
    LayerDef {
        name: raw.name.clone(),
        kind,
        group: raw.group(),
        quantized: false,
        weight: QuantSpec::full(Role::Weight),
        activation: QuantSpec::full(Role::Activation),
        in_shape,
        out_shape,
        explicit_quant: raw.explicit_quant(),
    }
}

fn pool_out(raw: &RawLayer, shape: Shape3, kernel: usize, stride: usize, padding: usize) -> Result<Shape3> {
    if kernel == 0 || stride == 0 {
        return Err(raw.err("pool kernel and stride must be positive"));
    }
    if padding * 2 > kernel && padding > 0 {
        return Err(raw.err("pool padding must be less than half the kernel"));
    }
    let (h, w) = (shape[1] + 2 * padding, shape[2] + 2 * padding);
    if h < kernel || w < kernel {
        return Err(raw.err(format!("pool kernel {kernel} larger than input {:?}", shape)));
    }
    Ok([shape[0], (h - kernel) / stride + 1, (w - kernel) / stride + 1])
}

#[allow(clippy::too_many_arguments)]
fn conv_layer(
    name: String,
    group: String,
    explicit: Option<bool>,
    shape: Shape3,
    out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    bias: bool,
) -> Result<LayerDef> {
    let geometry = ConvGeometry {
        in_channels: shape[0],
        out_channels: out,
        kernel_h: k,
        kernel_w: k,
        stride,
        padding: pad,
    };
    if out == 0 || groups == 0 || !shape[0].is_multiple_of(groups) || !out.is_multiple_of(groups) {
        return Err(invalid(format!(
            "layer `{name}`: channels {} -> {out} not divisible into {groups} groups",
            shape[0]
        )));
    }
    let (oh, ow) = geometry
        .output_hw(shape[1], shape[2])
        .map_err(|e| invalid(format!("layer `{name}`: {e}")))?;
    Ok(LayerDef {
        name,
        kind: LayerKind::Conv2d {
            geometry,
            groups,
            bias,
        },
        group,
        quantized: false,
        weight: QuantSpec::full(Role::Weight),
        activation: QuantSpec::full(Role::Activation),
        in_shape: shape,
        out_shape: [out, oh, ow],
        explicit_quant: explicit,
    })
}

fn aux_layer(name: String, kind: LayerKind, shape: Shape3, explicit: Option<bool>) -> LayerDef {
    LayerDef {
        name: name.clone(),
        kind,
        group: name,
        quantized: false,
        weight: QuantSpec::full(Role::Weight),
        activation: QuantSpec::full(Role::Activation),
        in_shape: shape,
        out_shape: shape,
        explicit_quant: explicit,
    }
}

fn resolve(raw: RawLayer, shape: Shape3) -> Result<LayerDef> {
    let has = |f: &str| raw.flags.iter().any(|x| x == f);
    match raw.kind.as_str() {
        "conv" => {
            let out = raw.first("output channels")?;
            let k = raw.opt("k")?.unwrap_or(3);
            let s = raw.opt("s")?.unwrap_or(1);
            let p = raw.opt("p")?.unwrap_or(0);
            let g = raw.opt("g")?.unwrap_or(1);
            conv_layer(
                raw.name.clone(),
                raw.group(),
                raw.explicit_quant(),
                shape,
                out,
                k,
                s,
                p,
                g,
                has("bias"),
            )
            .map_err(|e| raw.err(e.to_string()))
        }
        "linear" => {
            let out = raw.first("output features")?;
            if out == 0 {
                return Err(raw.err("output features must be positive"));
            }
            let kind = LayerKind::Linear {
                in_features: shape.iter().product(),
                out_features: out,
                bias: has("bias"),
            };
            Ok(base_layer(&raw, kind, shape, [out, 1, 1]))
        }
        "bn" => Ok(base_layer(
            &raw,
            LayerKind::BatchNorm { channels: shape[0] },
            shape,
            shape,
        )),
        "clamp" => Ok(base_layer(&raw, LayerKind::Clamp, shape, shape)),
        "maxpool" | "avgpool" => {
            let (kernel, stride, padding) = if has("global") {
                if shape[1] != shape[2] {
                    return Err(raw.err("global pooling needs a square input"));
                }
                (shape[1], 1, 0)
            } else {
                let k = raw.first("kernel size")?;
                (k, raw.opt("s")?.unwrap_or(k), raw.opt("p")?.unwrap_or(0))
            };
            let out = pool_out(&raw, shape, kernel, stride, padding)?;
            let kind = if raw.kind == "maxpool" {
                LayerKind::MaxPool { kernel, stride, padding }
            } else {
                LayerKind::AvgPool { kernel, stride, padding }
            };
            Ok(base_layer(&raw, kind, shape, out))
        }
        "residual" => {
            let out = raw.first("output channels")?;
            let stride = raw.opt("s")?.unwrap_or(1);
            let group = raw.group();
            let q = raw.explicit_quant();
            let n = &raw.name;
            let wrap = |e: QbitError| raw.err(e.to_string());
            let c1 = conv_layer(format!("{n}.conv1"), group.clone(), q, shape, out, 3, stride, 1, 1, false)
                .map_err(wrap)?;
            let mid = c1.out_shape;
            let c2 = conv_layer(format!("{n}.conv2"), group.clone(), q, mid, out, 3, 1, 1, 1, false)
                .map_err(wrap)?;
            let body = vec![
                c1,
                aux_layer(format!("{n}.bn1"), LayerKind::BatchNorm { channels: out }, mid, None),
                aux_layer(format!("{n}.act1"), LayerKind::Clamp, mid, q),
                c2,
                aux_layer(format!("{n}.bn2"), LayerKind::BatchNorm { channels: out }, mid, None),
            ];
            let shortcut = if stride != 1 || shape[0] != out {
                let p = conv_layer(format!("{n}.proj"), group.clone(), q, shape, out, 1, stride, 0, 1, false)
                    .map_err(wrap)?;
                if p.out_shape != mid {
                    return Err(raw.err("projection shortcut does not match body output"));
                }
                vec![
                    p,
                    aux_layer(format!("{n}.projbn"), LayerKind::BatchNorm { channels: out }, mid, None),
                ]
            } else {
                Vec::new()
            };
            let kind = LayerKind::Residual {
                out_channels: out,
                stride,
                body,
                shortcut,
            };
            Ok(base_layer(&raw, kind, shape, mid))
        }
        other => Err(raw.err(format!("unknown layer kind `{other}`"))),
    }
}
