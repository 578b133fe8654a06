//! Independent oracles shared by the property and acceptance suites.

#![allow(dead_code)]

use qbit_core::arch::NetworkDef;
use qbit_core::net::{Mode, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Nearest of the `2^k` levels `i / (2^k - 1)` by exhaustive search; ties go up.
pub fn nearest_level(x: f64, k: u8) -> f64 {
    let l = ((1u32 << k) - 1) as f64;
    let mut best = 0.0;
    let mut best_d = f64::INFINITY;
    for i in 0..=(l as u32) {
        let v = i as f64 / l;
        let d = (x - v).abs();
        if d <= best_d {
            best = v;
            best_d = d;
        }
    }
    best
}

/// `sum_k w[i,k] a[k,j]` over plain integers.
pub fn int_gemm(w: &[i64], a: &[i64], m: usize, n: usize, p: usize) -> Vec<i64> {
    let mut out = vec![0i64; m * p];
    for i in 0..m {
        for j in 0..p {
            for k in 0..n {
                out[i * p + j] += w[i * n + k] * a[k * p + j];
            }
        }
    }
    out
}

/// Direct seven-loop convolution over integers, zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv_direct(
    x: &[i64],
    c: usize,
    h: usize,
    w: usize,
    k: &[i64],
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<i64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0i64; o * oh * ow];
    for oc in 0..o {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = 0i64;
                for ic in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xo * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x[(ic * h + iy as usize) * w + ix as usize]
                                * k[((oc * c + ic) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(oc * oh + y) * ow + xo] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Units in the last place between two doubles of the same sign.
pub fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    if a.signum() != b.signum() {
        return u64::MAX;
    }
    (a.abs().to_bits() as i64 - b.abs().to_bits() as i64).unsigned_abs()
}

/// `max_i |a_i - b_i| / max_i |b_i|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub const TOY_INPUT: usize = 6;
pub const TOY_HIDDEN: usize = 5;
pub const TOY_CLASSES: usize = 3;

/// Two weight layers: `fc1` (no bias), a clamp, `fc2` with bias; both quantized
/// when `k_w` is given.
pub fn toy_net(k_w: Option<u8>, k_a: u8, seed: u64) -> Network {
    let text = format!(
        "[network]\ninput = {TOY_INPUT}x1x1\nclasses = {TOY_CLASSES}\n[layers]\nfc1 = linear {TOY_HIDDEN} q\na1 = clamp\n\
         fc2 = linear {TOY_CLASSES} bias q\n"
    );
    let mut def = NetworkDef::from_text(&text).unwrap();
    match k_w {
        Some(k) => def.set_bitwidths(&|_| Some(k), k_a).unwrap(),
        None => def.set_bitwidths(&|_| Some(32), 32).unwrap(),
    }
    let mut net = Network::new(def, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for p in net.params_mut() {
        for v in p.iter_mut() {
            *v = r.gen_range(-0.9..0.9);
        }
    }
    net
}

fn surrogate_weight(w: &[f64], rows: usize, cols: usize, k: Option<u8>) -> Vec<f64> {
    match k {
        None => w.to_vec(),
        Some(1) => w.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        Some(_) => {
            let mut out = vec![0.0; w.len()];
            for r in 0..rows {
                let row = &w[r * cols..(r + 1) * cols];
                let m = row.iter().map(|v| v.tanh().abs()).fold(0.0, f64::max);
                for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    *o = v.tanh() / m;
                }
            }
            out
        }
    }
}

fn quantized_weight(w: &[f64], rows: usize, cols: usize, k: Option<u8>) -> Vec<f64> {
    match k {
        None => w.to_vec(),
        Some(1) => {
            let mut out = vec![0.0; w.len()];
            for r in 0..rows {
                let row = &w[r * cols..(r + 1) * cols];
                let alpha = row.iter().map(|v| v.abs()).sum::<f64>() / cols as f64;
                for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    *o = if *v >= 0.0 { alpha } else { -alpha };
                }
            }
            out
        }
        Some(k) => {
            let mut out = vec![0.0; w.len()];
            for r in 0..rows {
                let row = &w[r * cols..(r + 1) * cols];
                let m = row.iter().map(|v| v.tanh().abs()).fold(0.0, f64::max);
                for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    let x = v.tanh() / (2.0 * m) + 0.5;
                    *o = 2.0 * nearest_level(x, k) - 1.0;
                }
            }
            out
        }
    }
}

/// The toy network with every quantizer `q` replaced by `s + (q(s0) - s(s0))`,
/// where `s` is the quantizer's smooth surrogate and the offsets are frozen at
/// the parameters `theta0`. It agrees with the quantized forward at `theta0` and
/// its exact gradient there is the straight-through gradient.
pub struct Surrogate {
    k_w: Option<u8>,
    k_a: Option<u8>,
    w_offsets: [Vec<f64>; 2],
    a_offsets: Vec<f64>,
}

impl Surrogate {
    pub fn freeze(theta0: &[Vec<f64>], x: &[f64], batch: usize, k_w: Option<u8>, k_a: Option<u8>) -> Self {
        let dims = [(TOY_HIDDEN, TOY_INPUT), (TOY_CLASSES, TOY_HIDDEN)];
        let w_offsets = [0, 1].map(|i| {
            let (r, c) = dims[i];
            let q = quantized_weight(&theta0[i], r, c, k_w);
            let s = surrogate_weight(&theta0[i], r, c, k_w);
            q.iter().zip(&s).map(|(a, b)| a - b).collect()
        });
        let mut me = Self {
            k_w,
            k_a,
            w_offsets,
            a_offsets: Vec::new(),
        };
        let w1 = me.weight(&theta0[0], 0);
        let pre = linear(x, batch, &w1, TOY_HIDDEN, TOY_INPUT, None);
        me.a_offsets = pre
            .iter()
            .map(|&s| {
                let c = s.clamp(0.0, 1.0);
                match k_a {
                    Some(k) => nearest_level(c, k) - c,
                    None => 0.0,
                }
            })
            .collect();
        me
    }

    fn weight(&self, w: &[f64], i: usize) -> Vec<f64> {
        let (r, c) = [(TOY_HIDDEN, TOY_INPUT), (TOY_CLASSES, TOY_HIDDEN)][i];
        let s = surrogate_weight(w, r, c, self.k_w);
        if self.w_offsets[i].is_empty() {
            return s;
        }
        s.iter().zip(&self.w_offsets[i]).map(|(a, b)| a + b).collect()
    }

    /// Logits for parameters `[w1, w2, b2]`.
    pub fn logits(&self, theta: &[Vec<f64>], x: &[f64], batch: usize) -> Vec<f64> {
        let w1 = self.weight(&theta[0], 0);
        let w2 = self.weight(&theta[1], 1);
        let pre = linear(x, batch, &w1, TOY_HIDDEN, TOY_INPUT, None);
        let act: Vec<f64> = pre
            .iter()
            .zip(&self.a_offsets)
            .map(|(&s, &o)| s.clamp(0.0, 1.0) + if self.k_a.is_some() { o } else { 0.0 })
            .collect();
        linear(&act, batch, &w2, TOY_CLASSES, TOY_HIDDEN, Some(&theta[2]))
    }
}

fn linear(x: &[f64], batch: usize, w: &[f64], out: usize, fan_in: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut y = vec![0.0; batch * out];
    for s in 0..batch {
        for o in 0..out {
            let mut acc = bias.map_or(0.0, |b| b[o]);
            for i in 0..fan_in {
                acc += w[o * fan_in + i] * x[s * fan_in + i];
            }
            y[s * out + o] = acc;
        }
    }
    y
}

/// Worst relative mismatch between the network's backward pass and central
/// differences of the surrogate network, for the loss `sum(r * logits)`.
/// Inputs whose pre-activations sit within `margin` of the clamp kinks are
/// redrawn.
pub fn ste_gradient_error(k_w: Option<u8>, k_a: Option<u8>, seed: u64) -> f64 {
    let batch = 4;
    let mut net = toy_net(k_w, k_a.unwrap_or(32), seed);
    let theta0: Vec<Vec<f64>> = net.params().iter().map(|p| p.to_vec()).collect();
    let mut r = rng(seed.wrapping_mul(31) + 7);
    let margin = 1e-3;
    let x = loop {
        let x: Vec<f64> = (0..batch * TOY_INPUT).map(|_| r.gen_range(-1.0..1.0)).collect();
        let w1 = quantized_weight(&theta0[0], TOY_HIDDEN, TOY_INPUT, k_w);
        let pre = linear(&x, batch, &w1, TOY_HIDDEN, TOY_INPUT, None);
        let near_kink = pre.iter().any(|&s| s.abs() < margin || (s - 1.0).abs() < margin);
        if !near_kink {
            break x;
        }
    };
    let proj: Vec<f64> = (0..batch * TOY_CLASSES).map(|_| r.gen_range(-1.0..1.0)).collect();
    let (logits, cache) = net.forward(&x, batch, Mode::Train).unwrap();
    let grads = net.backward(&cache, &proj).unwrap();

    let sur = Surrogate::freeze(&theta0, &x, batch, k_w, k_a);
    let base = sur.logits(&theta0, &x, batch);
    assert!(rel_err(&base, &logits) < 1e-12, "surrogate disagrees with the forward pass at theta0");

    let loss = |theta: &[Vec<f64>]| -> f64 { sur.logits(theta, &x, batch).iter().zip(&proj).map(|(a, b)| a * b).sum() };
    let active = grads.tensors.iter().flatten().filter(|g| g.abs() > 1e-6).count();
    assert!(active * 2 > grads.tensors.iter().map(Vec::len).sum::<usize>(), "most gradients vanished");
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (t, g) in grads.tensors.iter().enumerate() {
        let mut fd = vec![0.0; g.len()];
        for i in 0..g.len() {
            let mut p = theta0.clone();
            p[t][i] += h;
            let mut m = theta0.clone();
            m[t][i] -= h;
            fd[i] = (loss(&p) - loss(&m)) / (2.0 * h);
        }
        let scale = fd.iter().chain(g.iter()).fold(1e-3f64, |m, v| m.max(v.abs()));
        for (a, b) in g.iter().zip(&fd) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    worst
}

use qbit_core::bits::{pack, to_bitplanes};
use qbit_core::kernels::{
    conv2d_quantized, gemm_bitserial, gemm_int_codes, gemm_reference, gemm_xnor, scale_accumulator,
};
use qbit_core::quant::{levels, QuantizedTensor, Signedness};
use qbit_core::tensor::RealTensor;

fn binary_codes(r: &mut ChaCha8Rng, rows: usize, n: usize) -> QuantizedTensor {
    let codes = (0..rows * n).map(|_| if r.gen() { 1 } else { -1 }).collect();
    let scales = (0..rows).map(|_| r.gen_range(0.01..2.0)).collect();
    QuantizedTensor::new(vec![rows, n], codes, scales, 1, Signedness::Binary).unwrap()
}

fn unit_codes(r: &mut ChaCha8Rng, shape: Vec<usize>, k: u8) -> QuantizedTensor {
    let n: usize = shape.iter().product();
    let l = levels(k) as i32;
    let codes = (0..n).map(|_| r.gen_range(0..=l)).collect();
    QuantizedTensor::new(shape, codes, vec![r.gen_range(0.1..2.0)], k, Signedness::Unit).unwrap()
}

fn signed_codes(r: &mut ChaCha8Rng, shape: Vec<usize>, k: u8) -> QuantizedTensor {
    if k == 1 {
        let rows = shape[0];
        let n = shape.iter().product::<usize>() / rows;
        return binary_codes(r, rows, n).reshape(shape).unwrap();
    }
    let n: usize = shape.iter().product();
    let l = levels(k) as i32;
    let codes = (0..n).map(|_| 2 * r.gen_range(0..=l) - l).collect();
    let scales = (0..shape[0]).map(|_| r.gen_range(0.1..2.0)).collect();
    QuantizedTensor::new(shape, codes, scales, k, Signedness::SymmetricOdd).unwrap()
}

fn codes_i64(q: &QuantizedTensor) -> Vec<i64> {
    q.codes().iter().map(|&c| c as i64).collect()
}

fn transpose(q: &QuantizedTensor) -> QuantizedTensor {
    let (rows, cols) = (q.shape()[0], q.shape()[1]);
    let mut codes = vec![0; q.len()];
    for i in 0..rows {
        for j in 0..cols {
            codes[j * rows + i] = q.codes()[i * cols + j];
        }
    }
    QuantizedTensor::new(vec![cols, rows], codes, q.scales().to_vec(), q.bits(), q.signedness()).unwrap()
}

/// XNOR-popcount product against a plain `+-1` integer product, exactly, also
/// with garbage written into the payload padding bits.
pub fn case_xnor(r: &mut ChaCha8Rng) -> Result<(), String> {
    let (m, n, p) = (r.gen_range(1..9), r.gen_range(1..300), r.gen_range(1..9));
    let w = binary_codes(r, m, n);
    let a = binary_codes(r, p, n);
    let mut at = vec![0i64; n * p];
    for j in 0..p {
        for k in 0..n {
            at[k * p + j] = a.codes()[j * n + k] as i64;
        }
    }
    let acc = int_gemm(&codes_i64(&w), &at, m, n, p);
    let want: Vec<f64> = (0..m * p)
        .map(|i| scale_accumulator(acc[i], w.scales()[i / p], a.scales()[i % p]))
        .collect();
    let (pw, mut pa) = (pack(&w).unwrap(), pack(&a).unwrap());
    let got = gemm_xnor(&pw, &pa).map_err(|e| e.to_string())?;
    if got.data() != &want[..] {
        return Err(format!("xnor {m}x{n}x{p} differs from the integer oracle"));
    }
    let used = (p * n) % 8;
    if used != 0 {
        let last = pa.payload().len() - 1;
        pa.payload_mut()[last] |= 0xffu8 << used;
        let again = gemm_xnor(&pw, &pa).map_err(|e| e.to_string())?;
        if again.data() != &want[..] {
            return Err(format!("xnor {m}x{n}x{p} reads padding bits"));
        }
    }
    Ok(())
}

/// Bit-serial binary-by-k-bit product against the code GEMM, bitwise.
pub fn case_bitserial(r: &mut ChaCha8Rng) -> Result<(), String> {
    let (m, n, p, k) = (r.gen_range(1..9), r.gen_range(1..300), r.gen_range(1..9), r.gen_range(1..=8u8));
    let w = binary_codes(r, m, n);
    let a = unit_codes(r, vec![p, n], k);
    let got = gemm_bitserial(&pack(&w).unwrap(), &to_bitplanes(&a).unwrap()).map_err(|e| e.to_string())?;
    let want = gemm_int_codes(&w, &transpose(&a)).map_err(|e| e.to_string())?;
    if got.data() != want.data() {
        return Err(format!("bitserial {m}x{n}x{p} at {k} bits differs from gemm_int_codes"));
    }
    Ok(())
}

/// Unit in the last place of `x`.
pub fn ulp(x: f64) -> f64 {
    let x = x.abs();
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let next = f64::from_bits(x.to_bits() + 1);
    next - x
}

/// Worst deviations of one code GEMM case from the real reference.
#[derive(Debug, Clone, Copy, Default)]
pub struct UlpStats {
    /// Error in ulps of the output value itself, over outputs whose exact
    /// accumulator is nonzero.
    pub strict: f64,
    /// Error in ulps of `sum_k |w_k a_k|`, the scale at which the reference's
    /// per-element rounding enters.
    pub conditioned: f64,
}

impl UlpStats {
    pub fn merge(self, o: UlpStats) -> UlpStats {
        UlpStats {
            strict: self.strict.max(o.strict),
            conditioned: self.conditioned.max(o.conditioned),
        }
    }
}

/// Code GEMM: exact integer accumulators, and its distance from the real
/// reference product of the reconstructed operands.
pub fn case_int_codes(r: &mut ChaCha8Rng) -> Result<UlpStats, String> {
    let (m, n, p) = (r.gen_range(1..9), r.gen_range(1..200), r.gen_range(1..9));
    let (kw, ka) = (r.gen_range(1..=8u8), r.gen_range(1..=8u8));
    let w = signed_codes(r, vec![m, n], kw);
    let a = unit_codes(r, vec![n, p], ka);
    let got = gemm_int_codes(&w, &a).map_err(|e| e.to_string())?;
    let acc = int_gemm(&codes_i64(&w), &codes_i64(&a), m, n, p);
    for (i, &sum) in acc.iter().enumerate() {
        let exact = scale_accumulator(sum, w.channel_factor(i / p), a.channel_factor(0));
        if got.data()[i] != exact {
            return Err(format!("int codes {m}x{n}x{p} ({kw}/{ka} bits): accumulator mismatch at {i}"));
        }
    }
    let (rw, ra) = (w.reconstruct(), a.reconstruct());
    let reference = gemm_reference(&rw, &ra).map_err(|e| e.to_string())?;
    let mut stats = UlpStats::default();
    for i in 0..m {
        for j in 0..p {
            let (g, f) = (got.data()[i * p + j], reference.data()[i * p + j]);
            let cond: f64 = (0..n).map(|k| (rw.data()[i * n + k] * ra.data()[k * p + j]).abs()).sum();
            if acc[i * p + j] != 0 {
                stats.strict = stats.strict.max((g - f).abs() / ulp(f));
            }
            stats.conditioned = stats.conditioned.max((g - f).abs() / ulp(cond));
        }
    }
    Ok(stats)
}

/// Quantized convolution against the direct-loop oracle, in the integer domain.
pub fn case_conv(r: &mut ChaCha8Rng) -> Result<(), String> {
    let (c, o) = (r.gen_range(1..=8), r.gen_range(1..=8));
    let (h, w) = (r.gen_range(1..=16), r.gen_range(1..=16));
    let (kh, kw) = (r.gen_range(1..=h.min(5)), r.gen_range(1..=w.min(5)));
    let stride = r.gen_range(1..=3);
    let pad = r.gen_range(0..=kh.min(kw) / 2 + 1);
    let (kbw, kba) = (r.gen_range(1..=8u8), r.gen_range(1..=8u8));
    let x = unit_codes(r, vec![c, h, w], kba);
    let k = signed_codes(r, vec![o, c, kh, kw], kbw);
    let got = conv2d_quantized(&x, &k, stride, pad).map_err(|e| e.to_string())?;
    let (acc, oh, ow) = conv_direct(&codes_i64(&x), c, h, w, &codes_i64(&k), o, kh, kw, stride, pad);
    if got.shape() != [o, oh, ow] {
        return Err(format!("conv shape {:?} vs {:?}", got.shape(), [o, oh, ow]));
    }
    let pix = oh * ow;
    for (i, (g, a)) in got.data().iter().zip(&acc).enumerate() {
        if *g != scale_accumulator(*a, k.channel_factor(i / pix), x.channel_factor(0)) {
            return Err(format!(
                "conv c={c} o={o} {h}x{w} k={kh}x{kw} s={stride} p={pad}: mismatch at {i}"
            ));
        }
    }
    Ok(())
}

pub fn real(shape: Vec<usize>, data: Vec<f64>) -> RealTensor {
    RealTensor::new(shape, data).unwrap()
}

/// Conv, BN, clamp, max pool, residual block, global average pool and a
/// linear head with random BN statistics.
pub const MIXED: &str = "[network]\nname = mixed\ninput = 3x10x10\nclasses = 4\n[layers]\n\
    c1 = conv 6 k=3 p=1\nb1 = bn\na1 = clamp\np1 = maxpool 2\n\
    r1 = residual 8 s=2\na2 = clamp\nc3 = conv 8 k=3 p=1\nb3 = bn\na3 = clamp\n\
    g = avgpool global\nfc = linear 4 bias\n";

pub fn mixed_net(seed: u64) -> Network {
    let mut def = NetworkDef::from_text(MIXED).unwrap();
    let bits = |g: &str| Some(match g {
        "c1" => 4,
        "r1" => 2,
        _ => 1,
    });
    def.set_bitwidths(&bits, 2).unwrap();
    let mut net = Network::new(def, seed).unwrap();
    let mut r = rng(seed + 100);
    let info = net.param_info();
    for (p, i) in net.params_mut().into_iter().zip(&info) {
        if i.name.ends_with(".gamma") {
            p.iter_mut().for_each(|v| *v = r.gen_range(0.5..1.5));
        } else if i.name.ends_with(".beta") {
            p.iter_mut().for_each(|v| *v = r.gen_range(0.2..0.6));
        }
    }
    for (k, b) in net.buffers_mut().into_iter().enumerate() {
        let range = if k % 2 == 0 { -0.2..0.2 } else { 0.5..2.0 };
        b.iter_mut().for_each(|v| *v = r.gen_range(range.clone()));
    }
    net
}

pub fn random_inputs(net: &Network, n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n * net.input_len()).map(|_| r.gen_range(-2.0..2.0)).collect()
}

