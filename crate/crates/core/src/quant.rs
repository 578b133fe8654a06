//! Quantization functions: sign binarization with an L1-mean scale, the linear
//! k-bit quantizer on `[0, 1]`, the tanh / channel-max weight pipeline, clamp-based
//! activation quantization, and the straight-through surrogate derivatives used
//! when training through them.
//!
//! Rounding is half-away-from-zero everywhere (`f64::round`).

use log::warn;

use crate::error::{invalid, QbitError, Result};
use crate::tensor::RealTensor;

/// Bit count that marks a tensor as left in full precision.
pub const FULL_PRECISION_BITS: u8 = 32;

/// Channels whose post-tanh maximum falls below this are treated as all-zero.
pub const DEGENERATE_CHANNEL_EPS: f64 = 1e-12;

/// Number of quantization steps for `k` bits, `2^k - 1`.
#[inline]
pub fn levels(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Bitwidth of a quantized tensor: 1 to 8 bits, or 32 for full precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bitwidth(u8);

impl Bitwidth {
    pub const FULL: Bitwidth = Bitwidth(FULL_PRECISION_BITS);

    pub fn new(bits: u8) -> Result<Self> {
        if (1..=8).contains(&bits) || bits == FULL_PRECISION_BITS {
            Ok(Self(bits))
        } else {
            Err(invalid(format!("bitwidth must be 1..=8 or 32, got {bits}")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn is_full_precision(self) -> bool {
        self.0 == FULL_PRECISION_BITS
    }
}

impl std::fmt::Display for Bitwidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Weight,
    Activation,
}

/// Tie rule for the rounding step. Only one policy is supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Rounding {
    #[default]
    HalfAwayFromZero,
}

/// Quantization settings for one tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantSpec {
    pub bits: Bitwidth,
    pub role: Role,
    pub rounding: Rounding,
}

impl QuantSpec {
    pub fn new(bits: u8, role: Role) -> Result<Self> {
        Ok(Self {
            bits: Bitwidth::new(bits)?,
            role,
            rounding: Rounding::HalfAwayFromZero,
        })
    }

    pub fn full(role: Role) -> Self {
        Self {
            bits: Bitwidth::FULL,
            role,
            rounding: Rounding::HalfAwayFromZero,
        }
    }

    pub fn is_full_precision(&self) -> bool {
        self.bits.is_full_precision()
    }

    /// 1-bit activations are representable but unusual; callers may want to warn.
    pub fn is_flagged(&self) -> bool {
        self.role == Role::Activation && self.bits.get() == 1
    }
}

/// How integer codes map back onto reals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signedness {
    /// Codes `0..=2^k-1`, value `scale * c / (2^k - 1)`.
    Unit,
    /// Odd codes `-(2^k-1)..=(2^k-1)` in steps of two, value `scale_ch * s / (2^k - 1)`.
    SymmetricOdd,
    /// Codes `-1` / `+1`, value `scale * s`.
    Binary,
}

impl Signedness {
    pub fn tag(self) -> u8 {
        match self {
            Signedness::Unit => 0,
            Signedness::SymmetricOdd => 1,
            Signedness::Binary => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Signedness::Unit),
            1 => Ok(Signedness::SymmetricOdd),
            2 => Ok(Signedness::Binary),
            t => Err(QbitError::Format(format!("unknown signedness tag {t}"))),
        }
    }

    pub fn is_signed(self) -> bool {
        !matches!(self, Signedness::Unit)
    }

    /// Whether `code` is a legal code for this signedness at `bits`.
    pub fn accepts(self, code: i32, bits: u8) -> bool {
        let l = levels(bits) as i32;
        match self {
            Signedness::Unit => (0..=l).contains(&code),
            Signedness::SymmetricOdd => code.abs() <= l && (code - l) % 2 == 0,
            Signedness::Binary => code == 1 || code == -1,
        }
    }

    /// Maps a code to its unsigned storage form `0..=2^k-1`.
    pub fn to_offset(self, code: i32, bits: u8) -> u32 {
        match self {
            Signedness::Unit => code as u32,
            Signedness::SymmetricOdd | Signedness::Binary => {
                ((code + levels(bits) as i32) / 2) as u32
            }
        }
    }

    pub fn from_offset(self, offset: u32, bits: u8) -> i32 {
        match self {
            Signedness::Unit => offset as i32,
            Signedness::SymmetricOdd | Signedness::Binary => {
                2 * offset as i32 - levels(bits) as i32
            }
        }
    }
}

/// Integer-coded tensor with one scale or one scale per leading-axis channel.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<i32>,
    scales: Vec<f64>,
    bits: u8,
    signedness: Signedness,
}

impl QuantizedTensor {
    pub fn new(
        shape: Vec<usize>,
        codes: Vec<i32>,
        scales: Vec<f64>,
        bits: u8,
        signedness: Signedness,
    ) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(invalid(format!("quantized bitwidth must be 1..=8, got {bits}")));
        }
        if signedness == Signedness::Binary && bits != 1 {
            return Err(invalid("binary codes must use 1 bit"));
        }
        let n: usize = shape.iter().product();
        if n != codes.len() {
            return Err(invalid(format!(
                "shape {:?} needs {} codes, got {}",
                shape,
                n,
                codes.len()
            )));
        }
        let channels = shape.first().copied().unwrap_or(1);
        if scales.len() != 1 && scales.len() != channels {
            return Err(invalid(format!(
                "expected 1 or {} scales, got {}",
                channels,
                scales.len()
            )));
        }
        if scales.iter().any(|s| !s.is_finite()) {
            return Err(invalid("non-finite scale"));
        }
        if let Some(i) = codes.iter().position(|&c| !signedness.accepts(c, bits)) {
            return Err(QbitError::Corruption(format!(
                "code {} at index {} is out of range for {:?} at {} bits",
                codes[i], i, signedness, bits
            )));
        }
        Ok(Self {
            shape,
            codes,
            scales,
            bits,
            signedness,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn signedness(&self) -> Signedness {
        self.signedness
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.codes.len() {
            return Err(invalid(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        if self.scales.len() > 1 && shape.first() != self.shape.first() {
            return Err(invalid("reshape would move the per-channel axis"));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Real multiplier applied to the codes of leading-axis channel `ch`.
    pub fn channel_factor(&self, ch: usize) -> f64 {
        let s = if self.scales.len() == 1 {
            self.scales[0]
        } else {
            self.scales[ch]
        };
        s / levels(self.bits) as f64
    }

    pub fn reconstruct(&self) -> RealTensor {
        let channels = self.shape.first().copied().unwrap_or(1).max(1);
        let per = if self.codes.is_empty() {
            1
        } else {
            self.codes.len() / channels
        };
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, &c)| c as f64 * self.channel_factor(i.checked_div(per).unwrap_or(0)))
            .collect();
        RealTensor::from_parts_unchecked(self.shape.clone(), data)
    }
}

/// `round((2^k - 1) x)` for `x` already known to lie in `[0, 1]`.
#[inline]
pub(crate) fn unit_code(x: f64, levels: f64) -> f64 {
    (levels * x).round()
}

fn check_bits(bits: u8) -> Result<()> {
    if (1..=8).contains(&bits) {
        Ok(())
    } else {
        Err(invalid(format!("bitwidth must be 1..=8, got {bits}")))
    }
}

fn check_same_shape(a: &RealTensor, b: &RealTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Sign binarization with a single scale `||x||_1 / n`. `sign(0)` is `+1`.
pub fn binarize(x: &RealTensor) -> Result<QuantizedTensor> {
    if x.is_empty() {
        return Err(invalid("cannot binarize an empty tensor"));
    }
    let alpha = x.data().iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64;
    let codes = x.data().iter().map(|&v| sign_code(v)).collect();
    QuantizedTensor::new(x.shape().to_vec(), codes, vec![alpha], 1, Signedness::Binary)
}

/// Binarization with one L1-mean scale per leading-axis channel.
pub fn binarize_channels(x: &RealTensor) -> Result<QuantizedTensor> {
    if x.is_empty() {
        return Err(invalid("cannot binarize an empty tensor"));
    }
    let (rows, cols) = x.as_matrix_dims();
    let mut scales = Vec::with_capacity(rows);
    binarize_rows_into(x.data(), rows, cols, &mut scales, None);
    let codes = x.data().iter().map(|&v| sign_code(v)).collect();
    QuantizedTensor::new(x.shape().to_vec(), codes, scales, 1, Signedness::Binary)
}

#[inline]
fn sign_code(v: f64) -> i32 {
    if v >= 0.0 {
        1
    } else {
        -1
    }
}

/// Per-row `alpha_i * sign(w_ij)`; pushes the row scales and optionally writes the
/// reconstructed values.
pub(crate) fn binarize_rows_into(
    w: &[f64],
    rows: usize,
    cols: usize,
    scales: &mut Vec<f64>,
    mut out: Option<&mut [f64]>,
) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let alpha = if cols == 0 {
            0.0
        } else {
            row.iter().map(|v| v.abs()).sum::<f64>() / cols as f64
        };
        scales.push(alpha);
        if let Some(out) = out.as_deref_mut() {
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = alpha * sign_code(v) as f64;
            }
        }
    }
}

/// Straight-through gradient of binarization: `upstream * 1{|x| < 1}`.
///
/// The scale is treated as a constant. `|x| = 1` blocks the gradient.
pub fn binarize_ste_grad(x: &RealTensor, upstream: &RealTensor) -> Result<RealTensor> {
    check_same_shape(x, upstream)?;
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| if v.abs() < 1.0 { g } else { 0.0 })
        .collect();
    Ok(RealTensor::from_parts_unchecked(x.shape().to_vec(), data))
}

/// Linear k-bit quantizer on `[0, 1]`: codes `round((2^k - 1) x)`.
pub fn quantize_unit(x: &RealTensor, bits: u8) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    if let Some((index, &value)) = x
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| !(0.0..=1.0).contains(&v))
    {
        return Err(QbitError::RangeViolation { index, value });
    }
    let l = levels(bits) as f64;
    let codes = x.data().iter().map(|&v| unit_code(v, l) as i32).collect();
    QuantizedTensor::new(x.shape().to_vec(), codes, vec![1.0], bits, Signedness::Unit)
}

/// Straight-through gradient of the linear quantizer: identity.
pub fn quantize_unit_ste_grad(upstream: &RealTensor) -> RealTensor {
    upstream.clone()
}

/// Weight quantization: `tanh`, per-output-channel max normalization, then
/// `2 Q(w / 2M + 1/2) - 1`, stored as odd codes `2c - (2^k - 1)`.
///
/// Channel scales are 1; a channel whose maximum is below
/// [`DEGENERATE_CHANNEL_EPS`] gets scale 0 and reconstructs to zeros.
pub fn quantize_weights(w: &RealTensor, bits: u8) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    if w.is_empty() || w.shape().first().copied().unwrap_or(0) == 0 {
        return Err(invalid("weight tensor needs at least one channel"));
    }
    let (rows, cols) = w.as_matrix_dims();
    let l = levels(bits) as f64;
    let mut codes = vec![0i32; w.len()];
    let mut scales = vec![1.0; rows];
    for r in 0..rows {
        let row = &w.data()[r * cols..(r + 1) * cols];
        let m = row.iter().map(|v| v.tanh().abs()).fold(0.0, f64::max);
        let dst = &mut codes[r * cols..(r + 1) * cols];
        if m < DEGENERATE_CHANNEL_EPS {
            warn!("weight channel {r} is degenerate (max |tanh w| = {m:e}); mapping to zero");
            scales[r] = 0.0;
            dst.fill(1);
            continue;
        }
        for (d, &v) in dst.iter_mut().zip(row) {
            let x = v.tanh() / (2.0 * m) + 0.5;
            let c = unit_code(x, l);
            *d = (2.0 * c - l) as i32;
        }
    }
    QuantizedTensor::new(w.shape().to_vec(), codes, scales, bits, Signedness::SymmetricOdd)
}

/// Fake-quantizes weight rows in place into `out`, matching [`quantize_weights`]
/// followed by reconstruction.
pub(crate) fn fake_quantize_weight_rows(w: &[f64], rows: usize, cols: usize, bits: u8, out: &mut [f64]) {
    let l = levels(bits) as f64;
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let m = row.iter().map(|v| v.tanh().abs()).fold(0.0, f64::max);
        if m < DEGENERATE_CHANNEL_EPS {
            dst.fill(0.0);
            continue;
        }
        for (d, &v) in dst.iter_mut().zip(row) {
            let c = unit_code(v.tanh() / (2.0 * m) + 0.5, l);
            *d = (2.0 * c - l) / l;
        }
    }
}

/// Surrogate gradient of weight quantization for one row-major `[rows x cols]`
/// matrix.
///
/// The rounding step passes gradients unchanged, so the surrogate is
/// `tanh(w_ij) / M_i`, differentiated through both the tanh and the channel
/// maximum (whose gradient lands on the arg-max entry).
pub(crate) fn weight_surrogate_grad_rows(
    w: &[f64],
    rows: usize,
    cols: usize,
    upstream: &[f64],
    grad: &mut [f64],
) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let g = &upstream[r * cols..(r + 1) * cols];
        let dst = &mut grad[r * cols..(r + 1) * cols];
        let mut m = 0.0;
        let mut arg = 0;
        for (j, v) in row.iter().enumerate() {
            let a = v.tanh().abs();
            if a > m {
                m = a;
                arg = j;
            }
        }
        if m < DEGENERATE_CHANNEL_EPS {
            dst.fill(0.0);
            continue;
        }
        let mut cross = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let t = v.tanh();
            dst[j] = g[j] * (1.0 - t * t) / m;
            cross += g[j] * t;
        }
        let ta = row[arg].tanh();
        let dm = ta.signum() * (1.0 - ta * ta);
        dst[arg] -= cross * dm / (m * m);
    }
}

/// Surrogate gradient of [`quantize_weights`] with respect to the real weights.
pub fn quantize_weights_ste_grad(w: &RealTensor, upstream: &RealTensor) -> Result<RealTensor> {
    check_same_shape(w, upstream)?;
    let (rows, cols) = w.as_matrix_dims();
    let mut grad = vec![0.0; w.len()];
    weight_surrogate_grad_rows(w.data(), rows, cols, upstream.data(), &mut grad);
    Ok(RealTensor::from_parts_unchecked(w.shape().to_vec(), grad))
}

/// Activation quantization: `Q(clamp(s, 0, 1))`.
pub fn quantize_activations(s: &RealTensor, bits: u8) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    let l = levels(bits) as f64;
    let codes = s
        .data()
        .iter()
        .map(|&v| unit_code(v.clamp(0.0, 1.0), l) as i32)
        .collect();
    QuantizedTensor::new(s.shape().to_vec(), codes, vec![1.0], bits, Signedness::Unit)
}

/// Gradient of the clamp-then-quantize path: `upstream * 1{0 <= s <= 1}`.
pub fn clamp_ste_grad(s: &RealTensor, upstream: &RealTensor) -> Result<RealTensor> {
    check_same_shape(s, upstream)?;
    let data = s
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| if (0.0..=1.0).contains(&v) { g } else { 0.0 })
        .collect();
    Ok(RealTensor::from_parts_unchecked(s.shape().to_vec(), data))
}
