//! Popcount kernels over packed 1-bit operands.
//!
//! Both operands are row-major with the shared inner length `n` as the row
//! length: weights `[m x n]` and activations `[p x n]` (one row per output
//! column). Rows are re-aligned to 64-bit words and the tail of the last word is
//! masked, so payload padding never reaches a popcount.

use crate::bits::{read_bits, BitplaneTensor, PackedTensor};
use crate::error::{invalid, Result};
use crate::kernels::gemm::scale_accumulator;
use crate::quant::levels;
use crate::tensor::RealTensor;

/// Row-aligned bit matrix.
#[derive(Debug, Clone)]
pub(crate) struct BitRows {
    pub rows: usize,
    pub n: usize,
    pub words_per_row: usize,
    pub words: Vec<u64>,
}

impl BitRows {
    pub fn from_payload(payload: &[u8], rows: usize, n: usize) -> Self {
        let words_per_row = n.div_ceil(64);
        let mut words = vec![0u64; rows * words_per_row];
        for r in 0..rows {
            for w in 0..words_per_row {
                let start = w * 64;
                let len = (n - start).min(64);
                words[r * words_per_row + w] = read_bits(payload, r * n + start, len);
            }
        }
        Self {
            rows,
            n,
            words_per_row,
            words,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// Mask selecting the valid bits of the last word of a row.
    #[inline]
    pub fn tail_mask(&self) -> u64 {
        match self.n % 64 {
            0 => u64::MAX,
            r => (1u64 << r) - 1,
        }
    }
}

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        s => Err(invalid(format!("{what} must be a matrix, got shape {s:?}"))),
    }
}

fn row_scale(scales: &[f64], r: usize) -> f64 {
    if scales.len() == 1 {
        scales[0]
    } else {
        scales[r]
    }
}

fn check_binary(t: &PackedTensor, what: &str) -> Result<()> {
    if t.bits() != 1 || !t.signedness().is_signed() {
        return Err(invalid(format!("{what} must hold signed 1-bit codes")));
    }
    Ok(())
}

fn check_row_scales(scales: &[f64], rows: usize, what: &str) -> Result<()> {
    if scales.len() != 1 && scales.len() != rows {
        return Err(invalid(format!("{what} needs 1 or {rows} scales")));
    }
    Ok(())
}

/// `sum_j w_j a_j` for `+-1` rows: `2 * popcount(xnor) - n`.
#[inline]
pub(crate) fn xnor_dot(w: &[u64], a: &[u64], n: usize, tail: u64) -> i64 {
    let last = w.len() - 1;
    let mut pop = 0u32;
    for (i, (&x, &y)) in w.iter().zip(a).enumerate() {
        let mut v = !(x ^ y);
        if i == last {
            v &= tail;
        }
        pop += v.count_ones();
    }
    2 * pop as i64 - n as i64
}

/// `sum_j w_j b_j` for a `+-1` row `w` and a `{0,1}` row `b`.
#[inline]
pub(crate) fn signed_popcount(w: &[u64], b: &[u64]) -> i64 {
    let mut pos = 0u32;
    let mut all = 0u32;
    for (&x, &y) in w.iter().zip(b) {
        pos += (x & y).count_ones();
        all += y.count_ones();
    }
    2 * pos as i64 - all as i64
}

/// Binary matrix product via XNOR and popcount.
///
/// `w` is `[m x n]`, `a` is `[p x n]`, both 1-bit signed with bit 1 meaning +1.
/// Output `[m x p]` is `dot * alpha_w[i] * alpha_a[j]`.
pub fn gemm_xnor(w: &PackedTensor, a: &PackedTensor) -> Result<RealTensor> {
    check_binary(w, "weight operand")?;
    check_binary(a, "activation operand")?;
    let (m, n) = matrix_dims(w.shape(), "weight operand")?;
    let (p, n2) = matrix_dims(a.shape(), "activation operand")?;
    if n != n2 {
        return Err(invalid(format!("inner lengths differ: {n} vs {n2}")));
    }
    check_row_scales(w.scales(), m, "weight operand")?;
    check_row_scales(a.scales(), p, "activation operand")?;
    let mut out = vec![0.0; m * p];
    if n == 0 {
        return Ok(RealTensor::from_parts_unchecked(vec![m, p], out));
    }
    let wr = BitRows::from_payload(w.payload(), m, n);
    let ar = BitRows::from_payload(a.payload(), p, n);
    let tail = wr.tail_mask();
    for i in 0..m {
        let fw = row_scale(w.scales(), i);
        for j in 0..p {
            let dot = xnor_dot(wr.row(i), ar.row(j), n, tail);
            out[i * p + j] = scale_accumulator(dot, fw, row_scale(a.scales(), j));
        }
    }
    Ok(RealTensor::from_parts_unchecked(vec![m, p], out))
}

/// Integer accumulators of 1-bit weights against bit-planed unsigned codes.
pub(crate) fn bitserial_acc(w: &BitRows, planes: &[BitRows]) -> Vec<i64> {
    let p = planes.first().map_or(0, |b| b.rows);
    let mut out = vec![0i64; w.rows * p];
    for i in 0..w.rows {
        let wrow = w.row(i);
        for j in 0..p {
            let mut acc = 0i64;
            for (t, plane) in planes.iter().enumerate() {
                acc += signed_popcount(wrow, plane.row(j)) << t;
            }
            out[i * p + j] = acc;
        }
    }
    out
}

/// Bit-serial product of 1-bit weights `[m x n]` with k-bit unsigned activation
/// codes given as bit planes `[p x n]`: `sum_t 2^t * signed_popcount(w, plane_t)`,
/// then the same final scaling as [`gemm_int_codes`](super::gemm_int_codes).
pub fn gemm_bitserial(w: &PackedTensor, a: &BitplaneTensor) -> Result<RealTensor> {
    check_binary(w, "weight operand")?;
    let (m, n) = matrix_dims(w.shape(), "weight operand")?;
    let (p, n2) = matrix_dims(a.shape(), "activation planes")?;
    if n != n2 {
        return Err(invalid(format!("inner lengths differ: {n} vs {n2}")));
    }
    if a.planes().len() != a.bits() as usize {
        return Err(invalid(format!(
            "{} planes for {}-bit activations",
            a.planes().len(),
            a.bits()
        )));
    }
    check_row_scales(w.scales(), m, "weight operand")?;
    if a.scales().len() != 1 {
        return Err(invalid("activation planes must carry a single scale"));
    }
    if n == 0 {
        return Ok(RealTensor::zeros(vec![m, p]));
    }
    let wr = BitRows::from_payload(w.payload(), m, n);
    let planes: Vec<BitRows> = a
        .planes()
        .iter()
        .map(|pl| BitRows::from_payload(pl, p, n))
        .collect();
    let acc = bitserial_acc(&wr, &planes);
    let fa = a.scales()[0] / levels(a.bits()) as f64;
    let out = acc
        .iter()
        .enumerate()
        .map(|(idx, &v)| scale_accumulator(v, row_scale(w.scales(), idx / p), fa))
        .collect();
    Ok(RealTensor::from_parts_unchecked(vec![m, p], out))
}
