use crate::error::{invalid, Result};
use crate::quant::{levels, QuantizedTensor};
use crate::tensor::RealTensor;

/// Error-free sum: `a + b = s + e` exactly.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Dot product accumulated in double-double precision.
pub(crate) fn dot_wide(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for (x, y) in a.zip(b) {
        let p = x * y;
        let pe = x.mul_add(y, -p);
        let (s, e) = two_sum(hi, p);
        hi = s;
        lo += e + pe;
    }
    hi + lo
}

fn matrix_dims(t: &RealTensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(invalid(format!("{what} must be a matrix, got shape {s:?}"))),
    }
}

/// Plain real matrix product `A [m x n] * B [n x p]`, accumulated in double-double.
pub fn gemm_reference(a: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    let (m, n) = matrix_dims(a, "left operand")?;
    let (n2, p) = matrix_dims(b, "right operand")?;
    if n != n2 {
        return Err(invalid(format!("inner dimensions differ: {n} vs {n2}")));
    }
    let mut out = vec![0.0; m * p];
    gemm_reference_into(a.data(), b.data(), m, n, p, &mut out);
    Ok(RealTensor::from_parts_unchecked(vec![m, p], out))
}

pub(crate) fn gemm_reference_into(a: &[f64], b: &[f64], m: usize, n: usize, p: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &a[i * n..(i + 1) * n];
        for j in 0..p {
            out[i * p + j] = dot_wide(row.iter().copied(), (0..n).map(|k| b[k * p + j]));
        }
    }
}

/// Largest possible `|acc|` for an `n`-term product of codes.
pub fn accumulator_bound(n: usize, w_bits: u8, a_bits: u8) -> u64 {
    n as u64 * levels(w_bits) as u64 * levels(a_bits) as u64
}

/// Whether an `n`-term code dot product needs a 64-bit accumulator.
pub fn needs_wide_accumulator(n: usize, w_bits: u8, a_bits: u8) -> bool {
    accumulator_bound(n, w_bits, a_bits) > i32::MAX as u64
}

/// Final real scaling of one integer accumulator. Every code kernel goes through
/// this so equal accumulators give bitwise-equal outputs.
#[inline]
pub fn scale_accumulator(acc: i64, w_factor: f64, a_factor: f64) -> f64 {
    acc as f64 * (w_factor * a_factor)
}

macro_rules! code_gemm {
    ($name:ident, $acc:ty) => {
        fn $name(w: &[i32], a: &[i32], m: usize, n: usize, p: usize, out: &mut [i64]) {
            let mut row_acc: Vec<$acc> = vec![0; p];
            for i in 0..m {
                row_acc.fill(0);
                let wr = &w[i * n..(i + 1) * n];
                for (k, &wk) in wr.iter().enumerate() {
                    if wk == 0 {
                        continue;
                    }
                    let wk = wk as $acc;
                    let ar = &a[k * p..(k + 1) * p];
                    for (acc, &av) in row_acc.iter_mut().zip(ar) {
                        *acc += wk * av as $acc;
                    }
                }
                for (o, &v) in out[i * p..(i + 1) * p].iter_mut().zip(&row_acc) {
                    *o = v as i64;
                }
            }
        }
    };
}

code_gemm!(code_gemm_i32, i32);
code_gemm!(code_gemm_i64, i64);

/// Integer accumulators `sum_k w[i,k] * a[k,j]` for code matrices
/// `w [m x n]`, `a [n x p]`.
pub(crate) fn code_gemm_acc(
    w: &[i32],
    a: &[i32],
    m: usize,
    n: usize,
    p: usize,
    w_bits: u8,
    a_bits: u8,
) -> Vec<i64> {
    let mut out = vec![0i64; m * p];
    if needs_wide_accumulator(n, w_bits, a_bits) {
        code_gemm_i64(w, a, m, n, p, &mut out);
    } else {
        code_gemm_i32(w, a, m, n, p, &mut out);
    }
    out
}

/// Code-domain matrix product of signed weight codes `W [m x n]` with activation
/// codes `A [n x p]`: integer accumulation, then one multiply per output by the
/// weight row factor and the activation factor.
pub fn gemm_int_codes(w: &QuantizedTensor, a: &QuantizedTensor) -> Result<RealTensor> {
    let (m, n, p) = check_code_operands(w, a)?;
    let acc = code_gemm_acc(w.codes(), a.codes(), m, n, p, w.bits(), a.bits());
    let fa = a.channel_factor(0);
    let out = acc
        .iter()
        .enumerate()
        .map(|(idx, &v)| scale_accumulator(v, w.channel_factor(idx / p.max(1)), fa))
        .collect();
    Ok(RealTensor::from_parts_unchecked(vec![m, p], out))
}

/// Rows `rows` of [`gemm_int_codes`], for callers splitting work by output row.
pub fn gemm_int_codes_rows(
    w: &QuantizedTensor,
    a: &QuantizedTensor,
    rows: std::ops::Range<usize>,
) -> Result<Vec<f64>> {
    let (m, n, p) = check_code_operands(w, a)?;
    if rows.end > m || rows.start > rows.end {
        return Err(invalid(format!("row range {rows:?} outside 0..{m}")));
    }
    let wr = &w.codes()[rows.start * n..rows.end * n];
    let acc = code_gemm_acc(wr, a.codes(), rows.len(), n, p, w.bits(), a.bits());
    let fa = a.channel_factor(0);
    Ok(acc
        .iter()
        .enumerate()
        .map(|(idx, &v)| scale_accumulator(v, w.channel_factor(rows.start + idx / p.max(1)), fa))
        .collect())
}

fn check_code_operands(w: &QuantizedTensor, a: &QuantizedTensor) -> Result<(usize, usize, usize)> {
    let (m, n) = match w.shape() {
        [m, n] => (*m, *n),
        s => return Err(invalid(format!("weight codes must be a matrix, got {s:?}"))),
    };
    let (n2, p) = match a.shape() {
        [n2, p] => (*n2, *p),
        s => return Err(invalid(format!("activation codes must be a matrix, got {s:?}"))),
    };
    if n != n2 {
        return Err(invalid(format!("inner dimensions differ: {n} vs {n2}")));
    }
    if !w.signedness().is_signed() {
        return Err(invalid("weight operand must hold signed (odd or binary) codes"));
    }
    if a.scales().len() != 1 {
        return Err(invalid("activation operand must carry a single scale"));
    }
    Ok((m, n, p))
}
