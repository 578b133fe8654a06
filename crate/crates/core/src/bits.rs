//! Bit-packed code storage.
//!
//! Element `e` of a `k`-bit tensor occupies payload bits `[e*k, e*k + k)`,
//! counting from bit 0 of byte 0, least significant bit first. Signed codes are
//! stored in offset form `c = (s + 2^k - 1) / 2`.

use crate::error::{invalid, QbitError, Result};
use crate::quant::{QuantizedTensor, Signedness};

/// Payload size in bytes for `n` elements of `bits` bits.
pub fn payload_bytes(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

/// Packed low-bit tensor with its per-channel scales.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    shape: Vec<usize>,
    bits: u8,
    signedness: Signedness,
    scales: Vec<f64>,
    payload: Vec<u8>,
}

impl PackedTensor {
    /// Assembles a packed tensor from raw parts, as read from a model file.
    pub fn from_raw(
        shape: Vec<usize>,
        bits: u8,
        signedness: Signedness,
        scales: Vec<f64>,
        payload: Vec<u8>,
    ) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(QbitError::Format(format!("packed bitwidth {bits} out of range")));
        }
        let n: usize = shape.iter().product();
        let want = payload_bytes(n, bits);
        if payload.len() != want {
            return Err(QbitError::Format(format!(
                "payload holds {} bytes, {} elements at {} bits need {}",
                payload.len(),
                n,
                bits,
                want
            )));
        }
        Ok(Self {
            shape,
            bits,
            signedness,
            scales,
            payload,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn signedness(&self) -> Signedness {
        self.signedness
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Mutable payload access. Bits past the last element are padding and may
    /// hold anything.
    pub fn payload_mut(&mut self) -> &mut [u8] {
        &mut self.payload
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads `len <= 64` payload bits starting at `bit_offset` into the low bits of
    /// a word. Bits beyond the payload read as zero.
    #[inline]
    pub fn read_bits(&self, bit_offset: usize, len: usize) -> u64 {
        read_bits(&self.payload, bit_offset, len)
    }

    /// Offset code of element `e`.
    #[inline]
    pub fn offset_code(&self, e: usize) -> u32 {
        let k = self.bits as usize;
        self.read_bits(e * k, k) as u32
    }
}

#[inline]
pub(crate) fn read_bits(payload: &[u8], bit_offset: usize, len: usize) -> u64 {
    debug_assert!(len <= 64);
    if len == 0 {
        return 0;
    }
    let first = bit_offset / 8;
    let shift = bit_offset % 8;
    let mut buf = [0u8; 16];
    let end = (first + 9).min(payload.len());
    if first < end {
        buf[..end - first].copy_from_slice(&payload[first..end]);
    }
    let word = u128::from_le_bytes(buf) >> shift;
    let mask = if len == 64 { u64::MAX } else { (1u64 << len) - 1 };
    (word as u64) & mask
}

/// Writes codes `values` of `bits` bits each into a fresh LSB-first payload.
pub(crate) fn pack_offsets(values: impl Iterator<Item = u32>, n: usize, bits: u8) -> Vec<u8> {
    let mut payload = vec![0u8; payload_bytes(n, bits)];
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut pos = 0usize;
    for v in values {
        acc |= (v as u64) << filled;
        filled += bits as u32;
        while filled >= 8 {
            payload[pos] = acc as u8;
            pos += 1;
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        payload[pos] = acc as u8;
    }
    payload
}

/// Packs a quantized tensor losslessly.
pub fn pack(q: &QuantizedTensor) -> Result<PackedTensor> {
    let bits = q.bits();
    let sig = q.signedness();
    if let Some(i) = q.codes().iter().position(|&c| !sig.accepts(c, bits)) {
        return Err(QbitError::Corruption(format!(
            "code {} at index {} does not fit {} bits",
            q.codes()[i],
            i,
            bits
        )));
    }
    let payload = pack_offsets(q.codes().iter().map(|&c| sig.to_offset(c, bits)), q.len(), bits);
    Ok(PackedTensor {
        shape: q.shape().to_vec(),
        bits,
        signedness: sig,
        scales: q.scales().to_vec(),
        payload,
    })
}

/// Exact inverse of [`pack`].
pub fn unpack(p: &PackedTensor) -> Result<QuantizedTensor> {
    let n = p.len();
    if p.payload.len() < payload_bytes(n, p.bits) {
        return Err(QbitError::Format(format!(
            "truncated payload: {} bytes for {} elements at {} bits",
            p.payload.len(),
            n,
            p.bits
        )));
    }
    let codes = (0..n)
        .map(|e| p.signedness.from_offset(p.offset_code(e), p.bits))
        .collect();
    QuantizedTensor::new(p.shape.clone(), codes, p.scales.clone(), p.bits, p.signedness)
}

/// Unsigned code tensor split into 1-bit planes; plane `t` holds bit `2^t` of
/// every code, packed with the same layout as a 1-bit [`PackedTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct BitplaneTensor {
    shape: Vec<usize>,
    bits: u8,
    scales: Vec<f64>,
    planes: Vec<Vec<u8>>,
}

impl BitplaneTensor {
    pub fn from_planes(
        shape: Vec<usize>,
        bits: u8,
        scales: Vec<f64>,
        planes: Vec<Vec<u8>>,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        if !(1..=8).contains(&bits) || planes.len() != bits as usize {
            return Err(invalid(format!(
                "{} planes supplied for {}-bit codes",
                planes.len(),
                bits
            )));
        }
        if let Some(p) = planes.iter().find(|p| p.len() != payload_bytes(n, 1)) {
            return Err(QbitError::Format(format!(
                "plane holds {} bytes, {} elements need {}",
                p.len(),
                n,
                payload_bytes(n, 1)
            )));
        }
        Ok(Self {
            shape,
            bits,
            scales,
            planes,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn planes(&self) -> &[Vec<u8>] {
        &self.planes
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `sum_t 2^t * plane_t`, element by element.
    pub fn reconstruct_codes(&self) -> Vec<u32> {
        (0..self.len())
            .map(|e| {
                self.planes
                    .iter()
                    .enumerate()
                    .map(|(t, p)| (read_bits(p, e, 1) as u32) << t)
                    .sum()
            })
            .collect()
    }

    pub fn to_quantized(&self) -> Result<QuantizedTensor> {
        let codes = self.reconstruct_codes().into_iter().map(|c| c as i32).collect();
        QuantizedTensor::new(
            self.shape.clone(),
            codes,
            self.scales.clone(),
            self.bits,
            Signedness::Unit,
        )
    }
}

/// Splits unit-interval codes into bit planes.
pub fn to_bitplanes(q: &QuantizedTensor) -> Result<BitplaneTensor> {
    if q.signedness() != Signedness::Unit {
        return Err(QbitError::Unsupported(
            "bit planes need unsigned unit codes; convert signed codes to offset form first".into(),
        ));
    }
    let n = q.len();
    let planes = (0..q.bits())
        .map(|t| pack_offsets(q.codes().iter().map(|&c| ((c as u32) >> t) & 1), n, 1))
        .collect();
    Ok(BitplaneTensor {
        shape: q.shape().to_vec(),
        bits: q.bits(),
        scales: q.scales().to_vec(),
        planes,
    })
}
