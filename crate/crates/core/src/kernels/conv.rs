use crate::bits::{pack, pack_offsets, payload_bytes};
use crate::error::{invalid, Result};
use crate::kernels::gemm::{code_gemm_acc, gemm_reference_into, scale_accumulator};
use crate::kernels::popcount::{bitserial_acc, BitRows};
use crate::quant::{QuantizedTensor, Signedness};
use crate::tensor::RealTensor;

/// Square-stride, symmetric-padding 2-D convolution geometry (NCHW / OIHW).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Spatial output size `floor((H + 2p - kh) / s) + 1`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(invalid("stride must be positive"));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(invalid("kernel must be non-empty"));
        }
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(invalid(format!(
                "kernel {}x{} does not fit padded input {}x{}",
                self.kernel_h, self.kernel_w, ph, pw
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Receptive-field length `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// Unrolls one `[C x H x W]` image into columns `[C*kh*kw x H'*W']`, writing
/// `pad` outside the image. Row `r` starts at `cols[r * row_stride]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Copy>(
    input: &[T],
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    pad: T,
    row_stride: usize,
    cols: &mut [T],
) {
    let pix = oh * ow;
    for c in 0..g.in_channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * row_stride..row * row_stride + pix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(pad);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(ow, w, kx, g.padding);
                        line[..lo].fill(pad);
                        line[hi..].fill(pad);
                        if lo < hi {
                            let first = lo + kx - g.padding;
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            pad
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose stride-1 tap `kx` lands inside a row of width `w`.
#[inline]
fn valid_span(ow: usize, w: usize, kx: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(kx).min(ow);
    let hi = (w + padding).saturating_sub(kx).min(ow).max(lo);
    (lo, hi)
}

/// Scatters column gradients back onto a `[C x H x W]` image (adjoint of [`im2col`]).
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oh: usize,
    ow: usize,
    row_stride: usize,
    out: &mut [f64],
) {
    let pix = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * row_stride..row * row_stride + pix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(ow, w, kx, g.padding);
                        if lo < hi {
                            let first = lo + kx - g.padding;
                            for (d, v) in dst[first..first + hi - lo].iter_mut().zip(&line[lo..hi]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Splits an `[N,C,H,W]` or `[C,H,W]` shape into `(batched, n, c, h, w)`.
fn image_dims(shape: &[usize]) -> Result<(bool, usize, usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((true, *n, *c, *h, *w)),
        [c, h, w] => Ok((false, 1, *c, *h, *w)),
        s => Err(invalid(format!("expected NCHW or CHW input, got {s:?}"))),
    }
}

fn weight_geometry(shape: &[usize], in_channels: usize, stride: usize, padding: usize) -> Result<ConvGeometry> {
    match shape {
        [o, c, kh, kw] => {
            if *c != in_channels {
                return Err(invalid(format!(
                    "weights expect {c} input channels, input has {in_channels}"
                )));
            }
            Ok(ConvGeometry {
                in_channels: *c,
                out_channels: *o,
                kernel_h: *kh,
                kernel_w: *kw,
                stride,
                padding,
            })
        }
        s => Err(invalid(format!("expected OIHW weights, got {s:?}"))),
    }
}

/// Integer accumulators `[O x H'*W']` of one image of unsigned codes.
///
/// 1-bit signed weights go through the bit-serial popcount path, wider weights
/// through the integer code GEMM.
pub(crate) fn conv_codes_acc(
    image: &[i32],
    h: usize,
    w: usize,
    g: &ConvGeometry,
    weights: &ConvWeights,
    a_bits: u8,
) -> Result<(Vec<i64>, usize, usize)> {
    let (oh, ow) = g.output_hw(h, w)?;
    let pix = oh * ow;
    let k = g.patch_len();
    let mut cols = vec![0i32; k * pix];
    im2col(image, h, w, g, oh, ow, 0, oh * ow, &mut cols);
    let acc = match weights {
        ConvWeights::Codes { codes, bits } => {
            code_gemm_acc(codes, &cols, g.out_channels, k, pix, *bits, a_bits)
        }
        ConvWeights::Bits(rows) => {
            // Transpose to one row per output pixel, then split into planes.
            let planes: Vec<BitRows> = (0..a_bits)
                .map(|t| {
                    let bits = (0..pix)
                        .flat_map(|p| (0..k).map(move |r| (p, r)))
                        .map(|(p, r)| ((cols[r * pix + p] as u32) >> t) & 1);
                    let payload = pack_offsets(bits, pix * k, 1);
                    debug_assert_eq!(payload.len(), payload_bytes(pix * k, 1));
                    BitRows::from_payload(&payload, pix, k)
                })
                .collect();
            bitserial_acc(rows, &planes)
        }
    };
    Ok((acc, oh, ow))
}

/// Weight operand of a code convolution, prepared once per layer.
#[derive(Debug, Clone)]
pub(crate) enum ConvWeights {
    Codes { codes: Vec<i32>, bits: u8 },
    Bits(BitRows),
}

impl ConvWeights {
    pub fn prepare(w: &QuantizedTensor, rows: usize, cols: usize) -> Result<Self> {
        if !w.signedness().is_signed() {
            return Err(invalid("convolution weights must hold signed codes"));
        }
        if w.bits() == 1 {
            let flat = w.clone().reshape(vec![rows, cols])?;
            let packed = pack(&flat)?;
            Ok(ConvWeights::Bits(BitRows::from_payload(packed.payload(), rows, cols)))
        } else {
            Ok(ConvWeights::Codes {
                codes: w.codes().to_vec(),
                bits: w.bits(),
            })
        }
    }
}

/// Quantized 2-D convolution by im2col lowering onto the code kernels.
///
/// `input` holds unsigned activation codes (`[N,C,H,W]` or `[C,H,W]`), `weights`
/// signed codes `[O,C,kh,kw]`. Zero padding is code 0.
pub fn conv2d_quantized(
    input: &QuantizedTensor,
    weights: &QuantizedTensor,
    stride: usize,
    padding: usize,
) -> Result<RealTensor> {
    if input.signedness() != Signedness::Unit {
        return Err(invalid("convolution input must hold unsigned activation codes"));
    }
    if input.scales().len() != 1 {
        return Err(invalid("convolution input must carry a single scale"));
    }
    let (batched, n, c, h, w) = image_dims(input.shape())?;
    let g = weight_geometry(weights.shape(), c, stride, padding)?;
    let (oh, ow) = g.output_hw(h, w)?;
    let prepared = ConvWeights::prepare(weights, g.out_channels, g.patch_len())?;
    let fa = input.channel_factor(0);
    let img = c * h * w;
    let pix = oh * ow;
    let mut out = Vec::with_capacity(n * g.out_channels * pix);
    for s in 0..n {
        let (acc, _, _) = conv_codes_acc(
            &input.codes()[s * img..(s + 1) * img],
            h,
            w,
            &g,
            &prepared,
            input.bits(),
        )?;
        out.extend(
            acc.iter()
                .enumerate()
                .map(|(i, &v)| scale_accumulator(v, weights.channel_factor(i / pix), fa)),
        );
    }
    let shape = if batched {
        vec![n, g.out_channels, oh, ow]
    } else {
        vec![g.out_channels, oh, ow]
    };
    Ok(RealTensor::from_parts_unchecked(shape, out))
}

/// Real-valued convolution through im2col and [`gemm_reference`](super::gemm_reference).
pub fn conv2d_reference(
    input: &RealTensor,
    weights: &RealTensor,
    stride: usize,
    padding: usize,
) -> Result<RealTensor> {
    let (batched, n, c, h, w) = image_dims(input.shape())?;
    let g = weight_geometry(weights.shape(), c, stride, padding)?;
    let (oh, ow) = g.output_hw(h, w)?;
    let out = conv2d_real_raw(input.data(), n, h, w, &g, weights.data())?;
    let shape = if batched {
        vec![n, g.out_channels, oh, ow]
    } else {
        vec![g.out_channels, oh, ow]
    };
    Ok(RealTensor::from_parts_unchecked(shape, out))
}

pub(crate) fn conv2d_real_raw(
    input: &[f64],
    n: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    weights: &[f64],
) -> Result<Vec<f64>> {
    let (oh, ow) = g.output_hw(h, w)?;
    let pix = oh * ow;
    let k = g.patch_len();
    let img = g.in_channels * h * w;
    let mut cols = vec![0.0; k * pix];
    let mut out = vec![0.0; n * g.out_channels * pix];
    for s in 0..n {
        im2col(&input[s * img..(s + 1) * img], h, w, g, oh, ow, 0.0, pix, &mut cols);
        let dst = &mut out[s * g.out_channels * pix..(s + 1) * g.out_channels * pix];
        gemm_reference_into(weights, &cols, g.out_channels, k, pix, dst);
    }
    Ok(out)
}
