//! Binary model files.
//!
//! Packed models (`QBM1`) hold the deployed ops; checkpoints (`QBC1`) hold the
//! real-valued master parameters. Both start with the magic, the topology text
//! and the input normalization. Integers and floats are little-endian and every
//! variable-length field is preceded by its length.
//!
//! ```text
//! magic[4] | u32 len, topology utf-8 | u32 C, f64 mean[C], f64 std[C]
//!   | u32 L, (u8 k_w, u8 k_a)[L] | body
//! ```

use std::path::Path;

use crate::arch::NetworkDef;
use crate::bits::PackedTensor;
use crate::data::Normalization;
use crate::error::{QbitError, Result};
use crate::kernels::ConvGeometry;
use crate::net::{InputMode, Network, Op, PackedModel, PoolSpec, WeightStore, WeightedOp};
use crate::quant::{Signedness, FULL_PRECISION_BITS};

pub const PACKED_MAGIC: &[u8; 4] = b"QBM1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QBC1";

const OP_WEIGHTED: u8 = 1;
const OP_QUANT_ACT: u8 = 2;
const OP_CLAMP: u8 = 3;
const OP_POOL: u8 = 4;
const OP_RESIDUAL: u8 = 5;

const STORE_REAL: u8 = 0;
const STORE_PACKED: u8 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("field exceeds u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len());
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len());
        self.buf.extend_from_slice(v);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl std::fmt::Display) -> QbitError {
        QbitError::Format(format!("at byte {}: {msg}", self.pos))
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated, need {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| self.err("length overflow"))
    }
    fn len_of(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()?;
        if n.checked_mul(elem).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(self.err(format!("length {n} runs past the end of the file")));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_of(8)?;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len_of(1)?;
        Ok(self.take(n)?.to_vec())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }
}

fn write_header(w: &mut Writer, magic: &[u8; 4], def: &NetworkDef, norm: &Normalization) {
    w.buf.extend_from_slice(magic);
    w.str(&def.to_text());
    w.u32(norm.mean.len());
    for v in norm.mean.iter().chain(&norm.std) {
        w.buf.extend_from_slice(&v.to_le_bytes());
    }
    let bits = def.layer_bits();
    w.u32(bits.len());
    for (wb, ab) in bits {
        w.u8(wb);
        w.u8(ab);
    }
}

fn read_header(r: &mut Reader, magic: &[u8; 4]) -> Result<(NetworkDef, Normalization)> {
    let m = r.take(4)?;
    if m != magic {
        return Err(QbitError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(magic)
        )));
    }
    let text = r.str()?;
    let mut def = NetworkDef::from_text(&text).map_err(|e| r.err(format!("topology: {e}")))?;
    let c = r.u32()?;
    if c == 0 || c > 4096 {
        return Err(r.err(format!("implausible channel count {c}")));
    }
    let raw = r.take(16 * c)?;
    let vals: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let norm = Normalization::new(vals[..c].to_vec(), vals[c..].to_vec()).map_err(|e| r.err(e))?;
    let n = r.u32()?;
    let mut bits = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        bits.push((r.u8()?, r.u8()?));
    }
    def.apply_layer_bits(&bits).map_err(|e| r.err(e))?;
    Ok((def, norm))
}

fn write_ops(w: &mut Writer, ops: &[Op]) {
    w.u32(ops.len());
    for op in ops {
        match op {
            Op::Weighted(o) => {
                w.u8(OP_WEIGHTED);
                w.str(&o.name);
                match &o.conv {
                    None => w.u8(0),
                    Some((g, h, wd)) => {
                        w.u8(1);
                        for v in [g.in_channels, g.out_channels, g.kernel_h, g.kernel_w, g.stride, g.padding, *h, *wd] {
                            w.u32(v);
                        }
                    }
                }
                w.u32(o.out);
                w.u32(o.fan_in);
                w.u8(match o.input {
                    InputMode::Real => FULL_PRECISION_BITS,
                    InputMode::Codes { bits } => bits,
                });
                match &o.weights {
                    WeightStore::Real(v) => {
                        w.u8(STORE_REAL);
                        w.f64s(v);
                    }
                    WeightStore::Packed(p) => {
                        w.u8(STORE_PACKED);
                        w.u8(p.bits());
                        w.u8(p.signedness().tag());
                        w.u32(p.shape().len());
                        for &d in p.shape() {
                            w.u64(d);
                        }
                        w.f64s(p.scales());
                        w.bytes(p.payload());
                    }
                    WeightStore::Codes(_) => unreachable!("codes are packed before saving"),
                }
                w.f64s(&o.mult);
                w.f64s(&o.bias);
                w.u8(u8::from(o.bn_folded));
            }
            Op::QuantAct { name, bits } => {
                w.u8(OP_QUANT_ACT);
                w.str(name);
                w.u8(*bits);
            }
            Op::Clamp { name } => {
                w.u8(OP_CLAMP);
                w.str(name);
            }
            Op::Pool { name, spec } => {
                w.u8(OP_POOL);
                w.str(name);
                w.u8(u8::from(spec.max));
                for v in [spec.c, spec.h, spec.w, spec.kernel, spec.stride, spec.padding, spec.oh, spec.ow] {
                    w.u32(v);
                }
            }
            Op::Residual { name, body, shortcut } => {
                w.u8(OP_RESIDUAL);
                w.str(name);
                write_ops(w, body);
                write_ops(w, shortcut);
            }
        }
    }
}

fn read_ops(r: &mut Reader, depth: usize) -> Result<Vec<Op>> {
    if depth > 16 {
        return Err(r.err("residual nesting too deep"));
    }
    let n = r.u32()?;
    let mut ops = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let at = r.pos;
        let tag = r.u8()?;
        let name = r.str()?;
        let op = match tag {
            OP_WEIGHTED => {
                let conv = match r.u8()? {
                    0 => None,
                    1 => {
                        let mut v = [0usize; 8];
                        for x in &mut v {
                            *x = r.u32()?;
                        }
                        let g = ConvGeometry {
                            in_channels: v[0],
                            out_channels: v[1],
                            kernel_h: v[2],
                            kernel_w: v[3],
                            stride: v[4],
                            padding: v[5],
                        };
                        Some((g, v[6], v[7]))
                    }
                    k => return Err(r.err(format!("unknown layer kind {k}"))),
                };
                let out = r.u32()?;
                let fan_in = r.u32()?;
                let input = match r.u8()? {
                    FULL_PRECISION_BITS => InputMode::Real,
                    b @ 1..=8 => InputMode::Codes { bits: b },
                    b => return Err(r.err(format!("bad activation bitwidth {b}"))),
                };
                let weights = match r.u8()? {
                    STORE_REAL => WeightStore::Real(r.f64s()?),
                    STORE_PACKED => {
                        let bits = r.u8()?;
                        let sign = Signedness::from_tag(r.u8()?).map_err(|e| r.err(e))?;
                        let nd = r.u32()?;
                        if nd > 8 {
                            return Err(r.err(format!("{nd} dimensions")));
                        }
                        let mut shape = Vec::with_capacity(nd);
                        for _ in 0..nd {
                            shape.push(r.u64()?);
                        }
                        let scales = r.f64s()?;
                        let payload = r.bytes()?;
                        WeightStore::Packed(PackedTensor::from_raw(shape, bits, sign, scales, payload)?)
                    }
                    s => return Err(r.err(format!("unknown weight store {s}"))),
                };
                let mult = r.f64s()?;
                let bias = r.f64s()?;
                let bn = r.u8()? != 0;
                let op = WeightedOp::new(name, conv, out, fan_in, input, weights, mult, bias, bn)
                    .map_err(|e| QbitError::Format(format!("op at byte {at}: {e}")))?;
                Op::Weighted(op)
            }
            OP_QUANT_ACT => {
                let bits = r.u8()?;
                if !(1..=8).contains(&bits) {
                    return Err(r.err(format!("bad activation bitwidth {bits}")));
                }
                Op::QuantAct { name, bits }
            }
            OP_CLAMP => Op::Clamp { name },
            OP_POOL => {
                let max = r.u8()? != 0;
                let mut v = [0usize; 8];
                for x in &mut v {
                    *x = r.u32()?;
                }
                if v[3] == 0 || v[4] == 0 {
                    return Err(r.err("pool kernel and stride must be positive"));
                }
                let spec = PoolSpec {
                    max,
                    c: v[0],
                    h: v[1],
                    w: v[2],
                    kernel: v[3],
                    stride: v[4],
                    padding: v[5],
                    oh: v[6],
                    ow: v[7],
                };
                Op::Pool { name, spec }
            }
            OP_RESIDUAL => {
                let body = read_ops(r, depth + 1)?;
                let shortcut = read_ops(r, depth + 1)?;
                Op::Residual { name, body, shortcut }
            }
            t => return Err(QbitError::Format(format!("unknown op tag {t} at byte {at}"))),
        };
        ops.push(op);
    }
    Ok(ops)
}

/// Serializes a packed model. Unpacked code stores are packed on the way out.
pub fn encode_packed(model: &PackedModel, norm: &Normalization) -> Result<Vec<u8>> {
    let mut model = model.clone();
    repack(&mut model.ops)?;
    let mut w = Writer::default();
    write_header(&mut w, PACKED_MAGIC, &model.def, norm);
    write_ops(&mut w, &model.ops);
    Ok(w.buf)
}

fn repack(ops: &mut [Op]) -> Result<()> {
    for op in ops {
        match op {
            Op::Weighted(o) => {
                if let WeightStore::Codes(q) = &o.weights {
                    *o = WeightedOp::new(
                        o.name.clone(),
                        o.conv,
                        o.out,
                        o.fan_in,
                        o.input,
                        WeightStore::Packed(crate::bits::pack(q)?),
                        o.mult.clone(),
                        o.bias.clone(),
                        o.bn_folded,
                    )?;
                }
            }
            Op::Residual { body, shortcut, .. } => {
                repack(body)?;
                repack(shortcut)?;
            }
            _ => {}
        }
    }
    Ok(())
}

pub fn decode_packed(bytes: &[u8]) -> Result<(PackedModel, Normalization)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let (def, norm) = read_header(&mut r, PACKED_MAGIC)?;
    let ops = read_ops(&mut r, 0)?;
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok((PackedModel { def, ops }, norm))
}

pub fn encode_checkpoint(net: &Network, norm: &Normalization) -> Vec<u8> {
    let mut w = Writer::default();
    write_header(&mut w, CHECKPOINT_MAGIC, net.def(), norm);
    let params = net.params();
    w.u32(params.len());
    for p in params {
        w.f64s(p);
    }
    let buffers = net.buffers();
    w.u32(buffers.len());
    for b in buffers {
        w.f64s(b);
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, Normalization)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let (def, norm) = read_header(&mut r, CHECKPOINT_MAGIC)?;
    let mut net = Network::new(def, 0).map_err(|e| r.err(e))?;
    let read_list = |r: &mut Reader| -> Result<Vec<Vec<f64>>> {
        let n = r.u32()?;
        (0..n).map(|_| r.f64s()).collect()
    };
    let params = read_list(&mut r)?;
    let buffers = read_list(&mut r)?;
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    net.load_state(params, buffers).map_err(|e| QbitError::Format(e.to_string()))?;
    Ok((net, norm))
}

/// Either kind of model file.
#[derive(Debug, Clone)]
pub enum SavedModel {
    Packed(PackedModel),
    Checkpoint(Network),
}

pub fn load(path: &Path) -> Result<(SavedModel, Normalization)> {
    let bytes = std::fs::read(path)?;
    match bytes.get(..4) {
        Some(m) if m == PACKED_MAGIC => decode_packed(&bytes).map(|(m, n)| (SavedModel::Packed(m), n)),
        Some(m) if m == CHECKPOINT_MAGIC => decode_checkpoint(&bytes).map(|(m, n)| (SavedModel::Checkpoint(m), n)),
        _ => Err(QbitError::Format(format!("{} is not a model file", path.display()))),
    }
}

pub fn save_packed(path: &Path, model: &PackedModel, norm: &Normalization) -> Result<()> {
    std::fs::write(path, encode_packed(model, norm)?)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, net: &Network, norm: &Normalization) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net, norm))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::deploy;

    fn net() -> Network {
        let def = NetworkDef::from_text(
            "[network]\ninput = 2x6x6\nclasses = 3\n[layers]\nc1 = conv 4 k=3 p=1\nb1 = bn\na1 = clamp\n\
             p1 = maxpool 2\nr1 = residual 6 s=2\na2 = clamp\ng = avgpool global\nfc = linear 3 bias\n",
        )
        .unwrap();
        let mut def = def;
        def.set_bitwidths(&|g| Some(if g == "c1" { 2 } else { 1 }), 3).unwrap();
        Network::new(def, 11).unwrap()
    }

    #[test]
    fn packed_round_trip() {
        let n = net();
        let model = deploy(&n).unwrap();
        let norm = Normalization::new(vec![0.5, 0.25], vec![0.2, 0.3]).unwrap();
        let bytes = encode_packed(&model, &norm).unwrap();
        assert_eq!(&bytes[..4], PACKED_MAGIC);
        let (back, norm2) = decode_packed(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(norm2, norm);
    }

    #[test]
    fn checkpoint_round_trip() {
        let n = net();
        let norm = Normalization::identity(2);
        let (back, _) = decode_checkpoint(&encode_checkpoint(&n, &norm)).unwrap();
        assert_eq!(back.params(), n.params());
        assert_eq!(back.buffers(), n.buffers());
        assert_eq!(back.def(), n.def());
    }

    #[test]
    fn corrupted_files_are_format_errors() {
        let bytes = encode_packed(&deploy(&net()).unwrap(), &Normalization::identity(2)).unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_packed(&bytes[..cut]), Err(QbitError::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_packed(&bad), Err(QbitError::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_packed(&long), Err(QbitError::Format(_))));
    }
}
