//! Browser bindings for a few qbit-core operations.
//!
//! Every export returns plain strings or numbers so the page needs no glue
//! beyond what `wasm-bindgen` generates.

use std::fmt::Write;

use qbit_core::arch::NetworkDef;
use qbit_core::bits::pack;
use qbit_core::kernels::{gemm_reference, gemm_xnor};
use qbit_core::quant::{binarize, quantize_activations, quantize_weights};
use qbit_core::schedule::{layer_param_counts, plan_schedule, size_report, BitwidthSchedule, Notation};
use qbit_core::tensor::RealTensor;
use wasm_bindgen::prelude::*;

const PRESETS: [(&str, &str); 5] = [
    ("vgg7", include_str!("../../../configs/vgg7.arch")),
    ("resnet20", include_str!("../../../configs/resnet20.arch")),
    ("resnet18", include_str!("../../../configs/resnet18.arch")),
    ("alexnet", include_str!("../../../configs/alexnet.arch")),
    ("mnist_cnn", include_str!("../../../configs/mnist_cnn.arch")),
];

fn preset(name: &str) -> Result<NetworkDef, String> {
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| format!("unknown architecture {name:?}"))?;
    NetworkDef::from_text(text).map_err(|e| e.to_string())
}

/// Names of the bundled architectures, comma separated.
#[wasm_bindgen]
pub fn architectures() -> String {
    PRESETS.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(",")
}

/// Samples a quantizer transfer curve as interleaved `x, y` pairs.
///
/// `role` is `activation` (input range [-0.5, 1.5]) or `weight`
/// (input range [-3, 3], one channel, so the max is taken over the range).
#[wasm_bindgen]
pub fn quantizer_curve(role: &str, bits: u8, samples: usize) -> Result<Vec<f64>, String> {
    let samples = samples.clamp(2, 4096);
    let (lo, hi) = match role {
        "activation" => (-0.5, 1.5),
        "weight" => (-3.0, 3.0),
        _ => return Err(format!("unknown role {role:?}")),
    };
    let xs: Vec<f64> = (0..samples)
        .map(|i| lo + (hi - lo) * i as f64 / (samples - 1) as f64)
        .collect();
    let x = RealTensor::new(vec![1, samples], xs.clone()).map_err(|e| e.to_string())?;
    let q = match (role, bits) {
        ("activation", _) => quantize_activations(&x, bits),
        (_, 1) => binarize(&x),
        _ => quantize_weights(&x, bits),
    }
    .map_err(|e| e.to_string())?;
    let ys = q.reconstruct().into_data();
    Ok(xs.into_iter().zip(ys).flat_map(|(x, y)| [x, y]).collect())
}

/// Size report table for a bundled architecture.
///
/// An empty `notation` plans the schedule from `k_start` down to 1 bit.
#[wasm_bindgen]
pub fn size_table(arch: &str, notation: &str, k_start: u8, baseline: u8, k_a: u8) -> Result<String, String> {
    let def = preset(arch)?;
    let sched = if notation.trim().is_empty() {
        plan_schedule(&def, k_start, 1, k_a)
    } else {
        let n = Notation::parse(notation.trim()).map_err(|e| e.to_string())?;
        BitwidthSchedule::from_notation(&def, &n, k_a)
    }
    .map_err(|e| e.to_string())?;
    let r = size_report(&sched, &layer_param_counts(&def), baseline).map_err(|e| e.to_string())?;
    Ok(format!("schedule {}\n\n{}", sched.notation(), r.to_table()))
}

fn parse_values(s: &str) -> Result<Vec<f64>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect()
}

fn bit_string(payload: &[u8], n: usize) -> String {
    (0..n)
        .map(|i| if payload[i / 8] >> (i % 8) & 1 == 1 { '1' } else { '0' })
        .collect()
}

/// Binarizes two vectors, packs them and walks through the XNOR-popcount dot.
#[wasm_bindgen]
pub fn xnor_dot(w: &str, a: &str) -> Result<String, String> {
    let (w, a) = (parse_values(w)?, parse_values(a)?);
    if w.is_empty() || w.len() != a.len() {
        return Err(format!("need two non-empty vectors of equal length, got {} and {}", w.len(), a.len()));
    }
    let n = w.len();
    let row = |v: Vec<f64>| RealTensor::new(vec![1, n], v).map_err(|e| e.to_string());
    let (qw, qa) = (
        binarize(&row(w)?).map_err(|e| e.to_string())?,
        binarize(&row(a)?).map_err(|e| e.to_string())?,
    );
    let (pw, pa) = (pack(&qw).map_err(|e| e.to_string())?, pack(&qa).map_err(|e| e.to_string())?);
    let (bw, ba) = (bit_string(pw.payload(), n), bit_string(pa.payload(), n));
    let xnor: String = bw.chars().zip(ba.chars()).map(|(x, y)| if x == y { '1' } else { '0' }).collect();
    let pop = xnor.chars().filter(|&c| c == '1').count();
    let fast = gemm_xnor(&pw, &pa).map_err(|e| e.to_string())?.data()[0];
    let column = RealTensor::new(vec![n, 1], qa.reconstruct().into_data()).map_err(|e| e.to_string())?;
    let slow = gemm_reference(&qw.reconstruct(), &column).map_err(|e| e.to_string())?.data()[0];
    let mut s = String::new();
    let _ = writeln!(s, "w bits      {bw}   alpha_w {:.6}", qw.scales()[0]);
    let _ = writeln!(s, "a bits      {ba}   alpha_a {:.6}", qa.scales()[0]);
    let _ = writeln!(s, "xnor        {xnor}");
    let _ = writeln!(s, "popcount    {pop}");
    let _ = writeln!(s, "2*pop - n   {}", 2 * pop as i64 - n as i64);
    let _ = writeln!(s, "scaled      {fast:.6}");
    let _ = writeln!(s, "reference   {slow:.6}");
    Ok(s)
}
