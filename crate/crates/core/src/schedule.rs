//! Layer-wise bitwidth schedules, average-bitwidth arithmetic and memory
//! accounting.
//!
//! A schedule assigns one weight bitwidth to every weight group. Quantized
//! groups must step down front to back, each step keeping the bitwidth or
//! halving it. Averages count weight bits over quantized groups only and are
//! computed as exact integer ratios.
//!
//! Schedule strings list the quantized groups' bitwidths separated by `-`; an
//! optional `/` separates the convolutional groups from the fully-connected
//! ones, e.g. `8-4-2-1-1-1/1`.

use std::fmt::{self, Write as _};

use log::warn;

use crate::arch::{GroupKind, NetworkDef};
use crate::bits::payload_bytes;
use crate::error::{invalid, Result};
use crate::quant::FULL_PRECISION_BITS;

/// Weight bitwidths a schedule may use.
pub const SCHEDULE_LEVELS: [u8; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParamCount {
    pub name: String,
    pub count: u64,
}

impl LayerParamCount {
    pub fn new(name: impl Into<String>, count: u64) -> Result<Self> {
        if count == 0 {
            return Err(invalid("parameter count must be positive"));
        }
        Ok(Self {
            name: name.into(),
            count,
        })
    }
}

/// Parameter counts of every weight group of a network, in order.
pub fn layer_param_counts(arch: &NetworkDef) -> Vec<LayerParamCount> {
    arch.weight_groups()
        .into_iter()
        .map(|g| LayerParamCount {
            name: g.name,
            count: g.params,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub name: String,
    pub k_w: u8,
    pub k_a: u8,
    pub quantized: bool,
    pub fully_connected: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitwidthSchedule {
    pub entries: Vec<ScheduleEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Empty,
    /// `k_w` is not one of 1, 2, 4, 8.
    NotALevel { k: u8 },
    Increase { prev: u8, k: u8 },
    /// Decrease by more than a factor 2.
    StepTooLarge { prev: u8, k: u8 },
    /// `k_a` differs from the first quantized group's.
    MixedActivation { expected: u8, k_a: u8 },
}

/// A broken schedule rule at `index` (position in [`BitwidthSchedule::entries`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ViolationKind::Empty => write!(f, "schedule has no quantized layers"),
            ViolationKind::NotALevel { k } => {
                write!(f, "entry {}: {k} bits is not one of 1, 2, 4, 8", self.index)
            }
            ViolationKind::Increase { prev, k } => {
                write!(f, "entry {}: bitwidth increases from {prev} to {k}", self.index)
            }
            ViolationKind::StepTooLarge { prev, k } => write!(
                f,
                "entry {}: bitwidth drops from {prev} to {k}, more than a factor 2",
                self.index
            ),
            ViolationKind::MixedActivation { expected, k_a } => write!(
                f,
                "entry {}: activation bitwidth {k_a} differs from {expected}",
                self.index
            ),
        }
    }
}

/// Parsed schedule string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notation {
    pub conv: Vec<u8>,
    /// Present when the string had a `/` section.
    pub fc: Option<Vec<u8>>,
}

impl Notation {
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        let t = t
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .unwrap_or(t);
        let mut parts = t.split('/');
        let head = parts.next().unwrap_or("");
        let tail = parts.next();
        if parts.next().is_some() {
            return Err(invalid(format!("schedule `{s}` has more than one `/`")));
        }
        let list = |p: &str| -> Result<Vec<u8>> {
            p.split('-')
                .map(|v| {
                    v.trim()
                        .parse::<u8>()
                        .map_err(|_| invalid(format!("schedule `{s}`: `{}` is not a bitwidth", v.trim())))
                })
                .collect()
        };
        let conv = list(head)?;
        let fc = tail.map(list).transpose()?;
        Ok(Self { conv, fc })
    }

    pub fn values(&self) -> Vec<u8> {
        let mut v = self.conv.clone();
        if let Some(fc) = &self.fc {
            v.extend_from_slice(fc);
        }
        v
    }
}

impl fmt::Display for Notation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[u8]| v.iter().map(u8::to_string).collect::<Vec<_>>().join("-");
        write!(f, "{}", join(&self.conv))?;
        if let Some(fc) = &self.fc {
            write!(f, "/{}", join(fc))?;
        }
        Ok(())
    }
}

impl BitwidthSchedule {
    /// Schedule over plain names, all quantized, uniform `k_a`.
    pub fn from_bits(names: &[&str], k_w: &[u8], k_a: u8) -> Result<Self> {
        if names.len() != k_w.len() {
            return Err(invalid(format!(
                "{} names for {} bitwidths",
                names.len(),
                k_w.len()
            )));
        }
        Ok(Self {
            entries: names
                .iter()
                .zip(k_w)
                .map(|(n, &k)| ScheduleEntry {
                    name: n.to_string(),
                    k_w: k,
                    k_a,
                    quantized: true,
                    fully_connected: false,
                })
                .collect(),
        })
    }

    /// Maps a schedule string onto the quantized weight groups of `arch`.
    /// Unquantized groups get 32-bit entries flagged as such.
    pub fn from_notation(arch: &NetworkDef, notation: &Notation, k_a: u8) -> Result<Self> {
        let groups = arch.weight_groups();
        let quantized: Vec<_> = groups.iter().filter(|g| g.quantized).collect();
        let n_fc = quantized
            .iter()
            .filter(|g| g.kind == GroupKind::FullyConnected)
            .count();
        let values = notation.values();
        if values.len() != quantized.len() {
            return Err(invalid(format!(
                "schedule `{notation}` has {} entries, network `{}` has {} quantized weight groups",
                values.len(),
                arch.name,
                quantized.len()
            )));
        }
        if let Some(fc) = &notation.fc {
            let split_ok = fc.len() == n_fc
                && quantized[..notation.conv.len()]
                    .iter()
                    .all(|g| g.kind != GroupKind::FullyConnected);
            if !split_ok {
                return Err(invalid(format!(
                    "schedule `{notation}`: the `/` section must cover exactly the {n_fc} fully-connected groups"
                )));
            }
        }
        let mut next = values.into_iter();
        let entries = groups
            .iter()
            .map(|g| {
                let (k_w, ka) = if g.quantized {
                    (next.next().unwrap_or(FULL_PRECISION_BITS), k_a)
                } else {
                    (FULL_PRECISION_BITS, FULL_PRECISION_BITS)
                };
                ScheduleEntry {
                    name: g.name.clone(),
                    k_w,
                    k_a: ka,
                    quantized: g.quantized,
                    fully_connected: g.kind == GroupKind::FullyConnected,
                }
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn quantized(&self) -> impl Iterator<Item = &ScheduleEntry> {
        self.entries.iter().filter(|e| e.quantized)
    }

    pub fn weight_bits(&self, group: &str) -> Option<u8> {
        self.entries.iter().find(|e| e.name == group).map(|e| e.k_w)
    }

    /// Uniform activation bitwidth of the quantized entries.
    pub fn activation_bits(&self) -> Option<u8> {
        self.quantized().next().map(|e| e.k_a)
    }

    pub fn notation(&self) -> Notation {
        let conv = self
            .quantized()
            .filter(|e| !e.fully_connected)
            .map(|e| e.k_w)
            .collect();
        let fc: Vec<u8> = self
            .quantized()
            .filter(|e| e.fully_connected)
            .map(|e| e.k_w)
            .collect();
        Notation {
            conv,
            fc: (!fc.is_empty()).then_some(fc),
        }
    }
}

/// Every rule violation of `s`; an empty list means the schedule is valid.
pub fn validate_schedule(s: &BitwidthSchedule) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut prev: Option<u8> = None;
    let mut k_a0: Option<u8> = None;
    for (index, e) in s.entries.iter().enumerate() {
        if !e.quantized {
            continue;
        }
        match k_a0 {
            None => k_a0 = Some(e.k_a),
            Some(expected) if expected != e.k_a => out.push(Violation {
                index,
                kind: ViolationKind::MixedActivation { expected, k_a: e.k_a },
            }),
            _ => {}
        }
        let k = e.k_w;
        if !SCHEDULE_LEVELS.contains(&k) {
            out.push(Violation {
                index,
                kind: ViolationKind::NotALevel { k },
            });
            prev = Some(k);
            continue;
        }
        if let Some(p) = prev {
            if k > p {
                out.push(Violation {
                    index,
                    kind: ViolationKind::Increase { prev: p, k },
                });
            } else if k != p && k * 2 != p {
                out.push(Violation {
                    index,
                    kind: ViolationKind::StepTooLarge { prev: p, k },
                });
            }
        }
        prev = Some(k);
    }
    if k_a0.is_none() {
        out.push(Violation {
            index: 0,
            kind: ViolationKind::Empty,
        });
    }
    out
}

/// `Σ k_i n_i` and `Σ n_i` over the quantized entries.
pub fn weighted_bits(s: &BitwidthSchedule, counts: &[LayerParamCount]) -> Result<(u128, u128)> {
    for c in counts {
        if !s.entries.iter().any(|e| e.name == c.name) {
            return Err(invalid(format!("count for unknown layer `{}`", c.name)));
        }
    }
    let mut num = 0u128;
    let mut den = 0u128;
    for e in s.quantized() {
        let c = counts
            .iter()
            .find(|c| c.name == e.name)
            .ok_or_else(|| invalid(format!("no parameter count for layer `{}`", e.name)))?;
        num += u128::from(e.k_w) * u128::from(c.count);
        den += u128::from(c.count);
    }
    if den == 0 {
        return Err(invalid("schedule has no quantized layers"));
    }
    Ok((num, den))
}

/// Parameter-weighted mean weight bitwidth over quantized layers.
pub fn average_bitwidth(s: &BitwidthSchedule, counts: &[LayerParamCount]) -> Result<f64> {
    let (num, den) = weighted_bits(s, counts)?;
    Ok(num as f64 / den as f64)
}

/// `num / den` rounded half away from zero to hundredths, returned in hundredths.
pub fn round_hundredths(num: u128, den: u128) -> u128 {
    (200 * num + den) / (2 * den)
}

/// Formats a hundredths count as `x.yy`.
pub fn format_hundredths(h: u128) -> String {
    format!("{}.{:02}", h / 100, h % 100)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeRow {
    pub name: String,
    pub params: u64,
    pub k_w: u8,
    pub quantized: bool,
    pub bits: u128,
    /// Packed payload bytes at `k_w` (4 bytes per parameter when unquantized).
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub rows: Vec<SizeRow>,
    /// Bits of quantized parameters.
    pub quantized_bits: u128,
    pub quantized_params: u128,
    pub quantized_bytes: u64,
    pub average: f64,
    /// Average rounded to hundredths, as a count of hundredths.
    pub average_hundredths: u128,
    pub baseline_k: u8,
    pub baseline_bits: u128,
    /// `1 - average / baseline_k`.
    pub savings: f64,
    pub warnings: Vec<String>,
}

impl SizeReport {
    pub fn average_rounded(&self) -> f64 {
        self.average_hundredths as f64 / 100.0
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>5} {:>14} {:>12}",
            "layer", "params", "k_w", "bits", "bytes"
        );
        for r in &self.rows {
            let k = if r.quantized {
                r.k_w.to_string()
            } else {
                "fp".to_string()
            };
            let _ = writeln!(
                s,
                "{:<16} {:>12} {:>5} {:>14} {:>12}",
                r.name, r.params, k, r.bits, r.bytes
            );
        }
        let _ = writeln!(s, "quantized params     {}", self.quantized_params);
        let _ = writeln!(s, "quantized bits       {}", self.quantized_bits);
        let _ = writeln!(s, "quantized bytes      {}", self.quantized_bytes);
        let _ = writeln!(
            s,
            "average bitwidth     {} ({:.4})",
            format_hundredths(self.average_hundredths),
            self.average
        );
        let _ = writeln!(
            s,
            "baseline {}-bit bits  {}",
            self.baseline_k, self.baseline_bits
        );
        let _ = writeln!(s, "savings              {:.1}%", self.savings * 100.0);
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

pub fn size_report(s: &BitwidthSchedule, counts: &[LayerParamCount], baseline_k: u8) -> Result<SizeReport> {
    if baseline_k == 0 {
        return Err(invalid("baseline bitwidth must be positive"));
    }
    let (num, den) = weighted_bits(s, counts)?;
    let mut warnings = Vec::new();
    let max_k = s.quantized().map(|e| e.k_w).max().unwrap_or(0);
    if baseline_k < max_k {
        let msg = format!("baseline {baseline_k} bits is below the schedule's maximum of {max_k}");
        warn!("{msg}");
        warnings.push(msg);
    }
    let rows: Vec<SizeRow> = s
        .entries
        .iter()
        .filter_map(|e| {
            let c = counts.iter().find(|c| c.name == e.name)?;
            let k = if e.quantized { e.k_w } else { FULL_PRECISION_BITS };
            Some(SizeRow {
                name: e.name.clone(),
                params: c.count,
                k_w: k,
                quantized: e.quantized,
                bits: u128::from(k) * u128::from(c.count),
                bytes: if e.quantized && k <= 8 {
                    payload_bytes(c.count as usize, k) as u64
                } else {
                    c.count * 4
                },
            })
        })
        .collect();
    let quantized_bytes = rows.iter().filter(|r| r.quantized).map(|r| r.bytes).sum();
    let average = num as f64 / den as f64;
    Ok(SizeReport {
        rows,
        quantized_bits: num,
        quantized_params: den,
        quantized_bytes,
        average,
        average_hundredths: round_hundredths(num, den),
        baseline_k,
        baseline_bits: u128::from(baseline_k) * den,
        savings: 1.0 - average / f64::from(baseline_k),
        warnings,
    })
}

/// `k_start` on the first quantized group, halving per group down to `k_floor`.
pub fn plan_schedule(arch: &NetworkDef, k_start: u8, k_floor: u8, k_a: u8) -> Result<BitwidthSchedule> {
    for (what, k) in [("k_start", k_start), ("k_floor", k_floor)] {
        if !SCHEDULE_LEVELS.contains(&k) {
            return Err(invalid(format!("{what} must be 1, 2, 4 or 8, got {k}")));
        }
    }
    if k_start < k_floor {
        return Err(invalid(format!("k_start {k_start} is below k_floor {k_floor}")));
    }
    let groups = arch.weight_groups();
    if !groups.iter().any(|g| g.quantized) {
        return Err(invalid(format!("network `{}` has no quantizable layers", arch.name)));
    }
    let mut k = k_start;
    let mut first = true;
    let entries = groups
        .iter()
        .map(|g| {
            let (k_w, ka) = if g.quantized {
                if !first {
                    k = (k / 2).max(k_floor);
                }
                first = false;
                (k, k_a)
            } else {
                (FULL_PRECISION_BITS, FULL_PRECISION_BITS)
            };
            ScheduleEntry {
                name: g.name.clone(),
                k_w,
                k_a: ka,
                quantized: g.quantized,
                fully_connected: g.kind == GroupKind::FullyConnected,
            }
        })
        .collect();
    Ok(BitwidthSchedule { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(k: &[u8]) -> BitwidthSchedule {
        let names: Vec<String> = (0..k.len()).map(|i| format!("l{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        BitwidthSchedule::from_bits(&refs, k, 2).unwrap()
    }

    fn counts(n: &[u64]) -> Vec<LayerParamCount> {
        n.iter()
            .enumerate()
            .map(|(i, &c)| LayerParamCount::new(format!("l{i}"), c).unwrap())
            .collect()
    }

    #[test]
    fn validation_examples() {
        assert!(validate_schedule(&sched(&[8, 4, 2, 1, 1, 1])).is_empty());
        let v = validate_schedule(&sched(&[4, 8, 1]));
        assert_eq!(v[0].index, 1);
        assert!(matches!(v[0].kind, ViolationKind::Increase { prev: 4, k: 8 }));
        let v = validate_schedule(&sched(&[8, 3]));
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0].kind, ViolationKind::NotALevel { k: 3 }));
        assert!(matches!(
            validate_schedule(&sched(&[8, 2]))[0].kind,
            ViolationKind::StepTooLarge { .. }
        ));
        let mut mixed = sched(&[2, 2]);
        mixed.entries[1].k_a = 4;
        assert!(matches!(
            validate_schedule(&mixed)[0].kind,
            ViolationKind::MixedActivation { .. }
        ));
        assert!(matches!(
            validate_schedule(&BitwidthSchedule::default())[0].kind,
            ViolationKind::Empty
        ));
    }

    #[test]
    fn uniform_average_is_exact() {
        let c = counts(&[7, 1000, 3]);
        for k in SCHEDULE_LEVELS {
            assert_eq!(average_bitwidth(&sched(&[k, k, k]), &c).unwrap(), f64::from(k));
            let r = size_report(&sched(&[k, k, k]), &c, k).unwrap();
            assert_eq!(r.savings, 0.0);
        }
    }

    #[test]
    fn name_mismatch_is_rejected() {
        let mut c = counts(&[1, 2]);
        c[1].name = "other".into();
        assert!(average_bitwidth(&sched(&[2, 1]), &c).is_err());
        assert!(LayerParamCount::new("x", 0).is_err());
    }

    #[test]
    fn rounding_is_half_away() {
        assert_eq!(round_hundredths(1005, 1000), 101);
        assert_eq!(round_hundredths(1004, 1000), 100);
        assert_eq!(format_hundredths(106), "1.06");
        assert_eq!(format_hundredths(7), "0.07");
    }

    #[test]
    fn notation_round_trip() {
        let n = Notation::parse("(8-4-2-1-1-1/1)").unwrap();
        assert_eq!(n.conv, vec![8, 4, 2, 1, 1, 1]);
        assert_eq!(n.fc, Some(vec![1]));
        assert_eq!(n.to_string(), "8-4-2-1-1-1/1");
        assert_eq!(Notation::parse("4-2-1").unwrap().fc, None);
        assert!(Notation::parse("4-x").is_err());
        assert!(Notation::parse("4/2/1").is_err());
        assert!(Notation::parse("").is_err());
    }

    #[test]
    fn baseline_below_max_warns() {
        let r = size_report(&sched(&[8, 4]), &counts(&[10, 10]), 2).unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert!(r.savings < 0.0);
    }

    #[test]
    fn packed_bytes_round_up_per_layer() {
        let r = size_report(&sched(&[2, 1]), &counts(&[3, 9]), 2).unwrap();
        assert_eq!(r.rows[0].bytes, 1);
        assert_eq!(r.rows[1].bytes, 2);
        assert_eq!(r.quantized_bytes, 3);
    }
}
