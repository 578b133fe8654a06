use std::path::PathBuf;

use proptest::prelude::*;
use qbit_core::arch::NetworkDef;
use qbit_core::schedule::{
    average_bitwidth, format_hundredths, layer_param_counts, plan_schedule, size_report, validate_schedule,
    BitwidthSchedule, LayerParamCount, Notation,
};

fn preset(name: &str) -> NetworkDef {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    NetworkDef::from_text(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn quantized_counts(net: &NetworkDef) -> Vec<u64> {
    net.weight_groups().iter().filter(|g| g.quantized).map(|g| g.params).collect()
}

#[test]
fn preset_parameter_counts() {
    let vgg = preset("vgg7.arch");
    assert_eq!(
        quantized_counts(&vgg),
        vec![3456, 147456, 294912, 589824, 1179648, 2359296, 8388608]
    );
    let r20 = preset("resnet20.arch");
    assert_eq!(quantized_counts(&r20), vec![13824, 51200, 204800]);
    assert_eq!(r20.weight_groups()[0].params, 432);
    let r18 = preset("resnet18.arch");
    assert_eq!(quantized_counts(&r18), vec![147456, 524288, 2097152, 8388608]);
    assert_eq!(r18.weight_groups()[0].params, 1728);
    let alex = preset("alexnet.arch");
    assert_eq!(
        quantized_counts(&alex),
        vec![307200, 884736, 663552, 442368, 37748736, 16777216]
    );
    assert_eq!(alex.weight_groups()[0].params, 41472);
}

#[test]
fn preset_averages() {
    let cases = [
        ("vgg7.arch", "8-4-2-1-1-1/1", "1.06"),
        ("resnet20.arch", "4-2-1", "1.34"),
        ("resnet20.arch", "8-4-2", "2.69"),
        ("alexnet.arch", "8-4-2-1/1-1", "1.10"),
        ("resnet18.arch", "8-4-2-1", "1.42"),
    ];
    for (file, s, expected) in cases {
        let net = preset(file);
        let sched = BitwidthSchedule::from_notation(&net, &Notation::parse(s).unwrap(), 2).unwrap();
        assert!(validate_schedule(&sched).is_empty(), "{file} {s}");
        let r = size_report(&sched, &layer_param_counts(&net), 2).unwrap();
        assert_eq!(format_hundredths(r.average_hundredths), expected, "{file} {s}");
        assert_eq!(sched.notation().to_string(), s);
    }
}

#[test]
fn plan_matches_preset_strings() {
    let vgg = preset("vgg7.arch");
    let plan = plan_schedule(&vgg, 8, 1, 2).unwrap();
    assert_eq!(plan.notation().to_string(), "8-4-2-1-1-1/1");
    assert!(!plan.entries.last().unwrap().quantized);
    let r20 = preset("resnet20.arch");
    assert_eq!(plan_schedule(&r20, 4, 1, 2).unwrap().notation().to_string(), "4-2-1");
    assert_eq!(plan_schedule(&r20, 2, 2, 2).unwrap().notation().to_string(), "2-2-2");
    assert!(plan_schedule(&r20, 1, 2, 2).is_err());
    assert!(plan_schedule(&r20, 3, 1, 2).is_err());
}

#[test]
fn schedule_string_must_fit_network() {
    let vgg = preset("vgg7.arch");
    assert!(BitwidthSchedule::from_notation(&vgg, &Notation::parse("8-4-2").unwrap(), 2).is_err());
    assert!(BitwidthSchedule::from_notation(&vgg, &Notation::parse("8-4-2-1-1/1-1").unwrap(), 2).is_err());
    assert!(BitwidthSchedule::from_notation(&vgg, &Notation::parse("8-4-2-1-1-1-1").unwrap(), 2).is_ok());
}

proptest! {
    #[test]
    fn plan_always_valid(k_start in 0usize..4, drop in 0usize..4, layers in 1usize..9) {
        let k_floor = [1u8, 2, 4, 8][k_start.saturating_sub(drop)];
        let k_start = [1u8, 2, 4, 8][k_start];
        let mut text = String::from("[network]\ninput = 1x4x4\nclasses = 2\n[layers]\n");
        for i in 0..layers {
            text.push_str(&format!("c{i} = conv 2 k=3 p=1\n"));
        }
        text.push_str("fc = linear 2\n");
        let net = NetworkDef::from_text(&text).unwrap();
        let plan = plan_schedule(&net, k_start, k_floor, 2).unwrap();
        prop_assert!(validate_schedule(&plan).is_empty());
        prop_assert_eq!(plan.quantized().next().unwrap().k_w, k_start);
        prop_assert_eq!(plan.quantized().last().unwrap().k_w.max(k_floor), plan.quantized().last().unwrap().k_w);
    }

    #[test]
    fn average_invariant_under_layer_split(
        ks in proptest::collection::vec(0usize..4, 1..8),
        ns in proptest::collection::vec(2u64..1_000_000, 8),
        split_at in 0usize..8,
        frac in 1u64..1000,
    ) {
        let k: Vec<u8> = ks.iter().map(|&i| [1u8, 2, 4, 8][i]).collect();
        let names: Vec<String> = (0..k.len()).map(|i| format!("l{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let sched = BitwidthSchedule::from_bits(&refs, &k, 2).unwrap();
        let counts: Vec<LayerParamCount> =
            (0..k.len()).map(|i| LayerParamCount::new(names[i].clone(), ns[i]).unwrap()).collect();
        let base = average_bitwidth(&sched, &counts).unwrap();
        prop_assert!(base >= f64::from(*k.iter().min().unwrap()) && base <= f64::from(*k.iter().max().unwrap()));

        let s = split_at % k.len();
        let n_a = (ns[s] * frac / 1000).clamp(1, ns[s] - 1);
        let mut names2 = Vec::new();
        let mut k2 = Vec::new();
        let mut counts2 = Vec::new();
        for i in 0..k.len() {
            if i == s {
                for (suffix, n) in [("a", n_a), ("b", ns[s] - n_a)] {
                    names2.push(format!("l{i}{suffix}"));
                    k2.push(k[i]);
                    counts2.push(LayerParamCount::new(format!("l{i}{suffix}"), n).unwrap());
                }
            } else {
                names2.push(names[i].clone());
                k2.push(k[i]);
                counts2.push(counts[i].clone());
            }
        }
        let refs2: Vec<&str> = names2.iter().map(String::as_str).collect();
        let sched2 = BitwidthSchedule::from_bits(&refs2, &k2, 2).unwrap();
        prop_assert_eq!(average_bitwidth(&sched2, &counts2).unwrap(), base);
    }
}
