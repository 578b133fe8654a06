mod common;

use common::nearest_level;
use proptest::prelude::*;
use qbit_core::bits::{pack, payload_bytes, to_bitplanes, unpack};
use qbit_core::quant::{
    binarize, clamp_ste_grad, levels, quantize_activations, quantize_unit, quantize_weights, QuantizedTensor,
    Signedness,
};
use qbit_core::tensor::RealTensor;

fn t(v: Vec<f64>) -> RealTensor {
    RealTensor::from_vec(v).unwrap()
}

fn unit_values(x: &[f64], k: u8) -> Vec<f64> {
    quantize_unit(&t(x.to_vec()), k).unwrap().reconstruct().into_data()
}

#[test]
fn idempotent_on_a_dense_grid() {
    let grid: Vec<f64> = (0..=20_000).map(|i| i as f64 / 20_000.0).collect();
    for k in 1..=8 {
        let once = quantize_unit(&t(grid.clone()), k).unwrap();
        let twice = quantize_unit(&once.reconstruct(), k).unwrap();
        assert_eq!(once, twice, "k = {k}");
    }
}

#[test]
fn matches_exhaustive_nearest_level() {
    let grid: Vec<f64> = (0..=4096).map(|i| i as f64 / 4096.0).collect();
    for k in 1..=8 {
        let q = unit_values(&grid, k);
        for (x, v) in grid.iter().zip(q) {
            assert!((v - nearest_level(*x, k)).abs() < 1e-15, "k={k} x={x}");
        }
    }
}

#[test]
fn binarize_zero_maps_to_plus_one() {
    let q = binarize(&t(vec![0.0, -0.0, -2.0, 3.0])).unwrap();
    assert_eq!(q.codes(), &[1, 1, -1, 1]);
    assert_eq!(q.scales(), &[1.25]);
}

proptest! {
    #[test]
    fn monotone_and_bounded(mut xs in prop::collection::vec(0.0f64..=1.0, 1..200), k in 1u8..=8) {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = unit_values(&xs, k);
        let bound = 0.5 / levels(k) as f64;
        for w in q.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        for (x, v) in xs.iter().zip(&q) {
            prop_assert!((v - x).abs() <= bound + 1e-15);
        }
    }

    #[test]
    fn activations_are_quantized_clamps(xs in prop::collection::vec(-2.0f64..3.0, 1..100), k in 1u8..=8) {
        let a = quantize_activations(&t(xs.clone()), k).unwrap().reconstruct();
        let clamped: Vec<f64> = xs.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        prop_assert_eq!(a.data(), &unit_values(&clamped, k)[..]);
    }

    #[test]
    fn weight_quantization_is_odd(
        rows in 1usize..5,
        cols in 1usize..20,
        seed in any::<u64>(),
        k in 1u8..=8,
    ) {
        use rand::Rng;
        let mut r = common::rng(seed);
        let w: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-3.0..3.0)).collect();
        let l = levels(k) as f64;
        // Skip draws that land within 1e-9 of a rounding tie.
        for row in w.chunks(cols) {
            let m = row.iter().map(|v| v.tanh().abs()).fold(0.0, f64::max);
            for v in row {
                let y = l * (v.tanh() / (2.0 * m) + 0.5);
                prop_assume!((y - y.floor() - 0.5).abs() > 1e-9);
            }
        }
        let pos = RealTensor::new(vec![rows, cols], w.clone()).unwrap();
        let neg = RealTensor::new(vec![rows, cols], w.iter().map(|v| -v).collect()).unwrap();
        let a = quantize_weights(&pos, k).unwrap().reconstruct();
        let b = quantize_weights(&neg, k).unwrap().reconstruct();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn binarize_preserves_l1(xs in prop::collection::vec(prop_oneof![-5.0f64..-1e-6, 1e-6f64..5.0], 1..100)) {
        let r = binarize(&t(xs.clone())).unwrap().reconstruct();
        let l1: f64 = xs.iter().map(|v| v.abs()).sum();
        let rl1: f64 = r.data().iter().map(|v| v.abs()).sum();
        prop_assert!((l1 - rl1).abs() <= 1e-12 * l1.max(1.0));
    }

    #[test]
    fn clamp_gradient_matches_finite_differences(
        s in prop::collection::vec(-1.0f64..2.0, 1..50),
    ) {
        let delta = 1e-3;
        prop_assume!(s.iter().all(|v| v.abs() > delta && (v - 1.0).abs() > delta));
        let g = clamp_ste_grad(&t(s.clone()), &t(vec![1.0; s.len()])).unwrap();
        let h = 1e-5;
        for (v, gi) in s.iter().zip(g.data()) {
            let fd = ((v + h).clamp(0.0, 1.0) - (v - h).clamp(0.0, 1.0)) / (2.0 * h);
            prop_assert!((fd - gi).abs() < 1e-6);
        }
    }

    #[test]
    fn pack_round_trip(len in 0usize..1000, k in 1u8..=8, seed in any::<u64>(), signed in any::<bool>()) {
        use rand::Rng;
        let mut r = common::rng(seed);
        let l = levels(k) as i32;
        let (sig, codes): (Signedness, Vec<i32>) = if k == 1 && signed {
            (Signedness::Binary, (0..len).map(|_| if r.gen() { 1 } else { -1 }).collect())
        } else if signed {
            (Signedness::SymmetricOdd, (0..len).map(|_| 2 * r.gen_range(0..=l) - l).collect())
        } else {
            (Signedness::Unit, (0..len).map(|_| r.gen_range(0..=l)).collect())
        };
        let q = QuantizedTensor::new(vec![len], codes, vec![0.5], k, sig).unwrap();
        let p = pack(&q).unwrap();
        prop_assert_eq!(p.payload().len(), payload_bytes(len, k));
        prop_assert_eq!(p.payload().len(), (len * k as usize).div_ceil(8));
        prop_assert_eq!(&unpack(&p).unwrap(), &q);
        if sig == Signedness::Unit {
            let planes = to_bitplanes(&q).unwrap();
            prop_assert_eq!(&planes.to_quantized().unwrap(), &q);
        }
    }
}

#[test]
fn level_count_over_uniform_samples() {
    use rand::Rng;
    let mut r = common::rng(17);
    let xs: Vec<f64> = (0..100_000).map(|_| r.gen_range(0.0..=1.0)).collect();
    for k in 1..=8u8 {
        let q = quantize_unit(&t(xs.clone()), k).unwrap();
        let mut seen = vec![false; 1 << k];
        for &c in q.codes() {
            seen[c as usize] = true;
        }
        assert!(seen.iter().all(|&s| s), "k = {k}");
    }
}
