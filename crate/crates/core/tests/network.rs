mod common;

use common::{mixed_net, random_inputs, rel_err, rng, ste_gradient_error};
use qbit_core::arch::NetworkDef;
use qbit_core::data::{Dataset, Normalization};
use qbit_core::model_file::{decode_checkpoint, decode_packed, encode_checkpoint, encode_packed};
use qbit_core::net::{
    deploy, evaluate, fold_scales, Gradients, Network, Optimizer, TrainConfig, WeightStore,
};
use qbit_core::schedule::{layer_param_counts, size_report, BitwidthSchedule, Notation};
use rand::Rng;

#[test]
fn ste_gradients_match_the_surrogate_network() {
    for seed in 0..3 {
        assert!(ste_gradient_error(None, None, seed) < 1e-4);
        for (k_w, k_a) in [(1, 2), (2, 2), (4, 3), (8, 8)] {
            let e = ste_gradient_error(Some(k_w), Some(k_a), seed);
            assert!(e < 1e-4, "k_w={k_w} k_a={k_a} seed={seed}: {e:e}");
        }
    }
}

#[test]
fn deployed_logits_match_training_path() {
    let net = mixed_net(7);
    let x = random_inputs(&net, 100, 8);
    let want = net.infer(&x, 100).unwrap();
    let folded = fold_scales(&net).unwrap().infer(&x, 100).unwrap();
    let packed = deploy(&net).unwrap().infer(&x, 100).unwrap();
    let c = net.classes();
    for s in 0..100 {
        let w = &want[s * c..(s + 1) * c];
        assert!(rel_err(&folded[s * c..(s + 1) * c], w) <= 1e-5, "sample {s}");
        assert!(rel_err(&packed[s * c..(s + 1) * c], w) <= 1e-5, "sample {s}");
    }
}

#[test]
fn decay_step_leaves_codes_alone() {
    let mut net = mixed_net(3);
    let before = deploy(&net).unwrap();
    let cfg = TrainConfig {
        momentum: 0.0,
        weight_decay: 0.5,
        ..TrainConfig::default()
    };
    let mut opt = Optimizer::new(&cfg, &net);
    let zero = Gradients {
        tensors: net.param_info().iter().map(|p| vec![0.0; p.len]).collect(),
    };
    opt.step(&mut net, &zero, 1e-6).unwrap();
    let after = deploy(&net).unwrap();
    for (a, b) in before.weighted_ops().iter().zip(after.weighted_ops()) {
        match (&a.weights, &b.weights) {
            (WeightStore::Packed(x), WeightStore::Packed(y)) => assert_eq!(x.payload(), y.payload(), "{}", a.name),
            (WeightStore::Real(x), WeightStore::Real(y)) => assert_ne!(x, y),
            _ => panic!("storage changed for {}", a.name),
        }
    }
    let params = net.params();
    let info = net.param_info();
    for (p, i) in params.iter().zip(&info) {
        if !i.decay {
            assert!(i.name.ends_with("bias") || i.name.ends_with("gamma") || i.name.ends_with("beta"));
        }
        assert!(p.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn vgg7_packed_bytes_match_size_report() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/vgg7.arch")).unwrap();
    let def = NetworkDef::from_text(&text).unwrap();
    let s = BitwidthSchedule::from_notation(&def, &Notation::parse("8-4-2-1-1-1/1").unwrap(), 2).unwrap();
    let report = size_report(&s, &layer_param_counts(&def), 2).unwrap();
    let net = Network::with_schedule(def, &s, 1).unwrap();
    assert_eq!(deploy(&net).unwrap().packed_weight_bytes(), report.quantized_bytes);
}

#[test]
fn saved_models_evaluate_identically() {
    let net = mixed_net(11);
    let mut r = rng(12);
    let n = 64;
    let images: Vec<u8> = (0..n * net.input_len()).map(|_| r.gen()).collect();
    let labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..4)).collect();
    let ds = Dataset::new([3, 10, 10], 4, images, labels).unwrap();
    let norm = Normalization::new(vec![0.5; 3], vec![0.25; 3]).unwrap();

    let packed = deploy(&net).unwrap();
    let (loaded, norm2) = decode_packed(&encode_packed(&packed, &norm).unwrap()).unwrap();
    assert_eq!(norm2, norm);
    let x = random_inputs(&net, 8, 13);
    assert_eq!(packed.infer(&x, 8).unwrap(), loaded.infer(&x, 8).unwrap());
    assert_eq!(evaluate(&packed, &ds, &norm, 16).unwrap(), evaluate(&loaded, &ds, &norm2, 16).unwrap());

    let (restored, _) = decode_checkpoint(&encode_checkpoint(&net, &norm)).unwrap();
    assert_eq!(net.infer(&x, 8).unwrap(), restored.infer(&x, 8).unwrap());
    assert_eq!(deploy(&restored).unwrap(), packed);
}
