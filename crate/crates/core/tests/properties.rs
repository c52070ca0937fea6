//! Randomized checks of the library's invariants across module boundaries.

use embaug::augment::{apply_augmentation, AugSetup, AugmentationKind};
use embaug::config::{parse_entries, ExperimentConfig};
use embaug::data::{generate_synthetic, parse_cifar, write_cifar10, CifarLayout, Dataset, ImageSample, Split, SyntheticSpec};
use embaug::nn::{decode_checkpoint, encode_checkpoint, forward_classify, forward_embedding, Model, NetworkSpec};
use embaug::omega::{build_omega, extract_pairs, split_pairs, train_omega, OmegaConfig};
use embaug::optim::{Sgd, SgdConfig};
use embaug::transfer::{run_transfer, ScenarioKind, TrainConfig};
use embaug::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor<f32>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f32..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn image() -> impl Strategy<Value = Tensor<f32>> {
    (1usize..=3, 1usize..=9)
        .prop_flat_map(|(c, s)| prop::collection::vec(0.0f32..=1.0, c * s * s).prop_map(move |d| Tensor::new(vec![c, s, s], d).unwrap()))
}

fn tiny_task(seed: u64) -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        size: 8,
        ..SyntheticSpec::target_task(6, seed)
    };
    generate_synthetic(&spec).unwrap().split_per_class(4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mse_is_non_negative_and_zero_only_on_equality(
        (a, b) in (1usize..20).prop_flat_map(|n| (tensor(vec![n]), tensor(vec![n])))
    ) {
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf_ref(&a), tape.leaf_ref(&b));
        let l = tape.mse(av, bv).unwrap();
        let same = tape.mse(av, av).unwrap();
        let loss = tape.value(l).item().unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(tape.value(same).item().unwrap(), 0.0);
        prop_assert_eq!(loss == 0.0, a.data() == b.data());
    }

    #[test]
    fn replaying_a_tape_is_bitwise_identical(x in tensor(vec![2, 3, 6, 6]), seed in 0u64..1000) {
        let phi = Model::init(NetworkSpec::phi([3, 6, 6], &[2]).unwrap(), seed).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.leaf_ref(&x);
            let (z, vars) = phi.forward_on_tape(&mut tape, xv).unwrap();
            let t = tape.leaf(Tensor::zeros(tape.value(z).shape().to_vec()));
            let loss = tape.mse(z, t).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g: Vec<Tensor<f32>> = vars.0.iter().map(|&v| grads.get(v).unwrap().clone()).collect();
            (tape.value(loss).clone(), g)
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        prop_assert!(l1.bitwise_eq(&l2));
        prop_assert!(g1.iter().zip(&g2).all(|(a, b)| a.bitwise_eq(b)));
    }

    #[test]
    fn identity_is_a_bitwise_no_op_and_shapes_are_kept(x in image(), kind in prop::sample::select(AugmentationKind::all().to_vec())) {
        prop_assert!(apply_augmentation(&x, AugmentationKind::Identity).unwrap().bitwise_eq(&x));
        let y = apply_augmentation(&x, kind).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn omega_maps_embedding_dim_to_itself(d in 1usize..64, seed in 0u64..100) {
        let om = build_omega(d, seed).unwrap();
        prop_assert_eq!(om.spec.input_len(), d);
        prop_assert_eq!(om.spec.output_len().unwrap(), d);
        prop_assert_eq!(om.param("0.weight").unwrap().shape(), &[2 * d, d]);
    }

    #[test]
    fn composition_equals_the_fused_network(x in tensor(vec![3, 3, 8, 8]), seed in 0u64..1000) {
        let phi = Model::init(NetworkSpec::phi([3, 8, 8], &[2, 3]).unwrap(), seed).unwrap();
        let psi = Model::init(NetworkSpec::psi_transfer(12, 4).unwrap(), seed + 1).unwrap();
        let split = forward_classify(&psi, &forward_embedding(&phi, &x, None).unwrap(), None).unwrap();
        let fused = Model::compose(&[&phi, &psi]).unwrap().forward(&x).unwrap();
        prop_assert!(split.bitwise_eq(&fused));
    }

    #[test]
    fn checkpoints_round_trip_and_prefixes_are_refused(seed in 0u64..1000, cut in 0.0f64..1.0) {
        let m = Model::init(NetworkSpec::phi([3, 4, 4], &[2]).unwrap(), seed).unwrap().with_tag("none");
        let bytes = encode_checkpoint(&m).unwrap();
        prop_assert_eq!(&decode_checkpoint(&bytes).unwrap(), &m);
        let keep = (cut * bytes.len() as f64) as usize;
        prop_assert!(decode_checkpoint(&bytes[..keep]).is_err());
    }

    #[test]
    fn cifar_round_trip_keeps_labels_and_quantized_pixels(
        levels in prop::collection::vec((0u8..10, prop::collection::vec(any::<u8>(), 3 * 32 * 32)), 1..4)
    ) {
        let samples = levels
            .iter()
            .enumerate()
            .map(|(i, (label, px))| ImageSample {
                pixels: Tensor::new(vec![3, 32, 32], px.iter().map(|&b| b as f32 / 255.0).collect()).unwrap(),
                label: *label as usize,
                id: i as u64,
            })
            .collect();
        let d = Dataset::new(samples, Split::Train, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_cifar10(&d, &path).unwrap();
        let back = parse_cifar(&std::fs::read(&path).unwrap(), CifarLayout::Cifar10, None).unwrap();
        prop_assert_eq!(back.labels(), d.labels());
        prop_assert!(back.samples.iter().zip(&d.samples).all(|(a, b)| a.pixels.bitwise_eq(&b.pixels)));
    }

    #[test]
    fn config_parser_never_panics(text in "[ -~\n]{0,80}") {
        let _ = parse_entries(&text);
        let _ = ExperimentConfig::load(&text, &[], |_| None);
    }

    #[test]
    fn integer_keys_parse_back(seed in 0u64..i64::MAX as u64, epochs in 0usize..10_000) {
        let c = ExperimentConfig::load(&format!("seed = {seed}\n[transfer]\nepochs = {epochs}"), &[], |_| None).unwrap();
        prop_assert_eq!((c.seed, c.transfer.epochs), (seed, epochs));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sgd_decreases_a_convex_quadratic(x in tensor(vec![8, 3]), t in tensor(vec![8, 2]), seed in 0u64..100) {
        let mut psi = Model::init(NetworkSpec::psi_base(3, 2).unwrap(), seed).unwrap();
        let mut opt = Sgd::new(SgdConfig::new(0.05, 0.0).unwrap(), psi.param_shapes()).unwrap();
        let mut prev = f32::INFINITY;
        for _ in 0..200 {
            let (loss, grads, vars) = {
                let mut tape = Tape::new();
                let (xv, tv) = (tape.leaf_ref(&x), tape.leaf_ref(&t));
                let (y, vars) = psi.forward_on_tape(&mut tape, xv).unwrap();
                let loss = tape.mse(y, tv).unwrap();
                (tape.value(loss).item().unwrap(), tape.backward(loss).unwrap(), vars)
            };
            let norm: f32 = vars.0.iter().map(|&v| grads.get(v).unwrap().data().iter().map(|g| g * g).sum::<f32>()).sum();
            // below this the expected decrease lr*|g|^2 is lost to f32 rounding
            if 0.05 * norm < 1e-5 * loss {
                prop_assert!(loss <= prev * (1.0 + 1e-6), "loss {} after {}", loss, prev);
            } else {
                prop_assert!(loss < prev, "loss {} after {}", loss, prev);
            }
            prev = loss;
            psi.apply_gradients(&mut opt, &grads, &vars).unwrap();
        }
    }

    #[test]
    fn splits_are_disjoint_by_id(per_class in 1usize..12, train in 0usize..14, seed in 0u64..50) {
        let spec = SyntheticSpec { size: 8, ..SyntheticSpec::base_task(per_class, seed) };
        let (tr, ev) = generate_synthetic(&spec).unwrap().split_per_class(train);
        prop_assert!(tr.samples.iter().all(|a| ev.samples.iter().all(|b| a.id != b.id)));
        prop_assert_eq!(tr.len() + ev.len(), 3 * per_class);
        let (ptr, pev) = split_pairs(extract_pairs(
            &Model::init(NetworkSpec::phi([3, 8, 8], &[2]).unwrap(), seed).unwrap().frozen(),
            &tr,
            AugmentationKind::HFlip,
            None,
        ).unwrap());
        prop_assert!(ptr.iter().all(|a| pev.iter().all(|b| a.id != b.id)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn phi_is_bitwise_unchanged_by_every_scenario(seed in 0u64..100, which in 0usize..4) {
        let scenario = ScenarioKind::ALL[which];
        let (train, eval) = tiny_task(seed);
        let tag = if scenario.augmented_base() { AugSetup::HFlip } else { AugSetup::None };
        let phi = Model::init(NetworkSpec::phi([3, 8, 8], &[2]).unwrap(), seed).unwrap().frozen().with_tag(tag.name());
        let before = phi.clone();
        let om = build_omega(32, seed).unwrap().frozen().with_tag("hflip");
        let cfg = TrainConfig { epochs: 3, seed, ..TrainConfig::transfer_default() };
        run_transfer(scenario, AugSetup::HFlip, &phi, &[om], &train, &eval, &cfg).unwrap();
        prop_assert_eq!(&phi, &before);
        prop_assert!(phi.params().iter().zip(before.params()).all(|(a, b)| a.value.bitwise_eq(&b.value)));
    }
}

#[test]
fn synthetic_seeds_give_distinct_datasets() {
    let sets: Vec<Dataset> = (0..20)
        .map(|s| generate_synthetic(&SyntheticSpec { size: 8, ..SyntheticSpec::base_task(2, s) }).unwrap())
        .collect();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let differs = sets[i].samples.iter().zip(&sets[j].samples).any(|(a, b)| !a.pixels.bitwise_eq(&b.pixels));
            assert!(differs, "seeds {i} and {j}");
        }
    }
}

#[test]
fn pair_extraction_is_reproducible() {
    let (train, _) = tiny_task(3);
    let phi = Model::init(NetworkSpec::phi([3, 8, 8], &[2]).unwrap(), 5).unwrap().frozen();
    let a = extract_pairs(&phi, &train, AugmentationKind::VFlip, None).unwrap();
    let b = extract_pairs(&phi, &train, AugmentationKind::VFlip, None).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| p.input.bitwise_eq(&q.input) && p.target.bitwise_eq(&q.target) && p.id == q.id));
}

#[test]
fn smoothed_omega_loss_does_not_increase() {
    let (train, _) = tiny_task(4);
    let phi = Model::init(NetworkSpec::phi([3, 8, 8], &[2]).unwrap(), 6).unwrap().frozen();
    for kind in [AugmentationKind::HFlip, AugmentationKind::VFlip] {
        let (tr, ev) = split_pairs(extract_pairs(&phi, &train, kind, None).unwrap());
        let cfg = OmegaConfig { epochs: 40, seed: 1, ..OmegaConfig::default() };
        let state = train_omega(&tr, &ev, build_omega(32, 2).unwrap(), &cfg).unwrap();
        let smooth: Vec<f64> = state.train_loss.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
        assert!(smooth.windows(2).all(|w| w[1] <= w[0]), "{kind}: {smooth:?}");
    }
}
