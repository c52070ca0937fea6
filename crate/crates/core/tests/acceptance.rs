//! Acceptance criteria 1 to 9. Each test prints one `criterion N: PASS|FAIL`
//! line before asserting.
//!
//! The suite trains 13 base networks and about 15 transformers at desk scale,
//! so it is ignored by default. Run it with
//!
//! ```text
//! cargo test --release -p embaug-core --test acceptance -- --ignored --nocapture --test-threads 1
//! ```
//!
//! Trained models are cached in-process and shared between criteria.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use embaug::augment::{apply_augmentation, AugSetup, AugmentationKind};
use embaug::config::ExperimentConfig;
use embaug::cost::{fractions_equal, measured_fraction, CostBreakdown};
use embaug::gradcheck::op_suite;
use embaug::nn::{Model, NetworkSpec};
use embaug::pipeline::{fit_omega, generate_data, phi_spec, run_all, DataSplits, OmegaEpoch};
use embaug::transfer::{median, run_transfer, train_base, BaseRun, ScenarioKind, TrainConfig, TransferRun};
use embaug::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, name: &str, pass: bool, detail: &str, start: Instant) {
    println!(
        "criterion {n} ({name}): {} [{detail}; {:.1}s]",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
}

fn config() -> &'static ExperimentConfig {
    static CFG: OnceLock<ExperimentConfig> = OnceLock::new();
    CFG.get_or_init(ExperimentConfig::default)
}

fn data() -> &'static DataSplits {
    static DATA: OnceLock<DataSplits> = OnceLock::new();
    DATA.get_or_init(|| generate_data(config()).unwrap().normalized().unwrap())
}

type Cell<V> = &'static OnceLock<V>;
type Memo<K, V> = OnceLock<Mutex<HashMap<K, Cell<V>>>>;

/// Per-key lazily computed values. Distinct keys compute independently.
fn memo<K: std::hash::Hash + Eq, V>(map: &'static Memo<K, V>, key: K, f: impl FnOnce() -> V) -> &'static V {
    let cell: Cell<V> = *map
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry(key)
        .or_insert_with(|| Box::leak(Box::new(OnceLock::new())));
    cell.get_or_init(f)
}

fn base(setup: AugSetup, seed: u64) -> &'static BaseRun {
    static MAP: Memo<(AugSetup, u64), BaseRun> = OnceLock::new();
    memo(&MAP, (setup, seed), || {
        let d = data();
        let cfg = TrainConfig { seed, ..config().base };
        train_base(setup, &phi_spec(config()).unwrap(), &d.base_train, &d.base_eval, &cfg).unwrap()
    })
}

fn omega(setup: AugSetup, seed: u64, kind: AugmentationKind) -> &'static (Model, Vec<OmegaEpoch>) {
    static MAP: Memo<(AugSetup, u64, AugmentationKind), (Model, Vec<OmegaEpoch>)> = OnceLock::new();
    memo(&MAP, (setup, seed, kind), || {
        fit_omega(&base(setup, seed).phi, &data().base_train, kind, &config().omega, seed).unwrap()
    })
}

fn transfer(scenario: ScenarioKind, seed: u64) -> &'static TransferRun {
    static MAP: Memo<(ScenarioKind, u64), TransferRun> = OnceLock::new();
    memo(&MAP, (scenario, seed), || {
        let setup = config().augset;
        let phi = if scenario.augmented_base() { &base(setup, seed).phi } else { &base(AugSetup::None, seed).phi };
        let omegas: Vec<Model> = match scenario {
            ScenarioKind::PixelEmbed => setup
                .kinds()
                .into_iter()
                .filter(|k| !k.is_identity())
                .map(|k| omega(setup, seed, k).0.clone())
                .collect(),
            _ => Vec::new(),
        };
        let d = data();
        let cfg = TrainConfig { seed, ..config().transfer };
        run_transfer(scenario, setup, phi, &omegas, &d.target_train, &d.target_eval, &cfg).unwrap()
    })
}

#[test]
#[ignore = "acceptance suite"]
fn criterion_1_gradient_correctness() {
    let t = Instant::now();
    let checks = op_suite(100, 2024).unwrap();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failures: usize = checks.iter().map(|c| c.failures).sum();
    let pass = failures == 0 && t.elapsed().as_secs() < 60;
    report(
        1,
        "gradient correctness",
        pass,
        &format!("{} ops x 100 points, {failures} failures, worst rel error {worst:.2e}", checks.len()),
        t,
    );
    assert!(pass, "{checks:#?}");
}

/// Direct nested-loop cross-correlation, accumulating over
/// `(c_in, k_y, k_x)` in row-major order and adding the bias last.
fn conv_reference(x: &Tensor<f32>, k: &Tensor<f32>, b: &Tensor<f32>, stride: usize, pad: usize) -> Vec<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(co * oh * ow);
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for ci in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let (iy, ix) = ((oy * stride + dy) as isize - pad as isize, (ox * stride + dx) as isize - pad as isize);
                            let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                0.0
                            } else {
                                x.data()[(ci * h + iy as usize) * w + ix as usize]
                            };
                            acc += k.data()[((o * c + ci) * kh + dy) * kw + dx] * v;
                        }
                    }
                }
                out.push(acc + b.data()[o]);
            }
        }
    }
    out
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

#[test]
#[ignore = "acceptance suite"]
fn criterion_2_conv_oracle_equivalence() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (c, h, w) = (rng.gen_range(1..=4), rng.gen_range(3..=9), rng.gen_range(3..=9));
        let (co, kh) = (rng.gen_range(1..=4), rng.gen_range(1..=3));
        let (stride, pad) = (rng.gen_range(1..=2), rng.gen_range(0..=2));
        let x = random(&mut rng, vec![c, h, w]);
        let k = random(&mut rng, vec![co, c, kh, kh]);
        let b = random(&mut rng, vec![co]);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.leaf_ref(&x), tape.leaf_ref(&k), tape.leaf_ref(&b));
        let y = tape.conv2d(xv, kv, bv, stride, pad).unwrap();
        let expected = conv_reference(&x, &k, &b, stride, pad);
        let same = tape.value(y).data().len() == expected.len()
            && tape.value(y).data().iter().zip(&expected).all(|(a, b)| a.to_bits() == b.to_bits());
        mismatches += usize::from(!same);
    }
    let pass = mismatches == 0 && t.elapsed().as_secs() < 30;
    report(2, "conv oracle equivalence", pass, &format!("200 instances, {mismatches} mismatches"), t);
    assert!(pass);
}

#[test]
#[ignore = "acceptance suite"]
fn criterion_3_augmentation_laws() {
    use AugmentationKind::*;
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut broken = 0;
    for _ in 0..100 {
        let side = rng.gen_range(1..=12);
        let channels = rng.gen_range(1..=3);
        let x = random(&mut rng, vec![channels, side, side]);
        let ap = |x: &Tensor<f32>, k| apply_augmentation(x, k).unwrap();
        let laws = [
            ap(&ap(&x, HFlip), HFlip).bitwise_eq(&x),
            ap(&ap(&x, VFlip), VFlip).bitwise_eq(&x),
            ap(&ap(&x, VFlip), HFlip).bitwise_eq(&ap(&ap(&x, Rotate90(1)), Rotate90(1))),
            ap(&ap(&x, HFlip), VFlip).bitwise_eq(&ap(&x, Rotate90(2))),
        ];
        broken += laws.iter().filter(|&&ok| !ok).count();
    }
    report(3, "augmentation laws", broken == 0, &format!("100 images, {broken} violations"), t);
    assert_eq!(broken, 0);
}

#[test]
#[ignore = "acceptance suite"]
fn criterion_4_identity_transformer_learnability() {
    let t = Instant::now();
    let ratios: Vec<f64> = (1..=3)
        .map(|s| {
            let last = omega(config().augset, s, AugmentationKind::Identity).1.last().unwrap();
            last.eval_loss / last.variance_baseline
        })
        .collect();
    let m = median(&ratios);
    let pass = m < 0.01;
    report(
        4,
        "identity transformer learnability",
        pass,
        &format!("median eval MSE / variance {m:.4} over seeds 1-3 {ratios:.4?}, need < 0.01"),
        t,
    );
    assert!(pass);
}

#[test]
#[ignore = "acceptance suite"]
fn criterion_5_vflip_loss_ordering() {
    let t = Instant::now();
    let mse = |setup| -> Vec<f64> {
        (1..=3)
            .map(|s| omega(setup, s, AugmentationKind::VFlip).1.last().unwrap().eval_loss)
            .collect()
    };
    let (with, without) = (mse(AugSetup::HFlipVFlip), mse(AugSetup::HFlip));
    let pass = median(&with) < median(&without);
    report(
        5,
        "vflip transformer loss ordering",
        pass,
        &format!(
            "median MSE vflip-trained base {:.4} {with:.4?} vs hflip-only base {:.4} {without:.4?}",
            median(&with),
            median(&without)
        ),
        t,
    );
    assert!(pass);
}

#[test]
#[ignore = "acceptance suite"]
fn criterion_6_transfer_ordering() {
    let t = Instant::now();
    let acc = |s: ScenarioKind| median(&(1..=5).map(|seed| transfer(s, seed).final_accuracy()).collect::<Vec<_>>());
    let pp = acc(ScenarioKind::PixelPixel);
    let pn = acc(ScenarioKind::PixelNone);
    let pe = acc(ScenarioKind::PixelEmbed);
    let nn = acc(ScenarioKind::NoneNone);
    let pass = pe > pn && pn > nn && pp >= pe - 0.01;
    report(
        6,
        "transfer ordering",
        pass,
        &format!("median top-1 pixel-pixel {pp:.4}, pixel-embed {pe:.4}, pixel-none {pn:.4}, none-none {nn:.4}"),
        t,
    );
    assert!(pass);
}

#[test]
#[ignore = "acceptance suite"]
fn criterion_7_hflip_helps_base() {
    let t = Instant::now();
    let acc = |setup| median(&(1..=5).map(|s| base(setup, s).final_accuracy()).collect::<Vec<_>>());
    let (h, n) = (acc(AugSetup::HFlip), acc(AugSetup::None));
    let pass = h > n;
    report(7, "hflip improves base accuracy", pass, &format!("median top-1 hflip {h:.4} vs none {n:.4}"), t);
    assert!(pass);
}

#[test]
#[ignore = "acceptance suite"]
fn criterion_8_cost_ratio() {
    let t = Instant::now();
    let pp = transfer(ScenarioKind::PixelPixel, 1);
    let pe = transfer(ScenarioKind::PixelEmbed, 1);
    let phi = NetworkSpec::phi_default();
    let dim = phi.output_len().unwrap();
    let psi = NetworkSpec::psi_transfer(dim, data().target_train.num_classes).unwrap();
    let breakdown = CostBreakdown::from_specs(&phi, &psi, &NetworkSpec::omega(dim).unwrap(), 2).unwrap();
    let predicted = breakdown.ratio_fraction().unwrap();
    let measured = measured_fraction(&pp.meter, &pe.meter).unwrap();
    let exact = fractions_equal(measured, predicted);
    let ratio = predicted.0 as f64 / predicted.1 as f64;
    let pass = exact && ratio > 1.9;
    report(
        8,
        "cost ratio",
        pass,
        &format!(
            "measured {}/{} vs predicted {}/{} exact={exact}; ratio {ratio:.4}, need > 1.9 \
             (C_phi {}, C_psi {}+{}, C_omega {})",
            measured.0,
            measured.1,
            predicted.0,
            predicted.1,
            breakdown.c_phi,
            breakdown.c_psi_fwd,
            breakdown.c_psi_bwd,
            breakdown.c_omega[1]
        ),
        t,
    );
    assert!(pass);
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
#[ignore = "acceptance suite"]
fn criterion_9_determinism() {
    let t = Instant::now();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<Vec<(String, Vec<u8>)>> = dirs
        .iter()
        .map(|d| {
            let mut cfg = ExperimentConfig {
                out: d.path().join("out"),
                seeds: vec![1, 2],
                threads: 1,
                ..ExperimentConfig::default()
            };
            cfg.data.base_train_per_class = 60;
            cfg.data.base_eval_per_class = 20;
            cfg.data.target_train_per_class = 20;
            cfg.data.target_eval_per_class = 20;
            cfg.base.epochs = 2;
            cfg.omega.epochs = 2;
            cfg.transfer.epochs = 3;
            run_all(&cfg).unwrap();
            // The stored config names the output directory, which differs.
            tree(&cfg.out).into_iter().filter(|(n, _)| n != "config.json").collect()
        })
        .collect();
    let names = |r: &[(String, Vec<u8>)]| r.iter().map(|f| f.0.clone()).collect::<Vec<_>>();
    let differing: Vec<&String> = runs[0]
        .iter()
        .zip(&runs[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| &a.0)
        .collect();
    let csvs = runs[0].iter().filter(|f| f.0.ends_with(".csv")).count();
    let ckpts = runs[0].iter().filter(|f| f.0.ends_with(".ckpt")).count();
    let pass = names(&runs[0]) == names(&runs[1]) && differing.is_empty() && csvs > 0 && ckpts > 0;
    report(
        9,
        "determinism",
        pass,
        &format!(
            "two reduced pipelines, {} files ({csvs} csv, {ckpts} checkpoints), differing {differing:?}",
            runs[0].len()
        ),
        t,
    );
    assert!(pass);
}
