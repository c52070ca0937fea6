//! Base training under the augmentation setups, the four transfer
//! scenarios, top-1 evaluation and seed aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentation, AugSetup, AugmentationKind};
use crate::cost::{count_flops, FlopMeter, Pass};
use crate::data::{batch_iter, derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::nn::{forward_classify, predict, Model, NetworkSpec};
use crate::omega::{apply_omega, embed_all};
use crate::optim::{Sgd, SgdConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

// Sub-streams of a run seed.
const STREAM_PHI_INIT: u64 = 1;
const STREAM_PSI_INIT: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_BATCHES: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    PixelPixel,
    PixelNone,
    PixelEmbed,
    NoneNone,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [Self::PixelPixel, Self::PixelNone, Self::PixelEmbed, Self::NoneNone];

    pub fn name(&self) -> &'static str {
        match self {
            Self::PixelPixel => "pixel-pixel",
            Self::PixelNone => "pixel-none",
            Self::PixelEmbed => "pixel-embed",
            Self::NoneNone => "none-none",
        }
    }

    /// Whether the base network was trained with pixel augmentation.
    pub fn augmented_base(&self) -> bool {
        !matches!(self, Self::NoneNone)
    }

    /// Training variants per target sample, identity first.
    pub fn variants(&self, setup: AugSetup) -> Vec<AugmentationKind> {
        match self {
            Self::PixelPixel | Self::PixelEmbed => setup.kinds(),
            Self::PixelNone | Self::NoneNone => vec![AugmentationKind::Identity],
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown scenario `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn base_default() -> Self {
        Self {
            sgd: SgdConfig {
                lr: 0.01,
                momentum: 0.9,
            },
            batch: 32,
            epochs: 30,
            seed: 0,
        }
    }

    pub fn transfer_default() -> Self {
        Self {
            sgd: SgdConfig {
                lr: 0.01,
                momentum: 0.9,
            },
            batch: 64,
            epochs: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseEpoch {
    pub setup: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_top1: f64,
}

#[derive(Clone, Debug)]
pub struct BaseRun {
    /// Frozen, tagged with the setup name.
    pub phi: Model,
    pub psi: Model,
    pub history: Vec<BaseEpoch>,
}

impl BaseRun {
    pub fn final_accuracy(&self) -> f64 {
        self.history.last().map_or(0.0, |e| e.eval_top1)
    }
}

fn stack_rows(rows: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    Tensor::stack(rows)
}

/// Trains Φ and a single-layer Ψ jointly with softmax cross-entropy. Each
/// epoch every sample gets one augmentation drawn uniformly from `setup`.
pub fn train_base(
    setup: AugSetup,
    phi_spec: &NetworkSpec,
    train: &Dataset,
    eval: &Dataset,
    config: &TrainConfig,
) -> Result<BaseRun> {
    if train.is_empty() {
        return Err(Error::Empty("base training set is empty".into()));
    }
    let mut phi = Model::init(phi_spec.clone(), derive_seed(config.seed, STREAM_PHI_INIT))?;
    let dim = phi_spec.output_len()?;
    let mut psi = Model::init(
        NetworkSpec::psi_base(dim, train.num_classes)?,
        derive_seed(config.seed, STREAM_PSI_INIT),
    )?;
    let mut opt_phi = Sgd::new(config.sgd, phi.param_shapes())?;
    let mut opt_psi = Sgd::new(config.sgd, psi.param_shapes())?;
    let kinds = setup.kinds();
    let aug_seed = derive_seed(config.seed, STREAM_AUGMENT);
    let batch_seed = derive_seed(config.seed, STREAM_BATCHES);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(aug_seed);
        rng.set_stream(epoch as u64);
        let draws: Vec<AugmentationKind> = (0..train.len()).map(|_| kinds[rng.gen_range(0..kinds.len())]).collect();
        let last_good = phi.clone();
        let mut total = 0.0;
        for idx in batch_iter(train.len(), config.batch, batch_seed, epoch as u64)? {
            let images = idx
                .iter()
                .map(|&i| apply_augmentation(&train.samples[i].pixels, draws[i]))
                .collect::<Result<Vec<_>>>()?;
            let x = stack_rows(&images.iter().collect::<Vec<_>>())?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.samples[i].label).collect();
            let (loss, grads, pv, qv) = {
                let mut tape = Tape::new();
                let xv = tape.leaf_ref(&x);
                let (z, pv) = phi.forward_on_tape(&mut tape, xv)?;
                let (y, qv) = psi.forward_on_tape(&mut tape, z)?;
                let loss = tape.softmax_xent(y, &labels)?;
                (tape.value(loss).item()? as f64, tape.backward(loss)?, pv, qv)
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    message: format!("base loss became {loss} in epoch {epoch}"),
                    last_good: Some(Box::new(last_good.frozen().with_tag(setup.name()))),
                });
            }
            phi.apply_gradients(&mut opt_phi, &grads, &pv)?;
            psi.apply_gradients(&mut opt_psi, &grads, &qv)?;
            total += loss * idx.len() as f64;
        }
        let eval_top1 = if eval.is_empty() {
            f64::NAN
        } else {
            evaluate_top1(&psi, &phi, eval)?
        };
        history.push(BaseEpoch {
            setup: setup.name().into(),
            seed: config.seed,
            epoch: epoch + 1,
            train_loss: total / train.len() as f64,
            eval_top1,
        });
    }
    Ok(BaseRun {
        phi: phi.frozen().with_tag(setup.name()),
        psi: psi.frozen().with_tag(setup.name()),
        history,
    })
}

/// Fraction of samples whose predicted class equals the label.
pub fn evaluate_top1(psi: &Model, phi: &Model, eval: &Dataset) -> Result<f64> {
    let images: Vec<&Tensor<f32>> = eval.samples.iter().map(|s| &s.pixels).collect();
    let z = embed_all(phi, &images, None)?;
    evaluate_top1_embedded(psi, &z, &eval.labels())
}

pub fn evaluate_top1_embedded(psi: &Model, z: &[Tensor<f32>], labels: &[usize]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    if z.len() != labels.len() {
        return Err(Error::dim(format!("{} embeddings but {} labels", z.len(), labels.len())));
    }
    let mut correct = 0usize;
    for (zc, lc) in z.chunks(256).zip(labels.chunks(256)) {
        let logits = forward_classify(psi, &stack_rows(&zc.iter().collect::<Vec<_>>())?, None)?;
        correct += predict(&logits).iter().zip(lc).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / z.len() as f64)
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_top1: f64,
    pub flops_phi: u64,
    pub flops_psi_fwd: u64,
    pub flops_psi_bwd: u64,
    pub flops_omega: u64,
}

#[derive(Clone, Debug)]
pub struct TransferRun {
    pub scenario: ScenarioKind,
    pub psi: Model,
    pub records: Vec<MetricsRecord>,
    /// Training-only FLOPs; evaluation is not metered.
    pub meter: FlopMeter,
}

impl TransferRun {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.eval_top1)
    }
}

/// Finds the transformer tagged with `kind`'s name.
pub fn find_omega(omegas: &[Model], kind: AugmentationKind) -> Result<&Model> {
    omegas
        .iter()
        .find(|m| m.tag.as_deref() == Some(kind.name().as_str()))
        .ok_or_else(|| Error::MissingModel(format!("no augmentation transformer for {kind}")))
}

/// Trains a fresh transfer head on `train` on top of the frozen `phi`.
///
/// Per epoch the training items are every `(sample, variant)` pair, where
/// the variants are the scenario's: pixel variants run Φ on the augmented
/// image, embedding variants apply the matching Ω to `Φ(x)`.
pub fn run_transfer(
    scenario: ScenarioKind,
    setup: AugSetup,
    phi: &Model,
    omegas: &[Model],
    train: &Dataset,
    eval: &Dataset,
    config: &TrainConfig,
) -> Result<TransferRun> {
    if !phi.is_frozen() {
        return Err(Error::Invalid("transfer needs a frozen feature generator".into()));
    }
    if let Some(tag) = phi.tag.as_deref() {
        let base_augmented = tag != AugSetup::None.name();
        if base_augmented != scenario.augmented_base() {
            return Err(Error::Invalid(format!(
                "scenario {scenario} cannot use a base trained with setup `{tag}`"
            )));
        }
    }
    if train.is_empty() {
        return Err(Error::Empty("target training set is empty".into()));
    }
    let variants = scenario.variants(setup);
    let embed_omegas: Vec<Option<&Model>> = variants
        .iter()
        .map(|&k| match (scenario, k) {
            (ScenarioKind::PixelEmbed, k) if !k.is_identity() => find_omega(omegas, k).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;

    let dim = phi.spec.output_len()?;
    let mut psi = Model::init(
        NetworkSpec::psi_transfer(dim, train.num_classes)?,
        derive_seed(config.seed, STREAM_PSI_INIT),
    )?;
    let c_psi = count_flops(&psi.spec, Pass::Forward)?;
    let c_psi_bp = count_flops(&psi.spec, Pass::Backward)?;
    let mut opt = Sgd::new(config.sgd, psi.param_shapes())?;
    let batch_seed = derive_seed(config.seed, STREAM_BATCHES);

    let originals: Vec<&Tensor<f32>> = train.samples.iter().map(|s| &s.pixels).collect();
    let eval_images: Vec<&Tensor<f32>> = eval.samples.iter().map(|s| &s.pixels).collect();
    let eval_z = embed_all(phi, &eval_images, None)?;
    let eval_labels = eval.labels();
    let n = train.len();
    let nv = variants.len();

    let mut meter = FlopMeter::default();
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        // items[v * n + i] is variant v of sample i.
        let mut items: Vec<Tensor<f32>> = Vec::with_capacity(nv * n);
        match scenario {
            ScenarioKind::PixelPixel => {
                for &k in &variants {
                    let imgs = originals
                        .iter()
                        .map(|x| apply_augmentation(x, k))
                        .collect::<Result<Vec<_>>>()?;
                    items.extend(embed_all(phi, &imgs.iter().collect::<Vec<_>>(), Some(&mut meter))?);
                }
            }
            _ => {
                let z = embed_all(phi, &originals, Some(&mut meter))?;
                for om in embed_omegas.iter().skip(1) {
                    let om = om.expect("non-identity variants have a transformer");
                    for chunk in z.chunks(256) {
                        let zb = stack_rows(&chunk.iter().collect::<Vec<_>>())?;
                        items.extend(apply_omega(om, &zb, Some(&mut meter))?.unstack());
                    }
                }
                items.splice(0..0, z);
            }
        }

        let mut total = 0.0;
        for idx in batch_iter(nv * n, config.batch, batch_seed, epoch as u64)? {
            let zb = stack_rows(&idx.iter().map(|&j| &items[j]).collect::<Vec<_>>())?;
            let labels: Vec<usize> = idx.iter().map(|&j| train.samples[j % n].label).collect();
            let (loss, grads, vars) = {
                let mut tape = Tape::new();
                let zv = tape.leaf_ref(&zb);
                let (y, vars) = psi.forward_on_tape(&mut tape, zv)?;
                let loss = tape.softmax_xent(y, &labels)?;
                (tape.value(loss).item()? as f64, tape.backward(loss)?, vars)
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    message: format!("{scenario} loss became {loss} in epoch {epoch}"),
                    last_good: None,
                });
            }
            psi.apply_gradients(&mut opt, &grads, &vars)?;
            let b = idx.len() as u64;
            meter.psi_fwd += b * c_psi;
            meter.psi_bwd += b * c_psi_bp;
            total += loss * idx.len() as f64;
        }
        records.push(MetricsRecord {
            scenario: scenario.name().into(),
            seed: config.seed,
            epoch: epoch + 1,
            train_loss: total / (nv * n) as f64,
            eval_top1: evaluate_top1_embedded(&psi, &eval_z, &eval_labels)?,
            flops_phi: meter.phi,
            flops_psi_fwd: meter.psi_fwd,
            flops_psi_bwd: meter.psi_bwd,
            flops_omega: meter.omega,
        });
    }
    Ok(TransferRun {
        scenario,
        psi: psi.frozen().with_tag(scenario.name()),
        records,
        meter,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scenario: String,
    pub epoch: usize,
    pub seeds: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Median, min and max eval accuracy across seeds per scenario and epoch.
pub fn seed_sweep(records: &[MetricsRecord]) -> Result<Vec<SweepRow>> {
    if records.is_empty() {
        return Err(Error::Empty("no metrics to aggregate".into()));
    }
    let mut by_run: BTreeMap<(&str, u64), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        by_run.entry((&r.scenario, r.seed)).or_default().push(r);
    }
    let mut epochs_per_scenario: BTreeMap<&str, usize> = BTreeMap::new();
    for ((scenario, seed), rs) in &by_run {
        let e = *epochs_per_scenario.entry(scenario).or_insert(rs.len());
        if e != rs.len() {
            return Err(Error::Invalid(format!(
                "scenario {scenario}: seed {seed} has {} epochs, another seed has {e}",
                rs.len()
            )));
        }
    }
    let mut cells: BTreeMap<(&str, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        cells.entry((&r.scenario, r.epoch)).or_default().push(r.eval_top1);
    }
    Ok(cells
        .into_iter()
        .map(|((scenario, epoch), v)| SweepRow {
            scenario: scenario.into(),
            epoch,
            seeds: v.len(),
            median: median(&v),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect())
}

/// A published top-1 accuracy row, in percent, for the three backbones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub stage: &'static str,
    pub row: &'static str,
    pub vgg16: f64,
    pub resnet18: f64,
    pub inception_v3: f64,
}

/// Published full-scale accuracies (base on CIFAR-100, transfer to
/// CIFAR-10). The two VGG-16 base rows are identical in the source.
pub const REFERENCE_ACCURACY: [ReferenceRow; 7] = [
    ReferenceRow { stage: "base", row: "none", vgg16: 64.43, resnet18: 61.89, inception_v3: 67.87 },
    ReferenceRow { stage: "base", row: "hflip", vgg16: 71.47, resnet18: 74.48, inception_v3: 78.20 },
    ReferenceRow { stage: "base", row: "hflip+vflip", vgg16: 71.47, resnet18: 72.46, inception_v3: 75.85 },
    ReferenceRow { stage: "transfer", row: "pixel-pixel", vgg16: 64.44, resnet18: 78.87, inception_v3: 83.98 },
    ReferenceRow { stage: "transfer", row: "pixel-none", vgg16: 62.20, resnet18: 76.25, inception_v3: 82.22 },
    ReferenceRow { stage: "transfer", row: "pixel-embed", vgg16: 63.68, resnet18: 78.03, inception_v3: 82.20 },
    ReferenceRow { stage: "transfer", row: "none-none", vgg16: 56.31, resnet18: 65.46, inception_v3: 75.23 },
];

pub fn reference(stage: &str, row: &str) -> Option<&'static ReferenceRow> {
    REFERENCE_ACCURACY.iter().find(|r| r.stage == stage && r.row == row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::nn::Layer;
    use crate::omega::build_omega;

    fn tiny() -> (NetworkSpec, Dataset, Dataset) {
        let spec = SyntheticSpec {
            size: 8,
            ..SyntheticSpec::target_task(12, 9)
        };
        let (train, eval) = generate_synthetic(&spec).unwrap().split_per_class(8);
        (NetworkSpec::phi([3, 8, 8], &[2, 4]).unwrap(), train, eval)
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch: 5,
            seed: 3,
            ..TrainConfig::transfer_default()
        }
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in ScenarioKind::ALL {
            assert_eq!(s.name().parse::<ScenarioKind>().unwrap(), s);
        }
        assert!("pixel-omega".parse::<ScenarioKind>().is_err());
    }

    #[test]
    fn constant_and_perfect_predictors() {
        let psi0 = {
            let mut m = Model::zeros(NetworkSpec::psi_base(2, 3).unwrap()).unwrap();
            m.param_mut("0.bias").unwrap().data_mut()[0] = 1.0;
            m
        };
        let z: Vec<Tensor<f32>> = (0..9).map(|i| Tensor::from_vec(vec![i as f32, 0.0]).unwrap()).collect();
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        assert!((evaluate_top1_embedded(&psi0, &z, &labels).unwrap() - 1.0 / 3.0).abs() < 1e-12);

        // Logits equal to a one-hot of the label.
        let psi1 = {
            let mut m = Model::zeros(NetworkSpec::psi_base(3, 3).unwrap()).unwrap();
            let w = m.param_mut("0.weight").unwrap();
            for k in 0..3 {
                w.data_mut()[k * 3 + k] = 1.0;
            }
            m
        };
        let onehot: Vec<Tensor<f32>> = labels
            .iter()
            .map(|&l| Tensor::from_vec((0..3).map(|k| f32::from(u8::from(k == l))).collect()).unwrap())
            .collect();
        assert_eq!(evaluate_top1_embedded(&psi1, &onehot, &labels).unwrap(), 1.0);
        let mut rz = onehot.clone();
        let mut rl = labels.clone();
        rz.reverse();
        rl.reverse();
        assert_eq!(
            evaluate_top1_embedded(&psi1, &rz, &rl).unwrap(),
            evaluate_top1_embedded(&psi1, &onehot, &labels).unwrap()
        );
        assert!(evaluate_top1_embedded(&psi0, &[], &[]).is_err());
    }

    #[test]
    fn base_training_is_deterministic_and_tags_setup() {
        let (spec, train, eval) = tiny();
        let c = TrainConfig {
            epochs: 2,
            batch: 8,
            seed: 1,
            ..TrainConfig::base_default()
        };
        let a = train_base(AugSetup::HFlip, &spec, &train, &eval, &c).unwrap();
        let b = train_base(AugSetup::HFlip, &spec, &train, &eval, &c).unwrap();
        assert_eq!(a.phi, b.phi);
        assert_eq!(a.history, b.history);
        assert!(a.phi.is_frozen());
        assert_eq!(a.phi.tag.as_deref(), Some("hflip"));
        assert_eq!(a.history.len(), 2);
    }

    #[test]
    fn meters_follow_closed_form() {
        let (spec, train, eval) = tiny();
        let phi = Model::init(spec.clone(), 1).unwrap().frozen().with_tag("hflip");
        let om = build_omega(16, 2).unwrap().frozen().with_tag("hflip");
        let n = train.len() as u64;
        let c_phi = count_flops(&spec, Pass::Forward).unwrap();
        let c_om = count_flops(&om.spec, Pass::Forward).unwrap();
        let head = NetworkSpec::psi_transfer(16, 3).unwrap();
        let c_psi = count_flops(&head, Pass::Forward).unwrap();
        let c_bp = count_flops(&head, Pass::Backward).unwrap();
        let epochs = 3;

        let embed = run_transfer(ScenarioKind::PixelEmbed, AugSetup::HFlip, &phi, std::slice::from_ref(&om), &train, &eval, &cfg(epochs))
            .unwrap();
        let e = epochs as u64;
        assert_eq!(embed.meter.phi, e * n * c_phi);
        assert_eq!(embed.meter.omega, e * n * c_om);
        assert_eq!(embed.meter.psi_fwd + embed.meter.psi_bwd, e * 2 * n * (c_psi + c_bp));

        let pixel = run_transfer(ScenarioKind::PixelPixel, AugSetup::HFlip, &phi, &[], &train, &eval, &cfg(epochs)).unwrap();
        assert_eq!(pixel.meter.phi, e * 2 * n * c_phi);
        assert_eq!(pixel.meter.omega, 0);
        assert_eq!(pixel.records.len(), epochs);
        assert!(pixel.records.windows(2).all(|w| w[0].epoch < w[1].epoch));
        assert!(pixel.records.iter().all(|r| (0.0..=1.0).contains(&r.eval_top1)));
    }

    #[test]
    fn preconditions() {
        let (spec, train, eval) = tiny();
        let phi = Model::init(spec, 1).unwrap().frozen().with_tag("hflip");
        let r = run_transfer(ScenarioKind::PixelEmbed, AugSetup::HFlip, &phi, &[], &train, &eval, &cfg(1));
        assert!(matches!(r, Err(Error::MissingModel(_))));
        let r = run_transfer(ScenarioKind::NoneNone, AugSetup::HFlip, &phi, &[], &train, &eval, &cfg(1));
        assert!(matches!(r, Err(Error::Invalid(_))));
        let mut thawed = phi.clone();
        thawed = Model::from_params(thawed.spec.clone(), thawed.params().to_vec()).unwrap();
        let r = run_transfer(ScenarioKind::PixelNone, AugSetup::HFlip, &thawed, &[], &train, &eval, &cfg(1));
        assert!(r.is_err());
    }

    #[test]
    fn phi_is_untouched_by_transfer() {
        let (spec, train, eval) = tiny();
        let phi = Model::init(spec, 4).unwrap().frozen().with_tag("none");
        let before = phi.clone();
        let run = run_transfer(ScenarioKind::NoneNone, AugSetup::HFlip, &phi, &[], &train, &eval, &cfg(2)).unwrap();
        assert_eq!(run.records.len(), 2);
        for (a, b) in phi.params().iter().zip(before.params()) {
            assert!(a.value.bitwise_eq(&b.value));
        }
        assert!(matches!(run.psi.spec.layers.last(), Some(Layer::Affine { outputs: 3, .. })));
    }

    fn rec(scenario: &str, seed: u64, epoch: usize, acc: f64) -> MetricsRecord {
        MetricsRecord {
            scenario: scenario.into(),
            seed,
            epoch,
            train_loss: 0.0,
            eval_top1: acc,
            flops_phi: 0,
            flops_psi_fwd: 0,
            flops_psi_bwd: 0,
            flops_omega: 0,
        }
    }

    #[test]
    fn sweep_aggregates() {
        let single = seed_sweep(&[rec("a", 1, 1, 0.4)]).unwrap();
        assert_eq!(single[0].median, 0.4);
        let recs = vec![rec("a", 1, 1, 0.3), rec("a", 2, 1, 0.1), rec("a", 3, 1, 0.2)];
        let rows = seed_sweep(&recs).unwrap();
        assert_eq!((rows[0].median, rows[0].min, rows[0].max), (0.2, 0.1, 0.3));
        let mut rev = recs.clone();
        rev.reverse();
        assert_eq!(seed_sweep(&rev).unwrap(), rows);
        let ragged = vec![rec("a", 1, 1, 0.3), rec("a", 1, 2, 0.3), rec("a", 2, 1, 0.1)];
        assert!(seed_sweep(&ragged).is_err());
        assert!(seed_sweep(&[]).is_err());
        assert_eq!(median(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }

    #[test]
    fn reference_constants() {
        assert_eq!(reference("transfer", "pixel-embed").unwrap().vgg16, 63.68);
        assert_eq!(reference("base", "hflip").unwrap().resnet18, 74.48);
        assert_eq!(REFERENCE_ACCURACY.len(), 7);
    }
}
