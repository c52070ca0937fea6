//! Augmentation transformers: pair extraction, training against the MSE
//! objective, evaluation and application.

use serde::{Deserialize, Serialize};

use crate::augment::{apply_augmentation, AugmentationKind};
use crate::cost::{FlopMeter, Pass};
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::nn::{forward_embedding, Model, NetworkSpec, Role};
use crate::optim::{Sgd, SgdConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Images per batched forward pass when no gradient is needed.
const INFER_BATCH: usize = 128;

/// `(Φ(x), Φ(g(x)))` for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub kind: AugmentationKind,
    pub id: u64,
}

/// Embeds every image of `dataset` in batches. Meters Φ once per image.
pub fn embed_all(phi: &Model, images: &[&Tensor<f32>], mut meter: Option<&mut FlopMeter>) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let batch = Tensor::stack(chunk)?;
        out.extend(forward_embedding(phi, &batch, meter.as_deref_mut())?.unstack());
    }
    Ok(out)
}

/// One pair per sample. Φ runs exactly twice per sample.
pub fn extract_pairs(
    phi: &Model,
    dataset: &Dataset,
    kind: AugmentationKind,
    mut meter: Option<&mut FlopMeter>,
) -> Result<Vec<EmbeddingPair>> {
    if !phi.is_frozen() {
        return Err(Error::Invalid("pairs must be extracted with a frozen feature generator".into()));
    }
    let originals: Vec<&Tensor<f32>> = dataset.samples.iter().map(|s| &s.pixels).collect();
    let augmented = originals
        .iter()
        .map(|x| apply_augmentation(x, kind))
        .collect::<Result<Vec<_>>>()?;
    let inputs = embed_all(phi, &originals, meter.as_deref_mut())?;
    let targets = embed_all(phi, &augmented.iter().collect::<Vec<_>>(), meter)?;
    Ok(inputs
        .into_iter()
        .zip(targets)
        .zip(&dataset.samples)
        .map(|((input, target), s)| EmbeddingPair {
            input,
            target,
            kind,
            id: s.id,
        })
        .collect())
}

/// Splits pairs 80/20 into `(train, eval)` by id: ids congruent to 4 mod 5
/// are held out.
pub fn split_pairs(pairs: Vec<EmbeddingPair>) -> (Vec<EmbeddingPair>, Vec<EmbeddingPair>) {
    pairs.into_iter().partition(|p| p.id % 5 != 4)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaConfig {
    pub sgd: SgdConfig,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OmegaConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig {
                lr: 0.1,
                momentum: 0.9,
            },
            batch: 16,
            epochs: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OmegaTrainingState {
    pub omega: Model,
    pub kind: AugmentationKind,
    pub epochs: usize,
    pub train_loss: Vec<f64>,
    pub eval_loss: Vec<f64>,
    pub seed: u64,
}

fn check_pairs(pairs: &[EmbeddingPair], kind: AugmentationKind, dim: usize) -> Result<()> {
    for p in pairs {
        if p.kind != kind {
            return Err(Error::Invalid(format!(
                "pair {} is tagged {} but the set is {}",
                p.id, p.kind, kind
            )));
        }
        if p.input.shape() != [dim] || p.target.shape() != [dim] {
            return Err(Error::dim(format!("pair {} does not have embedding dim {dim}", p.id)));
        }
    }
    Ok(())
}

fn gather(pairs: &[EmbeddingPair], idx: &[usize], dim: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut x = Vec::with_capacity(idx.len() * dim);
    let mut t = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        x.extend_from_slice(pairs[i].input.data());
        t.extend_from_slice(pairs[i].target.data());
    }
    Ok((Tensor::new(vec![idx.len(), dim], x)?, Tensor::new(vec![idx.len(), dim], t)?))
}

/// Fits `omega` to the pairs by minibatch SGD on the mean squared error,
/// recording train and held-out loss after every epoch. The returned model
/// is frozen and tagged with the augmentation name.
pub fn train_omega(
    train: &[EmbeddingPair],
    eval: &[EmbeddingPair],
    mut omega: Model,
    config: &OmegaConfig,
) -> Result<OmegaTrainingState> {
    if omega.role() != Role::Omega {
        return Err(Error::Invalid(format!("expected an omega model, got {}", omega.role().name())));
    }
    let dim = omega.spec.input_len();
    let kind = train
        .first()
        .or(eval.first())
        .ok_or_else(|| Error::Empty("no embedding pairs".into()))?
        .kind;
    check_pairs(train, kind, dim)?;
    check_pairs(eval, kind, dim)?;
    if eval.is_empty() {
        return Err(Error::Empty("no held-out pairs".into()));
    }
    let mut opt = Sgd::new(config.sgd, omega.param_shapes())?;
    let mut state = OmegaTrainingState {
        omega: omega.clone(),
        kind,
        epochs: 0,
        train_loss: Vec::new(),
        eval_loss: Vec::new(),
        seed: config.seed,
    };
    for epoch in 0..config.epochs {
        let last_good = omega.clone();
        let mut total = 0.0;
        for idx in batch_iter(train.len(), config.batch, config.seed, epoch as u64)? {
            let (x, t) = gather(train, &idx, dim)?;
            let (loss, grads, vars) = {
                let mut tape = Tape::new();
                let xv = tape.leaf_ref(&x);
                let tv = tape.leaf_ref(&t);
                let (y, vars) = omega.forward_on_tape(&mut tape, xv)?;
                let loss = tape.mse(y, tv)?;
                (tape.value(loss).item()? as f64, tape.backward(loss)?, vars)
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    message: format!("omega loss became {loss} in epoch {epoch}"),
                    last_good: Some(Box::new(last_good.frozen().with_tag(kind.name()))),
                });
            }
            omega.apply_gradients(&mut opt, &grads, &vars)?;
            total += loss * idx.len() as f64;
        }
        state.train_loss.push(total / train.len() as f64);
        state.eval_loss.push(eval_omega(&omega, eval)?);
        state.epochs += 1;
    }
    state.omega = omega.frozen().with_tag(kind.name());
    Ok(state)
}

/// Mean over pairs of the per-pair mean squared error. Per-pair errors are
/// summed in ascending order, so the result does not depend on pair order.
pub fn eval_omega(omega: &Model, pairs: &[EmbeddingPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs to evaluate".into()));
    }
    let mut errs = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(INFER_BATCH) {
        let inputs: Vec<&Tensor<f32>> = chunk.iter().map(|p| &p.input).collect();
        let y = omega.forward(&Tensor::stack(&inputs)?)?;
        for (i, p) in chunk.iter().enumerate() {
            let d = p.target.len() as f64;
            let se: f64 = y
                .row(i)
                .iter()
                .zip(p.target.data())
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            errs.push(se / d);
        }
    }
    errs.sort_by(f64::total_cmp);
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// MSE of predicting every target by the mean target, i.e. the mean
/// per-dimension variance of the targets.
pub fn variance_baseline(pairs: &[EmbeddingPair]) -> Result<f64> {
    let first = pairs.first().ok_or_else(|| Error::Empty("no pairs".into()))?;
    let d = first.target.len();
    let n = pairs.len() as f64;
    let mut mean = vec![0f64; d];
    for p in pairs {
        for (m, &v) in mean.iter_mut().zip(p.target.data()) {
            *m += v as f64 / n;
        }
    }
    let mut acc = 0.0;
    for p in pairs {
        for (m, &v) in mean.iter().zip(p.target.data()) {
            acc += (v as f64 - m).powi(2);
        }
    }
    Ok(acc / (n * d as f64))
}

/// `Ω(z)` for a single embedding or a batch, metering Ω.
pub fn apply_omega(omega: &Model, z: &Tensor<f32>, meter: Option<&mut FlopMeter>) -> Result<Tensor<f32>> {
    let out = omega.forward(z)?;
    if let Some(m) = meter {
        m.omega += omega.flops(z, Pass::Forward)?;
    }
    Ok(out)
}

/// A fresh transformer for `dim`-dimensional embeddings.
pub fn build_omega(dim: usize, seed: u64) -> Result<Model> {
    Model::init(NetworkSpec::omega(dim)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::count_flops;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn setup(n: usize) -> (Model, Dataset) {
        let spec = SyntheticSpec {
            size: 8,
            ..SyntheticSpec::base_task(n, 5)
        };
        let ds = generate_synthetic(&spec).unwrap();
        let phi = Model::init(NetworkSpec::phi([3, 8, 8], &[2, 4]).unwrap(), 3).unwrap().frozen();
        (phi, ds)
    }

    fn pair(id: u64, input: Vec<f32>, target: Vec<f32>) -> EmbeddingPair {
        EmbeddingPair {
            input: Tensor::from_vec(input).unwrap(),
            target: Tensor::from_vec(target).unwrap(),
            kind: AugmentationKind::Identity,
            id,
        }
    }

    #[test]
    fn identity_pairs_match_and_phi_runs_twice_per_sample() {
        let (phi, ds) = setup(34);
        assert_eq!(ds.len(), 102);
        let mut meter = FlopMeter::default();
        let pairs = extract_pairs(&phi, &ds, AugmentationKind::Identity, Some(&mut meter)).unwrap();
        assert_eq!(pairs.len(), 102);
        assert!(pairs.iter().all(|p| p.input.bitwise_eq(&p.target)));
        assert_eq!(meter.phi, 2 * 102 * count_flops(&phi.spec, Pass::Forward).unwrap());
        let again = extract_pairs(&phi, &ds, AugmentationKind::Identity, None).unwrap();
        assert_eq!(pairs, again);
        let unfrozen = Model::init(phi.spec.clone(), 3).unwrap();
        assert!(extract_pairs(&unfrozen, &ds, AugmentationKind::HFlip, None).is_err());
    }

    #[test]
    fn mixed_kinds_are_rejected() {
        let (phi, ds) = setup(5);
        let mut a = extract_pairs(&phi, &ds, AugmentationKind::HFlip, None).unwrap();
        let b = extract_pairs(&phi, &ds, AugmentationKind::VFlip, None).unwrap();
        assert!(a.iter().all(|p| p.kind == AugmentationKind::HFlip));
        a.push(b[0].clone());
        let om = build_omega(16, 1).unwrap();
        assert!(train_omega(&a, &b, om, &OmegaConfig::default()).is_err());
    }

    #[test]
    fn split_is_disjoint_80_20() {
        let pairs: Vec<_> = (0..100).map(|i| pair(i, vec![0.0], vec![0.0])).collect();
        let (tr, ev) = split_pairs(pairs);
        assert_eq!((tr.len(), ev.len()), (80, 20));
        assert!(tr.iter().all(|t| ev.iter().all(|e| e.id != t.id)));
    }

    #[test]
    fn exact_identity_scores_zero_and_eval_ignores_order() {
        let d = 4;
        let mut om = Model::zeros(NetworkSpec::omega(d).unwrap()).unwrap();
        // relu(z) = z for z >= 0, so [I; 0] then [I 0] is the identity there.
        let w1 = om.param_mut("0.weight").unwrap();
        for k in 0..d {
            w1.data_mut()[k * d + k] = 1.0;
        }
        let w2 = om.param_mut("2.weight").unwrap();
        for k in 0..d {
            w2.data_mut()[k * 2 * d + k] = 1.0;
        }
        let pairs: Vec<_> = (0..10)
            .map(|i| {
                let v: Vec<f32> = (0..d).map(|k| ((i * 7 + k * 3) % 5) as f32 * 0.3).collect();
                pair(i as u64, v.clone(), v)
            })
            .collect();
        assert_eq!(eval_omega(&om, &pairs).unwrap(), 0.0);

        let noisy: Vec<_> = pairs
            .iter()
            .map(|p| EmbeddingPair {
                target: p.target.map(|v| v * 1.1 + 0.37),
                ..p.clone()
            })
            .collect();
        let mut shuffled = noisy.clone();
        shuffled.reverse();
        shuffled.swap(1, 6);
        assert_eq!(eval_omega(&om, &noisy).unwrap(), eval_omega(&om, &shuffled).unwrap());
        assert!(eval_omega(&om, &[]).is_err());
    }

    #[test]
    fn variance_baseline_matches_direct_mean_predictor() {
        let pairs: Vec<_> = (0..6)
            .map(|i| pair(i, vec![0.0; 2], vec![i as f32, (i * i) as f32 * 0.5]))
            .collect();
        // Column means 2.5 and 55/12; squared deviations averaged over 12 entries.
        let m1 = 2.5f64;
        let m2 = (0..6).map(|i| (i * i) as f64 * 0.5).sum::<f64>() / 6.0;
        let direct: f64 = (0..6)
            .map(|i| (i as f64 - m1).powi(2) + ((i * i) as f64 * 0.5 - m2).powi(2))
            .sum::<f64>()
            / 12.0;
        assert!((variance_baseline(&pairs).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_leave_parameters_alone() {
        let (phi, ds) = setup(10);
        let pairs = extract_pairs(&phi, &ds, AugmentationKind::HFlip, None).unwrap();
        let (tr, ev) = split_pairs(pairs);
        let om = build_omega(16, 2).unwrap();
        let cfg = OmegaConfig {
            epochs: 0,
            ..OmegaConfig::default()
        };
        let st = train_omega(&tr, &ev, om.clone(), &cfg).unwrap();
        assert!(st.train_loss.is_empty() && st.eval_loss.is_empty());
        assert_eq!(st.omega.params(), om.params());
        assert!(st.omega.is_frozen());
    }

    #[test]
    fn training_beats_the_mean_predictor() {
        let (phi, ds) = setup(60);
        let pairs = extract_pairs(&phi, &ds, AugmentationKind::HFlip, None).unwrap();
        let (tr, ev) = split_pairs(pairs);
        let cfg = OmegaConfig {
            epochs: 30,
            batch: 16,
            ..OmegaConfig::default()
        };
        let st = train_omega(&tr, &ev, build_omega(16, 2).unwrap(), &cfg).unwrap();
        assert_eq!(st.train_loss.len(), 30);
        assert_eq!(st.eval_loss.len(), 30);
        assert!(st.eval_loss[29] < variance_baseline(&ev).unwrap());
        // Five-epoch moving average of the train loss never rises.
        let ma: Vec<f64> = st.train_loss.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
        assert!(ma.windows(2).all(|w| w[1] <= w[0]), "{ma:?}");
    }

    #[test]
    fn divergence_reports_last_good_model() {
        let pairs: Vec<_> = (0..8).map(|i| pair(i, vec![1e3; 2], vec![-1e3; 2])).collect();
        let cfg = OmegaConfig {
            sgd: SgdConfig::new(1e6, 0.9).unwrap(),
            ..OmegaConfig::default()
        };
        match train_omega(&pairs, &pairs, build_omega(2, 1).unwrap(), &cfg) {
            Err(Error::Diverged { last_good, .. }) => assert!(last_good.unwrap().is_frozen()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_omega_and_meter() {
        let om = Model::zeros(NetworkSpec::omega(3).unwrap()).unwrap();
        let mut m = FlopMeter::default();
        let z = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        let out = apply_omega(&om, &z, Some(&mut m)).unwrap();
        assert_eq!(out.shape(), z.shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(m.omega, 2 * count_flops(&om.spec, Pass::Forward).unwrap());
    }
}
