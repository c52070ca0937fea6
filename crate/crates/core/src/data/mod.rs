//! Labeled image datasets: containers, normalization, batching, and the
//! synthetic and CIFAR-binary sources.

mod cifar;
mod synthetic;

pub use cifar::{load_cifar_binary, parse_cifar, write_cifar10, CifarLayout, CIFAR_PIXELS};
pub use synthetic::{generate_synthetic, Jitter, ShapeKind, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `[C, H, W]`, in `[0, 1]` before normalization.
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub id: u64,
}

/// Per-channel statistics of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub const STD_FLOOR: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub split: Split,
    pub num_classes: usize,
    /// Statistics already applied to `samples`, if any.
    pub stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>, split: Split, num_classes: usize) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= num_classes) {
            return Err(Error::Invalid(format!(
                "sample {} has label {} but the dataset has {num_classes} classes",
                s.id, s.label
            )));
        }
        if let Some(first) = samples.first() {
            if let Some(s) = samples.iter().find(|s| s.pixels.shape() != first.pixels.shape()) {
                return Err(Error::dim(format!(
                    "sample {} has shape {:?}, expected {:?}",
                    s.id,
                    s.pixels.shape(),
                    first.pixels.shape()
                )));
            }
        }
        Ok(Self {
            samples,
            split,
            num_classes,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.pixels.shape())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Re-tags the class count, checking every label against it.
    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if let Some(s) = self.samples.iter().find(|s| s.label >= num_classes) {
            return Err(Error::Invalid(format!(
                "label {} of sample {} out of range for {num_classes} classes",
                s.label, s.id
            )));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Shifts every id by `offset`, e.g. to keep files loaded separately disjoint.
    pub fn with_id_offset(mut self, offset: u64) -> Self {
        for s in &mut self.samples {
            s.id += offset;
        }
        self
    }

    /// Splits into `(train, eval)`: per class, the first `train_per_class`
    /// samples in dataset order go to train and the rest to eval.
    pub fn split_per_class(self, train_per_class: usize) -> (Dataset, Dataset) {
        let mut seen = vec![0usize; self.num_classes];
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for s in self.samples {
            let n = &mut seen[s.label];
            *n += 1;
            if *n <= train_per_class {
                train.push(s);
            } else {
                eval.push(s);
            }
        }
        let mk = |samples, split| Dataset {
            samples,
            split,
            num_classes: self.num_classes,
            stats: self.stats.clone(),
        };
        (mk(train, Split::Train), mk(eval, Split::Eval))
    }

    /// Applies `(pixel - mean_c) / max(std_c, 1e-6)` per channel.
    pub fn normalize(&self, stats: &NormStats) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(ImageSample {
                    pixels: normalize_image(&s.pixels, stats)?,
                    label: s.label,
                    id: s.id,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            samples,
            split: self.split,
            num_classes: self.num_classes,
            stats: Some(stats.clone()),
        })
    }
}

pub fn normalize_image(image: &Tensor<f32>, stats: &NormStats) -> Result<Tensor<f32>> {
    let c = image.shape()[0];
    if image.rank() != 3 || c != stats.mean.len() || c != stats.std.len() {
        return Err(Error::dim(format!(
            "image {:?} does not match {}-channel statistics",
            image.shape(),
            stats.mean.len()
        )));
    }
    let plane = image.len() / c;
    let mut out = image.clone();
    for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let (m, s) = (stats.mean[ch], stats.std[ch].max(STD_FLOOR));
        for v in chunk {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

impl NormStats {
    /// Channel mean and population standard deviation over a training split.
    pub fn from_train(train: &Dataset) -> Result<Self> {
        if train.split != Split::Train {
            return Err(Error::Invalid(
                "normalization statistics must come from a train split".into(),
            ));
        }
        let shape = train
            .image_shape()
            .ok_or_else(|| Error::Empty("cannot compute statistics of an empty dataset".into()))?;
        let c = shape[0];
        let plane: usize = shape[1..].iter().product();
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for s in &train.samples {
            for (ch, chunk) in s.pixels.data().chunks(plane).enumerate() {
                for &v in chunk {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (train.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0)).sqrt() as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }
}

/// Shuffled minibatches of indices into a dataset of `len` samples. The
/// permutation depends only on `(seed, epoch)`; the last batch may be short.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Empty("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// An independent seed for the sub-task `stream` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}
