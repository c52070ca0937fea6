//! Pixel-space augmentations on `[C, H, W]` images.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_CROP_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentationKind {
    Identity,
    HFlip,
    VFlip,
    /// Counter-clockwise quarter turns, `1..=3`.
    Rotate90(u8),
    /// Zero-pad by `pad` on every side, then take an `H x W` window whose
    /// offset is drawn from `offset_seed`.
    Crop { pad: usize, offset_seed: u64 },
}

impl AugmentationKind {
    /// Every tag, identity first. Crop appears once with its default padding.
    pub fn all() -> [AugmentationKind; 7] {
        [
            Self::Identity,
            Self::HFlip,
            Self::VFlip,
            Self::Rotate90(1),
            Self::Rotate90(2),
            Self::Rotate90(3),
            Self::Crop {
                pad: DEFAULT_CROP_PAD,
                offset_seed: 0,
            },
        ]
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity)
    }

    pub fn name(&self) -> String {
        match self {
            Self::Identity => "identity".into(),
            Self::HFlip => "hflip".into(),
            Self::VFlip => "vflip".into(),
            Self::Rotate90(k) => format!("rot{}", 90 * *k as u32),
            Self::Crop { pad, .. } => format!("crop{pad}"),
        }
    }

    pub fn apply<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        apply_augmentation(image, *self)
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for AugmentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => Self::Identity,
            "hflip" => Self::HFlip,
            "vflip" => Self::VFlip,
            "rot90" => Self::Rotate90(1),
            "rot180" => Self::Rotate90(2),
            "rot270" => Self::Rotate90(3),
            _ => match s.strip_prefix("crop").map(str::parse::<usize>) {
                Some(Ok(pad)) => Self::Crop {
                    pad,
                    offset_seed: 0,
                },
                _ => return Err(Error::Invalid(format!("unknown augmentation `{s}`"))),
            },
        })
    }
}

/// A named augmentation setup for base training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugSetup {
    None,
    HFlip,
    HFlipVFlip,
}

impl AugSetup {
    pub const ALL: [AugSetup; 3] = [AugSetup::None, AugSetup::HFlip, AugSetup::HFlipVFlip];

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::HFlip => "hflip",
            Self::HFlipVFlip => "hflip+vflip",
        }
    }

    pub fn kinds(&self) -> Vec<AugmentationKind> {
        use AugmentationKind::*;
        match self {
            Self::None => vec![Identity],
            Self::HFlip => vec![Identity, HFlip],
            Self::HFlipVFlip => vec![Identity, HFlip, VFlip],
        }
    }

    /// Directory-safe form of the name.
    pub fn slug(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::HFlip => "hflip",
            Self::HFlipVFlip => "hflip-vflip",
        }
    }
}

impl fmt::Display for AugSetup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugSetup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "hflip" => Ok(Self::HFlip),
            "hflip+vflip" | "hflip-vflip" => Ok(Self::HFlipVFlip),
            _ => Err(Error::Invalid(format!(
                "unknown augmentation setup `{s}` (expected none, hflip or hflip+vflip)"
            ))),
        }
    }
}

/// Resolves a setup name to its ordered augmentation list.
pub fn enumerate_set(setup: &str) -> Result<Vec<AugmentationKind>> {
    Ok(setup.parse::<AugSetup>()?.kinds())
}

fn dims<T: Scalar>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim(format!("augmentation expects [C, H, W], got {s:?}"))),
    }
}

/// Applies `kind` to one image. Every result keeps the `[C, H, W]` shape.
pub fn apply_augmentation<T: Scalar>(image: &Tensor<T>, kind: AugmentationKind) -> Result<Tensor<T>> {
    let (c, h, w) = dims(image)?;
    let src = image.data();
    let remap = |f: &dyn Fn(usize, usize) -> (usize, usize)| -> Result<Tensor<T>> {
        let mut out = Vec::with_capacity(src.len());
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = f(y, x);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    };
    match kind {
        AugmentationKind::Identity => Ok(image.clone()),
        AugmentationKind::HFlip => remap(&|y, x| (y, w - 1 - x)),
        AugmentationKind::VFlip => remap(&|y, x| (h - 1 - y, x)),
        AugmentationKind::Rotate90(k) => {
            if h != w {
                return Err(Error::dim(format!("rotation needs a square image, got {h}x{w}")));
            }
            let n = h;
            match k % 4 {
                0 => Ok(image.clone()),
                1 => remap(&|y, x| (x, n - 1 - y)),
                2 => remap(&|y, x| (n - 1 - y, n - 1 - x)),
                _ => remap(&|y, x| (n - 1 - x, y)),
            }
        }
        AugmentationKind::Crop { pad, offset_seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(offset_seed);
            let oy = rng.gen_range(0..=2 * pad);
            let ox = rng.gen_range(0..=2 * pad);
            let mut out = vec![T::zero(); src.len()];
            for ch in 0..c {
                for y in 0..h {
                    // Padded row index y + oy maps to source row y + oy - pad.
                    let sy = (y + oy) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = (x + ox) as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
            }
            Tensor::new(vec![c, h, w], out)
        }
    }
}
