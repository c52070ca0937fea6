//! CIFAR binary records: label byte(s), then 1024 red, 1024 green and 1024
//! blue bytes, each plane row-major 32x32.

use std::path::Path;

use super::{Dataset, ImageSample, Split};
use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;

const SIDE: usize = 32;
const CHANNELS: usize = 3;
pub const CIFAR_PIXELS: usize = SIDE * SIDE * CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarLayout {
    /// One label byte per record, labels `< 10`.
    Cifar10,
    /// Coarse then fine label byte; `fine` selects which becomes the label.
    Cifar100 { fine: bool },
}

impl CifarLayout {
    pub fn label_bytes(&self) -> usize {
        match self {
            Self::Cifar10 => 1,
            Self::Cifar100 { .. } => 2,
        }
    }

    pub fn record_len(&self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 { fine: true } => 100,
            Self::Cifar100 { fine: false } => 20,
        }
    }
}

pub fn parse_cifar(bytes: &[u8], layout: CifarLayout, max_records: Option<usize>) -> Result<Dataset> {
    let rec = layout.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format(format!(
            "truncated CIFAR file: {} bytes is not a multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    let count = (bytes.len() / rec).min(max_records.unwrap_or(usize::MAX));
    let classes = layout.num_classes();
    let mut samples = Vec::with_capacity(count);
    for (i, r) in bytes.chunks_exact(rec).take(count).enumerate() {
        let label = match layout {
            CifarLayout::Cifar10 => r[0],
            CifarLayout::Cifar100 { fine } => {
                if r[0] as usize >= 20 {
                    return Err(Error::Format(format!(
                        "record {i}: coarse label {} out of range",
                        r[0]
                    )));
                }
                if fine {
                    r[1]
                } else {
                    r[0]
                }
            }
        } as usize;
        if label >= classes {
            return Err(Error::Format(format!(
                "record {i}: label {label} out of range for {classes} classes"
            )));
        }
        let pixels = r[layout.label_bytes()..]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        samples.push(ImageSample {
            pixels: Tensor::new(vec![CHANNELS, SIDE, SIDE], pixels)?,
            label,
            id: i as u64,
        });
    }
    Dataset::new(samples, Split::Train, classes)
}

/// Loads a CIFAR binary batch file. Ids are record positions; pixels are
/// scaled by 1/255.
pub fn load_cifar_binary(path: &Path, layout: CifarLayout, max_records: Option<usize>) -> Result<Dataset> {
    parse_cifar(&fsio::read(path)?, layout, max_records)
}

/// Encodes `[3, 32, 32]` samples with labels `< 256` in the CIFAR-10
/// layout, rounding each pixel to the nearest of 256 levels.
pub fn encode_cifar10(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(dataset.len() * CifarLayout::Cifar10.record_len());
    for s in &dataset.samples {
        if s.pixels.shape() != [CHANNELS, SIDE, SIDE] {
            return Err(Error::dim(format!(
                "CIFAR records are 3x32x32, sample {} is {:?}",
                s.id,
                s.pixels.shape()
            )));
        }
        let label = u8::try_from(s.label)
            .map_err(|_| Error::Format(format!("label {} does not fit a byte", s.label)))?;
        out.push(label);
        out.extend(s.pixels.data().iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

pub fn write_cifar10(dataset: &Dataset, path: &Path) -> Result<()> {
    fsio::write_atomic(path, &encode_cifar10(dataset)?)
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(fill, CIFAR_PIXELS));
        r
    }

    #[test]
    fn two_records() {
        let mut bytes = record(7, 255);
        bytes.extend(record(2, 0));
        assert_eq!(bytes.len(), 6146);
        let ds = parse_cifar(&bytes, CifarLayout::Cifar10, None).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.samples[0].label, 7);
        assert_eq!(ds.samples[0].pixels.data()[0], 1.0);
        assert_eq!(ds.samples[1].pixels.data()[3071], 0.0);
        assert_eq!(parse_cifar(&bytes, CifarLayout::Cifar10, Some(1)).unwrap().len(), 1);
    }

    #[test]
    fn planes_are_red_green_blue() {
        let mut r = vec![0u8];
        r.extend((0..CIFAR_PIXELS).map(|i| (i / 1024) as u8 * 100));
        let ds = parse_cifar(&r, CifarLayout::Cifar10, None).unwrap();
        let px = ds.samples[0].pixels.data();
        assert_eq!((px[0], px[1024], px[2048]), (0.0, 100.0 / 255.0, 200.0 / 255.0));
    }

    #[test]
    fn rejects_truncation_and_bad_labels() {
        let bytes = record(1, 0);
        assert!(matches!(
            parse_cifar(&bytes[..3000], CifarLayout::Cifar10, None),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            parse_cifar(&record(10, 0), CifarLayout::Cifar10, None),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn cifar100_reads_coarse_then_fine() {
        let mut r = vec![19u8, 87u8];
        r.extend(std::iter::repeat_n(3, CIFAR_PIXELS));
        let fine = parse_cifar(&r, CifarLayout::Cifar100 { fine: true }, None).unwrap();
        let coarse = parse_cifar(&r, CifarLayout::Cifar100 { fine: false }, None).unwrap();
        assert_eq!((fine.samples[0].label, coarse.samples[0].label), (87, 19));
        assert_eq!(fine.num_classes, 100);
        r[0] = 20;
        assert!(parse_cifar(&r, CifarLayout::Cifar100 { fine: true }, None).is_err());
        assert!(parse_cifar(&r[..3073], CifarLayout::Cifar100 { fine: true }, None).is_err());
    }

    #[test]
    fn write_then_load_reproduces_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let px: Vec<f32> = (0..CIFAR_PIXELS).map(|i| (i % 997) as f32 / 996.0).collect();
        let ds = Dataset::new(
            vec![ImageSample {
                pixels: Tensor::new(vec![3, 32, 32], px.clone()).unwrap(),
                label: 4,
                id: 0,
            }],
            Split::Train,
            10,
        )
        .unwrap();
        write_cifar10(&ds, &path).unwrap();
        let back = load_cifar_binary(&path, CifarLayout::Cifar10, None).unwrap();
        assert_eq!(back.samples[0].label, 4);
        for (a, b) in back.samples[0].pixels.data().iter().zip(&px) {
            assert_eq!(*a, quantize(*b) as f32 / 255.0);
        }
    }
}
