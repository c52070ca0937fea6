//! Analytic FLOP counts, runtime meters and the pixel-vs-embedding cost ratio.
//!
//! Convention: a multiply-add is 2 FLOPs, bias adds count once, relu, pool
//! and flatten cost one FLOP per input element, and a backward pass costs
//! twice its forward pass.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pass {
    Forward,
    Backward,
}

fn layer_flops(layer: &Layer, input: &[usize], output: &[usize]) -> u64 {
    let elems = |s: &[usize]| s.iter().product::<usize>() as u64;
    match *layer {
        Layer::Conv {
            in_channels,
            out_channels,
            kernel,
            ..
        } => {
            let sites = (output[1] * output[2]) as u64;
            let k = (kernel * kernel * in_channels * out_channels) as u64;
            2 * k * sites + out_channels as u64 * sites
        }
        Layer::Affine { inputs, outputs } => (2 * inputs * outputs + outputs) as u64,
        Layer::Relu | Layer::MaxPool2 | Layer::Flatten => elems(input),
    }
}

/// FLOPs of one per-sample pass through `spec`.
pub fn count_flops(spec: &NetworkSpec, pass: Pass) -> Result<u64> {
    let shapes = spec.shapes()?;
    let forward: u64 = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| layer_flops(l, &shapes[i], &shapes[i + 1]))
        .sum();
    Ok(match pass {
        Pass::Forward => forward,
        Pass::Backward => 2 * forward,
    })
}

/// Monotone FLOP counters by sub-network role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopMeter {
    pub phi: u64,
    pub psi_fwd: u64,
    pub psi_bwd: u64,
    pub omega: u64,
}

impl FlopMeter {
    pub fn total(&self) -> u64 {
        self.phi + self.psi_fwd + self.psi_bwd + self.omega
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

impl AddAssign for FlopMeter {
    fn add_assign(&mut self, o: Self) {
        self.phi += o.phi;
        self.psi_fwd += o.psi_fwd;
        self.psi_bwd += o.psi_bwd;
        self.omega += o.omega;
    }
}

/// Per-sample costs of one training variant set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub c_phi: u64,
    pub c_psi_fwd: u64,
    pub c_psi_bwd: u64,
    /// Ω cost of each training variant; 0 for the identity.
    pub c_omega: Vec<u64>,
}

impl CostBreakdown {
    /// Breakdown with `n_variants` variants, the first being the identity and
    /// each of the others costing `c_omega`.
    pub fn uniform(c_phi: u64, c_psi_fwd: u64, c_psi_bwd: u64, c_omega: u64, n_variants: usize) -> Result<Self> {
        if n_variants == 0 {
            return Err(Error::Invalid("at least one training variant is required".into()));
        }
        let mut omegas = vec![c_omega; n_variants];
        omegas[0] = 0;
        Ok(Self {
            c_phi,
            c_psi_fwd,
            c_psi_bwd,
            c_omega: omegas,
        })
    }

    /// Costs of the default networks: `phi`, a classifier `psi` and the
    /// transformers for `variants` (identity first).
    pub fn from_specs(phi: &NetworkSpec, psi: &NetworkSpec, omega: &NetworkSpec, variants: usize) -> Result<Self> {
        Self::uniform(
            count_flops(phi, Pass::Forward)?,
            count_flops(psi, Pass::Forward)?,
            count_flops(psi, Pass::Backward)?,
            count_flops(omega, Pass::Forward)?,
            variants,
        )
    }

    /// N, the number of training variants per sample.
    pub fn n_variants(&self) -> usize {
        self.c_omega.len()
    }

    /// Per-sample cost of training with pixel-space variants.
    pub fn pixel_cost(&self) -> u64 {
        self.n_variants() as u64 * (self.c_phi + self.c_psi_fwd + self.c_psi_bwd)
    }

    /// Per-sample cost of training with embedding-space variants.
    pub fn embed_cost(&self) -> u64 {
        let n = self.n_variants() as u64;
        self.c_phi + n * (self.c_psi_fwd + self.c_psi_bwd) + self.c_omega.iter().sum::<u64>()
    }

    /// Pixel-to-embedding cost ratio as an exact fraction.
    pub fn ratio_fraction(&self) -> Result<(u64, u64)> {
        let den = self.embed_cost();
        if den == 0 {
            return Err(Error::Invalid("embedding-space cost is zero".into()));
        }
        Ok((self.pixel_cost(), den))
    }

    pub fn predicted_ratio(&self) -> Result<f64> {
        let (num, den) = self.ratio_fraction()?;
        Ok(num as f64 / den as f64)
    }

    /// The ratio when N counts only the augmentations: the identity variant
    /// is dropped from both the pixel and the embedding side.
    pub fn ratio_fraction_augmentations_only(&self) -> Result<(u64, u64)> {
        let n = self.n_variants() as u64 - 1;
        let num = n * (self.c_phi + self.c_psi_fwd + self.c_psi_bwd);
        let den = self.c_phi + n * (self.c_psi_fwd + self.c_psi_bwd) + self.c_omega[1..].iter().sum::<u64>();
        if den == 0 {
            return Err(Error::Invalid("embedding-space cost is zero".into()));
        }
        Ok((num, den))
    }

    pub fn predicted_ratio_augmentations_only(&self) -> Result<f64> {
        let (num, den) = self.ratio_fraction_augmentations_only()?;
        Ok(num as f64 / den as f64)
    }
}

/// `total(pixel) / total(embed)`.
pub fn measured_ratio(pixel: &FlopMeter, embed: &FlopMeter) -> Result<f64> {
    measured_fraction(pixel, embed).map(|(n, d)| n as f64 / d as f64)
}

pub fn measured_fraction(pixel: &FlopMeter, embed: &FlopMeter) -> Result<(u64, u64)> {
    if embed.total() == 0 {
        return Err(Error::Invalid("embedding-space meter is zero".into()));
    }
    Ok((pixel.total(), embed.total()))
}

/// Whether two fractions are equal, compared exactly.
pub fn fractions_equal((a, b): (u64, u64), (c, d): (u64, u64)) -> bool {
    a as u128 * d as u128 == c as u128 * b as u128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub breakdown: CostBreakdown,
    pub predicted_ratio: f64,
    pub predicted_ratio_augmentations_only: f64,
    pub measured_ratio: Option<f64>,
    pub relative_error: Option<f64>,
    pub pixel_meter: Option<FlopMeter>,
    pub embed_meter: Option<FlopMeter>,
}

impl CostReport {
    pub fn new(breakdown: CostBreakdown, measured: Option<(FlopMeter, FlopMeter)>) -> Result<Self> {
        let predicted = breakdown.predicted_ratio()?;
        let alt = breakdown.predicted_ratio_augmentations_only()?;
        let measured_ratio = measured.map(|(p, e)| measured_ratio(&p, &e)).transpose()?;
        Ok(Self {
            predicted_ratio: predicted,
            predicted_ratio_augmentations_only: alt,
            relative_error: measured_ratio.map(|m| (m - predicted).abs() / predicted),
            measured_ratio,
            pixel_meter: measured.map(|m| m.0),
            embed_meter: measured.map(|m| m.1),
            breakdown,
        })
    }
}
