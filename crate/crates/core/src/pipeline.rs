//! End-to-end experiment stages over an output directory.
//!
//! Each stage reads what earlier stages wrote, so stages can run as separate
//! commands. Files land under `out`:
//!
//! ```text
//! data/{base,target}_{train,eval}.bin       CIFAR-10 layout
//! seed-S/base-SETUP/{phi,psi}.ckpt, history.csv
//! seed-S/omega-KIND.ckpt, omega-KIND.csv
//! seed-S/transfer-SCENARIO.csv, psi-SCENARIO.ckpt
//! cost.json
//! report/{curves.csv, transfer.svg, omega.svg, summary.json}
//! ```

use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugSetup, AugmentationKind};
use crate::config::ExperimentConfig;
use crate::cost::{CostBreakdown, CostReport, FlopMeter};
use crate::data::{derive_seed, generate_synthetic, load_cifar_binary, CifarLayout, Dataset, NormStats, Split, SyntheticSpec};
use crate::data::write_cifar10;
use crate::error::{Error, Result};
use crate::fsio;
use crate::nn::{load_checkpoint_as, save_checkpoint, Model, NetworkSpec};
use crate::omega::{build_omega, extract_pairs, split_pairs, train_omega, variance_baseline, OmegaConfig};
use crate::transfer::{
    median, reference, run_transfer, seed_sweep, train_base, BaseEpoch, MetricsRecord, ReferenceRow, ScenarioKind,
    SweepRow, TrainConfig, REFERENCE_ACCURACY,
};

const STREAM_BASE_DATA: u64 = 5;
const STREAM_TARGET_DATA: u64 = 7;
const STREAM_OMEGA_INIT: u64 = 8;
const STREAM_OMEGA_BATCHES: u64 = 9;

/// Paths of every artifact under an output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

fn file_slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self, part: &str) -> PathBuf {
        self.root.join("data").join(format!("{part}.bin"))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    fn base_dir(&self, seed: u64, setup: AugSetup) -> PathBuf {
        self.seed_dir(seed).join(format!("base-{}", setup.slug()))
    }

    pub fn phi(&self, seed: u64, setup: AugSetup) -> PathBuf {
        self.base_dir(seed, setup).join("phi.ckpt")
    }

    pub fn base_psi(&self, seed: u64, setup: AugSetup) -> PathBuf {
        self.base_dir(seed, setup).join("psi.ckpt")
    }

    pub fn base_history(&self, seed: u64, setup: AugSetup) -> PathBuf {
        self.base_dir(seed, setup).join("history.csv")
    }

    pub fn omega(&self, seed: u64, kind: AugmentationKind) -> PathBuf {
        self.seed_dir(seed).join(format!("omega-{}.ckpt", file_slug(&kind.name())))
    }

    pub fn omega_history(&self, seed: u64, kind: AugmentationKind) -> PathBuf {
        self.seed_dir(seed).join(format!("omega-{}.csv", file_slug(&kind.name())))
    }

    pub fn metrics(&self, seed: u64, scenario: ScenarioKind) -> PathBuf {
        self.seed_dir(seed).join(format!("transfer-{}.csv", scenario.name()))
    }

    pub fn transfer_psi(&self, seed: u64, scenario: ScenarioKind) -> PathBuf {
        self.seed_dir(seed).join(format!("psi-{}.ckpt", scenario.name()))
    }

    pub fn cost(&self) -> PathBuf {
        self.root.join("cost.json")
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.root.join("report").join(file)
    }
}

/// Raw (unnormalized) synthetic splits.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub base_train: Dataset,
    pub base_eval: Dataset,
    pub target_train: Dataset,
    pub target_eval: Dataset,
}

impl DataSplits {
    const PARTS: [&'static str; 4] = ["base_train", "base_eval", "target_train", "target_eval"];

    fn parts(&self) -> [&Dataset; 4] {
        [&self.base_train, &self.base_eval, &self.target_train, &self.target_eval]
    }

    /// Every split normalized with the base training split's statistics.
    pub fn normalized(&self) -> Result<DataSplits> {
        let stats = NormStats::from_train(&self.base_train)?;
        Ok(DataSplits {
            base_train: self.base_train.normalize(&stats)?,
            base_eval: self.base_eval.normalize(&stats)?,
            target_train: self.target_train.normalize(&stats)?,
            target_eval: self.target_eval.normalize(&stats)?,
        })
    }
}

/// Generates the base and target tasks from the data seed. Eval ids follow
/// the train ids so every sample id is unique within a task.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<DataSplits> {
    let d = &cfg.data;
    let task = |shapes: &[_], train: usize, eval: usize, stream| -> Result<(Dataset, Dataset)> {
        let spec = SyntheticSpec {
            shapes: shapes.to_vec(),
            channels: 3,
            size: d.image_size,
            samples_per_class: train + eval,
            seed: derive_seed(d.seed, stream),
            jitter: d.jitter.clone(),
        };
        let (tr, ev) = generate_synthetic(&spec)?.split_per_class(train);
        Ok((renumber(tr, 0), renumber(ev, (train * shapes.len()) as u64)))
    };
    let (base_train, base_eval) = task(&d.base_shapes, d.base_train_per_class, d.base_eval_per_class, STREAM_BASE_DATA)?;
    let (target_train, target_eval) =
        task(&d.target_shapes, d.target_train_per_class, d.target_eval_per_class, STREAM_TARGET_DATA)?;
    Ok(DataSplits {
        base_train,
        base_eval,
        target_train,
        target_eval,
    })
}

/// Ids become `offset + position`, matching what a file reload produces.
fn renumber(mut d: Dataset, offset: u64) -> Dataset {
    for (i, s) in d.samples.iter_mut().enumerate() {
        s.id = offset + i as u64;
    }
    d
}

/// Writes the four splits as CIFAR-10 binary files.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<DataSplits> {
    let splits = generate_data(cfg)?;
    let layout = Layout::new(&cfg.out);
    for (part, d) in DataSplits::PARTS.iter().zip(splits.parts()) {
        write_cifar10(d, &layout.data(part))?;
        info!("wrote {} samples to {}", d.len(), layout.data(part).display());
    }
    Ok(splits)
}

/// Reads the splits written by [`gen_data`] and normalizes them.
pub fn load_data(cfg: &ExperimentConfig) -> Result<DataSplits> {
    let layout = Layout::new(&cfg.out);
    let load = |part: &str, classes: usize, split: Split, offset: u64| -> Result<Dataset> {
        Ok(load_cifar_binary(&layout.data(part), CifarLayout::Cifar10, None)?
            .with_num_classes(classes)?
            .with_split(split)
            .with_id_offset(offset))
    };
    let (bc, tc) = (cfg.data.base_shapes.len(), cfg.data.target_shapes.len());
    let base_train = load("base_train", bc, Split::Train, 0)?;
    let base_eval = load("base_eval", bc, Split::Eval, base_train.len() as u64)?;
    let target_train = load("target_train", tc, Split::Train, 0)?;
    let target_eval = load("target_eval", tc, Split::Eval, target_train.len() as u64)?;
    DataSplits {
        base_train,
        base_eval,
        target_train,
        target_eval,
    }
    .normalized()
}

pub fn phi_spec(cfg: &ExperimentConfig) -> Result<NetworkSpec> {
    NetworkSpec::phi([3, cfg.data.image_size, cfg.data.image_size], &cfg.phi_channels)
}

/// Setups whose bases the scenarios need: the configured set and `none`.
pub fn base_setups(cfg: &ExperimentConfig) -> Vec<AugSetup> {
    let mut v = vec![cfg.augset];
    if cfg.augset != AugSetup::None {
        v.push(AugSetup::None);
    }
    v
}

fn csv_bytes<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Invalid(format!("csv buffer: {e}")))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    fsio::write_atomic(path, &csv_bytes(rows)?)
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let bytes = fsio::read(path)?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<std::result::Result<Vec<R>, _>>()
        .map_err(Error::from)
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fsio::write_atomic(path, &bytes)
}

/// On divergence, saves the last good model next to `path` before passing
/// the error on.
fn salvage(err: Error, path: &Path) -> Error {
    if let Error::Diverged {
        last_good: Some(model), ..
    } = &err
    {
        let mut name = path.file_stem().unwrap_or_default().to_os_string();
        name.push(".last-good.ckpt");
        let target = path.with_file_name(name);
        match save_checkpoint(model, &target) {
            Ok(()) => info!("saved last good model to {}", target.display()),
            Err(e) => log::warn!("could not save last good model: {e}"),
        }
    }
    err
}

fn pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

/// Runs `f` for every item on the configured pool. Results keep item order.
fn for_each<I: Sync, O: Send>(cfg: &ExperimentConfig, items: &[I], f: impl Fn(&I) -> Result<O> + Sync + Send) -> Result<Vec<O>> {
    pool(cfg)?.install(|| items.par_iter().map(f).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseSummary {
    pub setup: String,
    pub seed: u64,
    pub final_top1: f64,
}

pub fn train_bases(cfg: &ExperimentConfig) -> Result<Vec<BaseSummary>> {
    let data = load_data(cfg)?;
    let layout = Layout::new(&cfg.out);
    let spec = phi_spec(cfg)?;
    let jobs: Vec<(u64, AugSetup)> = cfg
        .run_seeds()
        .into_iter()
        .flat_map(|s| base_setups(cfg).into_iter().map(move |a| (s, a)))
        .collect();
    for_each(cfg, &jobs, |&(seed, setup)| {
        let tc = TrainConfig { seed, ..cfg.base };
        let run = train_base(setup, &spec, &data.base_train, &data.base_eval, &tc)
            .map_err(|e| salvage(e, &layout.phi(seed, setup)))?;
        save_checkpoint(&run.phi, &layout.phi(seed, setup))?;
        save_checkpoint(&run.psi, &layout.base_psi(seed, setup))?;
        write_csv(&layout.base_history(seed, setup), &run.history)?;
        info!("base {} seed {seed}: top-1 {:.4}", setup.name(), run.final_accuracy());
        Ok(BaseSummary {
            setup: setup.name().into(),
            seed,
            final_top1: run.final_accuracy(),
        })
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaEpoch {
    pub kind: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub variance_baseline: f64,
}

/// Extracts pairs with `phi` on `data`, splits them and trains one Ω with
/// initialization and batch order derived from the run seed.
pub fn fit_omega(
    phi: &Model,
    data: &Dataset,
    kind: AugmentationKind,
    cfg: &OmegaConfig,
    seed: u64,
) -> Result<(Model, Vec<OmegaEpoch>)> {
    let (train, eval) = split_pairs(extract_pairs(phi, data, kind, None)?);
    let baseline = variance_baseline(&eval)?;
    let omega = build_omega(phi.spec.output_len()?, derive_seed(seed, STREAM_OMEGA_INIT))?;
    let oc = OmegaConfig {
        seed: derive_seed(seed, STREAM_OMEGA_BATCHES),
        ..*cfg
    };
    let state = train_omega(&train, &eval, omega, &oc)?;
    let history = state
        .train_loss
        .iter()
        .zip(&state.eval_loss)
        .enumerate()
        .map(|(i, (&t, &e))| OmegaEpoch {
            kind: kind.name(),
            seed,
            epoch: i + 1,
            train_loss: t,
            eval_loss: e,
            variance_baseline: baseline,
        })
        .collect();
    Ok((state.omega, history))
}

pub fn train_omegas(cfg: &ExperimentConfig) -> Result<Vec<OmegaEpoch>> {
    let data = load_data(cfg)?;
    let layout = Layout::new(&cfg.out);
    let spec = phi_spec(cfg)?;
    let jobs: Vec<(u64, AugmentationKind)> = cfg
        .run_seeds()
        .into_iter()
        .flat_map(|s| cfg.augset.kinds().into_iter().filter(|k| !k.is_identity()).map(move |k| (s, k)))
        .collect();
    let finals = for_each(cfg, &jobs, |&(seed, kind)| {
        let phi = load_checkpoint_as(&layout.phi(seed, cfg.augset), &spec)?;
        let path = layout.omega(seed, kind);
        let (omega, history) =
            fit_omega(&phi, &data.base_train, kind, &cfg.omega, seed).map_err(|e| salvage(e, &path))?;
        save_checkpoint(&omega, &path)?;
        write_csv(&layout.omega_history(seed, kind), &history)?;
        let last = history.last().cloned().ok_or_else(|| Error::Empty("omega trained for zero epochs".into()))?;
        info!(
            "omega {kind} seed {seed}: eval mse {:.4} (variance {:.4})",
            last.eval_loss, last.variance_baseline
        );
        Ok(last)
    })?;
    Ok(finals)
}

fn load_omegas(cfg: &ExperimentConfig, layout: &Layout, seed: u64, dim: usize) -> Result<Vec<Model>> {
    let spec = NetworkSpec::omega(dim)?;
    cfg.augset
        .kinds()
        .into_iter()
        .filter(|k| !k.is_identity())
        .map(|k| {
            load_checkpoint_as(&layout.omega(seed, k), &spec).map_err(|e| match e {
                Error::MissingInput(p) => Error::MissingModel(format!("augmentation transformer {}", p.display())),
                other => other,
            })
        })
        .collect()
}

pub fn transfers(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    if cfg.augset == AugSetup::None && cfg.scenarios.iter().any(|s| s.augmented_base()) {
        return Err(Error::Invalid(
            "augmented scenarios need an augmentation set other than `none`".into(),
        ));
    }
    let data = load_data(cfg)?;
    let layout = Layout::new(&cfg.out);
    let spec = phi_spec(cfg)?;
    let dim = spec.output_len()?;
    let jobs: Vec<(u64, ScenarioKind)> = cfg
        .run_seeds()
        .into_iter()
        .flat_map(|s| cfg.scenarios.iter().map(move |&k| (s, k)))
        .collect();
    let finals = for_each(cfg, &jobs, |&(seed, scenario)| {
        let setup = if scenario.augmented_base() { cfg.augset } else { AugSetup::None };
        let phi = load_checkpoint_as(&layout.phi(seed, setup), &spec).map_err(|e| match e {
            Error::MissingInput(p) => Error::MissingModel(format!("feature generator {}", p.display())),
            other => other,
        })?;
        let omegas = if scenario == ScenarioKind::PixelEmbed {
            load_omegas(cfg, &layout, seed, dim)?
        } else {
            Vec::new()
        };
        let tc = TrainConfig { seed, ..cfg.transfer };
        let run = run_transfer(scenario, cfg.augset, &phi, &omegas, &data.target_train, &data.target_eval, &tc)?;
        write_csv(&layout.metrics(seed, scenario), &run.records)?;
        save_checkpoint(&run.psi, &layout.transfer_psi(seed, scenario))?;
        info!("transfer {scenario} seed {seed}: top-1 {:.4}", run.final_accuracy());
        run.records.last().cloned().ok_or_else(|| Error::Empty("transfer trained for zero epochs".into()))
    })?;
    Ok(finals)
}

fn meter_of(r: &MetricsRecord) -> FlopMeter {
    FlopMeter {
        phi: r.flops_phi,
        psi_fwd: r.flops_psi_fwd,
        psi_bwd: r.flops_psi_bwd,
        omega: r.flops_omega,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub augset: String,
    pub augmentations_only: bool,
    /// The ratio under the configured reading of the variant count.
    pub ratio: f64,
    pub report: CostReport,
}

/// Predicted cost ratio from the network specs, plus the measured ratio
/// from the first seed's pixel-pixel and pixel-embed metrics when present.
pub fn cost(cfg: &ExperimentConfig) -> Result<CostSummary> {
    let layout = Layout::new(&cfg.out);
    let phi = phi_spec(cfg)?;
    let dim = phi.output_len()?;
    let psi = NetworkSpec::psi_transfer(dim, cfg.data.target_shapes.len())?;
    let breakdown = CostBreakdown::from_specs(&phi, &psi, &NetworkSpec::omega(dim)?, cfg.augset.kinds().len())?;
    let seed = cfg.run_seeds()[0];
    let last = |s| -> Result<Option<FlopMeter>> {
        match read_csv::<MetricsRecord>(&layout.metrics(seed, s)) {
            Ok(rows) => Ok(rows.last().map(meter_of)),
            Err(Error::MissingInput(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let measured = match (last(ScenarioKind::PixelPixel)?, last(ScenarioKind::PixelEmbed)?) {
        (Some(p), Some(e)) => Some((p, e)),
        _ => None,
    };
    let report = CostReport::new(breakdown, measured)?;
    let summary = CostSummary {
        augset: cfg.augset.name().into(),
        augmentations_only: cfg.augmentations_only,
        ratio: if cfg.augmentations_only {
            report.predicted_ratio_augmentations_only
        } else {
            report.predicted_ratio
        },
        report,
    };
    write_json(&layout.cost(), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalRow {
    pub name: String,
    pub seeds: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Published full-scale percentages for the same row, if any.
    pub reference: Option<ReferenceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaFinal {
    pub kind: String,
    pub seeds: usize,
    pub median_eval_loss: f64,
    pub median_variance_baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub base: Vec<FinalRow>,
    pub omega: Vec<OmegaFinal>,
    pub transfer: Vec<FinalRow>,
    pub published: Vec<ReferenceRow>,
}

fn final_row(name: &str, stage: &str, values: &[f64]) -> FinalRow {
    FinalRow {
        name: name.into(),
        seeds: values.len(),
        median: median(values),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        reference: reference(stage, name).copied(),
    }
}

fn optional<R>(r: Result<Vec<R>>) -> Result<Option<Vec<R>>> {
    match r {
        Err(Error::MissingInput(_)) => Ok(None),
        other => other.map(Some),
    }
}

/// Aggregates whatever per-seed artifacts exist into curves, plots and a
/// summary. Transfer metrics are required; base and Ω histories are optional.
pub fn report(cfg: &ExperimentConfig) -> Result<Summary> {
    let layout = Layout::new(&cfg.out);
    let seeds = cfg.run_seeds();

    let mut base = Vec::new();
    for setup in base_setups(cfg) {
        let mut finals = Vec::new();
        for &s in &seeds {
            if let Some(rows) = optional(read_csv::<BaseEpoch>(&layout.base_history(s, setup)))? {
                finals.extend(rows.last().map(|r| r.eval_top1));
            }
        }
        if !finals.is_empty() {
            base.push(final_row(setup.name(), "base", &finals));
        }
    }

    let mut omega = Vec::new();
    let mut omega_curves = Vec::new();
    for kind in cfg.augset.kinds().into_iter().filter(|k| !k.is_identity()) {
        let mut per_seed = Vec::new();
        for &s in &seeds {
            if let Some(rows) = optional(read_csv::<OmegaEpoch>(&layout.omega_history(s, kind)))? {
                per_seed.push(rows);
            }
        }
        let Some(epochs) = per_seed.iter().map(Vec::len).min().filter(|&e| e > 0) else {
            continue;
        };
        let last: Vec<&OmegaEpoch> = per_seed.iter().map(|r| &r[r.len() - 1]).collect();
        omega.push(OmegaFinal {
            kind: kind.name(),
            seeds: per_seed.len(),
            median_eval_loss: median(&last.iter().map(|r| r.eval_loss).collect::<Vec<_>>()),
            median_variance_baseline: median(&last.iter().map(|r| r.variance_baseline).collect::<Vec<_>>()),
        });
        for (label, pick) in [("train", 0), ("eval", 1)] {
            let points = (0..epochs)
                .map(|e| {
                    let v: Vec<f64> = per_seed
                        .iter()
                        .map(|r| if pick == 0 { r[e].train_loss } else { r[e].eval_loss })
                        .collect();
                    ((e + 1) as f64, median(&v))
                })
                .collect();
            omega_curves.push(Series {
                name: format!("{kind} {label}"),
                points,
                band: None,
            });
        }
    }

    let mut records = Vec::new();
    for &s in &seeds {
        for &sc in &cfg.scenarios {
            records.extend(read_csv::<MetricsRecord>(&layout.metrics(s, sc))?);
        }
    }
    let sweep = seed_sweep(&records)?;
    write_csv(&layout.report("curves.csv"), &sweep)?;
    let mut transfer = Vec::new();
    let mut curves = Vec::new();
    for sc in &cfg.scenarios {
        let rows: Vec<&SweepRow> = sweep.iter().filter(|r| r.scenario == sc.name()).collect();
        let finals: Vec<f64> = records
            .iter()
            .filter(|r| r.scenario == sc.name() && Some(r.epoch) == rows.last().map(|l| l.epoch))
            .map(|r| r.eval_top1)
            .collect();
        transfer.push(final_row(sc.name(), "transfer", &finals));
        curves.push(Series {
            name: sc.name().into(),
            points: rows.iter().map(|r| (r.epoch as f64, r.median)).collect(),
            band: Some(rows.iter().map(|r| (r.min, r.max)).collect()),
        });
    }
    fsio::write_atomic(
        &layout.report("transfer.svg"),
        line_chart("Transfer eval top-1 (median, min-max over seeds)", "epoch", "top-1", &curves).as_bytes(),
    )?;
    if !omega_curves.is_empty() {
        fsio::write_atomic(
            &layout.report("omega.svg"),
            line_chart("Augmentation transformer MSE (median over seeds)", "epoch", "MSE", &omega_curves).as_bytes(),
        )?;
    }

    let summary = Summary {
        seeds,
        base,
        omega,
        transfer,
        published: REFERENCE_ACCURACY.to_vec(),
    };
    write_json(&layout.report("summary.json"), &summary)?;
    Ok(summary)
}

/// Every stage in order: data, bases, transformers, transfers, cost, report.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Summary> {
    write_json(&cfg.out.join("config.json"), cfg)?;
    gen_data(cfg)?;
    train_bases(cfg)?;
    train_omegas(cfg)?;
    transfers(cfg)?;
    cost(cfg)?;
    report(cfg)
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Optional `(low, high)` per point, drawn as a shaded band.
    pub band: Option<Vec<(f64, f64)>>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// A minimal standalone SVG line chart.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (w, h, ml, mr, mt, mb) = (720.0, 440.0, 64.0, 170.0, 40.0, 48.0);
    let ys = series.iter().flat_map(|s| {
        s.points
            .iter()
            .map(|p| p.1)
            .chain(s.band.iter().flatten().flat_map(|b| [b.0, b.1]))
    });
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let x0 = if x0.is_finite() { x0 } else { 0.0 };
    if x1.is_nan() || x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        (w - mr + ml) / 2.0,
        escape(title)
    );
    s += &format!(
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr
    );
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        s += &format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{y:.3}</text>\n<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{x:.0}</text>\n",
            ml - 6.0,
            py(y) + 4.0,
            px(x),
            h - mb + 16.0
        );
    }
    s += &format!(
        "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{}</text>\n",
        (w - mr + ml) / 2.0,
        h - 10.0,
        escape(xlabel),
        (h - mb + mt) / 2.0,
        (h - mb + mt) / 2.0,
        escape(ylabel)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(band) = &ser.band {
            let upper = ser.points.iter().zip(band).map(|(p, b)| format!("{:.1},{:.1}", px(p.0), py(b.1)));
            let lower = ser.points.iter().zip(band).rev().map(|(p, b)| format!("{:.1},{:.1}", px(p.0), py(b.0)));
            let pts: Vec<String> = upper.chain(lower).collect();
            s += &format!("<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n", pts.join(" "));
        }
        let pts: Vec<String> = ser.points.iter().map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1))).collect();
        s += &format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        );
        let ly = mt + 10.0 + 18.0 * i as f64;
        s += &format!(
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{2}\" y=\"{3}\">{4}</text>\n",
            w - mr + 12.0,
            w - mr + 32.0,
            w - mr + 38.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s += "</svg>\n";
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
