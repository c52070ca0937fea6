use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use embaug::config::ExperimentConfig;
use embaug::gradcheck::{op_suite, SUITE_TOLERANCE};
use embaug::{fsio, pipeline, Error};

#[derive(Parser, Debug)]
#[command(name = "embaug", version, about = "Embedding-space augmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set transfer.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (the `out` key).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed (the `seed` key); defaults to EMBAUG_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent runs (the `threads` key); defaults to EMBAUG_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the synthetic base and target datasets.
    GenData,
    /// Train the base networks for the configured setup and for `none`.
    TrainBase,
    /// Train one augmentation transformer per non-identity augmentation.
    TrainOmega,
    /// Train transfer heads for every configured scenario.
    Transfer,
    /// Predicted and measured training cost ratio.
    Cost,
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 100)]
        points: usize,
    },
    /// Aggregate metrics into curves, plots and a summary.
    Report,
    /// Every stage in order.
    Pipeline,
}

fn load_config(cli: &Cli) -> embaug::Result<ExperimentConfig> {
    let text = match &cli.config {
        Some(path) => String::from_utf8(fsio::read(path)?)
            .map_err(|_| Error::Invalid(format!("{} is not UTF-8", path.display())))?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(out) = &cli.out {
        overrides.push(format!("out = \"{}\"", out.display().to_string().replace('\\', "\\\\").replace('"', "\\\"")));
    }
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed = {seed}"));
    }
    if let Some(threads) = cli.threads {
        overrides.push(format!("threads = {threads}"));
    }
    ExperimentConfig::load(&text, &overrides, |k| std::env::var(k).ok())
}

fn run(cli: &Cli) -> embaug::Result<bool> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::GenData => {
            let d = pipeline::gen_data(&cfg)?;
            println!(
                "base {}+{} samples, target {}+{} samples in {}",
                d.base_train.len(),
                d.base_eval.len(),
                d.target_train.len(),
                d.target_eval.len(),
                cfg.out.join("data").display()
            );
        }
        Command::TrainBase => {
            for b in pipeline::train_bases(&cfg)? {
                println!("base {:<12} seed {:<4} top-1 {:.4}", b.setup, b.seed, b.final_top1);
            }
        }
        Command::TrainOmega => {
            for o in pipeline::train_omegas(&cfg)? {
                println!(
                    "omega {:<8} seed {:<4} eval mse {:.5} variance {:.5}",
                    o.kind, o.seed, o.eval_loss, o.variance_baseline
                );
            }
        }
        Command::Transfer => {
            for r in pipeline::transfers(&cfg)? {
                println!("transfer {:<12} seed {:<4} top-1 {:.4}", r.scenario, r.seed, r.eval_top1);
            }
        }
        Command::Cost => {
            let c = pipeline::cost(&cfg)?;
            let r = &c.report;
            println!("variants {} ({})", r.breakdown.n_variants(), c.augset);
            println!("predicted ratio {:.6}", r.predicted_ratio);
            println!("predicted ratio, augmentations only {:.6}", r.predicted_ratio_augmentations_only);
            match (r.measured_ratio, r.relative_error) {
                (Some(m), Some(e)) => println!("measured ratio {m:.6} (relative error {e:.3e})"),
                _ => println!("measured ratio unavailable: run `transfer` for pixel-pixel and pixel-embed first"),
            }
        }
        Command::Gradcheck { points } => {
            let mut ok = true;
            for c in op_suite(points, cfg.seed)? {
                println!(
                    "{:<13} points {:<4} failures {:<3} kinks {:<3} max rel error {:.3e}",
                    c.op, c.points, c.failures, c.kinks, c.max_rel_error
                );
                ok &= c.passed();
            }
            println!("{} at tolerance {SUITE_TOLERANCE:e}", if ok { "PASS" } else { "FAIL" });
            return Ok(ok);
        }
        Command::Report => print_summary(&pipeline::report(&cfg)?),
        Command::Pipeline => print_summary(&pipeline::run_all(&cfg)?),
    }
    Ok(true)
}

fn print_summary(s: &pipeline::Summary) {
    println!("{:<10} {:<12} {:>6} {:>8} {:>8} {:>8}", "stage", "row", "seeds", "median", "min", "max");
    for (stage, rows) in [("base", &s.base), ("transfer", &s.transfer)] {
        for r in rows {
            println!(
                "{stage:<10} {:<12} {:>6} {:>8.4} {:>8.4} {:>8.4}",
                r.name, r.seeds, r.median, r.min, r.max
            );
        }
    }
    for o in &s.omega {
        println!(
            "omega      {:<12} {:>6} eval mse {:.5} variance {:.5}",
            o.kind, o.seeds, o.median_eval_loss, o.median_variance_baseline
        );
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingInput(_) | Error::MissingModel(_) => 2,
        Error::Numeric(_) | Error::Diverged { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
