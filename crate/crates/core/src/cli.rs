//! Command implementations behind the `dreg` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::config::{EvalSection, GenSection, NoiseSection, RunConfig, Source, TheorySection, TrainSection};
use crate::error::{Error, Result};
use crate::metrics::{ece, full_report, risk_coverage, risk_coverage_csv, PredictionSet};
use crate::model::{MlpParams, ModelConfig};
use crate::synthdata::{
    inject_label_noise, load_csv, sample_contaminated_gmm, sample_held_out_blobs, save_csv, split, HeldOutBlobsConfig,
    LabeledDataset, SynthConfig,
};
use crate::theory::{calibration_curve, theorem_check, CheckOptions, TheoryParams};
use crate::trainer::{evaluate, train, TrainConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Parser)]
#[command(name = "dreg", version, about = "Confidence calibration experiments with dynamic regularization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed of the command's config section.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic dataset and split it into train/val/test CSVs.
    Gen(CommonArgs),
    /// Relabel a fraction of a dataset uniformly at random.
    Noise(CommonArgs),
    /// Train an MLP and write its parameters and a training report.
    Train(CommonArgs),
    /// Compute calibration and selective-prediction metrics.
    Eval(CommonArgs),
    /// Compare the smoothed and outlier-aware linear estimators on a grid.
    Theory {
        #[command(flatten)]
        common: CommonArgs,
        /// Worker threads for independent grid cells.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

/// Runs a parsed command and returns its exit code, reporting errors and
/// warnings on stderr.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Gen(a) => with_section(&a, |c| c.gen.take(), "gen").and_then(|(s, a)| cmd_gen(s, &a)),
        Command::Noise(a) => with_section(&a, |c| c.noise.take(), "noise").and_then(|(s, a)| cmd_noise(s, &a)),
        Command::Train(a) => with_section(&a, |c| c.train.take(), "train").and_then(|(s, a)| cmd_train(s, &a)),
        Command::Eval(a) => with_section(&a, |c| c.eval.take(), "eval").and_then(|(s, a)| cmd_eval(s, &a)),
        Command::Theory { common, parallel } => {
            with_section(&common, |c| c.theory.take(), "theory").and_then(|(s, a)| cmd_theory(s, &a, parallel))
        }
    };
    match result {
        Ok(warnings) => {
            for w in warnings {
                eprintln!("warning: {w}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn with_section<S>(
    args: &CommonArgs,
    take: impl FnOnce(&mut RunConfig) -> Option<S>,
    name: &str,
) -> Result<(S, CommonArgs)> {
    let mut cfg = RunConfig::load(&args.config)?;
    let section = take(&mut cfg).ok_or_else(|| Error::config(format!("config has no [{name}] section")))?;
    Ok((section, args.clone()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(e.to_string()))?;
    text.push('\n');
    write(path, &text)
}

fn write_resolved(out: &Path, cfg: RunConfig) -> Result<()> {
    write(&out.join(RESOLVED_CONFIG), &cfg.to_toml()?)
}

#[derive(Serialize)]
struct SplitSummary {
    n: usize,
    outliers: usize,
}

impl SplitSummary {
    fn of(ds: &LabeledDataset) -> Self {
        Self {
            n: ds.len(),
            outliers: ds.outlier_count(),
        }
    }
}

pub fn cmd_gen(mut s: GenSection, args: &CommonArgs) -> Result<Vec<String>> {
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    let mut warnings = Vec::new();
    let full = match s.source {
        Source::Gmm => {
            let w_star = s
                .w_star
                .clone()
                .ok_or_else(|| Error::config("source = \"gmm\" requires the key `w_star`"))?;
            if s.centers.is_some() || !s.held_out_centers.is_empty() {
                warnings.push("source = \"gmm\" ignores blob centers".to_string());
            }
            sample_contaminated_gmm(&SynthConfig {
                n: s.n,
                w_star,
                eta: s.eta,
                seed: s.seed,
            })?
        }
        Source::Blobs => {
            let centers = s
                .centers
                .clone()
                .ok_or_else(|| Error::config("source = \"blobs\" requires the key `centers`"))?;
            if s.w_star.is_some() {
                warnings.push("source = \"blobs\" ignores `w_star`".to_string());
            }
            let blobs = sample_held_out_blobs(&HeldOutBlobsConfig {
                kept_centers: centers,
                held_out_centers: s.held_out_centers.clone(),
                std_dev: s.std_dev,
                n: s.n,
                held_out_fraction: s.held_out_fraction,
                seed: s.seed,
            })?;
            if s.eta > 0.0 {
                if s.held_out_fraction > 0.0 {
                    return Err(Error::config("use either `eta` or `held_out_fraction` for blobs, not both"));
                }
                inject_label_noise(&blobs, s.eta, s.seed)?
            } else {
                blobs
            }
        }
    };
    let (tr, va, te) = split(&full, &s.split, s.seed)?;
    create_dir(&args.out)?;
    save_csv(&tr, &args.out.join("train.csv"))?;
    save_csv(&va, &args.out.join("val.csv"))?;
    save_csv(&te, &args.out.join("test.csv"))?;
    let manifest = json!({
        "config": &s,
        "dim": full.dim(),
        "n_classes": full.n_classes(),
        "splits": {
            "train": SplitSummary::of(&tr),
            "val": SplitSummary::of(&va),
            "test": SplitSummary::of(&te),
        },
        "total_outliers": full.outlier_count(),
    });
    write_json(&args.out.join("manifest.json"), &manifest)?;
    write_resolved(
        &args.out,
        RunConfig {
            gen: Some(s),
            ..RunConfig::default()
        },
    )?;
    Ok(warnings)
}

pub fn cmd_noise(mut s: NoiseSection, args: &CommonArgs) -> Result<Vec<String>> {
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    let ds = load_csv(&s.input, s.n_classes)?;
    let noisy = inject_label_noise(&ds, s.eta, s.seed)?;
    create_dir(&args.out)?;
    save_csv(&noisy, &args.out.join("noisy.csv"))?;
    let relabeled = noisy.labels().iter().zip(ds.labels()).filter(|(a, b)| a != b).count();
    write_json(
        &args.out.join("manifest.json"),
        &json!({
            "config": &s,
            "n": noisy.len(),
            "outliers": noisy.outlier_count(),
            "labels_changed": relabeled,
        }),
    )?;
    write_resolved(
        &args.out,
        RunConfig {
            noise: Some(s),
            ..RunConfig::default()
        },
    )?;
    Ok(Vec::new())
}

pub fn cmd_train(mut s: TrainSection, args: &CommonArgs) -> Result<Vec<String>> {
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    // Validate everything before touching the data.
    let (loss, warnings) = s.loss_spec()?;
    let cfg = TrainConfig {
        loss,
        batch_size: s.batch_size,
        epochs: s.epochs,
        lr: s.lr,
        momentum: s.momentum,
        weight_decay: s.weight_decay,
        seed: s.seed,
    };
    cfg.validate()?;
    let ds = load_csv(&s.data, s.n_classes)?;
    let mut layer_dims = vec![ds.dim()];
    layer_dims.extend(&s.hidden);
    layer_dims.push(s.n_classes);
    let model = ModelConfig {
        layer_dims,
        activation: s.activation,
        init: Default::default(),
        seed: s.seed,
    };
    model.validate()?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let report = train(&cfg, &model, &ds)?;
    create_dir(&args.out)?;
    write(&args.out.join("params.csv"), &report.params.to_csv())?;
    write_json(
        &args.out.join("train_report.json"),
        &json!({
            "config": &s,
            "loss": cfg.loss,
            "model": model,
            "epoch_loss": report.epoch_loss,
            "epoch_delta_zero": report.epoch_delta_zero,
        }),
    )?;
    write_resolved(
        &args.out,
        RunConfig {
            train: Some(s),
            ..RunConfig::default()
        },
    )?;
    // Already printed before training.
    Ok(Vec::new())
}

fn metrics_section(preds: &PredictionSet, n_bins: usize) -> serde_json::Value {
    json!({
        "n": preds.len(),
        "metrics": full_report(preds, n_bins),
    })
}

pub fn cmd_eval(s: EvalSection, args: &CommonArgs) -> Result<Vec<String>> {
    let mut warnings = Vec::new();
    if args.seed.is_some() {
        warnings.push("eval is deterministic; --seed has no effect".to_string());
    }
    if s.n_bins == 0 {
        return Err(Error::config("n_bins must be at least 1"));
    }
    let text = fs::read_to_string(&s.params).map_err(|e| Error::io(&s.params, e))?;
    let params = MlpParams::from_csv(&text, s.activation)?;
    let ds = load_csv(&s.data, s.n_classes)?;
    let preds = evaluate(&params, &ds)?.prediction_set(ds.labels())?;

    create_dir(&args.out)?;
    write(&args.out.join("reliability_all.csv"), &ece(&preds, s.n_bins).1.to_csv())?;
    write(&args.out.join("risk_coverage_all.csv"), &risk_coverage_csv(&risk_coverage(&preds)))?;

    let hard_idx: Vec<usize> = (0..ds.len()).filter(|&i| !ds.flags()[i]).collect();
    let hard = if hard_idx.is_empty() {
        json!({ "note": "no flag=false samples; hard-set metrics omitted" })
    } else {
        let h = preds.select(&hard_idx);
        write(&args.out.join("reliability_hard.csv"), &ece(&h, s.n_bins).1.to_csv())?;
        write(&args.out.join("risk_coverage_hard.csv"), &risk_coverage_csv(&risk_coverage(&h)))?;
        metrics_section(&h, s.n_bins)
    };
    write_json(
        &args.out.join("metrics.json"),
        &json!({
            "config": &s,
            "all": metrics_section(&preds, s.n_bins),
            "hard": hard,
        }),
    )?;
    write_resolved(
        &args.out,
        RunConfig {
            eval: Some(s),
            ..RunConfig::default()
        },
    )?;
    Ok(warnings)
}

pub fn cmd_theory(mut s: TheorySection, args: &CommonArgs, parallel: usize) -> Result<Vec<String>> {
    if let Some(seed) = args.seed {
        s.seed = seed;
    }
    if parallel == 0 {
        return Err(Error::config("--parallel must be at least 1"));
    }
    let grid = s.grid();
    if grid.is_empty() {
        return Err(Error::config("theory grid is empty"));
    }
    if s.curve_points == 0 {
        return Err(Error::config("curve_points must be at least 1"));
    }
    let template = TheoryParams {
        w_star: s.w_star(),
        n: s.n,
        eta: grid[0].0,
        epsilon: grid[0].1,
        seed: s.seed,
    };
    let opts = CheckOptions {
        n_test: s.n_test,
        n_bins: s.n_bins,
        init: s.init,
        max_iters: s.max_iters,
        n_points: s.curve_points,
        parallel,
    };
    // Domain checks for every cell happen inside theorem_check before any work.
    let report = theorem_check(&grid, &template, &opts)?;
    create_dir(&args.out)?;
    write(&args.out.join("theorem.csv"), &report.to_csv())?;
    for (i, &(eta, epsilon)) in grid.iter().enumerate() {
        let curve = calibration_curve(eta, epsilon, s.curve_points)?;
        write(&args.out.join(format!("curve_{i}.csv")), &curve.to_csv())?;
    }
    let all_positive_pass = report.cells.iter().filter(|c| c.eta > 0.0).all(|c| c.pass);
    // The parallelism setting does not change results, so it stays out of
    // the artifacts.
    let mut options = report.options.clone();
    options.parallel = 1;
    write_json(
        &args.out.join("theorem.json"),
        &json!({
            "config": &s,
            "template": report.template,
            "options": options,
            "cells": report.cells,
            "all_contaminated_cells_pass": all_positive_pass,
        }),
    )?;
    write_resolved(
        &args.out,
        RunConfig {
            theory: Some(s),
            ..RunConfig::default()
        },
    )?;
    Ok(Vec::new())
}
