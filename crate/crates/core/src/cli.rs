//! The `htv` command line: train, eval, forecast, synth and ablate.
//!
//! Configuration is layered: defaults, then `--config`, then `--set` pairs,
//! then the dedicated flags. Later layers win.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{chrono_split, generate_synthetic, load_csv, save_csv, DatasetSplit, Series, TIME_FORMAT};
use crate::error::{HtvError, Result};
use crate::model::{HtvModel, ModelConfig};
use crate::objective::{evaluate, evaluate_baseline, predict, Baseline, Metrics};
use crate::rng::{Seeds, Stream};
use crate::train::{train, EpochRecord};

#[derive(Debug, Parser)]
#[command(name = "htv", version, about = "Hierarchical variational transformer forecaster")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Flat `key = <json>` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    #[arg(long = "input-len", global = true)]
    pub input_len: Option<usize>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Use the synthetic generator instead of a CSV file.
    #[arg(long, global = true)]
    pub synth: bool,
    #[arg(long = "out-dir", global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write checkpoint.bin, train_log.ndjson and summary.json.
    Train,
    /// Evaluate a checkpoint on every non-empty split; writes eval.json.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Forecast H steps from one origin; writes a CSV with audit columns.
    Forecast {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Row index of the first forecast step. Defaults to len − H.
        #[arg(long)]
        origin: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the synthetic series as CSV.
    Synth {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train one model per sweep point, e.g. `alpha=0,0.1,1,10`,
    /// `layers=1,2,3`, `objective=prediction,combined` or `gamma` for the
    /// default γ grid.
    Ablate {
        #[arg(long)]
        sweep: String,
    },
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for pair in &self.set {
            cfg.set_pair(pair)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.runs {
            cfg.runs = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.layers {
            cfg.layers = v;
        }
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.input_len {
            cfg.input_len = v;
        }
        if let Some(p) = &self.dataset {
            cfg.dataset = Some(p.clone());
            cfg.synth = false;
        }
        if self.synth {
            cfg.synth = true;
        }
        Ok(cfg)
    }
}

/// Everything a subcommand needs once the data is in memory.
pub struct Prepared {
    pub series: Series,
    pub split: DatasetSplit,
    pub model_config: ModelConfig,
}

pub fn load_series(cfg: &RunConfig) -> Result<Series> {
    if cfg.synth {
        return generate_synthetic(&cfg.synth_spec());
    }
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| HtvError::config("dataset", "no dataset path given and synth is false"))?;
    let (series, report) = load_csv(path)?;
    if report.warnings() > 0 {
        eprintln!(
            "warning: {} missing values forward-filled, {} leading values dropped",
            report.forward_filled, report.leading_dropped
        );
    }
    Ok(series)
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let series = load_series(cfg)?;
    let split = chrono_split(&series, cfg.ratios(), cfg.input_len, cfg.horizon, cfg.stride)?;
    let mut model_config = cfg.model_config();
    model_config.channels = series.width();
    model_config.validate()?;
    Ok(Prepared {
        series,
        split,
        model_config,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub trained: bool,
    pub steps: usize,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
    pub test_persistence: Option<Metrics>,
    pub test_seasonal_naive: Option<Metrics>,
    /// Loss terms of the last logged epoch.
    pub last_epoch: Option<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub runs: Vec<RunSummary>,
    pub mean_val: Option<Metrics>,
    pub mean_test: Option<Metrics>,
}

fn mean_metrics(items: impl Iterator<Item = Option<Metrics>>) -> Option<Metrics> {
    let all: Option<Vec<Metrics>> = items.collect();
    let all = all?;
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    Some(Metrics {
        mse: all.iter().map(|m| m.mse).sum::<f64>() / n,
        mae: all.iter().map(|m| m.mae).sum::<f64>() / n,
    })
}

fn metrics_or_none(windows: &[crate::data::SeriesWindow], f: impl Fn() -> Result<Metrics>) -> Result<Option<Metrics>> {
    if windows.is_empty() {
        Ok(None)
    } else {
        f().map(Some)
    }
}

/// Trains one model. Writes its checkpoint and log into `dir` when given.
pub fn train_run(cfg: &RunConfig, prep: &Prepared, seeds: Seeds, dir: Option<&Path>) -> Result<(HtvModel, RunSummary)> {
    let model = HtvModel::new(prep.model_config.clone(), &mut seeds.stream(Stream::Init))?;
    let mut log_file = match dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(BufWriter::new(File::create(d.join("train_log.ndjson"))?))
        }
        None => None,
    };
    let mut last: Option<EpochRecord> = None;
    let outcome = {
        let mut sink = |r: &EpochRecord| -> Result<()> {
            if let Some(f) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, r)?;
                f.write_all(b"\n")?;
                f.flush()?;
            }
            last = Some(r.clone());
            Ok(())
        };
        train(model, &prep.split, &cfg.train_config(), seeds, &mut sink)
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ HtvError::Divergence { .. }) => {
            match &last {
                Some(r) => eprintln!("last finite epoch: {}", serde_json::to_string(r)?),
                None => eprintln!("diverged before the first epoch completed"),
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    if let Some(d) = dir {
        checkpoint::save(&outcome.model, &d.join("checkpoint.bin"))?;
    }
    let split = &prep.split;
    let summary = RunSummary {
        seed: seeds.master,
        trained: outcome.steps > 0,
        steps: outcome.steps,
        epochs_run: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        val: metrics_or_none(&split.val, || evaluate(&outcome.model, &split.val))?,
        test: metrics_or_none(&split.test, || evaluate(&outcome.model, &split.test))?,
        test_persistence: metrics_or_none(&split.test, || evaluate_baseline(Baseline::Persistence, &split.test))?,
        test_seasonal_naive: if cfg.season <= cfg.input_len {
            metrics_or_none(&split.test, || {
                evaluate_baseline(Baseline::SeasonalNaive(cfg.season), &split.test)
            })?
        } else {
            None
        },
        last_epoch: outcome.log.last().cloned(),
    };
    Ok((outcome.model, summary))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, out: &mut dyn Write) -> Result<TrainSummary> {
    let prep = prepare(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let mut runs = Vec::with_capacity(cfg.runs);
    for k in 0..cfg.runs {
        let dir = if cfg.runs == 1 {
            out_dir.to_path_buf()
        } else {
            out_dir.join(format!("run{k}"))
        };
        let (_, s) = train_run(cfg, &prep, Seeds::new(cfg.seed).run(k), Some(&dir))?;
        if !s.trained {
            writeln!(
                out,
                "run {k}: zero training steps; checkpoint holds the initial parameters"
            )?;
        }
        runs.push(s);
    }
    let summary = TrainSummary {
        mean_val: mean_metrics(runs.iter().map(|r| r.val)),
        mean_test: mean_metrics(runs.iter().map(|r| r.test)),
        runs,
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    std::fs::write(out_dir.join("config.txt"), cfg.to_text())?;
    writeln!(out, "{}", serde_json::to_string(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub train: Option<Metrics>,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
    pub test_persistence: Option<Metrics>,
    pub test_seasonal_naive: Option<Metrics>,
    pub runs: usize,
    pub note: String,
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path, out_dir: &Path, out: &mut dyn Write) -> Result<EvalReport> {
    let prep = prepare(cfg)?;
    let model = checkpoint::load_for(checkpoint_path, &prep.model_config)?;
    let split = &prep.split;
    let mut report = None;
    // evaluation never samples, so repeated runs reproduce the same numbers
    for _ in 0..cfg.runs {
        let r = EvalReport {
            train: metrics_or_none(&split.train, || evaluate(&model, &split.train))?,
            val: metrics_or_none(&split.val, || evaluate(&model, &split.val))?,
            test: metrics_or_none(&split.test, || evaluate(&model, &split.test))?,
            test_persistence: metrics_or_none(&split.test, || evaluate_baseline(Baseline::Persistence, &split.test))?,
            test_seasonal_naive: if cfg.season <= cfg.input_len {
                metrics_or_none(&split.test, || {
                    evaluate_baseline(Baseline::SeasonalNaive(cfg.season), &split.test)
                })?
            } else {
                None
            },
            runs: cfg.runs,
            note: "evaluation uses posterior means; every run reports identical values".into(),
        };
        if let Some(prev) = &report {
            debug_assert_eq!(prev, &r);
        }
        report = Some(r);
    }
    let report = report.expect("runs >= 1");
    std::fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("eval.json"), &report)?;
    writeln!(out, "{}", serde_json::to_string(&report)?)?;
    Ok(report)
}

pub fn cmd_forecast(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    origin: Option<usize>,
    output: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    cfg.validate()?;
    let series = load_series(cfg)?;
    let mut mcfg = cfg.model_config();
    mcfg.channels = series.width();
    let model = checkpoint::load_for(checkpoint_path, &mcfg)?;
    let (t, h, n) = (cfg.input_len, cfg.horizon, series.len());
    let origin = match origin {
        Some(o) => o,
        None => n
            .checked_sub(h)
            .ok_or_else(|| HtvError::Range(format!("series of {n} rows is shorter than H = {h}")))?,
    };
    if origin < t {
        return Err(HtvError::Range(format!(
            "origin {origin} leaves fewer than T = {t} input rows"
        )));
    }
    if origin + h > n {
        return Err(HtvError::Range(format!(
            "origin {origin} is too close to the series end: {origin} + H = {} > {n}",
            origin + h
        )));
    }
    let x = series.values.slice_rows(origin - t, origin)?;
    let tf: Vec<f64> = series.timestamps[origin - t..origin + h]
        .iter()
        .flat_map(crate::data::calendar_features)
        .collect();
    let tf = crate::tensor::Tensor::new(&[t + h, crate::data::CALENDAR_FEATURES], tf)?;
    let (y, stats) = predict(&model, &x, &tf)?;

    if let Some(dir) = output.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::Writer::from_path(output)?;
    let mut header = vec!["date".to_string()];
    for prefix in ["", "actual_", "mu_", "sigma_"] {
        header.extend(series.channels.iter().map(|c| format!("{prefix}{c}")));
    }
    w.write_record(&header)?;
    for r in 0..h {
        let mut rec = vec![series.timestamps[origin + r].format(TIME_FORMAT).to_string()];
        rec.extend(y.row(r).iter().map(f64::to_string));
        rec.extend(series.values.row(origin + r).iter().map(f64::to_string));
        rec.extend(stats.mu.iter().map(f64::to_string));
        rec.extend(stats.sigma.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    writeln!(
        out,
        "wrote {h}x{} forecast from origin {origin} to {}",
        series.width(),
        output.display()
    )?;
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, output: &Path, out: &mut dyn Write) -> Result<Series> {
    let spec = cfg.synth_spec();
    let series = generate_synthetic(&spec)?;
    if spec.length < cfg.input_len + cfg.horizon {
        eprintln!(
            "warning: length {} is below input_len + horizon = {}; no windows will fit",
            spec.length,
            cfg.input_len + cfg.horizon
        );
    }
    if let Some(dir) = output.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    save_csv(&series, output)?;
    writeln!(
        out,
        "wrote {} rows x {} channels to {}",
        series.len(),
        series.width(),
        output.display()
    )?;
    Ok(series)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep: String,
    pub value: String,
    pub seed: u64,
    pub val_mse: Option<f64>,
    pub val_mae: Option<f64>,
    pub test_mse: Option<f64>,
    pub test_mae: Option<f64>,
    pub recon: Option<f64>,
    pub pred: Option<f64>,
    pub kl: Option<f64>,
    pub recon_weight: f64,
    pub kl_weight: f64,
}

/// Parses `key=v1,v2,...` into the key and one JSON value per point.
/// Grid searched by a bare `--sweep gamma`; pick γ by the val columns.
pub const GAMMA_GRID: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 5.0];

pub fn parse_sweep(sweep: &str) -> Result<(String, Vec<Value>)> {
    if sweep.trim() == "gamma" {
        return Ok(("gamma".into(), GAMMA_GRID.iter().map(|&g| Value::from(g)).collect()));
    }
    let (key, list) = sweep
        .split_once('=')
        .ok_or_else(|| HtvError::config("sweep", "expected `key=v1,v2,...`"))?;
    let key = key.trim();
    if !matches!(key, "alpha" | "gamma" | "layers" | "objective") {
        return Err(HtvError::config(
            "sweep",
            format!("cannot sweep `{key}`; use alpha, gamma, layers or objective"),
        ));
    }
    let values: Vec<Value> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string())))
        .collect();
    if values.is_empty() {
        return Err(HtvError::config("sweep", "empty sweep"));
    }
    Ok((key.to_string(), values))
}

fn opt_to_string(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn cmd_ablate(cfg: &RunConfig, sweep: &str, out_dir: &Path, out: &mut dyn Write) -> Result<Vec<SweepRow>> {
    let (key, values) = parse_sweep(sweep)?;
    let mut rows = Vec::new();
    for value in &values {
        let mut point = cfg.clone();
        point.set(&key, value.clone())?;
        let prep = prepare(&point)?;
        let label = match value {
            Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        for k in 0..cfg.runs {
            let seeds = Seeds::new(cfg.seed).run(k);
            let (_, s) = train_run(&point, &prep, seeds, None)?;
            let combined = point.objective == crate::model::Objective::Combined;
            rows.push(SweepRow {
                sweep: key.clone(),
                value: label.clone(),
                seed: seeds.master,
                val_mse: s.val.map(|m| m.mse),
                val_mae: s.val.map(|m| m.mae),
                test_mse: s.test.map(|m| m.mse),
                test_mae: s.test.map(|m| m.mae),
                recon: s.last_epoch.as_ref().map(|r| r.recon),
                pred: s.last_epoch.as_ref().map(|r| r.pred),
                kl: s.last_epoch.as_ref().map(|r| r.kl.iter().sum()),
                recon_weight: if combined { 1.0 } else { 0.0 },
                kl_weight: if combined { 1.0 } else { 0.0 },
            });
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("ablation.csv"))?;
    w.write_record([
        "sweep",
        "value",
        "seed",
        "val_mse",
        "val_mae",
        "test_mse",
        "test_mae",
        "recon",
        "pred",
        "kl",
        "recon_weight",
        "kl_weight",
    ])?;
    for r in &rows {
        w.write_record([
            r.sweep.clone(),
            r.value.clone(),
            r.seed.to_string(),
            opt_to_string(r.val_mse),
            opt_to_string(r.val_mae),
            opt_to_string(r.test_mse),
            opt_to_string(r.test_mae),
            opt_to_string(r.recon),
            opt_to_string(r.pred),
            opt_to_string(r.kl),
            r.recon_weight.to_string(),
            r.kl_weight.to_string(),
        ])?;
    }
    w.flush()?;
    writeln!(
        out,
        "{:<10} {:<12} {:>6} {:>12} {:>12}",
        "sweep", "value", "seed", "val_mae", "test_mae"
    )?;
    for r in &rows {
        writeln!(
            out,
            "{:<10} {:<12} {:>6} {:>12.6} {:>12.6}",
            r.sweep,
            r.value,
            r.seed,
            r.val_mae.unwrap_or(f64::NAN),
            r.test_mae.unwrap_or(f64::NAN)
        )?;
    }
    Ok(rows)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.common.resolve()?;
    let dir = &cli.common.out_dir;
    let default_ckpt = || dir.join("checkpoint.bin");
    match cli.command {
        Command::Train => cmd_train(&cfg, dir, out).map(|_| ()),
        Command::Eval { checkpoint } => cmd_eval(&cfg, &checkpoint.unwrap_or_else(default_ckpt), dir, out).map(|_| ()),
        Command::Forecast {
            checkpoint,
            origin,
            output,
        } => cmd_forecast(
            &cfg,
            &checkpoint.unwrap_or_else(default_ckpt),
            origin,
            &output.unwrap_or_else(|| dir.join("forecast.csv")),
            out,
        ),
        Command::Synth { output } => cmd_synth(&cfg, &output.unwrap_or_else(|| dir.join("synth.csv")), out).map(|_| ()),
        Command::Ablate { sweep } => cmd_ablate(&cfg, &sweep, dir, out).map(|_| ()),
    }
}
