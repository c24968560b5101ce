//! The work behind each subcommand. Training repeats and ablation
//! variants run on a small worker pool (capped by NAGA_THREADS); every
//! job owns its model, optimizer state and random stream, so results
//! do not depend on the pool size.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context, Result};
use naga_core::checkpoint::save_model;
use naga_core::data::{
    load_csv, save_csv, synth_bilinear, synth_linear, CsvSchema, IngestReport, SeriesTable,
    SynthBilinearSpec, SynthLinearSpec, WindowedDataset,
};
use naga_core::model::{ModelConfig, NagaModel};
use naga_core::rng::Rng;
use naga_core::train::{train, TrainConfig, TrainReport};
use naga_core::verify::{run_all, CheckResult};

use crate::config::{DataSource, ExperimentConfig, TargetSel};
use crate::report::{
    apply_baseline, emit_markdown, emit_report, mark_best, ReportFormat, ResultRow, Stat,
};

/// Decorrelates weight initialization from the shuffling and masking
/// streams that reuse the run seed.
const INIT_STREAM: u64 = 0x9e3779b97f4a7c15;

/// Errors split by exit code: bad input (2) vs failed execution (1).
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e:#}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

fn runtime<T>(r: Result<T>) -> Result<T, CliError> {
    r.map_err(CliError::Runtime)
}

fn pool_cap(override_threads: Option<usize>) -> usize {
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    override_threads.filter(|&n| n > 0).unwrap_or(hw)
}

fn worker_count(jobs: usize) -> usize {
    let env = std::env::var("NAGA_THREADS").ok().and_then(|v| v.parse().ok());
    pool_cap(env).min(jobs).max(1)
}

/// Runs `jobs` closures on the pool and returns their results in job
/// order.
fn run_pool<T: Send>(jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = worker_count(jobs);
    let mut slots: Vec<Option<T>> = Vec::with_capacity(jobs);
    slots.resize_with(jobs, || None);
    let slots = Mutex::new(slots);
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs {
                    break;
                }
                let r = f(i);
                slots.lock().expect("pool lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("pool lock")
        .into_iter()
        .map(|o| o.expect("pool filled every slot"))
        .collect()
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(SeriesTable, IngestReport)> {
    match &cfg.source {
        DataSource::Csv(path) => {
            let (table, ingest) = load_csv(path, CsvSchema::default())?;
            Ok((table, ingest))
        }
        DataSource::SynthBilinear => {
            let mut spec =
                SynthBilinearSpec::new(cfg.lookback, cfg.features, cfg.rank, cfg.noise, cfg.seed);
            spec.rows = cfg.rows;
            let (table, _) = synth_bilinear(&spec)?;
            let ingest = IngestReport {
                rows: table.len(),
                features: table.n_features(),
                fills: 0,
            };
            Ok((table, ingest))
        }
        DataSource::SynthLinear => {
            let spec = SynthLinearSpec {
                rows: cfg.rows,
                d_in: cfg.features,
                noise: cfg.noise,
                seed: cfg.seed,
            };
            let (table, _) = synth_linear(&spec)?;
            let ingest = IngestReport {
                rows: table.len(),
                features: table.n_features(),
                fills: 0,
            };
            Ok((table, ingest))
        }
    }
}

fn resolve_target(cfg: &ExperimentConfig, table: &SeriesTable) -> Result<usize> {
    match &cfg.target {
        None => Ok(table.default_target()),
        Some(TargetSel::Index(i)) => {
            if *i >= table.n_features() {
                Err(anyhow!(
                    "target index {i} out of range for {} columns",
                    table.n_features()
                ))
            } else {
                Ok(*i)
            }
        }
        Some(TargetSel::Name(name)) => table
            .feature_names()
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| {
                anyhow!(
                    "target column \"{name}\" not found; columns are {:?}",
                    table.feature_names()
                )
            }),
    }
}

struct RepeatOutcome {
    report: TrainReport,
    model: NagaModel,
}

/// One isolated training run: repeat `i` uses seed `base + i` for both
/// its initialization stream and its shuffling/masking streams.
fn run_one(
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    data: &WindowedDataset,
    seed: u64,
) -> Result<RepeatOutcome> {
    let mut init_rng = Rng::new(seed ^ INIT_STREAM);
    let mut model = NagaModel::init(model_cfg, &mut init_rng)?;
    let cfg = TrainConfig { seed, ..*train_cfg };
    let report = train(&mut model, data, &cfg)?;
    Ok(RepeatOutcome { report, model })
}

fn run_repeats(
    model_cfg: ModelConfig,
    cfg: &ExperimentConfig,
    data: &WindowedDataset,
) -> Result<Vec<RepeatOutcome>> {
    let results = run_pool(cfg.repeats, |i| {
        run_one(model_cfg, &cfg.train, data, cfg.seed + i as u64)
            .with_context(|| format!("repeat {i}"))
    });
    results.into_iter().collect()
}

fn aggregate(label: &str, outcomes: &[RepeatOutcome]) -> ResultRow {
    let pull = |f: fn(&TrainReport) -> f64| -> Vec<f64> {
        outcomes.iter().map(|o| f(&o.report)).collect()
    };
    ResultRow {
        label: label.to_string(),
        best: false,
        epochs: Stat::from_samples(&pull(|r| r.stop_epoch as f64)).mean,
        runtime: Stat::from_samples(&pull(|r| r.wall_seconds)).mean,
        mse: Stat::from_samples(&pull(|r| r.test.mse)),
        mae: Stat::from_samples(&pull(|r| r.test.mae)),
        rmse: Stat::from_samples(&pull(|r| r.test.rmse)),
        d_rmse_pct: 0.0,
        d_mae_pct: 0.0,
    }
}

fn write_reports(rows: &[ResultRow], out: &Path) -> Result<()> {
    emit_report(rows, ReportFormat::Csv, &out.join("report.csv"))?;
    emit_report(rows, ReportFormat::Markdown, &out.join("report.md"))?;
    Ok(())
}

fn prepare(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<(WindowedDataset, ModelConfig)> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let (table, ingest) = load_dataset(cfg)?;
    fs::write(out.join("ingest.txt"), format!("{ingest}\n"))
        .context("cannot write ingestion report")?;
    let target_idx = resolve_target(cfg, &table)?;
    let (data, _) = WindowedDataset::build(&table, &cfg.split, cfg.lookback, cfg.horizon, target_idx)?;
    let model_cfg = cfg.model.to_model_config(table.n_features(), cfg.horizon);
    Ok((data, model_cfg))
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let (data, model_cfg) = runtime(prepare(cfg, out))?;
    let outcomes = runtime(run_repeats(model_cfg, cfg, &data))?;

    let best = outcomes
        .iter()
        .min_by(|a, b| a.report.best_val_mse.total_cmp(&b.report.best_val_mse))
        .expect("at least one repeat");
    runtime(save_model(&best.model, out.join("model.ckpt")).context("cannot write checkpoint"))?;

    let rows = vec![aggregate(&cfg.label, &outcomes)];
    runtime(write_reports(&rows, out))?;
    print!("{}", emit_markdown(&rows).expect("nonempty"));
    println!(
        "{} repeats, best val MSE {:.6}; reports in {}",
        outcomes.len(),
        best.report.best_val_mse,
        out.display()
    );
    Ok(())
}

/// The four single-change variants measured against the unmodified
/// configuration: encoder removed, one cell instead of the stack, the
/// time reversal disabled, and input masking at 0.1.
fn ablation_grid(base: ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let single_cell = ModelConfig { num_cells: 1, ..base };
    let no_flip = ModelConfig { use_flip: false, ..base };
    let masked = ModelConfig { mask_prob: 0.1, ..base };
    vec![
        ("baseline", base),
        ("no-vedic", base.with_use_vedic(false)),
        ("single-cell", single_cell),
        ("no-flip", no_flip),
        ("mask-0.1", masked),
    ]
}

pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let (data, model_cfg) = runtime(prepare(cfg, out))?;
    let grid = ablation_grid(model_cfg);

    let jobs = grid.len() * cfg.repeats;
    let results = run_pool(jobs, |i| {
        let (v, r) = (i / cfg.repeats, i % cfg.repeats);
        run_one(grid[v].1, &cfg.train, &data, cfg.seed + r as u64)
            .with_context(|| format!("variant {} repeat {r}", grid[v].0))
    });
    let mut outcomes: Vec<Vec<RepeatOutcome>> = grid.iter().map(|_| Vec::new()).collect();
    for (i, res) in results.into_iter().enumerate() {
        outcomes[i / cfg.repeats].push(runtime(res)?);
    }

    let mut rows: Vec<ResultRow> = grid
        .iter()
        .zip(&outcomes)
        .map(|((label, _), o)| aggregate(label, o))
        .collect();
    rows.sort_by(|a, b| a.label.cmp(&b.label));
    let baseline_idx = rows
        .iter()
        .position(|r| r.label == "baseline")
        .expect("baseline row present");
    apply_baseline(&mut rows, baseline_idx);
    mark_best(&mut rows);
    runtime(write_reports(&rows, out))?;
    print!("{}", emit_markdown(&rows).expect("nonempty"));
    println!("reports in {}", out.display());
    Ok(())
}

/// Renders the battery's outcome; returns the text and the failure
/// count so the caller can pick the exit code.
fn verify_summary(checks: &[CheckResult], json: bool) -> (String, usize) {
    let failed = checks.iter().filter(|c| !c.passed).count();
    let passed = checks.len() - failed;
    if json {
        let entries: Vec<serde_json::Value> = checks
            .iter()
            .map(|c| {
                serde_json::json!({
                    "name": c.name,
                    "passed": c.passed,
                    "observed": c.observed,
                    "threshold": c.threshold,
                    "seconds": c.seconds,
                    "detail": c.detail,
                })
            })
            .collect();
        let doc = serde_json::json!({
            "total": checks.len(),
            "passed": passed,
            "failed": failed,
            "checks": entries,
        });
        (serde_json::to_string_pretty(&doc).expect("json"), failed)
    } else {
        let mut out = String::new();
        for c in checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!(
                "[{status}] {}: observed {:.3e} vs threshold {:.1e} ({:.2}s)\n",
                c.name, c.observed, c.threshold, c.seconds
            ));
            if !c.passed {
                out.push_str(&format!("       {}\n", c.detail));
            }
        }
        out.push_str(&format!(
            "checks: {} total, {passed} passed, {failed} failed\n",
            checks.len()
        ));
        (out, failed)
    }
}

pub fn cmd_verify(json: bool) -> Result<(), CliError> {
    let checks = run_all();
    let (text, failed) = verify_summary(&checks, json);
    println!("{}", text.trim_end());
    if failed > 0 {
        Err(CliError::Runtime(anyhow!("{failed} verification checks failed")))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthKind {
    Bilinear,
    Linear,
}

pub struct SynthArgs {
    pub kind: SynthKind,
    pub rows: usize,
    pub window: usize,
    pub features: usize,
    pub rank: usize,
    pub noise: f64,
    pub seed: u64,
}

pub fn cmd_synth(args: &SynthArgs, out: &Path) -> Result<(), CliError> {
    let table = runtime(match args.kind {
        SynthKind::Bilinear => {
            let mut spec =
                SynthBilinearSpec::new(args.window, args.features, args.rank, args.noise, args.seed);
            spec.rows = args.rows;
            synth_bilinear(&spec)
                .map(|(t, _)| t)
                .context("generator failed")
        }
        SynthKind::Linear => {
            let spec = SynthLinearSpec {
                rows: args.rows,
                d_in: args.features,
                noise: args.noise,
                seed: args.seed,
            };
            synth_linear(&spec).map(|(t, _)| t).context("generator failed")
        }
    })?;
    runtime(
        write_series_csv(&table, out).with_context(|| format!("cannot write {}", out.display())),
    )?;
    println!(
        "wrote {} rows, {} columns to {}",
        table.len(),
        table.n_features(),
        out.display()
    );
    Ok(())
}

fn write_series_csv(table: &SeriesTable, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    save_csv(table, out)?;
    Ok(())
}
