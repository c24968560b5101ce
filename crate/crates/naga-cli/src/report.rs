//! Result tables. One row per configuration, aggregated over repeats,
//! with relative-change columns against a designated baseline row.
//!
//! Both output formats share one cell renderer so the CSV and the
//! Markdown table always agree: metrics use four decimals, percents
//! two. A degradation (metric worse than baseline) shows as a negative
//! percentage.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

pub const COLUMNS: [&str; 8] = [
    "Configuration",
    "Epochs",
    "Runtime[s]",
    "MSE",
    "MAE",
    "RMSE",
    "\u{0394}RMSE%",
    "\u{0394}MAE%",
];

/// Mean and population standard deviation across repeats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn from_samples(xs: &[f64]) -> Stat {
        assert!(!xs.is_empty(), "stat over zero samples");
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

/// One aggregated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub label: String,
    /// Marked row, rendered with a trailing `*`.
    pub best: bool,
    /// Mean epochs until stopping.
    pub epochs: f64,
    /// Mean training-loop wall seconds (ingestion excluded).
    pub runtime: f64,
    pub mse: Stat,
    pub mae: Stat,
    pub rmse: Stat,
    pub d_rmse_pct: f64,
    pub d_mae_pct: f64,
}

/// `(baseline - value)/baseline * 100`: improvements positive,
/// degradations negative.
pub fn relative_change(baseline: f64, value: f64) -> f64 {
    (baseline - value) / baseline * 100.0
}

/// Fills the two percent columns of every row against the row at
/// `baseline_idx`, which gets exact zeros.
pub fn apply_baseline(rows: &mut [ResultRow], baseline_idx: usize) {
    let b_rmse = rows[baseline_idx].rmse.mean;
    let b_mae = rows[baseline_idx].mae.mean;
    for (i, row) in rows.iter_mut().enumerate() {
        if i == baseline_idx {
            row.d_rmse_pct = 0.0;
            row.d_mae_pct = 0.0;
        } else {
            row.d_rmse_pct = relative_change(b_rmse, row.rmse.mean);
            row.d_mae_pct = relative_change(b_mae, row.mae.mean);
        }
    }
}

/// Flags the lowest-RMSE row (ties broken by MAE, then label).
pub fn mark_best(rows: &mut [ResultRow]) {
    let Some(best) = (0..rows.len()).min_by(|&a, &b| {
        let (ra, rb) = (&rows[a], &rows[b]);
        ra.rmse
            .mean
            .total_cmp(&rb.rmse.mean)
            .then(ra.mae.mean.total_cmp(&rb.mae.mean))
            .then(ra.label.cmp(&rb.label))
    }) else {
        return;
    };
    for (i, row) in rows.iter_mut().enumerate() {
        row.best = i == best;
    }
}

fn cells(row: &ResultRow) -> [String; 8] {
    let label = if row.best {
        format!("{} *", row.label)
    } else {
        row.label.clone()
    };
    [
        label,
        format!("{:.1}", row.epochs),
        format!("{:.2}", row.runtime),
        format!("{:.4}\u{00b1}{:.4}", row.mse.mean, row.mse.std),
        format!("{:.4}\u{00b1}{:.4}", row.mae.mean, row.mae.std),
        format!("{:.4}\u{00b1}{:.4}", row.rmse.mean, row.rmse.std),
        format!("{:.2}", row.d_rmse_pct),
        format!("{:.2}", row.d_mae_pct),
    ]
}

pub fn emit_csv(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        bail!("refusing to emit an empty report");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for row in rows {
        w.write_record(cells(row))?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn emit_markdown(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        bail!("refusing to emit an empty report");
    }
    let mut out = String::new();
    out.push_str(&format!("| {} |\n", COLUMNS.join(" | ")));
    out.push_str(&format!("|{}\n", " --- |".repeat(COLUMNS.len())));
    for row in rows {
        out.push_str(&format!("| {} |\n", cells(row).join(" | ")));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub fn emit_report(rows: &[ResultRow], format: ReportFormat, path: &Path) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => emit_csv(rows)?,
        ReportFormat::Markdown => emit_markdown(rows)?,
    };
    fs::write(path, text).with_context(|| format!("cannot write report to {}", path.display()))
}

fn parse_stat(cell: &str, column: &str) -> Result<Stat> {
    let (m, s) = cell
        .split_once('\u{00b1}')
        .ok_or_else(|| anyhow!("{column} cell \"{cell}\" is not mean\u{00b1}std"))?;
    Ok(Stat {
        mean: m.trim().parse().with_context(|| format!("{column} mean \"{m}\""))?,
        std: s.trim().parse().with_context(|| format!("{column} std \"{s}\""))?,
    })
}

/// Reads a CSV produced by [`emit_csv`] back into rows, for regression
/// diffing. Quantized to the file's precision, so emitting the loaded
/// rows reproduces the file byte for byte.
pub fn load_report_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("cannot read report {}", path.display()))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        bail!("unexpected report columns {header:?}");
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != COLUMNS.len() {
            bail!("report row has {} fields, want {}", record.len(), COLUMNS.len());
        }
        let raw_label = record[0].to_string();
        let (label, best) = match raw_label.strip_suffix(" *") {
            Some(trimmed) => (trimmed.to_string(), true),
            None => (raw_label, false),
        };
        rows.push(ResultRow {
            label,
            best,
            epochs: record[1].parse().context("Epochs")?,
            runtime: record[2].parse().context("Runtime[s]")?,
            mse: parse_stat(&record[3], "MSE")?,
            mae: parse_stat(&record[4], "MAE")?,
            rmse: parse_stat(&record[5], "RMSE")?,
            d_rmse_pct: record[6].parse().context("\u{0394}RMSE%")?,
            d_mae_pct: record[7].parse().context("\u{0394}MAE%")?,
        });
    }
    Ok(rows)
}
