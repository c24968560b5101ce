//! Data pipeline: CSV ingestion, chronological splitting, train-only
//! normalization, look-back windowing, and synthetic generators.
//!
//! The invariants that matter here are chronological: splits are
//! contiguous and disjoint, windows never cross a split boundary, and
//! normalization statistics come from the training split alone.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{ShapeError, Tensor};
use crate::theory::BilinearTarget;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("row {row}: timestamp does not increase (strictly increasing order required)")]
    NonMonotonic { row: usize },
    #[error("no numeric feature columns found")]
    NoFeatures,
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("{split} split is empty ({rows} rows available)")]
    EmptySplit { split: &'static str, rows: usize },
    #[error("{split} split has {len} rows but windowing needs at least {needed} (lookback {lookback} + horizon {horizon})")]
    TooShort {
        split: &'static str,
        len: usize,
        needed: usize,
        lookback: usize,
        horizon: usize,
    },
    #[error("target column index {idx} out of range ({n_features} features)")]
    BadTarget { idx: usize, n_features: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSynth(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// An ordered multivariate series: one timestamp per row of `values`.
#[derive(Debug, Clone)]
pub struct SeriesTable {
    timestamps: Vec<i64>,
    values: Tensor,
    feature_names: Vec<String>,
}

impl SeriesTable {
    pub fn from_parts(
        timestamps: Vec<i64>,
        values: Tensor,
        feature_names: Vec<String>,
    ) -> Result<SeriesTable, DataError> {
        if values.rank() != 2 {
            return Err(ShapeError::Rank {
                op: "series_table",
                expected: 2,
                shape: values.shape().to_vec(),
            }
            .into());
        }
        if timestamps.len() != values.shape()[0] {
            return Err(DataError::Parse {
                row: timestamps.len(),
                message: format!(
                    "{} timestamps for {} value rows",
                    timestamps.len(),
                    values.shape()[0]
                ),
            });
        }
        if feature_names.len() != values.shape()[1] {
            return Err(DataError::Parse {
                row: 0,
                message: format!(
                    "{} feature names for {} columns",
                    feature_names.len(),
                    values.shape()[1]
                ),
            });
        }
        for (i, pair) in timestamps.windows(2).enumerate() {
            if pair[1] <= pair[0] {
                return Err(DataError::NonMonotonic { row: i + 2 });
            }
        }
        Ok(SeriesTable {
            timestamps,
            values,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Forecast target convention: the last column.
    pub fn default_target(&self) -> usize {
        self.n_features() - 1
    }

    fn slice_rows(&self, start: usize, end: usize) -> SeriesTable {
        let n = self.n_features();
        let data = self.values.data()[start * n..end * n].to_vec();
        SeriesTable {
            timestamps: self.timestamps[start..end].to_vec(),
            values: Tensor::from_vec(&[end - start, n], data).expect("slice arithmetic"),
            feature_names: self.feature_names.clone(),
        }
    }
}

/// How [`load_csv`] treats cells that fail to parse as numbers.
#[derive(Debug, Clone, Copy)]
pub struct CsvSchema {
    /// Carry the previous row's value forward (counted in the report).
    /// When off, a bad cell is an ingestion error.
    pub forward_fill: bool,
}

impl Default for CsvSchema {
    fn default() -> CsvSchema {
        CsvSchema { forward_fill: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestReport {
    pub rows: usize,
    pub features: usize,
    pub fills: usize,
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows = {}", self.rows)?;
        writeln!(f, "features = {}", self.features)?;
        write!(f, "fills = {}", self.fills)
    }
}

fn parse_timestamp(raw: &str, row: usize) -> Result<i64, DataError> {
    let trimmed = raw.trim();
    if let Ok(v) = trimmed.parse::<i64>() {
        return Ok(v);
    }
    // Common timestamp layouts, seconds precision.
    for fmt in [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y/%m/%d %H:%M:%S",
        "%Y/%m/%d %H:%M",
    ] {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(trimmed, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    if let Ok(d) = chrono::NaiveDate::parse_from_str(trimmed, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).unwrap().and_utc().timestamp());
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(trimmed) {
        return Ok(dt.timestamp());
    }
    Err(DataError::Parse {
        row,
        message: format!("cannot parse \"{trimmed}\" as a timestamp or integer index"),
    })
}

/// Reads a UTF-8, comma-separated, header-first CSV whose first column
/// is a timestamp (ISO-8601) or integer index and whose remaining
/// columns are numeric features.
pub fn load_csv(
    path: impl AsRef<Path>,
    schema: CsvSchema,
) -> Result<(SeriesTable, IngestReport), DataError> {
    let path = path.as_ref();
    let show = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| DataError::Io {
            path: show.clone(),
            message: e.to_string(),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| DataError::Io {
            path: show.clone(),
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 {
        return Err(DataError::NoFeatures);
    }
    let feature_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let n = feature_names.len();

    let mut timestamps = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let mut fills = 0usize;
    // Data rows are 1-based after the header, so the header is row 1.
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| DataError::Io {
            path: show.clone(),
            message: e.to_string(),
        })?;
        let ts = parse_timestamp(record.get(0).unwrap_or(""), row)?;
        if let Some(&prev) = timestamps.last() {
            if ts <= prev {
                return Err(DataError::NonMonotonic { row });
            }
        }
        timestamps.push(ts);
        for col in 0..n {
            let raw = record.get(col + 1).unwrap_or("").trim();
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => data.push(v),
                _ if schema.forward_fill && i > 0 => {
                    fills += 1;
                    let prev = data[(i - 1) * n + col];
                    data.push(prev);
                }
                _ => {
                    return Err(DataError::Parse {
                        row,
                        message: format!(
                            "column \"{}\": cannot parse \"{raw}\" as a finite number{}",
                            feature_names[col],
                            if schema.forward_fill {
                                " (no earlier row to fill from)"
                            } else {
                                ""
                            }
                        ),
                    })
                }
            }
        }
    }
    if timestamps.is_empty() {
        return Err(DataError::Parse {
            row: 2,
            message: "no data rows".into(),
        });
    }
    let rows = timestamps.len();
    let values = Tensor::from_vec(&[rows, n], data)?;
    let table = SeriesTable::from_parts(timestamps, values, feature_names)?;
    let report = IngestReport {
        rows,
        features: n,
        fills,
    };
    Ok((table, report))
}

/// Writes a table back out in the same CSV layout [`load_csv`] reads,
/// with the timestamp column holding the stored integer values.
pub fn save_csv(table: &SeriesTable, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let show = path.display().to_string();
    let mut writer = csv::Writer::from_path(path).map_err(|e| DataError::Io {
        path: show.clone(),
        message: e.to_string(),
    })?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(table.feature_names.iter().cloned());
    let write_err = |e: csv::Error| DataError::Io {
        path: show.clone(),
        message: e.to_string(),
    };
    writer.write_record(&header).map_err(write_err)?;
    for (r, ts) in table.timestamps.iter().enumerate() {
        let mut record = vec![ts.to_string()];
        for c in 0..table.n_features() {
            record.push(format!("{:?}", table.values.get2(r, c)));
        }
        writer.write_record(&record).map_err(write_err)?;
    }
    writer.flush().map_err(|e| DataError::Io {
        path: show,
        message: e.to_string(),
    })?;
    Ok(())
}

/// Chronological three-way split, either by fractions of the length or
/// by explicit end indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    Ratio { train: f64, val: f64, test: f64 },
    Index { train_end: usize, val_end: usize, test_end: usize },
}

impl SplitSpec {
    /// Index-mode spec from per-split lengths, e.g. (33792, 4096, 4096).
    pub fn lengths(train: usize, val: usize, test: usize) -> SplitSpec {
        SplitSpec::Index {
            train_end: train,
            val_end: train + val,
            test_end: train + val + test,
        }
    }

    /// Boundary indices (train_end, val_end, test_end) for a table of
    /// `n` rows. Ratio-mode boundaries round down.
    pub fn boundaries(&self, n: usize) -> Result<(usize, usize, usize), DataError> {
        match *self {
            SplitSpec::Ratio { train, val, test } => {
                for (name, v) in [("train", train), ("val", val), ("test", test)] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(DataError::InvalidSplit(format!(
                            "{name} fraction {v} outside [0,1]"
                        )));
                    }
                }
                if (train + val + test - 1.0).abs() > 1e-9 {
                    return Err(DataError::InvalidSplit(format!(
                        "fractions sum to {}, expected 1",
                        train + val + test
                    )));
                }
                let b1 = (n as f64 * train).floor() as usize;
                let b2 = (n as f64 * (train + val)).floor() as usize;
                Ok((b1, b2, n))
            }
            SplitSpec::Index {
                train_end,
                val_end,
                test_end,
            } => {
                if !(train_end < val_end && val_end < test_end) {
                    return Err(DataError::InvalidSplit(format!(
                        "indices ({train_end}, {val_end}, {test_end}) must increase"
                    )));
                }
                if test_end > n {
                    return Err(DataError::InvalidSplit(format!(
                        "test end {test_end} exceeds table length {n}"
                    )));
                }
                Ok((train_end, val_end, test_end))
            }
        }
    }
}

/// Cuts the table into contiguous train/val/test segments.
pub fn split_series(
    table: &SeriesTable,
    spec: &SplitSpec,
) -> Result<(SeriesTable, SeriesTable, SeriesTable), DataError> {
    let n = table.len();
    let (b1, b2, b3) = spec.boundaries(n)?;
    for (name, len) in [("train", b1), ("val", b2 - b1), ("test", b3 - b2)] {
        if len == 0 {
            return Err(DataError::EmptySplit { split: name, rows: n });
        }
    }
    Ok((
        table.slice_rows(0, b1),
        table.slice_rows(b1, b2),
        table.slice_rows(b2, b3),
    ))
}

/// Per-feature z-score statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; zero-variance features are
    /// clamped to 1 and flagged.
    pub std: Vec<f64>,
    pub clamped: Vec<bool>,
}

impl NormStats {
    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|&c| c)
    }
}

pub fn fit_norm(train: &SeriesTable) -> Result<NormStats, DataError> {
    let n = train.len();
    if n == 0 {
        return Err(DataError::EmptySplit {
            split: "train",
            rows: 0,
        });
    }
    let f = train.n_features();
    let mut mean = vec![0.0; f];
    let mut std = vec![0.0; f];
    let mut clamped = vec![false; f];
    for c in 0..f {
        let mut s = 0.0;
        for r in 0..n {
            s += train.values.get2(r, c);
        }
        mean[c] = s / n as f64;
        let mut sq = 0.0;
        for r in 0..n {
            let d = train.values.get2(r, c) - mean[c];
            sq += d * d;
        }
        let var = sq / n as f64;
        if var > 0.0 {
            std[c] = var.sqrt();
        } else {
            std[c] = 1.0;
            clamped[c] = true;
        }
    }
    Ok(NormStats { mean, std, clamped })
}

pub fn apply_norm(table: &SeriesTable, stats: &NormStats) -> Result<SeriesTable, DataError> {
    transform(table, stats, |v, m, s| (v - m) / s)
}

/// Inverse of [`apply_norm`].
pub fn apply_denorm(table: &SeriesTable, stats: &NormStats) -> Result<SeriesTable, DataError> {
    transform(table, stats, |v, m, s| v * s + m)
}

fn transform(
    table: &SeriesTable,
    stats: &NormStats,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<SeriesTable, DataError> {
    let n_feat = table.n_features();
    if stats.mean.len() != n_feat {
        return Err(ShapeError::Mismatch {
            op: "apply_norm",
            lhs: vec![n_feat],
            rhs: vec![stats.mean.len()],
        }
        .into());
    }
    let mut values = table.values.clone();
    for r in 0..table.len() {
        for c in 0..n_feat {
            let v = values.get2(r, c);
            values.set2(r, c, f(v, stats.mean[c], stats.std[c]));
        }
    }
    Ok(SeriesTable {
        timestamps: table.timestamps.clone(),
        values,
        feature_names: table.feature_names.clone(),
    })
}

/// Stride-1 windows of one split: `xs[i]` holds `lookback` consecutive
/// rows of all features, `ys[i]` the next `horizon` values of the
/// target column. `starts[i]` is the split-local row of the window's
/// first input row.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub xs: Vec<Tensor>,
    pub ys: Vec<Tensor>,
    pub starts: Vec<usize>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Targets stacked into an `n * horizon` matrix.
    pub fn target_matrix(&self) -> Tensor {
        let n = self.ys.len();
        let h = self.ys.first().map_or(0, |y| y.len());
        let mut out = Tensor::zeros(&[n.max(1), h.max(1)]);
        for (i, y) in self.ys.iter().enumerate() {
            out.row_mut(i).copy_from_slice(y.data());
        }
        out
    }
}

pub fn make_windows(
    table: &SeriesTable,
    lookback: usize,
    horizon: usize,
    target_idx: usize,
    split_name: &'static str,
) -> Result<WindowSet, DataError> {
    if lookback == 0 || horizon == 0 {
        return Err(DataError::InvalidSplit(format!(
            "lookback {lookback} and horizon {horizon} must be positive"
        )));
    }
    if target_idx >= table.n_features() {
        return Err(DataError::BadTarget {
            idx: target_idx,
            n_features: table.n_features(),
        });
    }
    let len = table.len();
    let needed = lookback + horizon;
    if len < needed {
        return Err(DataError::TooShort {
            split: split_name,
            len,
            needed,
            lookback,
            horizon,
        });
    }
    let count = len - lookback - horizon + 1;
    let n = table.n_features();
    let mut xs = Vec::with_capacity(count);
    let mut ys = Vec::with_capacity(count);
    let mut starts = Vec::with_capacity(count);
    for s in 0..count {
        let x = Tensor::from_vec(
            &[lookback, n],
            table.values.data()[s * n..(s + lookback) * n].to_vec(),
        )?;
        let mut y = Tensor::zeros(&[horizon]);
        for j in 0..horizon {
            y.data_mut()[j] = table.values.get2(s + lookback + j, target_idx);
        }
        xs.push(x);
        ys.push(y);
        starts.push(s);
    }
    Ok(WindowSet { xs, ys, starts })
}

/// The fully prepared dataset: split, normalized with train statistics,
/// and windowed per split.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub lookback: usize,
    pub horizon: usize,
    pub target_idx: usize,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub n_features: usize,
}

impl WindowedDataset {
    /// Runs the whole preparation pipeline on a raw table.
    pub fn build(
        table: &SeriesTable,
        spec: &SplitSpec,
        lookback: usize,
        horizon: usize,
        target_idx: usize,
    ) -> Result<(WindowedDataset, NormStats), DataError> {
        let (train_t, val_t, test_t) = split_series(table, spec)?;
        let stats = fit_norm(&train_t)?;
        let train_n = apply_norm(&train_t, &stats)?;
        let val_n = apply_norm(&val_t, &stats)?;
        let test_n = apply_norm(&test_t, &stats)?;
        let dataset = WindowedDataset {
            lookback,
            horizon,
            target_idx,
            train: make_windows(&train_n, lookback, horizon, target_idx, "train")?,
            val: make_windows(&val_n, lookback, horizon, target_idx, "val")?,
            test: make_windows(&test_n, lookback, horizon, target_idx, "test")?,
            n_features: table.n_features(),
        };
        Ok((dataset, stats))
    }
}

/// Synthetic series whose target is a cross-time bilinear form of the
/// preceding `window` input rows: position `t_pos` paired with its
/// mirror `window - t_pos + 1` (one-based), plus an optional linear
/// part and Gaussian noise.
#[derive(Debug, Clone, Copy)]
pub struct SynthBilinearSpec {
    pub rows: usize,
    /// Window length T over which the target is defined.
    pub window: usize,
    pub d_in: usize,
    pub rank: usize,
    pub noise: f64,
    pub seed: u64,
    /// One-based position of the bilinear pair's first factor;
    /// defaults to the window's last step so the pair is (T, 1).
    pub t_pos: usize,
    /// Scale of the linear part; zero disables it.
    pub ell_scale: f64,
}

impl SynthBilinearSpec {
    pub fn new(window: usize, d_in: usize, rank: usize, noise: f64, seed: u64) -> SynthBilinearSpec {
        SynthBilinearSpec {
            rows: 512,
            window,
            d_in,
            rank,
            noise,
            seed,
            t_pos: window,
            ell_scale: 0.3,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.window == 0 || self.d_in == 0 || self.rows == 0 {
            return Err(DataError::InvalidSynth(
                "rows, window, and d_in must be positive".into(),
            ));
        }
        if self.rank > self.d_in {
            return Err(DataError::InvalidSynth(format!(
                "rank {} exceeds d_in {}",
                self.rank, self.d_in
            )));
        }
        if self.t_pos == 0 || self.t_pos > self.window {
            return Err(DataError::InvalidSynth(format!(
                "t_pos {} outside 1..={}",
                self.t_pos, self.window
            )));
        }
        if self.noise < 0.0 || self.ell_scale < 0.0 {
            return Err(DataError::InvalidSynth(
                "noise and ell_scale must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Generates the table (features plus a trailing "target" column) and
/// returns the ground-truth target alongside. Windowing the table with
/// `lookback = window`, `horizon = 1`, and the last column as target
/// reproduces `y = target.eval(X) + noise` exactly.
pub fn synth_bilinear(
    spec: &SynthBilinearSpec,
) -> Result<(SeriesTable, BilinearTarget), DataError> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let target = BilinearTarget::random(
        spec.d_in,
        spec.rank,
        spec.window,
        spec.t_pos,
        spec.ell_scale,
        &mut rng,
    )
    .map_err(|e| DataError::InvalidSynth(e.to_string()))?;

    // `window` warmup rows precede the emitted range so that every
    // emitted row has a full history.
    let total = spec.rows + spec.window;
    let feats = rng.normal_tensor(&[total, spec.d_in]);
    let n_cols = spec.d_in + 1;
    let mut values = Tensor::zeros(&[spec.rows, n_cols]);
    for r in 0..spec.rows {
        for c in 0..spec.d_in {
            values.set2(r, c, feats.get2(spec.window + r, c));
        }
        let hist = Tensor::from_vec(
            &[spec.window, spec.d_in],
            feats.data()[r * spec.d_in..(r + spec.window) * spec.d_in].to_vec(),
        )?;
        let mut y = target.eval(&hist).map_err(|e| DataError::InvalidSynth(e.to_string()))?;
        if spec.noise > 0.0 {
            y += spec.noise * rng.normal();
        }
        values.set2(r, spec.d_in, y);
    }
    let mut names: Vec<String> = (0..spec.d_in).map(|i| format!("x{i}")).collect();
    names.push("target".into());
    let table = SeriesTable::from_parts((0..spec.rows as i64).collect(), values, names)?;
    Ok((table, target))
}

/// Synthetic series whose target is a fixed linear functional of the
/// previous row's features: `y_r = coef . x_{r-1}`. Reachable from any
/// lookback >= 1 since the relevant row is the window's last.
#[derive(Debug, Clone, Copy)]
pub struct SynthLinearSpec {
    pub rows: usize,
    pub d_in: usize,
    pub noise: f64,
    pub seed: u64,
}

pub fn synth_linear(spec: &SynthLinearSpec) -> Result<(SeriesTable, Tensor), DataError> {
    if spec.rows == 0 || spec.d_in == 0 {
        return Err(DataError::InvalidSynth(
            "rows and d_in must be positive".into(),
        ));
    }
    if spec.noise < 0.0 {
        return Err(DataError::InvalidSynth("noise must be non-negative".into()));
    }
    let mut rng = Rng::new(spec.seed);
    let mut coef = rng.normal_tensor(&[spec.d_in]);
    let norm = coef.square_sum().sqrt();
    for v in coef.data_mut() {
        *v /= norm;
    }
    let total = spec.rows + 1;
    let feats = rng.normal_tensor(&[total, spec.d_in]);
    let n_cols = spec.d_in + 1;
    let mut values = Tensor::zeros(&[spec.rows, n_cols]);
    for r in 0..spec.rows {
        for c in 0..spec.d_in {
            values.set2(r, c, feats.get2(1 + r, c));
        }
        let mut y = 0.0;
        for c in 0..spec.d_in {
            y += coef.data()[c] * feats.get2(r, c);
        }
        if spec.noise > 0.0 {
            y += spec.noise * rng.normal();
        }
        values.set2(r, spec.d_in, y);
    }
    let mut names: Vec<String> = (0..spec.d_in).map(|i| format!("x{i}")).collect();
    names.push("target".into());
    let table = SeriesTable::from_parts((0..spec.rows as i64).collect(), values, names)?;
    Ok((table, coef))
}
