//! Experiment configuration files.
//!
//! The format is one `key = value` pair per line; `#` starts a comment
//! and blank lines are ignored. Unknown or duplicate keys are errors so
//! typos fail fast instead of silently running defaults.
//!
//! Data source (exactly one required):
//!   data        path to a CSV file (timestamp column first)
//!   synth       builtin generator, `bilinear` or `linear`
//!
//! Windowing (required):
//!   lookback    past steps fed to the model
//!   horizon     future steps predicted
//!
//! General:
//!   label       row label in reports (default: file stem or generator name)
//!   target      target column, by name or zero-based index (default: last)
//!   split       train/val/test fractions, e.g. 0.7/0.15/0.15 (the default)
//!   split_index explicit end rows, e.g. 660/880/1100 (alternative to split)
//!   repeats     independent training runs to aggregate (default 10)
//!   seed        base seed; repeat i runs with seed + i (default 42)
//!   out         output directory (default naga-out)
//!
//! Generator knobs (only with `synth`):
//!   rows        series length (default 512)
//!   features    input columns (default 3)
//!   rank        coupling rank, bilinear only (default 1)
//!   noise       observation noise std (default 0.01)
//!
//! Model:
//!   d_hidden, d_inner, d_state, h_head, k, num_cells,
//!   use_vedic, use_flip, mask_prob, dropout
//!
//! Optimizer:
//!   lr, weight_decay, batch_size, max_epochs, patience, min_delta

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use naga_core::data::SplitSpec;
use naga_core::model::ModelConfig;
use naga_core::train::TrainConfig;

/// Where the series comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    SynthBilinear,
    SynthLinear,
}

/// Which column is predicted.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSel {
    Name(String),
    Index(usize),
}

/// Model dimensions as written in the file; the input width is only
/// known once the dataset is loaded, so this is not a full config yet.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub d_hidden: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub h_head: usize,
    pub k: usize,
    pub num_cells: usize,
    pub use_vedic: bool,
    pub use_flip: bool,
    pub mask_prob: f64,
    pub dropout_p: f64,
}

impl Default for ModelSpec {
    fn default() -> ModelSpec {
        let base = ModelConfig::new(1, 1);
        ModelSpec {
            d_hidden: base.d_hidden,
            d_inner: base.d_inner,
            d_state: base.d_state,
            h_head: base.h_head,
            k: base.k,
            num_cells: base.num_cells,
            use_vedic: true,
            use_flip: base.use_flip,
            mask_prob: base.mask_prob,
            dropout_p: base.dropout_p,
        }
    }
}

impl ModelSpec {
    pub fn to_model_config(&self, d_in: usize, pred_len: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(d_in, pred_len).with_use_vedic(self.use_vedic);
        cfg.d_hidden = self.d_hidden;
        cfg.d_inner = self.d_inner;
        cfg.d_state = self.d_state;
        cfg.h_head = self.h_head;
        cfg.k = self.k;
        cfg.num_cells = self.num_cells;
        cfg.use_flip = self.use_flip;
        cfg.mask_prob = self.mask_prob;
        cfg.dropout_p = self.dropout_p;
        cfg
    }
}

/// Everything a `train` or `ablate` invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub label: String,
    pub source: DataSource,
    pub split: SplitSpec,
    pub lookback: usize,
    pub horizon: usize,
    pub target: Option<TargetSel>,
    pub repeats: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub rows: usize,
    pub features: usize,
    pub rank: usize,
    pub noise: f64,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    parse_config(&text)
}

fn parse_usize(key: &str, val: &str, line: usize) -> Result<usize> {
    val.parse()
        .map_err(|_| anyhow!("line {line}: {key} expects a non-negative integer, got \"{val}\""))
}

fn parse_u64(key: &str, val: &str, line: usize) -> Result<u64> {
    val.parse()
        .map_err(|_| anyhow!("line {line}: {key} expects a non-negative integer, got \"{val}\""))
}

fn parse_f64(key: &str, val: &str, line: usize) -> Result<f64> {
    let v: f64 = val
        .parse()
        .map_err(|_| anyhow!("line {line}: {key} expects a number, got \"{val}\""))?;
    if !v.is_finite() {
        bail!("line {line}: {key} must be finite");
    }
    Ok(v)
}

fn parse_bool(key: &str, val: &str, line: usize) -> Result<bool> {
    match val {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("line {line}: {key} expects true or false, got \"{val}\""),
    }
}

/// Splits "a/b/c" into three slash-separated fields.
fn three_fields<'v>(key: &str, val: &'v str, line: usize) -> Result<[&'v str; 3]> {
    let parts: Vec<&str> = val.split('/').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("line {line}: {key} expects three values like a/b/c, got \"{val}\"");
    }
    Ok([parts[0], parts[1], parts[2]])
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut source: Option<DataSource> = None;
    let mut label: Option<String> = None;
    let mut split: Option<SplitSpec> = None;
    let mut lookback: Option<usize> = None;
    let mut horizon: Option<usize> = None;
    let mut target: Option<TargetSel> = None;
    let mut repeats = 10usize;
    let mut seed = 42u64;
    let mut out = PathBuf::from("naga-out");
    let mut rows = 512usize;
    let mut features = 3usize;
    let mut rank = 1usize;
    let mut noise = 0.01f64;
    let mut model = ModelSpec::default();
    let mut train = TrainConfig::default();
    let mut seen: Vec<String> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((k, v)) = stripped.split_once('=') else {
            bail!("line {line}: expected key = value, got \"{stripped}\"");
        };
        let key = k.trim();
        let val = v.trim();
        if val.is_empty() {
            bail!("line {line}: {key} has no value");
        }
        if seen.iter().any(|s| s == key) {
            bail!("line {line}: duplicate key {key}");
        }
        seen.push(key.to_string());

        match key {
            "data" => {
                if source.is_some() {
                    bail!("line {line}: data and synth are mutually exclusive");
                }
                source = Some(DataSource::Csv(PathBuf::from(val)));
            }
            "synth" => {
                if source.is_some() {
                    bail!("line {line}: data and synth are mutually exclusive");
                }
                source = Some(match val {
                    "bilinear" => DataSource::SynthBilinear,
                    "linear" => DataSource::SynthLinear,
                    _ => bail!("line {line}: synth expects bilinear or linear, got \"{val}\""),
                });
            }
            "label" => label = Some(val.to_string()),
            "split" => {
                if split.is_some() {
                    bail!("line {line}: split and split_index are mutually exclusive");
                }
                let [a, b, c] = three_fields(key, val, line)?;
                let spec = SplitSpec::Ratio {
                    train: parse_f64("split.train", a, line)?,
                    val: parse_f64("split.val", b, line)?,
                    test: parse_f64("split.test", c, line)?,
                };
                validate_ratio(&spec, line)?;
                split = Some(spec);
            }
            "split_index" => {
                if split.is_some() {
                    bail!("line {line}: split and split_index are mutually exclusive");
                }
                let [a, b, c] = three_fields(key, val, line)?;
                let (train_end, val_end, test_end) = (
                    parse_usize("split_index.train_end", a, line)?,
                    parse_usize("split_index.val_end", b, line)?,
                    parse_usize("split_index.test_end", c, line)?,
                );
                if !(0 < train_end && train_end < val_end && val_end < test_end) {
                    bail!("line {line}: split_index ends must be strictly increasing");
                }
                split = Some(SplitSpec::Index {
                    train_end,
                    val_end,
                    test_end,
                });
            }
            "lookback" => lookback = Some(parse_usize(key, val, line)?),
            "horizon" => horizon = Some(parse_usize(key, val, line)?),
            "target" => {
                target = Some(match val.parse::<usize>() {
                    Ok(idx) => TargetSel::Index(idx),
                    Err(_) => TargetSel::Name(val.to_string()),
                });
            }
            "repeats" => repeats = parse_usize(key, val, line)?,
            "seed" => seed = parse_u64(key, val, line)?,
            "out" => out = PathBuf::from(val),
            "rows" => rows = parse_usize(key, val, line)?,
            "features" => features = parse_usize(key, val, line)?,
            "rank" => rank = parse_usize(key, val, line)?,
            "noise" => noise = parse_f64(key, val, line)?,
            "d_hidden" => model.d_hidden = parse_usize(key, val, line)?,
            "d_inner" => model.d_inner = parse_usize(key, val, line)?,
            "d_state" => model.d_state = parse_usize(key, val, line)?,
            "h_head" => model.h_head = parse_usize(key, val, line)?,
            "k" => model.k = parse_usize(key, val, line)?,
            "num_cells" => model.num_cells = parse_usize(key, val, line)?,
            "use_vedic" => model.use_vedic = parse_bool(key, val, line)?,
            "use_flip" => model.use_flip = parse_bool(key, val, line)?,
            "mask_prob" => model.mask_prob = parse_f64(key, val, line)?,
            "dropout" => model.dropout_p = parse_f64(key, val, line)?,
            "lr" => train.lr = parse_f64(key, val, line)?,
            "weight_decay" => train.weight_decay = parse_f64(key, val, line)?,
            "batch_size" => train.batch_size = parse_usize(key, val, line)?,
            "max_epochs" => train.max_epochs = parse_usize(key, val, line)?,
            "patience" => train.patience = parse_usize(key, val, line)?,
            "min_delta" => train.min_delta = parse_f64(key, val, line)?,
            _ => bail!("line {line}: unknown key {key}"),
        }
    }

    let source = source.ok_or_else(|| anyhow!("config needs a data source: data = FILE or synth = bilinear|linear"))?;
    let lookback = lookback.ok_or_else(|| anyhow!("config needs lookback"))?;
    let horizon = horizon.ok_or_else(|| anyhow!("config needs horizon"))?;
    if lookback == 0 || horizon == 0 {
        bail!("lookback and horizon must be at least 1");
    }
    if repeats == 0 {
        bail!("repeats must be at least 1");
    }
    if rows == 0 || features == 0 || rank == 0 {
        bail!("rows, features and rank must be at least 1");
    }
    if noise < 0.0 {
        bail!("noise must be non-negative");
    }
    let label = label.unwrap_or_else(|| default_label(&source));

    // Surface dimension and optimizer nonsense now, as configuration
    // errors, instead of later inside the training run.
    model
        .to_model_config(1, horizon)
        .validate()
        .map_err(|e| anyhow!("model settings: {e}"))?;
    train.validate().map_err(|e| anyhow!("optimizer settings: {e}"))?;

    Ok(ExperimentConfig {
        label,
        source,
        split: split.unwrap_or(SplitSpec::Ratio {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }),
        lookback,
        horizon,
        target,
        repeats,
        seed,
        out,
        rows,
        features,
        rank,
        noise,
        model,
        train,
    })
}

fn validate_ratio(spec: &SplitSpec, line: usize) -> Result<()> {
    let SplitSpec::Ratio { train, val, test } = *spec else {
        return Ok(());
    };
    for (name, v) in [("train", train), ("val", val), ("test", test)] {
        if !(0.0..=1.0).contains(&v) {
            bail!("line {line}: split {name} fraction {v} outside [0,1]");
        }
    }
    if (train + val + test - 1.0).abs() > 1e-9 {
        bail!("line {line}: split fractions must sum to 1");
    }
    Ok(())
}

fn default_label(source: &DataSource) -> String {
    match source {
        DataSource::Csv(p) => p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        DataSource::SynthBilinear => "synth-bilinear".into(),
        DataSource::SynthLinear => "synth-linear".into(),
    }
}
