//! Run configuration: built-in defaults, overridden by a flat key-value
//! config file, overridden by command-line flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use patchformer_core::data::SyntheticSpec;
use patchformer_core::model::{ModelConfig, NormMode};
use patchformer_core::training::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "PATCHFORMER_OUT";
/// Output directory when neither flag, config file nor environment sets one.
pub const DEFAULT_OUT_DIR: &str = "runs";

/// Which channels one run models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    /// Every channel of the dataset.
    #[default]
    Multivariate,
    /// Exactly one target channel.
    Univariate,
    /// The target channels, forecast together by one model.
    AllAtOnce,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Multivariate => "multivariate",
            RunMode::Univariate => "univariate",
            RunMode::AllAtOnce => "all-at-once",
        })
    }
}

/// Model width override for one horizon, written `pred_len:d_model:d_ff`
/// (e.g. `720:256:1024`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct HorizonDims {
    pub pred_len: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

impl FromStr for HorizonDims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let parse = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| format!("'{s}' is not pred_len:d_model:d_ff"))
        };
        match parts.as_slice() {
            [o, d, f] => Ok(Self {
                pred_len: parse(o)?,
                d_model: parse(d)?,
                d_ff: parse(f)?,
            }),
            _ => Err(format!("'{s}' is not pred_len:d_model:d_ff")),
        }
    }
}

impl TryFrom<String> for HorizonDims {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<HorizonDims> for String {
    fn from(h: HorizonDims) -> String {
        format!("{}:{}:{}", h.pred_len, h.d_model, h.d_ff)
    }
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// CSV dataset (first column `date`).
    pub data: Option<PathBuf>,
    /// Synthetic dataset: a spec file or inline `key=value,...` pairs.
    pub synth: Option<String>,
    pub targets: Vec<String>,
    pub mode: RunMode,
    pub seq_len: usize,
    pub pred_len: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub e_layers: usize,
    pub d_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub norm_mode: NormMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Horizons of the evaluation and sweep grids; `None` picks the grid's own default.
    pub pred_lens: Option<Vec<usize>>,
    pub lookbacks: Vec<usize>,
    pub horizon_dims: Vec<HorizonDims>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            data: None,
            synth: None,
            targets: Vec::new(),
            mode: RunMode::Multivariate,
            seq_len: model.seq_len,
            pred_len: model.pred_len,
            patch_len: model.patch_len,
            stride: model.stride,
            d_model: model.d_model,
            n_heads: model.n_heads,
            e_layers: model.e_layers,
            d_layers: model.d_layers,
            d_ff: model.d_ff,
            dropout: model.dropout,
            norm_mode: model.norm_mode,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr,
            seed: train.seed,
            out_dir: default_out_dir(),
            pred_lens: None,
            lookbacks: LOOKBACK_GRID.to_vec(),
            horizon_dims: Vec::new(),
        }
    }
}

/// Horizons of the standard evaluation grid.
pub const HORIZON_GRID: [usize; 4] = [96, 192, 336, 720];
/// Lookbacks of the lookback sweep.
pub const LOOKBACK_GRID: [usize; 5] = [24, 48, 96, 192, 336];
/// Horizons of the lookback sweep.
pub const LOOKBACK_SWEEP_HORIZONS: [usize; 2] = [96, 720];

fn default_out_dir() -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(DEFAULT_OUT_DIR),
    }
}

/// Optional value for every [`RunConfig`] field; used both for config
/// files and for command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// CSV dataset whose first column is `date`
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Synthetic dataset: spec file path or inline `key=value,...`
    #[arg(long)]
    pub synth: Option<String>,
    /// Target channel names (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    /// Channels modelled by one run
    #[arg(long, value_enum)]
    pub mode: Option<RunMode>,
    /// Lookback length I
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Horizon O
    #[arg(long)]
    pub pred_len: Option<usize>,
    #[arg(long)]
    pub patch_len: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    /// Encoder layers N
    #[arg(long)]
    pub e_layers: Option<usize>,
    /// Decoder layers M
    #[arg(long)]
    pub d_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Layer-norm statistics: global (whole block) or per-row
    #[arg(long, value_parser = parse_norm_mode)]
    pub norm_mode: Option<NormMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: $PATCHFORMER_OUT or ./runs)
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Horizon grid (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub pred_lens: Option<Vec<usize>>,
    /// Lookback grid of the lookback sweep (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub lookbacks: Option<Vec<usize>>,
    /// Per-horizon widths, `pred_len:d_model:d_ff` (comma separated)
    #[arg(long, value_delimiter = ',')]
    pub horizon_dims: Option<Vec<HorizonDims>>,
}

fn parse_norm_mode(s: &str) -> Result<NormMode, String> {
    match s {
        "global" => Ok(NormMode::Global),
        "per-row" | "per_row" => Ok(NormMode::PerRow),
        _ => Err(format!("unknown norm mode '{s}' (expected global or per-row)")),
    }
}

impl Overrides {
    /// Reads a flat `key = value` file; keys are [`RunConfig`] field names.
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("config file {}: {}", path.display(), e.message())))
    }
}

macro_rules! apply_fields {
    ($cfg:expr, $o:expr; $($field:ident),* ; $($opt:ident),*) => {{
        $( if let Some(v) = &$o.$field { $cfg.$field = v.clone(); } )*
        $( if $o.$opt.is_some() { $cfg.$opt = $o.$opt.clone(); } )*
    }};
}

impl RunConfig {
    /// Small layout used by the gradient check; data fields keep their defaults.
    pub fn tiny() -> Self {
        let m = ModelConfig::tiny();
        Self {
            seq_len: m.seq_len,
            pred_len: m.pred_len,
            patch_len: m.patch_len,
            stride: m.stride,
            d_model: m.d_model,
            n_heads: m.n_heads,
            e_layers: m.e_layers,
            d_layers: m.d_layers,
            d_ff: m.d_ff,
            dropout: m.dropout,
            ..Self::default()
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        apply_fields!(self, o;
            targets, mode, seq_len, pred_len, patch_len, stride, d_model, n_heads, e_layers,
            d_layers, d_ff, dropout, norm_mode, epochs, batch_size, lr, seed, out_dir, lookbacks,
            horizon_dims;
            data, synth, pred_lens);
    }

    /// `base`, then the config file (if any), then the flags.
    pub fn resolve(base: RunConfig, file: Option<&Path>, flags: &Overrides) -> CliResult<Self> {
        let mut cfg = base;
        if let Some(path) = file {
            cfg.apply(&Overrides::from_file(path)?);
        }
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.data.is_some() && self.synth.is_some() {
            return Err(CliError::Config("give either data or synth, not both".into()));
        }
        if self.lookbacks.is_empty() || self.pred_lens.as_ref().is_some_and(Vec::is_empty) {
            return Err(CliError::Config(
                "lookbacks and pred_lens must not be empty".into(),
            ));
        }
        self.train_config(Mode::Multivariate).validate()?;
        self.model_config(1, self.seq_len, self.pred_len).validate()?;
        Ok(())
    }

    /// Model layout for `channels` channels at lookback `seq_len` and horizon
    /// `pred_len`, with any per-horizon width override applied.
    pub fn model_config(&self, channels: usize, seq_len: usize, pred_len: usize) -> ModelConfig {
        let (d_model, d_ff) = self
            .horizon_dims
            .iter()
            .find(|h| h.pred_len == pred_len)
            .map_or((self.d_model, self.d_ff), |h| (h.d_model, h.d_ff));
        ModelConfig {
            seq_len,
            pred_len,
            channels,
            patch_len: self.patch_len,
            stride: self.stride,
            d_model,
            n_heads: self.n_heads,
            e_layers: self.e_layers,
            d_layers: self.d_layers,
            d_ff,
            dropout: self.dropout,
            norm_mode: self.norm_mode,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self, mode: Mode) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            dropout: self.dropout,
            seed: self.seed,
            mode,
        }
    }

    /// The channel selection implied by `mode` and `targets`.
    pub fn channel_mode(&self) -> CliResult<Mode> {
        match self.mode {
            RunMode::Multivariate => Ok(Mode::Multivariate),
            RunMode::Univariate => match self.targets.as_slice() {
                [t] => Ok(Mode::Univariate { target: t.clone() }),
                _ => Err(CliError::Config(format!(
                    "univariate mode needs exactly one target, got {}",
                    self.targets.len()
                ))),
            },
            RunMode::AllAtOnce => {
                if self.targets.is_empty() {
                    return Err(CliError::Config("all-at-once mode needs targets".into()));
                }
                Ok(Mode::Subset {
                    channels: self.targets.clone(),
                })
            }
        }
    }

    /// The synthetic spec, when the run uses generated data.
    pub fn synthetic_spec(&self) -> CliResult<Option<SyntheticSpec>> {
        self.synth.as_deref().map(parse_synth_spec).transpose()
    }
}

/// A spec file path, or inline `key=value` pairs separated by commas.
/// Keys are [`SyntheticSpec`] field names; `default` means the built-in spec.
pub fn parse_synth_spec(spec: &str) -> CliResult<SyntheticSpec> {
    let path = Path::new(spec);
    let text = if spec == "default" {
        String::new()
    } else if path.is_file() {
        fs::read_to_string(path).map_err(|e| CliError::io(path, e))?
    } else if spec.contains('=') {
        let mut lines = Vec::new();
        for pair in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("synth entry '{pair}' is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let line = format!("{k} = {v}");
            // Bare words and timestamps are taken as strings.
            let scalar = toml::from_str::<toml::Table>(&line)
                .is_ok_and(|t| !matches!(t.get(k), Some(toml::Value::Datetime(_))));
            if scalar {
                lines.push(line);
            } else {
                lines.push(format!("{k} = {v:?}"));
            }
        }
        lines.join("\n")
    } else {
        return Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "synth spec file not found"),
        ));
    };
    let spec: SyntheticSpec =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("synth spec: {}", e.message())))?;
    spec.validate()?;
    Ok(spec)
}
