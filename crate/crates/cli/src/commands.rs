//! The subcommands, as library functions returning structured results.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use patchformer_core::checkpoint::Checkpoint;
use patchformer_core::data::{
    chronological_split, generate_synthetic_multienergy, load_csv, make_windows, Scaler, SyntheticSpec,
    TimeSeriesTable,
};
use patchformer_core::gradcheck::{check_model_gradients, GradCheckReport};
use patchformer_core::model::{ModelConfig, PatchformerModel};
use patchformer_core::report::{ResultRow, ResultsTable, AVERAGE_MODE};
use patchformer_core::training::{
    average_reports, evaluate, evaluate_raw, evaluate_repeat_last, evaluate_repeat_last_raw, train,
    MetricReport, Mode, TrainConfig, TrainOutcome,
};
use patchformer_core::{Error, Fault, Tensor};
use serde::Serialize;

use crate::config::{RunConfig, HORIZON_GRID, LOOKBACK_SWEEP_HORIZONS};
use crate::error::{CliError, CliResult};

/// Chronological train/validation/test fractions.
pub const SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);
pub const MODEL_LABEL: &str = "patchformer";
pub const BASELINE_LABEL: &str = "repeat-last";
pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_TXT: &str = "results.txt";
pub const MANIFEST: &str = "manifest.json";

pub struct Dataset {
    pub name: String,
    pub table: TimeSeriesTable,
    pub synthetic: Option<SyntheticSpec>,
}

/// Reads the CSV or generates the synthetic table named by the config.
pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    match (&cfg.data, cfg.synthetic_spec()?) {
        (Some(path), None) => Ok(Dataset {
            name: path
                .file_stem()
                .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned()),
            table: load_csv(path)?,
            synthetic: None,
        }),
        (None, Some(spec)) => Ok(Dataset {
            name: "synthetic".into(),
            table: generate_synthetic_multienergy(&spec)?,
            synthetic: Some(spec),
        }),
        (None, None) => Err(CliError::Config(
            "no dataset: pass --data <csv> or --synth <spec>".into(),
        )),
        (Some(_), Some(_)) => Err(CliError::Config("give either data or synth, not both".into())),
    }
}

/// Scaled splits of one channel selection.
pub struct Prepared {
    pub scaler: Scaler,
    pub train: TimeSeriesTable,
    pub val: TimeSeriesTable,
    pub test: TimeSeriesTable,
}

/// Splits `table` so every segment holds one `seq_len + pred_len` window,
/// then standardizes with `scaler` (fitted on the training split when absent).
pub fn prepare(
    table: &TimeSeriesTable,
    seq_len: usize,
    pred_len: usize,
    scaler: Option<&Scaler>,
) -> CliResult<Prepared> {
    let splits = chronological_split(table, SPLIT, seq_len + pred_len)?;
    let scaler = match scaler {
        Some(s) => s.clone(),
        None => Scaler::fit(&splits.train)?,
    };
    Ok(Prepared {
        train: scaler.apply(&splits.train)?,
        val: scaler.apply(&splits.val)?,
        test: scaler.apply(&splits.test)?,
        scaler,
    })
}

/// Everything needed to re-run a command bit for bit.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub seed: u64,
    pub dataset: &'a str,
    pub mode: String,
    pub split: (f64, f64, f64),
    pub config: &'a RunConfig,
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub synthetic: Option<&'a SyntheticSpec>,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("cannot encode {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Artifacts and scores of one training run.
pub struct TrainedRun {
    pub dir: PathBuf,
    pub mode: Mode,
    pub model: PatchformerModel,
    /// Model holding the best-validation parameters.
    pub best: PatchformerModel,
    pub outcome: TrainOutcome,
    pub scaler: Scaler,
    pub channel_names: Vec<String>,
    /// Scaled-space validation metrics of the best parameters.
    pub val: MetricReport,
    /// Scaled-space test metrics of the best parameters.
    pub test: MetricReport,
    pub baseline: MetricReport,
}

#[derive(Debug, Serialize)]
struct RunMetrics {
    best_epoch: Option<usize>,
    initial_train_loss: Option<f64>,
    final_train_loss: Option<f64>,
    val: MetricReport,
    test: MetricReport,
    test_raw: MetricReport,
    baseline_test: MetricReport,
    baseline_test_raw: MetricReport,
}

/// Trains one model on `mode`'s channels and writes into `dir`:
/// `manifest.json`, `final.ckpt`, `best.ckpt`, `loss_trace.csv` and `metrics.json`.
pub fn run_training(
    cfg: &RunConfig,
    dataset: &Dataset,
    mode: &Mode,
    seq_len: usize,
    pred_len: usize,
    dir: &Path,
    command: &str,
) -> CliResult<TrainedRun> {
    let table = mode.select(&dataset.table)?;
    let data = prepare(&table, seq_len, pred_len, None)?;
    let model_cfg = cfg.model_config(table.channels(), seq_len, pred_len);
    let train_cfg = cfg.train_config(mode.clone());
    let mut model = PatchformerModel::new(model_cfg.clone(), cfg.seed)?;
    create_dir(dir)?;
    write_json(
        &dir.join(MANIFEST),
        &Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: cfg.seed,
            dataset: &dataset.name,
            mode: mode.label(),
            split: SPLIT,
            config: cfg,
            model: &model_cfg,
            train: &train_cfg,
            synthetic: dataset.synthetic.as_ref(),
        },
    )?;

    let train_w = make_windows(&data.train, seq_len, pred_len)?;
    let val_w = make_windows(&data.val, seq_len, pred_len)?;
    let test_w = make_windows(&data.test, seq_len, pred_len)?;
    let outcome = train(&mut model, &train_w, Some(&val_w), &train_cfg)?;
    let mut best = PatchformerModel::new(model_cfg, cfg.seed)?;
    best.load_params(outcome.best_params.clone())?;

    let names = table.channel_names().to_vec();
    let scaler = Some(data.scaler.clone());
    Checkpoint::from_model(&model, names.clone(), scaler.clone()).save(&dir.join("final.ckpt"))?;
    Checkpoint::from_model(&best, names.clone(), scaler).save(&dir.join("best.ckpt"))?;
    let trace_path = dir.join("loss_trace.csv");
    fs::write(&trace_path, outcome.trace.to_csv()).map_err(|e| CliError::io(&trace_path, e))?;

    let val = evaluate(&best, &val_w)?;
    let test = evaluate(&best, &test_w)?;
    let baseline = evaluate_repeat_last(&test_w)?;
    write_json(
        &dir.join("metrics.json"),
        &RunMetrics {
            best_epoch: outcome.best_epoch,
            initial_train_loss: outcome.trace.initial_loss(),
            final_train_loss: outcome.trace.final_loss(),
            val,
            test,
            test_raw: evaluate_raw(&best, &test_w, &data.scaler)?,
            baseline_test: baseline,
            baseline_test_raw: evaluate_repeat_last_raw(&test_w, &data.scaler)?,
        },
    )?;
    Ok(TrainedRun {
        dir: dir.to_path_buf(),
        mode: mode.clone(),
        model,
        best,
        outcome,
        scaler: data.scaler,
        channel_names: names,
        val,
        test,
        baseline,
    })
}

/// `train`: one run into the output directory. With `dry_run` only the
/// resolved manifest is written.
pub fn cmd_train(cfg: &RunConfig, dry_run: bool) -> CliResult<Option<TrainedRun>> {
    let mode = cfg.channel_mode()?;
    if dry_run {
        create_dir(&cfg.out_dir)?;
        let model_cfg = cfg.model_config(0, cfg.seq_len, cfg.pred_len);
        let spec = cfg.synthetic_spec()?;
        write_json(
            &cfg.out_dir.join(MANIFEST),
            &Manifest {
                tool: env!("CARGO_PKG_NAME"),
                version: env!("CARGO_PKG_VERSION"),
                command: "train --dry-run",
                seed: cfg.seed,
                dataset: "",
                mode: mode.label(),
                split: SPLIT,
                config: cfg,
                model: &model_cfg,
                train: &cfg.train_config(mode.clone()),
                synthetic: spec.as_ref(),
            },
        )?;
        return Ok(None);
    }
    let dataset = load_dataset(cfg)?;
    let run = run_training(
        cfg,
        &dataset,
        &mode,
        cfg.seq_len,
        cfg.pred_len,
        &cfg.out_dir,
        "train",
    )?;
    Ok(Some(run))
}

/// Mode label of a model trained on `names` out of `table`'s channels.
fn mode_of(names: &[String], table: &TimeSeriesTable) -> Mode {
    match names {
        [one] if table.channels() > 1 => Mode::Univariate { target: one.clone() },
        _ if names == table.channel_names() => Mode::Multivariate,
        _ => Mode::Subset {
            channels: names.to_vec(),
        },
    }
}

/// Architecture fields that must agree between checkpoint and config.
fn check_compatible(path: &Path, stored: &ModelConfig, expected: &ModelConfig) -> CliResult<()> {
    let fields: [(&str, String, String); 10] = [
        (
            "seq_len",
            stored.seq_len.to_string(),
            expected.seq_len.to_string(),
        ),
        (
            "channels",
            stored.channels.to_string(),
            expected.channels.to_string(),
        ),
        (
            "patch_len",
            stored.patch_len.to_string(),
            expected.patch_len.to_string(),
        ),
        ("stride", stored.stride.to_string(), expected.stride.to_string()),
        (
            "d_model",
            stored.d_model.to_string(),
            expected.d_model.to_string(),
        ),
        (
            "n_heads",
            stored.n_heads.to_string(),
            expected.n_heads.to_string(),
        ),
        (
            "e_layers",
            stored.e_layers.to_string(),
            expected.e_layers.to_string(),
        ),
        (
            "d_layers",
            stored.d_layers.to_string(),
            expected.d_layers.to_string(),
        ),
        ("d_ff", stored.d_ff.to_string(), expected.d_ff.to_string()),
        (
            "norm_mode",
            format!("{:?}", stored.norm_mode),
            format!("{:?}", expected.norm_mode),
        ),
    ];
    for (name, have, want) in fields {
        if have != want {
            return Err(CliError::Config(format!(
                "checkpoint {} is incompatible: {name} is {have} there but {want} in the config",
                path.display()
            )));
        }
    }
    Ok(())
}

/// Scores of one checkpoint on the test split of the configured dataset.
pub struct Evaluation {
    pub mode: Mode,
    pub config: ModelConfig,
    pub model: MetricReport,
    pub baseline: MetricReport,
    pub model_raw: MetricReport,
    pub baseline_raw: MetricReport,
}

pub fn evaluate_checkpoint(cfg: &RunConfig, dataset: &Dataset, path: &Path) -> CliResult<Evaluation> {
    let ck = Checkpoint::load(path)?;
    let stored = &ck.header.config;
    let table = dataset.table.select_channels(&ck.header.channel_names)?;
    check_compatible(
        path,
        stored,
        &cfg.model_config(table.channels(), cfg.seq_len, stored.pred_len),
    )?;
    let data = prepare(&table, stored.seq_len, stored.pred_len, ck.header.scaler.as_ref())?;
    let test_w = make_windows(&data.test, stored.seq_len, stored.pred_len)?;
    let model = ck.to_model()?;
    Ok(Evaluation {
        mode: mode_of(&ck.header.channel_names, &dataset.table),
        config: stored.clone(),
        model: evaluate(&model, &test_w)?,
        baseline: evaluate_repeat_last(&test_w)?,
        model_raw: evaluate_raw(&model, &test_w, &data.scaler)?,
        baseline_raw: evaluate_repeat_last_raw(&test_w, &data.scaler)?,
    })
}

/// `evaluate`: one model row and one repeat-last row per checkpoint (plus
/// raw-unit rows when asked), merged into the output directory's results.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoints: &[PathBuf], raw: bool) -> CliResult<ResultsTable> {
    let dataset = load_dataset(cfg)?;
    let mut table = ResultsTable::new();
    for path in checkpoints {
        let e = evaluate_checkpoint(cfg, &dataset, path)?;
        let (i, o, mode) = (e.config.seq_len, e.config.pred_len, e.mode.label());
        table.insert(ResultRow::new(&dataset.name, MODEL_LABEL, &mode, i, o, &e.model));
        table.insert(ResultRow::new(
            &dataset.name,
            BASELINE_LABEL,
            &mode,
            i,
            o,
            &e.baseline,
        ));
        if raw {
            table.insert(ResultRow::new(
                &dataset.name,
                format!("{MODEL_LABEL} (raw)"),
                &mode,
                i,
                o,
                &e.model_raw,
            ));
            table.insert(ResultRow::new(
                &dataset.name,
                format!("{BASELINE_LABEL} (raw)"),
                &mode,
                i,
                o,
                &e.baseline_raw,
            ));
        }
    }
    merge_results(&cfg.out_dir, &table)?;
    Ok(table)
}

/// Adds `rows` to `dir/results.csv` (replacing rows with equal keys) and
/// re-renders `dir/results.txt`. Returns the merged table.
pub fn merge_results(dir: &Path, rows: &ResultsTable) -> CliResult<ResultsTable> {
    create_dir(dir)?;
    let csv_path = dir.join(RESULTS_CSV);
    let mut merged = if csv_path.is_file() {
        let text = fs::read_to_string(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
        ResultsTable::from_csv(&text)?
    } else {
        ResultsTable::new()
    };
    merged.extend(rows.clone());
    write_results(dir, &merged)?;
    Ok(merged)
}

fn write_results(dir: &Path, table: &ResultsTable) -> CliResult<()> {
    let csv_path = dir.join(RESULTS_CSV);
    fs::write(&csv_path, table.to_csv()?).map_err(|e| CliError::io(&csv_path, e))?;
    let txt_path = dir.join(RESULTS_TXT);
    fs::write(&txt_path, table.render_text()).map_err(|e| CliError::io(&txt_path, e))
}

/// `forecast`: raw-unit forecasts for the `I` rows of `window`, with
/// timestamps continuing at the window's sampling interval.
pub fn cmd_forecast(checkpoint: &Path, window: &Path, output: &Path) -> CliResult<TimeSeriesTable> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = &ck.header.config;
    let input = load_csv(window)?;
    if input.len() != cfg.seq_len {
        return Err(Error::Data(format!(
            "window {} has {} rows but the model needs exactly I = {}",
            window.display(),
            input.len(),
            cfg.seq_len
        ))
        .into());
    }
    let input = if ck.header.channel_names.is_empty() {
        input
    } else {
        input
            .select_channels(&ck.header.channel_names)
            .map_err(|e| match e {
                Error::Config(msg) => {
                    Error::Data(format!("window does not match the checkpoint's channels: {msg}"))
                }
                other => other,
            })?
    };
    if input.channels() != cfg.channels {
        return Err(Error::Data(format!(
            "window has {} channels, the model expects {}",
            input.channels(),
            cfg.channels
        ))
        .into());
    }
    let mut x = input.values().to_vec();
    if let Some(s) = &ck.header.scaler {
        s.apply_values(&mut x);
    }
    let model = ck.to_model()?;
    let mut y = model
        .forward(&Tensor::new(&[cfg.seq_len, cfg.channels], x)?)?
        .data()
        .to_vec();
    if let Some(s) = &ck.header.scaler {
        s.invert_values(&mut y);
    }
    let out = TimeSeriesTable::new(
        input.future_timestamps(cfg.pred_len)?,
        y,
        input.channel_names().to_vec(),
    )?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    out.write_csv(output)?;
    Ok(out)
}

/// `gradcheck`: finite-difference check of every parameter of a small model.
pub fn cmd_gradcheck(
    cfg: &RunConfig,
    channels: usize,
    eps: f64,
    tol: f64,
    corrupt: bool,
) -> CliResult<GradCheckReport> {
    let model_cfg = cfg.model_config(channels, cfg.seq_len, cfg.pred_len);
    let fault = if corrupt {
        Fault::MatmulRhsGrad
    } else {
        Fault::None
    };
    Ok(check_model_gradients(&model_cfg, cfg.seed, eps, tol, fault)?)
}

/// `synth`: writes the generated table as CSV.
pub fn cmd_synth(spec: &SyntheticSpec, output: &Path) -> CliResult<TimeSeriesTable> {
    let table = generate_synthetic_multienergy(spec)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    table.write_csv(output)?;
    Ok(table)
}

/// Experiment grids run by `sweep`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// One run per lookback in `lookbacks` and horizon (default 96, 720).
    Lookback,
    /// One run per horizon (default 96, 192, 336, 720) at `seq_len`.
    Horizon,
    /// Per horizon: one model on all targets together, one model per
    /// target, and the average of the per-target scores.
    Protocol,
}

impl Grid {
    fn name(self) -> &'static str {
        match self {
            Grid::Lookback => "lookback",
            Grid::Horizon => "horizon",
            Grid::Protocol => "protocol",
        }
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// `sweep`: trains and scores every grid entry (each in its own directory),
/// writes the grid's table under `sweep-<grid>/` and merges it into the
/// output directory's results.
pub fn cmd_sweep(cfg: &RunConfig, grid: Grid) -> CliResult<ResultsTable> {
    let dataset = load_dataset(cfg)?;
    let root = cfg.out_dir.join(format!("sweep-{}", grid.name()));
    let mut entries: Vec<(Mode, usize, usize)> = Vec::new();
    match grid {
        Grid::Lookback => {
            let mode = cfg.channel_mode()?;
            for &o in cfg.pred_lens.as_deref().unwrap_or(&LOOKBACK_SWEEP_HORIZONS) {
                for &i in &cfg.lookbacks {
                    entries.push((mode.clone(), i, o));
                }
            }
        }
        Grid::Horizon => {
            let mode = cfg.channel_mode()?;
            for &o in cfg.pred_lens.as_deref().unwrap_or(&HORIZON_GRID) {
                entries.push((mode.clone(), cfg.seq_len, o));
            }
        }
        Grid::Protocol => {
            if cfg.targets.is_empty() {
                return Err(CliError::Config("the protocol grid needs targets".into()));
            }
            for &o in cfg.pred_lens.as_deref().unwrap_or(&HORIZON_GRID) {
                entries.push((
                    Mode::Subset {
                        channels: cfg.targets.clone(),
                    },
                    cfg.seq_len,
                    o,
                ));
                for t in &cfg.targets {
                    entries.push((Mode::Univariate { target: t.clone() }, cfg.seq_len, o));
                }
            }
        }
    }
    // Fail before any training if some entry cannot be windowed.
    for (mode, i, o) in &entries {
        let table = mode.select(&dataset.table)?;
        chronological_split(&table, SPLIT, i + o)?;
        cfg.model_config(table.channels(), *i, *o).validate()?;
    }

    let mut table = ResultsTable::new();
    let mut per_target: Vec<(usize, MetricReport, MetricReport)> = Vec::new();
    for (mode, i, o) in &entries {
        let label = match mode {
            Mode::Subset { .. } if grid == Grid::Protocol => "all-at-once".to_string(),
            m => m.label(),
        };
        let dir = root.join(format!("{}-I{i}-O{o}", slug(&label)));
        let run = run_training(
            cfg,
            &dataset,
            mode,
            *i,
            *o,
            &dir,
            &format!("sweep --grid {}", grid.name()),
        )?;
        println!(
            "{label} I={i} O={o}: test mse {:.6} mae {:.6} (repeat-last mse {:.6})",
            run.test.mse, run.test.mae, run.baseline.mse
        );
        table.insert(ResultRow::new(
            &dataset.name,
            MODEL_LABEL,
            &label,
            *i,
            *o,
            &run.test,
        ));
        table.insert(ResultRow::new(
            &dataset.name,
            BASELINE_LABEL,
            &label,
            *i,
            *o,
            &run.baseline,
        ));
        if matches!(mode, Mode::Univariate { .. }) && grid == Grid::Protocol {
            per_target.push((*o, run.test, run.baseline));
        }
    }
    if grid == Grid::Protocol {
        for &o in cfg.pred_lens.as_deref().unwrap_or(&HORIZON_GRID) {
            let runs: Vec<_> = per_target.iter().filter(|r| r.0 == o).collect();
            let model: Vec<MetricReport> = runs.iter().map(|r| r.1).collect();
            let base: Vec<MetricReport> = runs.iter().map(|r| r.2).collect();
            let i = cfg.seq_len;
            table.insert(ResultRow::new(
                &dataset.name,
                MODEL_LABEL,
                AVERAGE_MODE,
                i,
                o,
                &average_reports(&model)?,
            ));
            table.insert(ResultRow::new(
                &dataset.name,
                BASELINE_LABEL,
                AVERAGE_MODE,
                i,
                o,
                &average_reports(&base)?,
            ));
        }
    }
    write_results(&root, &table)?;
    merge_results(&cfg.out_dir, &table)?;
    Ok(table)
}
