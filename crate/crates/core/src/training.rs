//! Loss and metrics, the Adam optimizer, the epoch loop and evaluation
//! protocols.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{Scaler, TimeSeriesTable, Windows};
use crate::error::{Error, Result};
use crate::model::{Ctx, PatchformerModel};
use crate::rng::Rng;
use crate::tensor::{ParameterStore, Tensor};

/// Mean squared difference over every entry; differentiable.
pub fn mse_loss<'g>(pred: &Var<'g>, target: &Var<'g>) -> Result<Var<'g>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "loss shapes differ: prediction {:?}, target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.sub(target)?.square().mean())
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::dim(format!(
            "metric inputs differ in length: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::dim("metric over zero entries"));
    }
    Ok(())
}

pub fn mse_metric(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn mae_metric(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// MSE and MAE over `n` scored entries (windows × steps × channels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn from_pair(pred: &[f64], target: &[f64]) -> Result<Self> {
        Ok(Self {
            mse: mse_metric(pred, target)?,
            mae: mae_metric(pred, target)?,
            n: pred.len(),
        })
    }

    /// `mae² ≤ mse`, with a relative slack for rounding.
    pub fn is_consistent(&self) -> bool {
        self.n > 0
            && self.mse >= 0.0
            && self.mae >= 0.0
            && self.mae * self.mae <= self.mse * (1.0 + 1e-12) + f64::MIN_POSITIVE
    }

    pub fn bit_eq(&self, other: &MetricReport) -> bool {
        self.mse.to_bits() == other.mse.to_bits()
            && self.mae.to_bits() == other.mae.to_bits()
            && self.n == other.n
    }
}

/// Arithmetic mean of per-run metrics (the "average" protocol).
pub fn average_reports(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::Config("nothing to average".into()));
    }
    let k = reports.len() as f64;
    Ok(MetricReport {
        mse: reports.iter().map(|r| r.mse).sum::<f64>() / k,
        mae: reports.iter().map(|r| r.mae).sum::<f64>() / k,
        n: reports.iter().map(|r| r.n).sum(),
    })
}

/// Adam moments and step count for one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParameterStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            names: store.names().map(str::to_string).collect(),
            m: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }
}

/// One bias-corrected Adam update of every trainable parameter, then the
/// gradients are cleared.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState) -> Result<()> {
    if !store.names().eq(state.names.iter().map(String::as_str)) {
        return Err(Error::Training(
            "optimizer state does not match parameter layout".into(),
        ));
    }
    if let Some((name, _)) = store
        .iter()
        .find(|(_, t)| t.requires_grad() && t.grad().is_none())
    {
        return Err(Error::Training(format!("parameter '{name}' has no gradient")));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (_, t)) in store.iter_mut().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let g = t.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((theta, g), m), v) in t
            .data_mut()
            .iter_mut()
            .zip(&g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    store.zero_grads();
    Ok(())
}

/// Which channels a run models.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mode {
    /// Every channel of the table.
    #[default]
    Multivariate,
    /// Only the target channel.
    Univariate { target: String },
    /// A named channel subset forecast together ("all-at-once").
    Subset { channels: Vec<String> },
}

impl Mode {
    /// Restricts `table` to the channels this mode models.
    pub fn select(&self, table: &TimeSeriesTable) -> Result<TimeSeriesTable> {
        match self {
            Mode::Multivariate => Ok(table.clone()),
            Mode::Univariate { target } => table.select_channels(&[target]),
            Mode::Subset { channels } => {
                if channels.is_empty() {
                    return Err(Error::Config("channel subset is empty".into()));
                }
                table.select_channels(channels)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Mode::Multivariate => "multivariate".into(),
            Mode::Univariate { target } => format!("univariate:{target}"),
            Mode::Subset { channels } => format!("all-at-once:{}", channels.join("+")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            dropout: 0.1,
            seed: 0,
            mode: Mode::Multivariate,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Mean training loss and validation metrics of one epoch (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<MetricReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Loss of every optimizer step, in order.
    pub steps: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

impl LossTrace {
    /// Loss of the very first batch, before any update.
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().copied()
    }

    /// Mean batch loss of the last epoch.
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn bit_eq(&self, other: &LossTrace) -> bool {
        let eq = |a: f64, b: f64| a.to_bits() == b.to_bits();
        self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| eq(*a, *b))
            && self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && eq(a.train_loss, b.train_loss)
                    && match (&a.val, &b.val) {
                        (Some(x), Some(y)) => x.bit_eq(y),
                        (None, None) => true,
                        _ => false,
                    }
            })
    }

    /// `epoch,split,mse,mae` rows: train loss per epoch and validation metrics.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,mse,mae\n");
        for e in &self.epochs {
            s.push_str(&format!("{},train,{},\n", e.epoch, e.train_loss));
            if let Some(v) = &e.val {
                s.push_str(&format!("{},val,{},{}\n", e.epoch, v.mse, v.mae));
            }
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: LossTrace,
    /// Epoch with the lowest validation MSE (1-based), if validation ran.
    pub best_epoch: Option<usize>,
    /// Parameters at the best validation epoch (final parameters when no
    /// validation split was given).
    pub best_params: ParameterStore,
}

/// `[B, I, C]` inputs and `[B, O, C]` targets for the given window indices.
pub fn assemble_batch(windows: &Windows<'_>, idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let (i, o, c) = (windows.seq_len(), windows.pred_len(), windows.channels());
    let mut x = Vec::with_capacity(idx.len() * i * c);
    let mut y = Vec::with_capacity(idx.len() * o * c);
    for &w in idx {
        x.extend_from_slice(windows.enc_slice(w));
        y.extend_from_slice(windows.target_slice(w));
    }
    Ok((
        Tensor::new(&[idx.len(), i, c], x)?,
        Tensor::new(&[idx.len(), o, c], y)?,
    ))
}

fn check_compat(model: &PatchformerModel, windows: &Windows<'_>) -> Result<()> {
    let cfg = model.config();
    if windows.channels() != cfg.channels
        || windows.seq_len() != cfg.seq_len
        || windows.pred_len() != cfg.pred_len
    {
        return Err(Error::Config(format!(
            "model expects (I={}, O={}, C={}), data windows are (I={}, O={}, C={})",
            cfg.seq_len,
            cfg.pred_len,
            cfg.channels,
            windows.seq_len(),
            windows.pred_len(),
            windows.channels()
        )));
    }
    Ok(())
}

/// Trains `model` in place on scaled windows of `train`, scoring `val` after
/// every epoch. Batches are a seeded per-epoch shuffle with the last partial
/// batch kept. A non-finite batch loss aborts with the epoch and batch index.
pub fn train(
    model: &mut PatchformerModel,
    train: &Windows<'_>,
    val: Option<&Windows<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compat(model, train)?;
    if let Some(v) = val {
        check_compat(model, v)?;
    }
    let root = Rng::new(cfg.seed);
    let mut order_rng = root.fork(1);
    let mut dropout_rng = root.fork(2);
    let mut adam = AdamState::new(model.params(), cfg.lr);
    let mut trace = LossTrace::default();
    let mut best: Option<(usize, f64, ParameterStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut epoch_sum = 0.0;
        let batches = order.chunks(cfg.batch_size);
        let n_batches = batches.len();
        for (b, idx) in batches.enumerate() {
            let (x, y) = assemble_batch(train, idx)?;
            let g = Graph::new();
            let xv = g.constant(x);
            let yv = g.constant(y);
            let mut ctx = Ctx {
                dropout: cfg.dropout,
                norm_mode: model.config().norm_mode,
                rng: Some(&mut dropout_rng),
            };
            let pred = model.forward_batch_with(&g, model.params(), xv, &mut ctx)?;
            let loss = mse_loss(&pred, &yv)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            g.backward(loss)?;
            g.accumulate_into(model.params_mut())?;
            adam_step(model.params_mut(), &mut adam)?;
            trace.steps.push(value);
            epoch_sum += value;
        }
        let val_report = val.map(|v| evaluate(model, v)).transpose()?;
        if let Some(r) = &val_report {
            if best.as_ref().is_none_or(|(_, m, _)| r.mse < *m) {
                best = Some((epoch, r.mse, model.params().clone()));
            }
        }
        trace.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_sum / n_batches as f64,
            val: val_report,
        });
    }

    let (best_epoch, best_params) = match best {
        Some((e, _, p)) => (Some(e), p),
        None => (None, model.params().clone()),
    };
    Ok(TrainOutcome {
        trace,
        best_epoch,
        best_params,
    })
}

/// Windows per evaluation forward pass.
pub const EVAL_BATCH: usize = 64;

/// Evaluation-mode forecasts for windows `idx`, row-major `[len, O, C]`.
pub fn predict(model: &PatchformerModel, windows: &Windows<'_>, idx: &[usize]) -> Result<Vec<f64>> {
    check_compat(model, windows)?;
    let mut out = Vec::with_capacity(idx.len() * windows.pred_len() * windows.channels());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = assemble_batch(windows, chunk)?;
        let g = Graph::new();
        let xv = g.constant(x);
        let mut ctx = Ctx::eval(model.config().norm_mode);
        let pred = model.forward_batch_with(&g, model.params(), xv, &mut ctx)?;
        out.extend_from_slice(g.value(pred).data());
    }
    Ok(out)
}

/// Scores per-window forecasts. Sums are formed per window and then added in
/// window order, so the result does not depend on evaluation order.
fn score(
    windows: &Windows<'_>,
    raw: Option<&Scaler>,
    mut forecast: impl FnMut(&[usize]) -> Result<Vec<f64>>,
) -> Result<MetricReport> {
    let per = windows.pred_len() * windows.channels();
    if windows.is_empty() || per == 0 {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let mut sq = vec![0.0; windows.len()];
    let mut abs = vec![0.0; windows.len()];
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let mut pred = forecast(chunk)?;
        for (k, &w) in chunk.iter().enumerate() {
            let p = &mut pred[k * per..(k + 1) * per];
            let mut target = windows.target_slice(w).to_vec();
            if let Some(scaler) = raw {
                scaler.invert_values(p);
                scaler.invert_values(&mut target);
            }
            let (p, t) = (&*p, &target);
            sq[w] = p.iter().zip(t).map(|(p, t)| (p - t) * (p - t)).sum();
            abs[w] = p.iter().zip(t).map(|(p, t)| (p - t).abs()).sum();
        }
    }
    let n = windows.len() * per;
    let report = MetricReport {
        mse: sq.iter().sum::<f64>() / n as f64,
        mae: abs.iter().sum::<f64>() / n as f64,
        n,
    };
    if !report.mse.is_finite() || !report.mae.is_finite() {
        return Err(Error::NonFinite("evaluation metrics".into()));
    }
    Ok(report)
}

/// Scaled-space MSE/MAE of the model over every window of the split.
pub fn evaluate(model: &PatchformerModel, windows: &Windows<'_>) -> Result<MetricReport> {
    check_compat(model, windows)?;
    score(windows, None, |chunk| predict(model, windows, chunk))
}

/// [`evaluate`] after mapping forecasts and targets back to raw units.
pub fn evaluate_raw(
    model: &PatchformerModel,
    windows: &Windows<'_>,
    scaler: &Scaler,
) -> Result<MetricReport> {
    check_compat(model, windows)?;
    check_scaler(scaler, windows)?;
    score(windows, Some(scaler), |chunk| predict(model, windows, chunk))
}

fn check_scaler(scaler: &Scaler, windows: &Windows<'_>) -> Result<()> {
    if scaler.channels() != windows.channels() {
        return Err(Error::Config(format!(
            "scaler covers {} channels, windows have {}",
            scaler.channels(),
            windows.channels()
        )));
    }
    Ok(())
}

/// Forecast that repeats each channel's last observed value over the horizon.
pub fn repeat_last_forecast(window: &[f64], channels: usize, pred_len: usize) -> Vec<f64> {
    let last = &window[window.len() - channels..];
    last.repeat(pred_len)
}

/// Scaled-space MSE/MAE of the repeat-last forecaster over every window.
pub fn evaluate_repeat_last(windows: &Windows<'_>) -> Result<MetricReport> {
    repeat_last_report(windows, None)
}

/// [`evaluate_repeat_last`] in raw units.
pub fn evaluate_repeat_last_raw(windows: &Windows<'_>, scaler: &Scaler) -> Result<MetricReport> {
    check_scaler(scaler, windows)?;
    repeat_last_report(windows, Some(scaler))
}

fn repeat_last_report(windows: &Windows<'_>, raw: Option<&Scaler>) -> Result<MetricReport> {
    let (c, o) = (windows.channels(), windows.pred_len());
    score(windows, raw, |chunk| {
        Ok(chunk
            .iter()
            .flat_map(|&w| repeat_last_forecast(windows.enc_slice(w), c, o))
            .collect())
    })
}
