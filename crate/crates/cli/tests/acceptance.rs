//! End-to-end acceptance run: one PASS/FAIL line per criterion, then a
//! single assertion that all of them passed.
//!
//! The learning-signal and determinism criteria train a D = 64 model on
//! 5000 synthetic rows twice; expect this target to take tens of minutes
//! on one core.

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use patchformer_cli::commands::{
    cmd_gradcheck, cmd_sweep, cmd_train, prepare, Grid, TrainedRun, MODEL_LABEL, RESULTS_CSV,
};
use patchformer_cli::config::RunConfig;
use patchformer_core::checkpoint::Checkpoint;
use patchformer_core::data::{make_windows, sine_wave_table};
use patchformer_core::embedding::{compute_patch_count, patch_series, PatchConfig};
use patchformer_core::model::{layer_norm, LayerNormParams, ModelConfig, NormMode, PatchformerModel};
use patchformer_core::report::{ResultsTable, AVERAGE_MODE};
use patchformer_core::training::{average_reports, evaluate, train, MetricReport, Mode, TrainConfig};
use patchformer_core::{Graph, ParameterStore, Rng, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Reports gathered along the way for the `mae² ≤ mse` check.
#[derive(Default)]
struct Seen {
    reports: Vec<(String, MetricReport)>,
}

impl Seen {
    fn add(&mut self, label: impl Into<String>, r: MetricReport) {
        self.reports.push((label.into(), r));
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let report = cmd_gradcheck(&RunConfig::tiny(), 2, 1e-4, 1e-4, false).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let expected = PatchformerModel::new(ModelConfig::tiny(), 0)
        .map_err(|e| e.to_string())?
        .params()
        .len();
    check(
        report.passed()
            && report.max_rel_error() <= 1e-4
            && elapsed < Duration::from_secs(60)
            && report.params.len() == expected,
        format!(
            "max relative error {:.2e} over {} parameters in {:.1}s",
            report.max_rel_error(),
            report.params.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn patch_algebra() -> Outcome {
    let mut rng = Rng::new(2024);
    for case in 0..200 {
        let i = 1 + (rng.uniform(0.0, 512.0) as usize).min(511);
        let p = 1 + (rng.uniform(0.0, i as f64) as usize).min(i - 1);
        let s = 1 + (rng.uniform(0.0, p as f64) as usize).min(p - 1);
        let cfg = PatchConfig {
            patch_len: p,
            stride: s,
            d_model: 1,
            max_patches: 1,
        };
        let formula = (i - p) / s + 2;
        let x: Vec<f64> = (0..i).map(|v| v as f64 * 0.5 - 3.0).collect();
        let mut padded = x.clone();
        padded.extend(std::iter::repeat_n(x[i - 1], s));
        let brute: Vec<&[f64]> = (0..)
            .map(|z| z * s)
            .take_while(|start| start + p <= padded.len())
            .map(|start| &padded[start..start + p])
            .collect();
        let grid = patch_series(&x, &cfg).map_err(|e| e.to_string())?;
        let count = compute_patch_count(i, &cfg).map_err(|e| e.to_string())?;
        let rows_match = (0..grid.rows).all(|z| grid.row(z) == brute[z]);
        if count != formula || grid.rows != formula || brute.len() != formula || !rows_match {
            return Err(format!(
                "case {case}: I={i} P={p} S={s}: formula {formula}, counted {count}, grid {}, oracle {}",
                grid.rows,
                brute.len()
            ));
        }
    }
    Ok("200 random (I, P, S) agree with the formula and the sliding-window oracle".into())
}

fn shape_contract() -> Outcome {
    let mut rng = Rng::new(3);
    let mut checked = 0;
    for &c in &[1, 7, 19] {
        for &o in &[96, 192, 336, 720] {
            let cfg = ModelConfig {
                seq_len: 96,
                pred_len: o,
                channels: c,
                ..ModelConfig::default()
            };
            let model = PatchformerModel::new(cfg, 0).map_err(|e| e.to_string())?;
            let y = model
                .forward(&Tensor::uniform(&[96, c], -1.0, 1.0, &mut rng))
                .map_err(|e| e.to_string())?;
            if y.shape() != [o, c] {
                return Err(format!("O={o} C={c}: got {:?}", y.shape()));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} (O, C) combinations emit [O, C] at D=512"))
}

fn normalization_invariants() -> Outcome {
    let mut rng = Rng::new(4);
    let mut worst_softmax = 0.0f64;
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for trial in 0..50 {
        let scale = 0.1 + trial as f64 * 6.0;
        let g = Graph::new();
        let y = g
            .constant(Tensor::uniform(&[7, 33], -scale, scale, &mut rng))
            .softmax()
            .map_err(|e| e.to_string())?
            .tensor();
        for row in y.data().chunks(33) {
            worst_softmax = worst_softmax.max((row.iter().sum::<f64>() - 1.0).abs());
        }

        let (z, d) = (3 + trial % 9, 4 + trial % 13);
        let mut store = ParameterStore::new(0);
        let p = LayerNormParams::init(&mut store, "ln", d, 1e-12).map_err(|e| e.to_string())?;
        let g = Graph::new();
        let offset = rng.uniform(-40.0, 40.0);
        let x = Tensor::uniform(&[z, d], offset - 5.0, offset + 5.0, &mut rng);
        let y = layer_norm(&g, &store, &p, g.constant(x), NormMode::Global)
            .map_err(|e| e.to_string())?
            .tensor();
        let n = y.numel() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    check(
        worst_softmax <= 1e-12 && worst_mean <= 1e-9 && worst_var <= 1e-6,
        format!("softmax row error {worst_softmax:.1e}, layer-norm |mean| {worst_mean:.1e}, |var-1| {worst_var:.1e}"),
    )
}

fn channel_equivariance() -> Outcome {
    let cfg = ModelConfig {
        channels: 7,
        ..ModelConfig::default()
    };
    let model = PatchformerModel::new(cfg.clone(), 5).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(6);
    for trial in 0..3 {
        let x = Tensor::uniform(&[cfg.seq_len, cfg.channels], -2.0, 2.0, &mut rng);
        let mut perm: Vec<usize> = (0..cfg.channels).collect();
        rng.shuffle(&mut perm);
        let permute = |t: &Tensor| {
            let (rows, c) = (t.shape()[0], t.shape()[1]);
            let data = (0..rows)
                .flat_map(|r| perm.iter().map(move |&p| t.data()[r * c + p]))
                .collect();
            Tensor::new(&[rows, c], data).expect("same shape")
        };
        let lhs = model.forward(&permute(&x)).map_err(|e| e.to_string())?;
        let rhs = permute(&model.forward(&x).map_err(|e| e.to_string())?);
        if !lhs.bit_eq(&rhs) {
            return Err(format!("trial {trial}: permuted forward differs"));
        }
    }
    Ok("3 random permutations of 7 channels, bitwise equal at default hyperparameters".into())
}

fn overfit_oracle() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let table = sine_wave_table(cfg.seq_len + cfg.pred_len, cfg.channels, 12.0).map_err(|e| e.to_string())?;
    let windows = make_windows(&table, cfg.seq_len, cfg.pred_len).map_err(|e| e.to_string())?;
    let mut model = PatchformerModel::new(cfg, 0).map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig {
        epochs: 500,
        batch_size: 1,
        lr: 1e-3,
        dropout: 0.0,
        seed: 0,
        mode: Mode::Multivariate,
    };
    let out = train(&mut model, &windows, None, &train_cfg).map_err(|e| e.to_string())?;
    let reached = out.trace.steps.iter().position(|&l| l < 1e-2);
    let final_mse = evaluate(&model, &windows).map_err(|e| e.to_string())?.mse;
    let elapsed = start.elapsed();
    check(
        out.trace.steps.len() == 500
            && reached.is_some()
            && final_mse < 1e-2
            && elapsed < Duration::from_secs(300),
        format!(
            "MSE < 1e-2 first at step {:?}, {final_mse:.2e} after 500 steps, {:.1}s",
            reached.map(|s| s + 1),
            elapsed.as_secs_f64()
        ),
    )
}

fn learning_config(out: &std::path::Path) -> RunConfig {
    RunConfig {
        synth: Some("channels=5,length=5000,seed=0".into()),
        seq_len: 96,
        pred_len: 96,
        d_model: 64,
        d_ff: 128,
        seed: 0,
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

/// Scaled-space test metrics of the final (10-epoch) parameters.
fn final_test_report(cfg: &RunConfig, run: &TrainedRun) -> Result<MetricReport, String> {
    let table = patchformer_cli::commands::load_dataset(cfg)
        .map_err(|e| e.to_string())?
        .table;
    let data = prepare(&table, cfg.seq_len, cfg.pred_len, Some(&run.scaler)).map_err(|e| e.to_string())?;
    let test = make_windows(&data.test, cfg.seq_len, cfg.pred_len).map_err(|e| e.to_string())?;
    evaluate(&run.model, &test).map_err(|e| e.to_string())
}

struct LearningRun {
    run: TrainedRun,
    final_test: MetricReport,
}

fn learning_run(dir: &std::path::Path) -> Result<LearningRun, String> {
    let cfg = learning_config(dir);
    let run = cmd_train(&cfg, false)
        .map_err(|e| e.to_string())?
        .ok_or("no run")?;
    let final_test = final_test_report(&cfg, &run)?;
    Ok(LearningRun { run, final_test })
}

fn learning_signal(first: &Result<LearningRun, String>, seen: &mut Seen) -> Outcome {
    let r = first.as_ref().map_err(Clone::clone)?;
    let (initial, last) = (
        r.run.outcome.trace.initial_loss().ok_or("empty trace")?,
        r.run.outcome.trace.final_loss().ok_or("empty trace")?,
    );
    seen.add("learning/final test", r.final_test);
    seen.add("learning/best test", r.run.test);
    seen.add("learning/baseline", r.run.baseline);
    seen.add("learning/val", r.run.val);
    check(
        r.final_test.mse < r.run.baseline.mse && last < 0.5 * initial,
        format!(
            "test MSE {:.4} vs repeat-last {:.4}; train loss {:.4} -> {:.4} ({:.1}% of initial)",
            r.final_test.mse,
            r.run.baseline.mse,
            initial,
            last,
            100.0 * last / initial
        ),
    )
}

fn determinism(first: &Result<LearningRun, String>, second: &Result<LearningRun, String>) -> Outcome {
    let (a, b) = (
        first.as_ref().map_err(Clone::clone)?,
        second.as_ref().map_err(Clone::clone)?,
    );
    let same_trace = a.run.outcome.trace.bit_eq(&b.run.outcome.trace);
    let same_reports = a.final_test.bit_eq(&b.final_test)
        && a.run.test.bit_eq(&b.run.test)
        && a.run.val.bit_eq(&b.run.val)
        && a.run.baseline.bit_eq(&b.run.baseline);
    let same_params = a.run.model.params().bit_eq(b.run.model.params());
    check(
        same_trace && same_reports && same_params,
        format!(
            "{} step losses, traces equal: {same_trace}, reports equal: {same_reports}, parameters equal: {same_params}",
            a.run.outcome.trace.steps.len()
        ),
    )
}

fn metric_identities(seen: &Seen) -> Outcome {
    let hand = MetricReport::from_pair(&[1.0, 2.0], &[2.0, 4.0]).map_err(|e| e.to_string())?;
    if hand.mse != 2.5 || hand.mae != 1.5 {
        return Err(format!("hand pair gave mse {} mae {}", hand.mse, hand.mae));
    }
    if let Some((label, r)) = seen.reports.iter().find(|(_, r)| !r.is_consistent()) {
        return Err(format!("{label}: mae² {} > mse {}", r.mae * r.mae, r.mse));
    }
    Ok(format!(
        "hand pair exact; mae² ≤ mse on all {} reports",
        seen.reports.len()
    ))
}

fn protocol_plumbing(dir: &std::path::Path, seen: &mut Seen) -> Outcome {
    let cfg = RunConfig {
        synth: Some("channels=5,length=8200,seed=1".into()),
        targets: vec!["electricity".into(), "gas".into(), "ghg".into()],
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        e_layers: 1,
        epochs: 1,
        out_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    let table = cmd_sweep(&cfg, Grid::Protocol).map_err(|e| e.to_string())?;
    for r in table.rows() {
        seen.add(
            format!("protocol/{}/{}/{}", r.mode, r.pred_len, r.model),
            r.report(),
        );
    }
    let horizons = [96, 192, 336, 720];
    let model_row = |mode: &str, o: usize| {
        table
            .rows()
            .find(|r| r.model == MODEL_LABEL && r.mode == mode && r.pred_len == o && r.seq_len == 96)
    };
    for o in horizons {
        let all = model_row("all-at-once", o).ok_or(format!("no all-at-once row for O={o}"))?;
        let avg = model_row(AVERAGE_MODE, o).ok_or(format!("no average row for O={o}"))?;
        let singles: Vec<MetricReport> = cfg
            .targets
            .iter()
            .map(|t| model_row(&format!("univariate:{t}"), o).map(|r| r.report()))
            .collect::<Option<_>>()
            .ok_or(format!("missing per-target row for O={o}"))?;
        let mean = average_reports(&singles).map_err(|e| e.to_string())?;
        if !(mean.bit_eq(&avg.report()) && all.mse.is_finite() && all.mae.is_finite()) {
            return Err(format!(
                "O={o}: average row is not the mean of the per-target rows"
            ));
        }
    }
    let stored = std::fs::read_to_string(dir.join(RESULTS_CSV)).map_err(|e| e.to_string())?;
    let reread = ResultsTable::from_csv(&stored).map_err(|e| e.to_string())?;
    let text = reread.render_text();
    let blocks = ["all-at-once", AVERAGE_MODE]
        .iter()
        .all(|m| text.lines().filter(|l| l.contains(m)).count() == horizons.len());
    check(
        blocks && reread == table,
        format!(
            "{} rows; all-at-once and average blocks for O in {horizons:?}",
            table.len()
        ),
    )
}

fn checkpoint_roundtrip(dir: &std::path::Path, seen: &mut Seen) -> Outcome {
    let cfg = RunConfig {
        synth: Some("channels=3,length=600,seed=11".into()),
        seq_len: 32,
        pred_len: 16,
        d_model: 16,
        n_heads: 4,
        d_ff: 32,
        epochs: 2,
        out_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    let run = cmd_train(&cfg, false)
        .map_err(|e| e.to_string())?
        .ok_or("no run")?;
    let table = patchformer_cli::commands::load_dataset(&cfg)
        .map_err(|e| e.to_string())?
        .table;
    let data = prepare(&table, cfg.seq_len, cfg.pred_len, Some(&run.scaler)).map_err(|e| e.to_string())?;
    let test = make_windows(&data.test, cfg.seq_len, cfg.pred_len).map_err(|e| e.to_string())?;
    let before = evaluate(&run.model, &test).map_err(|e| e.to_string())?;

    let path = dir.join("roundtrip.ckpt");
    Checkpoint::from_model(&run.model, run.channel_names.clone(), Some(run.scaler.clone()))
        .save(&path)
        .map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let after = evaluate(&loaded.to_model().map_err(|e| e.to_string())?, &test).map_err(|e| e.to_string())?;
    let best_disk = Checkpoint::load(&dir.join("best.ckpt"))
        .and_then(|c| c.to_model())
        .map_err(|e| e.to_string())?;
    let best_after = evaluate(&best_disk, &test).map_err(|e| e.to_string())?;
    seen.add("roundtrip", after);
    check(
        before.bit_eq(&after) && best_after.bit_eq(&run.test),
        format!(
            "mse {:.6} / mae {:.6} before and after reload (best checkpoint too)",
            after.mse, after.mae
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

#[test]
fn acceptance() {
    let scratch = tempfile::tempdir().unwrap();
    let sub = |name: &str| scratch.path().join(name);
    let mut seen = Seen::default();
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient fidelity", guarded(gradient_fidelity)),
        (2, "patch algebra", guarded(patch_algebra)),
        (3, "shape contract", guarded(shape_contract)),
        (4, "normalization invariants", guarded(normalization_invariants)),
        (5, "channel equivariance", guarded(channel_equivariance)),
        (6, "overfit oracle", guarded(overfit_oracle)),
    ];

    let first =
        catch_unwind(|| learning_run(&sub("learning-a"))).unwrap_or_else(|_| Err("training panicked".into()));
    let second =
        catch_unwind(|| learning_run(&sub("learning-b"))).unwrap_or_else(|_| Err("training panicked".into()));
    results.push((
        7,
        "learning signal",
        guarded(|| learning_signal(&first, &mut seen)),
    ));
    results.push((8, "determinism", guarded(|| determinism(&first, &second))));
    results.push((
        10,
        "protocol plumbing",
        guarded(|| protocol_plumbing(&sub("protocol"), &mut seen)),
    ));
    results.push((
        11,
        "checkpoint round-trip",
        guarded(|| checkpoint_roundtrip(&sub("roundtrip"), &mut seen)),
    ));
    results.push((9, "metric identities", guarded(|| metric_identities(&seen))));
    results.sort_by_key(|r| r.0);

    // Written to the real stdout so the lines show without --nocapture.
    let mut out = std::io::stdout().lock();
    for (n, name, outcome) in &results {
        let _ = match outcome {
            Ok(detail) => writeln!(out, "criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => writeln!(out, "criterion {n:>2} FAIL  {name}: {detail}"),
        };
    }
    let _ = out.flush();
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
