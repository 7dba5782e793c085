//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Fault, Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Ctx, ModelConfig, PatchformerModel};
use crate::rng::Rng;
use crate::tensor::{ParameterStore, Tensor};
use crate::training::mse_loss;

/// Result for one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element, with its analytic and numeric derivative.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn offenders(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_error > self.tol)
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &ParameterStore, graph: &Graph) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &ParameterStore) -> Result<Var<'g>>,
{
    let loss = f(graph, params)?;
    loss.item()
}

/// Compares `backward()` gradients of the scalar objective `f` against
/// central differences `(f(θ+eps) - f(θ-eps)) / (2 eps)` for every element
/// of every parameter in `params`.
///
/// `f` must bind parameters through [`Graph::param`] so their gradients can
/// be collected. Each evaluation gets a fresh graph; a fault injected through
/// `make_graph` applies to the analytic pass only.
pub fn finite_diff_check_with<F, G>(
    f: F,
    params: &ParameterStore,
    eps: f64,
    tol: f64,
    make_graph: G,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParameterStore) -> Result<Var<'g>>,
    G: Fn() -> Graph,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let first = evaluate(&f, params, &Graph::new())?;
    let second = evaluate(&f, params, &Graph::new())?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut with_grads = params.clone();
    with_grads.zero_grads();
    let graph = make_graph();
    let loss = f(&graph, &with_grads)?;
    graph.backward(loss)?;
    graph.accumulate_into(&mut with_grads)?;

    let mut probe = params.clone();
    let mut report = Vec::with_capacity(params.len());
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let analytic: Vec<f64> = match with_grads.get(&name).and_then(|t| t.grad()) {
            Some(g) => g.to_vec(),
            None => vec![0.0; params.require(&name)?.numel()],
        };
        let mut check = ParamCheck {
            name: name.clone(),
            numel: analytic.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: analytic.first().copied().unwrap_or(0.0),
            numeric: 0.0,
        };
        let mut first_seen = true;
        for (i, &a) in analytic.iter().enumerate() {
            let original = params.require(&name)?.data()[i];
            probe.get_mut(&name).expect("cloned store").data_mut()[i] = original + eps;
            let plus = evaluate(&f, &probe, &Graph::new())?;
            probe.get_mut(&name).expect("cloned store").data_mut()[i] = original - eps;
            let minus = evaluate(&f, &probe, &Graph::new())?;
            probe.get_mut(&name).expect("cloned store").data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(a, numeric);
            if first_seen || err > check.max_rel_error {
                first_seen = false;
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        eps,
        tol,
        params: report,
    })
}

/// [`finite_diff_check_with`] using an unfaulted graph.
pub fn finite_diff_check<F>(f: F, params: &ParameterStore, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &ParameterStore) -> Result<Var<'g>>,
{
    finite_diff_check_with(f, params, eps, tol, Graph::new)
}

/// Pins a closure to the higher-ranked objective signature.
pub fn objective<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, &ParameterStore) -> Result<Var<'g>>,
{
    f
}

/// Largest model (in parameter elements) [`check_model_gradients`] accepts;
/// every element costs two full forward passes.
pub const MAX_CHECK_ELEMENTS: usize = 20_000;

/// Finite-difference check of every parameter of a freshly initialized
/// model, using the MSE of a two-window batch against a random target in
/// evaluation mode. `fault` is injected into the analytic pass only.
pub fn check_model_gradients(
    cfg: &ModelConfig,
    seed: u64,
    eps: f64,
    tol: f64,
    fault: Fault,
) -> Result<GradCheckReport> {
    let model = PatchformerModel::new(cfg.clone(), seed)?;
    let elements = model.params().num_elements();
    if elements > MAX_CHECK_ELEMENTS {
        return Err(Error::Config(format!(
            "gradient check limited to {MAX_CHECK_ELEMENTS} parameter elements, model has {elements}"
        )));
    }
    let mut rng = Rng::new(seed).fork(7);
    let x = Tensor::uniform(&[2, cfg.seq_len, cfg.channels], -1.0, 1.0, &mut rng);
    let y = Tensor::uniform(&[2, cfg.pred_len, cfg.channels], -1.0, 1.0, &mut rng);
    let objective = objective(|g, store| {
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let mut ctx = Ctx::eval(cfg.norm_mode);
        let pred = model.forward_batch_with(g, store, xv, &mut ctx)?;
        mse_loss(&pred, &yv)
    });
    finite_diff_check_with(objective, model.params(), eps, tol, || Graph::with_fault(fault))
}
