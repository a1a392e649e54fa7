//! Central finite-difference gradient checking.
//!
//! Independent of the tape's backward rules: only forward evaluations are
//! used to estimate derivatives.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so that two near-zero numbers
/// compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// `(f(x + h) - f(x - h)) / 2h` for every coordinate of every input.
pub fn numeric_grads<F>(inputs: &[Tensor], f: F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = f(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = f(&work)?;
            work[i].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Builds `f` on a fresh graph with every input as a differentiable leaf,
/// back-propagates, and returns the largest relative error against
/// central differences.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.item(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let numeric = numeric_grads(inputs, eval, h)?;
    let mut worst: f64 = 0.0;
    for (v, num) in vars.iter().zip(&numeric) {
        let analytic = g.grad(*v).expect("leaf requires grad");
        for (a, n) in analytic.iter().zip(num) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    Ok(worst)
}

/// Worst relative error over up to `per_tensor` randomly chosen coordinates
/// of every parameter in `store`. `loss` must build a scalar on the graph
/// using the given store.
pub fn check_params<F, R>(store: &ParamStore, loss: F, per_tensor: usize, h: f64, rng: &mut R) -> Result<ParamCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    R: Rng,
{
    check_params_where(store, loss, |_| true, per_tensor, h, rng)
}

/// [`check_params`] restricted to parameters whose name passes `keep`.
pub fn check_params_where<F, K, R>(
    store: &ParamStore,
    loss: F,
    keep: K,
    per_tensor: usize,
    h: f64,
    rng: &mut R,
) -> Result<ParamCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
    K: Fn(&str) -> bool,
    R: Rng,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    g.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate_grads(&g);

    let mut work = store.clone();
    let mut report = ParamCheck::default();
    for id in store.ids().filter(|&id| keep(store.name(id))) {
        let n = store.get(id).numel();
        let grad = analytic.get(id).grad.clone().unwrap_or_else(|| vec![0.0; n]);
        for j in sample(rng, n, per_tensor.min(n)) {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let up = eval_loss(&loss, &work)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let down = eval_loss(&loss, &work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(grad[j], numeric);
            report.coordinates += 1;
            report.max_abs_analytic = report.max_abs_analytic.max(grad[j].abs());
            report.max_abs_numeric = report.max_abs_numeric.max(numeric.abs());
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((store.name(id).to_string(), j, grad[j], numeric));
            }
        }
    }
    Ok(report)
}

fn eval_loss<F>(loss: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    g.item(out)
}

#[derive(Debug, Clone, Default)]
pub struct ParamCheck {
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    /// `(parameter, index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}
