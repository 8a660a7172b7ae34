//! Central finite-difference gradient checking in `f64`.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name (parameter name or `input[i]`) and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn observe(&mut self, name: &str, i: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), i));
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of a scalar function against central
/// differences with step `eps`, for every trainable parameter in `store`
/// and every entry of `inputs`.
///
/// `f` builds the forward pass on a fresh graph; it receives a scratch copy
/// of the store, so state such as running statistics never leaks between
/// evaluations.
pub fn check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &mut ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let mut scratch = store.clone();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &mut scratch, &vars)?;
        scalar_of(&g, out)
    };

    // analytic
    let mut g = Graph::new();
    let mut scratch = store.clone();
    scratch.zero_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &mut scratch, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.gradients(out)?;
    g.backward(out, &mut scratch)?;

    let mut report = GradCheckReport::default();
    let names: Vec<String> = store.iter().filter(|(_, p)| p.requires_grad).map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let p = scratch.get(name)?;
        let analytic = p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
        for i in 0..analytic.len() {
            let mut plus = store.clone();
            plus.get_mut(name)?.value.data_mut()[i] += eps;
            let mut minus = store.clone();
            minus.get_mut(name)?.value.data_mut()[i] -= eps;
            let numeric = (eval(&plus, inputs)? - eval(&minus, inputs)?) / (2.0 * eps);
            report.observe(name, i, analytic.data()[i], numeric);
        }
    }
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        let label = format!("input[{k}]");
        for i in 0..analytic.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(store, &plus)? - eval(store, &minus)?) / (2.0 * eps);
            report.observe(&label, i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::invalid("gradcheck", format!("function must return a scalar, got shape {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Reduces a tensor to a scalar through a fixed random projection, so every
/// output entry carries a distinct upstream gradient.
pub fn project(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}
