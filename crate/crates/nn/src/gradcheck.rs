//! Central finite-difference oracle. It only ever evaluates forward passes,
//! so it is independent of the backward rules it checks.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|)` over the
    /// checked tensors, using vector norms per tensor.
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        // Gradients that vanish identically (e.g. key biases under softmax) only
        // carry finite-difference noise; the floor keeps them from dominating.
        let denom = na.max(nn).max(1e-6);
        let rel = diff / denom;
        self.checked += analytic.len();
        if rel >= self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = name.to_string();
        }
    }
}

fn eval_scalar<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Checks gradients of a scalar function with respect to every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut report = GradReport::new();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut probe = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let fp = eval_scalar(&probe, &build)?;
            probe[i].data_mut()[j] = orig - h;
            let fm = eval_scalar(&probe, &build)?;
            probe[i].data_mut()[j] = orig;
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        report.record(&format!("input{i}"), &analytic, &numeric);
    }
    Ok(report)
}

/// Checks gradients of a scalar function with respect to every entry of
/// `store` that the function binds as a trainable parameter.
pub fn check_params<F>(store: &ParamStore, h: f64, build: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    tape.backward(out)?;
    let grads = tape.param_grads();
    let mut report = GradReport::new();
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.value(&name)?.len();
        let analytic = grads
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, g)| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = store.value(&name)?.data()[j];
            probe.value_mut(&name)?.data_mut()[j] = orig + h;
            let fp = {
                let mut t = Tape::new();
                let o = build(&mut t, &probe)?;
                t.value(o).item()
            };
            probe.value_mut(&name)?.data_mut()[j] = orig - h;
            let fm = {
                let mut t = Tape::new();
                let o = build(&mut t, &probe)?;
                t.value(o).item()
            };
            probe.value_mut(&name)?.data_mut()[j] = orig;
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        report.record(&name, &analytic, &numeric);
    }
    Ok(report)
}

/// Contracts a tensor-valued output with fixed weights so that every output
/// element contributes to the checked scalar.
pub fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone().reshaped(tape.shape(out))?)?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}
