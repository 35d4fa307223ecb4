//! Composite differentiable operations built from tape primitives.

use crate::error::{NnError, Result};
use crate::layers::{BoundAttention, BoundLstm};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `y = x W^T + b` with `W: [out, in]`, `b: [out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul_t(x, false, w, true)?;
    tape.add_tiled(y, b)
}

fn gates_to_state(tape: &mut Tape, gates: Var, c: Var, hidden: usize) -> Result<(Var, Var)> {
    let hc = tape.lstm_gates(gates, c)?;
    let h_next = tape.slice_cols(hc, 0, hidden)?;
    let c_next = tape.slice_cols(hc, hidden, hidden)?;
    Ok((h_next, c_next))
}

/// One LSTM step. `x` may be `None` for a state-only cell.
pub fn lstm_cell(tape: &mut Tape, x: Option<Var>, h: Var, c: Var, p: &BoundLstm) -> Result<(Var, Var)> {
    let rec = tape.matmul_t(h, false, p.w_hh, true)?;
    let pre = match (x, p.w_ih) {
        (Some(x), Some(w_ih)) => {
            let xi = tape.matmul_t(x, false, w_ih, true)?;
            tape.add(xi, rec)?
        }
        (None, _) => rec,
        (Some(_), None) => return Err(NnError::shape("lstm_cell", "input given to a state-only cell")),
    };
    let gates = tape.add_tiled(pre, p.b)?;
    gates_to_state(tape, gates, c, p.hidden)
}

pub struct LstmOutput {
    /// `[batch * steps, hidden]`, row `b * steps + t`.
    pub hidden_states: Var,
    pub h: Var,
    pub c: Var,
}

/// Unrolls the cell over `steps`. `xs` is `[batch * steps, in]` with row
/// `b * steps + t`; `None` runs the cell with no input.
pub fn lstm_sequence(tape: &mut Tape, xs: Option<Var>, steps: usize, h0: Var, c0: Var, p: &BoundLstm) -> Result<LstmOutput> {
    if steps == 0 {
        return Err(NnError::shape("lstm_sequence", "zero steps"));
    }
    let batch = tape.value(h0).as_matrix().0;
    let projected = match (xs, p.w_ih) {
        (Some(xs), Some(w_ih)) => {
            if tape.value(xs).as_matrix().0 != batch * steps {
                return Err(NnError::shape("lstm_sequence", format!("{:?} for batch {batch} x {steps} steps", tape.shape(xs))));
            }
            Some(tape.matmul_t(xs, false, w_ih, true)?)
        }
        (None, _) => None,
        (Some(_), None) => return Err(NnError::shape("lstm_sequence", "input given to a state-only cell")),
    };
    let mut h = h0;
    let mut c = c0;
    let mut outs = Vec::with_capacity(steps);
    for t in 0..steps {
        let rec = tape.matmul_t(h, false, p.w_hh, true)?;
        let pre = match projected {
            Some(xw) => {
                let rows: Vec<usize> = (0..batch).map(|b| b * steps + t).collect();
                let xt = tape.select_rows(xw, &rows)?;
                tape.add(xt, rec)?
            }
            None => rec,
        };
        let gates = tape.add_tiled(pre, p.b)?;
        let (hn, cn) = gates_to_state(tape, gates, c, p.hidden)?;
        h = hn;
        c = cn;
        outs.push(h);
    }
    let hidden_states = tape.stack_steps(&outs)?;
    Ok(LstmOutput { hidden_states, h, c })
}

/// Scaled dot-product attention over `heads` heads followed by the output
/// projection. Queries are `[batch * tq, width]`, keys/values
/// `[batch * tk, width]`. No masking.
pub fn multi_head_attention(
    tape: &mut Tape,
    query: Var,
    key_value: Var,
    batch: usize,
    tq: usize,
    tk: usize,
    p: &BoundAttention,
) -> Result<Var> {
    let width = tape.value(query).as_matrix().1;
    if p.heads == 0 || width % p.heads != 0 {
        return Err(NnError::shape("multi_head_attention", format!("width {width} not divisible by {} heads", p.heads)));
    }
    let d = width / p.heads;
    let q = p.q.forward(tape, query)?;
    let k = p.k.forward(tape, key_value)?;
    let v = p.v.forward(tape, key_value)?;
    let q = tape.split_heads(q, batch, tq, p.heads)?;
    let k = tape.split_heads(k, batch, tk, p.heads)?;
    let v = tape.split_heads(v, batch, tk, p.heads)?;
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax(scores)?;
    let ctx = tape.batch_matmul(weights, v, false)?;
    let merged = tape.merge_heads(ctx, batch, tq, p.heads)?;
    p.o.forward(tape, merged)
}

/// Reparameterized draw `mean + exp(log_var / 2) * noise`.
pub fn gaussian_sample(tape: &mut Tape, mean: Var, log_var: Var, noise: Var) -> Result<Var> {
    if tape.shape(mean) != tape.shape(log_var) || tape.shape(mean) != tape.shape(noise) {
        return Err(NnError::shape(
            "gaussian_sample",
            format!("{:?}, {:?}, {:?}", tape.shape(mean), tape.shape(log_var), tape.shape(noise)),
        ));
    }
    let half = tape.scale(log_var, 0.5)?;
    let std = tape.exp(half)?;
    let spread = tape.mul(std, noise)?;
    tape.add(mean, spread)
}

/// `KL(N(mean, exp(log_var)) || N(0, I))` summed over every element.
pub fn kl_standard_normal(tape: &mut Tape, mean: Var, log_var: Var) -> Result<Var> {
    let mu2 = tape.mul(mean, mean)?;
    let var = tape.exp(log_var)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, log_var)?;
    let c = tape.add_scalar(b, -1.0)?;
    let s = tape.sum(c)?;
    tape.scale(s, 0.5)
}

/// Closed-form KL for plain slices, used outside the tape.
pub fn kl_value(mean: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(log_var)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Zero tensor helper for initial LSTM states.
pub fn zeros_state(tape: &mut Tape, batch: usize, hidden: usize) -> Result<Var> {
    tape.constant(Tensor::zeros(&[batch, hidden]))
}
