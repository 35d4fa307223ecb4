//! Tensor-level reverse-mode tape.
//!
//! Every op evaluates eagerly, checks its output for NaN/Inf, and appends a
//! node. [`Tape::backward`] walks the nodes in exact reverse order.
//! Parameters enter through [`Tape::param`] and their gradients are pushed
//! back into a [`ParamStore`] with [`Tape::accumulate_into`].

use crate::error::{NnError, Result};
use crate::kernels::{gemm, sigmoid, softmax_rows};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, tb: bool, groups: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { a: Var, rows: Vec<usize> },
    StackSteps(Vec<Var>),
    ConcatTokens { a: Var, b: Var, ta: usize, tb: usize },
    SplitHeads { a: Var, batch: usize, tokens: usize, heads: usize },
    MergeHeads { a: Var, batch: usize, tokens: usize, heads: usize },
    MeanTokens { a: Var, tokens: usize },
    LstmGates { gates: Var, c: Var, act: Vec<f64>, tc: Vec<f64>, hidden: usize },
    Sum(Var),
    SumSquares(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn check(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Tape::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        check(op_name, &value)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Trainable parameter bound from `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        self.push("param", value, Op::Param(name.to_string()), true)
    }

    /// Parameter value from `store` entered as a constant (frozen).
    pub fn frozen(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        self.constant(value)
    }

    /// `op(a) * op(b)` on matrices (last dim = columns).
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).as_matrix();
        let (br, bc) = self.value(b).as_matrix();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(NnError::shape(
                "matmul",
                format!("{:?} x {:?} (ta={ta}, tb={tb})", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// Grouped product `[g, m, k] x [g, k, n]`, or `x [g, n, k]^T` with `tb`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(NnError::shape("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(NnError::shape("batch_matmul", format!("{sa:?} x {sb:?} (tb={tb})")));
        }
        let mut out = vec![0.0; groups * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for g in 0..groups {
                gemm(
                    m,
                    k,
                    n,
                    &av[g * m * k..(g + 1) * m * k],
                    false,
                    &bv[g * k * n..(g + 1) * k * n],
                    tb,
                    0.0,
                    &mut out[g * m * n..(g + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "batch_matmul",
            Tensor::new(&[groups, m, n], out)?,
            Op::BatchMatMul { a, b, tb, groups, m, k, n },
            rg,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds `b` to `a`, repeating `b` along the leading dimension. `b` may be a
    /// bias row (`[n]`) or a block of rows (`[t, n]`) that tiles `a`'s rows.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if vb.is_empty() || va.len() % vb.len() != 0 || va.as_matrix().1 != vb.as_matrix().1 {
            return Err(NnError::shape("add_tiled", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let bl = vb.len();
        let data = va.data().iter().enumerate().map(|(i, x)| x + vb.data()[i % bl]).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add_tiled", value, Op::AddTiled(a, b), rg)
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| f(*x)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a);
        self.push(name, value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("add_scalar", a, Op::AddScalar(a), |x| x + s)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (_, cols) = va.as_matrix();
        let mut value = va.clone();
        softmax_rows(value.data_mut(), cols);
        let rg = self.rg(a);
        self.push("softmax", value, Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis with elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.as_matrix();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(NnError::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", vx.shape(), self.shape(gain), self.shape(bias)),
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = g[c] * h + b[c];
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    /// Fused LSTM state update. `gates` is `[batch, 4h]` pre-activations in
    /// (input, forget, candidate, output) order and `c` the previous cell
    /// state `[batch, h]`. The result is `[batch, 2h]`: the new hidden state
    /// followed by the new cell state.
    pub fn lstm_gates(&mut self, gates: Var, c: Var) -> Result<Var> {
        let (rows, g4) = self.value(gates).as_matrix();
        let (crows, h) = self.value(c).as_matrix();
        if g4 != 4 * h || rows != crows {
            return Err(NnError::shape("lstm_gates", format!("gates {:?}, cell {:?}", self.shape(gates), self.shape(c))));
        }
        let gv = self.value(gates).data();
        let cv = self.value(c).data();
        let mut act = vec![0.0; rows * g4];
        let mut tc = vec![0.0; rows * h];
        let mut out = vec![0.0; rows * 2 * h];
        for r in 0..rows {
            let pre = &gv[r * g4..(r + 1) * g4];
            let a = &mut act[r * g4..(r + 1) * g4];
            for j in 0..h {
                a[j] = sigmoid(pre[j]);
                a[h + j] = sigmoid(pre[h + j]);
                a[2 * h + j] = pre[2 * h + j].tanh();
                a[3 * h + j] = sigmoid(pre[3 * h + j]);
            }
            for j in 0..h {
                let cn = a[h + j] * cv[r * h + j] + a[j] * a[2 * h + j];
                let t = cn.tanh();
                tc[r * h + j] = t;
                out[r * 2 * h + j] = a[3 * h + j] * t;
                out[r * 2 * h + h + j] = cn;
            }
        }
        let value = Tensor::new(&[rows, 2 * h], out)?;
        let rg = self.rg(gates) || self.rg(c);
        self.push("lstm_gates", value, Op::LstmGates { gates, c, act, tc, hidden: h }, rg)
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = va.as_matrix();
        if start + width > cols {
            return Err(NnError::shape("slice_cols", format!("[{start}, {}) of {cols}", start + width)));
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&va.data()[r * cols + start..r * cols + start + width]);
        }
        let value = Tensor::new(&[rows, width], out)?;
        let rg = self.rg(a);
        self.push("slice_cols", value, Op::SliceCols { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).as_matrix().0;
        let mut total = 0;
        for p in parts {
            let (r, c) = self.value(*p).as_matrix();
            if r != rows {
                return Err(NnError::shape("concat_cols", format!("row counts {rows} vs {r}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let v = self.value(*p);
                let c = v.as_matrix().1;
                out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::new(&[rows, total], out)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Gathers matrix rows (repeats allowed).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (n, cols) = va.as_matrix();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(NnError::shape("select_rows", format!("row {r} of {n}")));
            }
            out.extend_from_slice(&va.data()[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(&[rows.len(), cols], out)?;
        let rg = self.rg(a);
        self.push("select_rows", value, Op::SelectRows { a, rows: rows.to_vec() }, rg)
    }

    /// Rows `b * steps + t` of the `[batch, cols]` step matrices, stacked into
    /// `[batch * steps, cols]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let (batch, cols) = self.value(steps[0]).as_matrix();
        for s in steps {
            if self.value(*s).as_matrix() != (batch, cols) {
                return Err(NnError::shape("stack_steps", "step shapes differ"));
            }
        }
        let t = steps.len();
        let mut out = vec![0.0; batch * t * cols];
        for (ti, s) in steps.iter().enumerate() {
            let v = self.value(*s).data();
            for b in 0..batch {
                out[(b * t + ti) * cols..(b * t + ti + 1) * cols].copy_from_slice(&v[b * cols..(b + 1) * cols]);
            }
        }
        let value = Tensor::new(&[batch * t, cols], out)?;
        let rg = steps.iter().any(|s| self.rg(*s));
        self.push("stack_steps", value, Op::StackSteps(steps.to_vec()), rg)
    }

    /// Per batch element, the `ta` token rows of `a` followed by the `tb`
    /// token rows of `b`.
    pub fn concat_tokens(&mut self, a: Var, ta: usize, b: Var, tb: usize) -> Result<Var> {
        let (ra, ca) = self.value(a).as_matrix();
        let (rb, cb) = self.value(b).as_matrix();
        if ca != cb || ta == 0 || tb == 0 || ra % ta != 0 || rb % tb != 0 || ra / ta != rb / tb {
            return Err(NnError::shape("concat_tokens", format!("{ra}x{ca} ({ta}) + {rb}x{cb} ({tb})")));
        }
        let batch = ra / ta;
        let cols = ca;
        let mut out = Vec::with_capacity((ra + rb) * cols);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                out.extend_from_slice(&av[i * ta * cols..(i + 1) * ta * cols]);
                out.extend_from_slice(&bv[i * tb * cols..(i + 1) * tb * cols]);
            }
        }
        let value = Tensor::new(&[ra + rb, cols], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("concat_tokens", value, Op::ConcatTokens { a, b, ta, tb }, rg)
    }

    /// `[batch * tokens, heads * d]` to `[batch * heads, tokens, d]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let (rows, width) = self.value(a).as_matrix();
        if rows != batch * tokens || heads == 0 || width % heads != 0 {
            return Err(NnError::shape("split_heads", format!("{rows}x{width}, batch {batch}, tokens {tokens}, heads {heads}")));
        }
        let d = width / heads;
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * width];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let s = (b * tokens + t) * width + h * d;
                    let o = ((b * heads + h) * tokens + t) * d;
                    out[o..o + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        let value = Tensor::new(&[batch * heads, tokens, d], out)?;
        let rg = self.rg(a);
        self.push("split_heads", value, Op::SplitHeads { a, batch, tokens, heads }, rg)
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[0] != batch * heads || s[1] != tokens {
            return Err(NnError::shape("merge_heads", format!("{s:?}, batch {batch}, tokens {tokens}, heads {heads}")));
        }
        let d = s[2];
        let width = heads * d;
        let src = self.value(a).data();
        let mut out = vec![0.0; batch * tokens * width];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let o = (b * tokens + t) * width + h * d;
                    let i = ((b * heads + h) * tokens + t) * d;
                    out[o..o + d].copy_from_slice(&src[i..i + d]);
                }
            }
        }
        let value = Tensor::new(&[batch * tokens, width], out)?;
        let rg = self.rg(a);
        self.push("merge_heads", value, Op::MergeHeads { a, batch, tokens, heads }, rg)
    }

    /// Mean over consecutive groups of `tokens` rows.
    pub fn mean_tokens(&mut self, a: Var, tokens: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).as_matrix();
        if tokens == 0 || rows % tokens != 0 {
            return Err(NnError::shape("mean_tokens", format!("{rows} rows, {tokens} tokens")));
        }
        let batch = rows / tokens;
        let src = self.value(a).data();
        let mut out = vec![0.0; batch * cols];
        for b in 0..batch {
            for t in 0..tokens {
                let row = &src[(b * tokens + t) * cols..(b * tokens + t + 1) * cols];
                for (o, v) in out[b * cols..(b + 1) * cols].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / tokens as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(&[batch, cols], out)?;
        let rg = self.rg(a);
        self.push("mean_tokens", value, Op::MeanTokens { a, tokens }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        let rg = self.rg(a);
        self.push("sum_squares", Tensor::scalar(s), Op::SumSquares(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        self.push("reshape", value, Op::Reshape(a), rg)
    }

    /// Reverse pass from a scalar `loss`. Gradients are retrievable with
    /// [`Tape::grad`] until the tape is cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(NnError::shape("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let av = self.value(a);
                let bv = self.value(b);
                let (m, n) = out.as_matrix();
                let k = if ta { av.as_matrix().0 } else { av.as_matrix().1 };
                if self.rg(a) {
                    let mut da = vec![0.0; m * k];
                    if ta {
                        gemm(k, n, m, bv.data(), tb, g.data(), true, 0.0, &mut da);
                    } else {
                        gemm(m, n, k, g.data(), false, bv.data(), !tb, 0.0, &mut da);
                    }
                    self.acc(grads, a, Tensor::new(av.shape(), da)?);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; k * n];
                    if tb {
                        gemm(n, m, k, g.data(), true, av.data(), ta, 0.0, &mut db);
                    } else {
                        gemm(k, m, n, av.data(), !ta, g.data(), false, 0.0, &mut db);
                    }
                    self.acc(grads, b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::BatchMatMul { a, b, tb, groups, m, k, n } => {
                let (a, b, tb, groups, m, k, n) = (*a, *b, *tb, *groups, *m, *k, *n);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let gd = g.data();
                if self.rg(a) {
                    let mut da = vec![0.0; groups * m * k];
                    for gi in 0..groups {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[gi * m * n..(gi + 1) * m * n],
                            false,
                            &bv[gi * k * n..(gi + 1) * k * n],
                            !tb,
                            0.0,
                            &mut da[gi * m * k..(gi + 1) * m * k],
                        );
                    }
                    self.acc(grads, a, Tensor::new(self.shape(a), da)?);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; groups * k * n];
                    for gi in 0..groups {
                        let ga = &gd[gi * m * n..(gi + 1) * m * n];
                        let aa = &av[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut db[gi * k * n..(gi + 1) * k * n];
                        if tb {
                            gemm(n, m, k, ga, true, aa, false, 0.0, dst);
                        } else {
                            gemm(k, m, n, aa, true, ga, false, 0.0, dst);
                        }
                    }
                    self.acc(grads, b, Tensor::new(self.shape(b), db)?);
                }
            }
            Op::LstmGates { gates, c, act, tc, hidden } => {
                let (gates, c, h) = (*gates, *c, *hidden);
                let cv = self.value(c).data();
                let gd = g.data();
                let rows = cv.len() / h;
                let mut dgates = vec![0.0; rows * 4 * h];
                let mut dc_prev = vec![0.0; rows * h];
                for r in 0..rows {
                    let a = &act[r * 4 * h..(r + 1) * 4 * h];
                    let dg = &mut dgates[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let (i, f, gg, o) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                        let t = tc[r * h + j];
                        let dh = gd[r * 2 * h + j];
                        let dc = gd[r * 2 * h + h + j] + dh * o * (1.0 - t * t);
                        dg[j] = dc * gg * i * (1.0 - i);
                        dg[h + j] = dc * cv[r * h + j] * f * (1.0 - f);
                        dg[2 * h + j] = dc * i * (1.0 - gg * gg);
                        dg[3 * h + j] = dh * t * o * (1.0 - o);
                        dc_prev[r * h + j] = dc * f;
                    }
                }
                if self.rg(gates) {
                    self.acc(grads, gates, Tensor::new(self.shape(gates), dgates)?);
                }
                if self.rg(c) {
                    self.acc(grads, c, Tensor::new(self.shape(c), dc_prev)?);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    let neg = g.data().iter().map(|v| -v).collect();
                    self.acc(grads, *b, Tensor::new(g.shape(), neg)?);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let d = g.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, a, Tensor::new(g.shape(), d)?);
                }
                if self.rg(b) {
                    let d = g.data().iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, b, Tensor::new(g.shape(), d)?);
                }
            }
            Op::AddTiled(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    let bs = self.shape(*b).to_vec();
                    let bl: usize = bs.iter().product();
                    let mut db = vec![0.0; bl];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % bl] += v;
                    }
                    self.acc(grads, *b, Tensor::new(&bs, db)?);
                }
            }
            Op::Scale(a, s) => {
                let d = g.data().iter().map(|v| v * s).collect();
                self.acc(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let d = g.data().to_vec();
                self.acc(grads, *a, Tensor::new(self.shape(*a), d)?);
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                self.acc(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.acc(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
                self.acc(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::Softmax(a) => {
                let (_, cols) = out.as_matrix();
                let mut d = vec![0.0; out.len()];
                for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.data().chunks(cols)).zip(out.data().chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for c in 0..cols {
                        drow[c] = yrow[c] * (grow[c] - dot);
                    }
                }
                self.acc(grads, *a, Tensor::new(g.shape(), d)?);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (rows, cols) = out.as_matrix();
                let gv = self.value(*gain).data();
                let gd = g.data();
                if self.rg(*gain) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += gd[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    self.acc(grads, *gain, Tensor::new(self.shape(*gain), dg)?);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += gd[r * cols + c];
                        }
                    }
                    self.acc(grads, *bias, Tensor::new(self.shape(*bias), db)?);
                }
                if self.rg(*x) {
                    let nf = cols as f64;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let dh = gd[r * cols + c] * gv[c];
                            sum_d += dh;
                            sum_dx += dh * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            let dh = gd[r * cols + c] * gv[c];
                            dx[r * cols + c] = inv_std[r] / nf * (nf * dh - sum_d - xhat[r * cols + c] * sum_dx);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
            }
            Op::SliceCols { a, start } => {
                let (rows, cols) = self.value(*a).as_matrix();
                let width = out.as_matrix().1;
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + width].copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a), d)?);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = out.as_matrix();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).as_matrix().1;
                    if self.rg(*p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        self.acc(grads, *p, Tensor::new(self.shape(*p), d)?);
                    }
                    offset += c;
                }
            }
            Op::SelectRows { a, rows } => {
                let (n, cols) = self.value(*a).as_matrix();
                let mut d = vec![0.0; n * cols];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        d[r * cols + c] += g.data()[i * cols + c];
                    }
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a), d)?);
            }
            Op::StackSteps(steps) => {
                let t = steps.len();
                let (batch, cols) = self.value(steps[0]).as_matrix();
                for (ti, s) in steps.iter().enumerate() {
                    if !self.rg(*s) {
                        continue;
                    }
                    let mut d = vec![0.0; batch * cols];
                    for b in 0..batch {
                        d[b * cols..(b + 1) * cols].copy_from_slice(&g.data()[(b * t + ti) * cols..(b * t + ti + 1) * cols]);
                    }
                    self.acc(grads, *s, Tensor::new(self.shape(*s), d)?);
                }
            }
            Op::ConcatTokens { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let cols = out.as_matrix().1;
                let batch = out.as_matrix().0 / (ta + tb);
                let mut da = Vec::with_capacity(batch * ta * cols);
                let mut db = Vec::with_capacity(batch * tb * cols);
                for i in 0..batch {
                    let base = i * (ta + tb) * cols;
                    da.extend_from_slice(&g.data()[base..base + ta * cols]);
                    db.extend_from_slice(&g.data()[base + ta * cols..base + (ta + tb) * cols]);
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a), da)?);
                self.acc(grads, *b, Tensor::new(self.shape(*b), db)?);
            }
            Op::SplitHeads { a, batch, tokens, heads } => {
                let (rows, width) = self.value(*a).as_matrix();
                let d = width / heads;
                let mut da = vec![0.0; rows * width];
                for b in 0..*batch {
                    for t in 0..*tokens {
                        for h in 0..*heads {
                            let s = (b * tokens + t) * width + h * d;
                            let o = ((b * heads + h) * tokens + t) * d;
                            da[s..s + d].copy_from_slice(&g.data()[o..o + d]);
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a), da)?);
            }
            Op::MergeHeads { a, batch, tokens, heads } => {
                let d = self.shape(*a)[2];
                let width = heads * d;
                let mut da = vec![0.0; self.value(*a).len()];
                for b in 0..*batch {
                    for t in 0..*tokens {
                        for h in 0..*heads {
                            let o = (b * tokens + t) * width + h * d;
                            let i = ((b * heads + h) * tokens + t) * d;
                            da[i..i + d].copy_from_slice(&g.data()[o..o + d]);
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a), da)?);
            }
            Op::MeanTokens { a, tokens } => {
                let (rows, cols) = self.value(*a).as_matrix();
                let inv = 1.0 / *tokens as f64;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let b = r / tokens;
                    for c in 0..cols {
                        da[r * cols + c] = g.data()[b * cols + c] * inv;
                    }
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a), da)?);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.acc(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::SumSquares(a) => {
                let gv = g.item();
                let d = self.value(*a).data().iter().map(|v| 2.0 * v * gv).collect();
                self.acc(grads, *a, Tensor::new(self.shape(*a), d)?);
            }
        }
        Ok(())
    }

    /// Adds the gradient of every parameter node into `store`. Nodes are
    /// visited in creation order so the reduction order is fixed.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = self.grads.get(idx).and_then(|g| g.as_ref()) {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        Ok(())
    }

    /// Parameter gradients collected by name, in creation order.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = self.grads.get(idx).and_then(|g| g.as_ref()) {
                    match out.iter_mut().find(|(n, _)| n == name) {
                        Some((_, acc)) => acc.add_assign(g),
                        None => out.push((name.clone(), g.clone())),
                    }
                }
            }
        }
        out
    }
}
