//! Layer definitions (parameter naming + init) and their bound, per-tape
//! forms. A layer is bound once per forward pass so every use of a weight
//! shares one tape node.

use rand::Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Whether bound parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    Train,
    Frozen,
}

fn fetch(tape: &mut Tape, store: &ParamStore, name: &str, mode: Bind) -> Result<Var> {
    match mode {
        Bind::Train => tape.param(store, name),
        Bind::Frozen => tape.frozen(store, name),
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.insert_uniform(&format!("{}.w", self.name), &[self.out_dim, self.in_dim], self.in_dim, rng)?;
        store.insert_uniform(&format!("{}.b", self.name), &[self.out_dim], self.in_dim, rng)
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, mode: Bind) -> Result<BoundLinear> {
        Ok(BoundLinear {
            w: fetch(tape, store, &format!("{}.w", self.name), mode)?,
            b: fetch(tape, store, &format!("{}.b", self.name), mode)?,
        })
    }
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        crate::functional::linear(tape, x, self.w, self.b)
    }
}

/// LSTM with gate order (input, forget, candidate, output). An `in_dim` of
/// zero builds a state-only cell without input weights.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub name: String,
    pub in_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub w_ih: Option<Var>,
    pub w_hh: Var,
    pub b: Var,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(name: impl Into<String>, in_dim: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            hidden,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let h4 = 4 * self.hidden;
        if self.in_dim > 0 {
            store.insert_uniform(&format!("{}.w_ih", self.name), &[h4, self.in_dim], self.hidden, rng)?;
        }
        store.insert_uniform(&format!("{}.w_hh", self.name), &[h4, self.hidden], self.hidden, rng)?;
        store.insert_uniform(&format!("{}.b", self.name), &[h4], self.hidden, rng)
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, mode: Bind) -> Result<BoundLstm> {
        let w_ih = if self.in_dim > 0 {
            Some(fetch(tape, store, &format!("{}.w_ih", self.name), mode)?)
        } else {
            None
        };
        Ok(BoundLstm {
            w_ih,
            w_hh: fetch(tape, store, &format!("{}.w_hh", self.name), mode)?,
            b: fetch(tape, store, &format!("{}.b", self.name), mode)?,
            hidden: self.hidden,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub width: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayerNorm {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, width: usize) -> Self {
        Self {
            name: name.into(),
            width,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(&format!("{}.gain", self.name), Tensor::full(&[self.width], 1.0))?;
        store.insert(&format!("{}.bias", self.name), Tensor::zeros(&[self.width]))
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, mode: Bind) -> Result<BoundLayerNorm> {
        Ok(BoundLayerNorm {
            gain: fetch(tape, store, &format!("{}.gain", self.name), mode)?,
            bias: fetch(tape, store, &format!("{}.bias", self.name), mode)?,
        })
    }
}

impl BoundLayerNorm {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub width: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub q: BoundLinear,
    pub k: BoundLinear,
    pub v: BoundLinear,
    pub o: BoundLinear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, width: usize, heads: usize) -> Self {
        let name = name.into();
        Self {
            q: Linear::new(format!("{name}.q"), width, width),
            k: Linear::new(format!("{name}.k"), width, width),
            v: Linear::new(format!("{name}.v"), width, width),
            o: Linear::new(format!("{name}.o"), width, width),
            name,
            width,
            heads,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.q.init(store, rng)?;
        self.k.init(store, rng)?;
        self.v.init(store, rng)?;
        self.o.init(store, rng)
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, mode: Bind) -> Result<BoundAttention> {
        Ok(BoundAttention {
            q: self.q.bind(tape, store, mode)?,
            k: self.k.bind(tape, store, mode)?,
            v: self.v.bind(tape, store, mode)?,
            o: self.o.bind(tape, store, mode)?,
            heads: self.heads,
        })
    }
}
