use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable tensors with gradient accumulators and Adam moments.
/// Iteration order is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.entries.insert(name.to_string(), ParamEntry::new(value));
        Ok(())
    }

    /// Inserts a tensor drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn insert_uniform<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn insert_entry(&mut self, name: &str, entry: ParamEntry) -> Result<()> {
        if entry.grad.shape() != entry.value.shape() || entry.m.shape() != entry.value.shape() || entry.v.shape() != entry.value.shape() {
            return Err(NnError::shape("param_entry", format!("inconsistent shapes for `{name}`")));
        }
        if self.entries.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        self.entries.insert(name.to_string(), entry);
        Ok(())
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entry(name).map(|e| &e.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries.get(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.entry(name).map(|e| &e.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if e.grad.len() != g.len() {
            return Err(NnError::shape("accumulate_grad", format!("`{name}`: {:?} vs {:?}", e.grad.shape(), g.shape())));
        }
        e.grad.add_assign(g);
        Ok(())
    }

    pub fn scale_grads(&mut self, s: f64) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.grad.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// One bias-corrected Adam update for every entry, then zeroes the
    /// gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        for e in self.entries.values_mut() {
            e.step += 1;
            let t = e.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let value = e.value.data_mut();
            let grad = e.grad.data_mut();
            let m = e.m.data_mut();
            let v = e.v.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                value[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                grad[i] = 0.0;
            }
        }
    }

    /// Copy of the values only, with fresh optimizer state.
    pub fn values_only(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, e) in &self.entries {
            out.entries.insert(k.clone(), ParamEntry::new(e.value.clone()));
        }
        out
    }
}
