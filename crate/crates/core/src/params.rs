//! Named parameter collections, their tape bindings, and the Adam optimizer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered map of named tensors. Iteration order is insertion order, which
/// keeps training and checkpointing deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    order: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = t,
            None => {
                self.index.insert(name.clone(), self.values.len());
                self.order.push(name);
                self.values.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.order
            .iter()
            .zip(&self.values)
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Record every parameter as a differentiable leaf on the tape.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut vars = HashMap::with_capacity(self.len());
        for (name, t) in self.iter() {
            vars.insert(name.to_string(), tape.leaf(t.clone()));
        }
        BoundParams { vars }
    }
}

/// Tape handles for one forward pass over a [`ParamSet`].
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    /// Handle for a parameter. Missing names are programming errors.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collect gradients for every bound parameter (zeros where none flowed).
    pub fn collect_grads(&self, params: &ParamSet, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in params.iter() {
            out.insert(name, grads.get_or_zeros(self.var(name), &t.shape));
        }
        out
    }
}

/// Adam with the desk-scale defaults (β1 0.9, β2 0.98, ε 1e-9).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<String, Tensor>,
    v: HashMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing gradient for {name}")))?
                .clone();
            let p = params.get_mut(&name).unwrap();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&p.shape));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&p.shape));
            for i in 0..p.data.len() {
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g.data[i];
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g.data[i] * g.data[i];
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
