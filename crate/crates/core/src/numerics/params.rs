use std::collections::HashMap;

use ndarray::Array2;

use super::tape::Matrix;
use super::TensorError;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    /// Adam first moment.
    pub m: Matrix,
    /// Adam second moment.
    pub v: Matrix,
    /// Number of Adam updates applied to this parameter.
    pub step: u64,
}

/// Named trainable matrices with their optimizer state. Iteration order is
/// insertion order, which keeps checkpoints and updates deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<usize, TensorError> {
        self.push(Parameter {
            name: name.to_string(),
            m: Array2::zeros(value.dim()),
            v: Array2::zeros(value.dim()),
            value,
            step: 0,
        })
    }

    pub fn push(&mut self, param: Parameter) -> Result<usize, TensorError> {
        if self.index.contains_key(&param.name) {
            return Err(TensorError::DuplicateParam(param.name));
        }
        let id = self.params.len();
        self.index.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| &self.params[id].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.id(name).map(move |id| &mut self.params[id].value)
    }

    pub fn value_by_id(&self, id: usize) -> &Matrix {
        &self.params[id].value
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| &self.params[id])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Bias-corrected Adam update of every parameter that has a gradient.
    /// Parameters without one keep their values and moments.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64, config: &AdamConfig) {
        for (id, param) in self.params.iter_mut().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            param.step += 1;
            let t = param.step as i32;
            let (b1, b2) = (config.beta1, config.beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            ndarray::Zip::from(&mut param.value)
                .and(&mut param.m)
                .and(&mut param.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + config.eps);
                });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Gradients indexed by parameter id. `None` means the parameter did not
/// reach the loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn new(n_params: usize) -> Self {
        Gradients {
            grads: vec![None; n_params],
        }
    }

    pub fn accumulate(&mut self, id: usize, grad: Matrix) {
        if id >= self.grads.len() {
            self.grads.resize(id + 1, None);
        }
        match &mut self.grads[id] {
            Some(acc) => *acc += &grad,
            slot @ None => *slot = Some(grad),
        }
    }

    /// Adds every gradient of `other` into `self`.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= factor;
        }
    }

    pub fn get(&self, id: usize) -> Option<&Matrix> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn by_name<'a>(&'a self, store: &ParameterStore, name: &str) -> Option<&'a Matrix> {
        store.id(name).and_then(|id| self.get(id))
    }

    pub fn get_or_zero(&self, store: &ParameterStore, name: &str) -> Matrix {
        let id = store.id(name).expect("known parameter");
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(store.value_by_id(id).dim()))
    }

    /// Names of parameters the loss did not depend on.
    pub fn unreachable(&self, store: &ParameterStore) -> Vec<String> {
        store
            .iter()
            .enumerate()
            .filter(|(id, _)| self.get(*id).is_none())
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    /// Ids with a gradient, in ascending order.
    pub fn reached(&self) -> impl Iterator<Item = usize> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(id, _)| id)
    }

    /// Drops gradients for which `keep` returns false.
    pub fn retain(&mut self, store: &ParameterStore, keep: impl Fn(&str) -> bool) {
        for (id, p) in store.iter().enumerate() {
            if !keep(&p.name) {
                if let Some(slot) = self.grads.get_mut(id) {
                    *slot = None;
                }
            }
        }
    }
}
