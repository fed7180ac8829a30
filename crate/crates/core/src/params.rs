//! Named parameter storage and the AdamW update.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Ordered, uniquely named parameters with their AdamW moment buffers.
///
/// Iteration order is insertion order, which is also the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// Leaves created for every parameter of a store inside one graph.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: IndexMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let n = tensor.numel();
        self.entries.insert(
            name,
            ParamEntry {
                tensor: tensor.with_requires_grad(true),
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Copies every parameter into `graph` as a gradient-tracking leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(name, e)| (name.clone(), graph.param(e.tensor.clone())))
            .collect();
        Bindings { vars }
    }

    /// Adds the graph gradients of bound leaves into the parameter grad slots.
    /// Parameters the loss never touched receive an explicit zero gradient.
    pub fn accumulate_grads(&mut self, graph: &Graph, bindings: &Bindings) -> Result<()> {
        for (name, var) in bindings.iter() {
            let entry = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("binding for unknown parameter {name}")))?;
            match graph.grad(var) {
                Some(g) => entry.tensor.accumulate_grad(g)?,
                None => {
                    let zeros = vec![0.0; entry.tensor.numel()];
                    entry.tensor.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// One decoupled-weight-decay Adam update over every parameter, then
    /// clears the gradients. Fails before touching anything if any
    /// parameter is missing its gradient.
    pub fn adamw_step(&mut self, cfg: &AdamWConfig) -> Result<()> {
        cfg.validate()?;
        if let Some((name, _)) = self.entries.iter().find(|(_, e)| e.tensor.grad().is_none()) {
            return Err(Error::Contract(format!("parameter {name} has no gradient")));
        }
        for entry in self.entries.values_mut() {
            entry.step += 1;
            let t = entry.step as i32;
            let bias1 = 1.0 - cfg.beta1.powi(t);
            let bias2 = 1.0 - cfg.beta2.powi(t);
            let grad = entry.tensor.grad().expect("checked above").to_vec();
            let values = entry.tensor.values_mut();
            for i in 0..values.len() {
                let g = grad[i];
                entry.m[i] = cfg.beta1 * entry.m[i] + (1.0 - cfg.beta1) * g;
                entry.v[i] = cfg.beta2 * entry.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = entry.m[i] / bias1;
                let v_hat = entry.v[i] / bias2;
                values[i] -= cfg.lr * cfg.weight_decay * values[i];
                values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("adamw_step"));
            }
            entry.tensor.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(value)).unwrap();
        store.get_mut("p").unwrap().accumulate_grad(&[grad]).unwrap();
        store
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut store = single(0.7, 0.0);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..AdamWConfig::default() };
        store.adamw_step(&cfg).unwrap();
        assert_eq!(store.get("p").unwrap().values(), &[0.7]);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // m_hat = 1, v_hat = 1 after bias correction: p = 1 - 0.1 * 1 / (1 + 1e-8).
        let mut store = single(1.0, 1.0);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..AdamWConfig::default() };
        store.adamw_step(&cfg).unwrap();
        let p = store.get("p").unwrap().values()[0];
        assert!((p - 0.900_000_001).abs() < 1e-12, "{p}");
        assert_eq!(store.entry("p").unwrap().step, 1);
        assert!(store.get("p").unwrap().grad().is_none());
    }

    #[test]
    fn decay_only_path() {
        let mut store = single(2.0, 0.0);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.01, ..AdamWConfig::default() };
        store.adamw_step(&cfg).unwrap();
        assert_eq!(store.get("p").unwrap().values()[0], 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut store = ParamStore::new();
        store.insert("encoder.w", Tensor::scalar(1.0)).unwrap();
        let err = store.adamw_step(&AdamWConfig::default()).unwrap_err();
        assert!(err.to_string().contains("encoder.w"));
    }

    #[test]
    fn names_unique_and_ordered() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::scalar(1.0)).unwrap();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(store.insert("b", Tensor::scalar(2.0)).is_err());
        assert_eq!(store.names().collect::<Vec<_>>(), ["b", "a"]);
        assert!(store.entry("a").unwrap().m.iter().all(|&m| m == 0.0));
    }
}
