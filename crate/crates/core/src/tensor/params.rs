use std::collections::{BTreeMap, BTreeSet};

use super::array::Tensor;
use super::graph::{Graph, RunningStats, Var};
use crate::error::{Error, Result};

/// One trainable tensor with its Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Parameter {
    fn new(value: Tensor) -> Self {
        let n = value.numel();
        Self {
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters, batch-norm running statistics and optimizer state.
///
/// Names are hierarchical dotted paths (`encoder.edge0.weight`). Iteration
/// order is the sorted name order, which keeps serialization stable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    stats: BTreeMap<String, RunningStats>,
    frozen: BTreeSet<String>,
    pub step: u64,
    pub adam: AdamConfig,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, Parameter::new(value));
        Ok(())
    }

    pub fn insert_stats(&mut self, name: impl Into<String>, stats: RunningStats) -> Result<()> {
        let name = name.into();
        if self.stats.contains_key(&name) {
            return Err(Error::State(format!("duplicate batch-norm name {name}")));
        }
        self.stats.insert(name, stats);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))
    }

    pub fn stats_get(&self, name: &str) -> Result<&RunningStats> {
        self.stats
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown batch-norm statistics {name}")))
    }

    pub fn stats_mut(&mut self, name: &str) -> Result<&mut RunningStats> {
        self.stats
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown batch-norm statistics {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn stats(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stats.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Excludes every parameter whose name starts with `prefix` from
    /// [`ParameterStore::adam_step`].
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for name in self.params.keys() {
            if name.starts_with(prefix) {
                self.frozen.insert(name.clone());
            }
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Copies gradients from a finished backward pass into the store,
    /// adding to any gradient already present.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &[(String, Var)]) -> Result<()> {
        for (name, var) in bound {
            let Some(grad) = g.grad(*var) else { continue };
            let p = self.get_mut(name)?;
            match &mut p.grad {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .for_each(|(a, b)| *a += b),
                None => p.grad = Some(grad),
            }
        }
        Ok(())
    }

    /// One Adam update of every non-frozen parameter; clears gradients.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        if let Some((name, _)) = self
            .params
            .iter()
            .find(|(n, p)| p.grad.is_none() && !self.frozen.contains(*n))
        {
            return Err(Error::State(format!("parameter {name} has no gradient")));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            let grad = p.grad.take();
            if self.frozen.contains(name) {
                continue;
            }
            let grad = grad.expect("checked above");
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(p.m.iter_mut())
                .zip(p.v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Parameters bound into one graph, remembered by name so their gradients
/// can be copied back after `backward`.
#[derive(Default)]
pub struct Binder {
    pub bound: Vec<(String, Var)>,
    trainable: bool,
}

impl Binder {
    pub fn new(trainable: bool) -> Self {
        Self {
            bound: Vec::new(),
            trainable,
        }
    }

    /// Adds `name` to the graph as a leaf, tracked when the binder is
    /// trainable and the parameter is not frozen. Reuses the same node when
    /// a name is bound twice.
    pub fn param(&mut self, g: &mut Graph, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.bound.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let value = store.get(name)?.value.clone();
        let var = if self.trainable && !store.is_frozen(name) {
            g.variable(value)
        } else {
            g.constant(value)
        };
        self.bound.push((name.to_string(), var));
        Ok(var)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("a", Tensor::scalar(0.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        s.get_mut("w").unwrap().grad = Some(Tensor::zeros(&[2]));
        s.adam_step(0.1).unwrap();
        assert_eq!(s.get("w").unwrap().value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(0.0)).unwrap();
        s.get_mut("w").unwrap().grad = Some(Tensor::scalar(1.0));
        s.adam_step(0.003).unwrap();
        let w = s.get("w").unwrap().value.item().unwrap();
        assert!((w + 0.003).abs() < 1e-7, "{w}");
        assert!(s.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn adam_minimises_a_parabola() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(1.0)).unwrap();
        for _ in 0..100 {
            let mut g = Graph::new();
            let mut b = Binder::new(true);
            let x = b.param(&mut g, &s, "x").unwrap();
            let sq = g.mul(x, x).unwrap();
            g.backward(sq).unwrap();
            s.accumulate_grads(&g, &b.bound).unwrap();
            s.adam_step(0.1).unwrap();
        }
        assert!(s.get("x").unwrap().value.item().unwrap().abs() < 0.1);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut s = ParameterStore::new();
        s.insert("enc.w", Tensor::scalar(0.0)).unwrap();
        let msg = s.adam_step(0.1).unwrap_err().to_string();
        assert!(msg.contains("enc.w"));
        s.freeze_prefix("enc.");
        s.adam_step(0.1).unwrap();
    }
}
