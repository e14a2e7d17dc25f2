//! Learnable parameter store and the Adam optimizer.
//!
//! The store owns every learnable tensor in a fixed insertion order, which
//! makes optimizer state, checkpoints and checksums reproducible. Parameter
//! aliasing (the adapter ablations) is handled above the store: aliased
//! logical names resolve to one stored entry.

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

pub struct ParamStore<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar element count across all parameters.
    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Register every parameter on a tape; returns name -> node id.
    pub fn register(&self, tape: &mut Tape<S>) -> ParamNodes {
        let mut nodes = BTreeMap::new();
        for (name, tensor) in &self.entries {
            nodes.insert(name.clone(), tape.param(tensor.clone()));
        }
        ParamNodes { nodes }
    }

    /// Register every parameter as a frozen constant (inference).
    pub fn register_frozen(&self, tape: &mut Tape<S>) -> ParamNodes {
        let mut nodes = BTreeMap::new();
        for (name, tensor) in &self.entries {
            nodes.insert(name.clone(), tape.constant(tensor.clone()));
        }
        ParamNodes { nodes }
    }

    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.entries {
            hasher.update(name.as_bytes());
            let mut bytes = Vec::with_capacity(tensor.len() * S::WIDTH);
            for &v in &tensor.data {
                v.write_le(&mut bytes);
            }
            hasher.update(&bytes);
        }
        hex::encode(hasher.finalize())
    }

    pub fn entries(&self) -> &[(String, Tensor<S>)] {
        &self.entries
    }

    pub(crate) fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<S> {
        &mut self.entries[idx].1
    }
}

/// Tape node ids keyed by parameter name, for one tape build.
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` not registered")))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; state is aligned with store order.
pub struct Adam<S: Scalar> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<S>) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(&t.shape))
            .collect();
        let v = store
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(&t.shape))
            .collect();
        Adam {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    /// Apply one update from tape gradients. Parameters without a gradient
    /// (disconnected from the loss) are left untouched but their moment
    /// buffers still decay, matching per-parameter Adam semantics on a zero
    /// gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        nodes: &ParamNodes,
        grads: &Gradients<S>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let lr = S::from_f64(self.cfg.lr);
        let eps = S::from_f64(self.cfg.eps);
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);

        let names: Vec<String> = store.names().map(str::to_owned).collect();
        for (idx, name) in names.iter().enumerate() {
            let node = nodes.get(name)?;
            let grad = grads.get(node);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let tensor = store.tensor_mut(idx);
            for i in 0..tensor.data.len() {
                let g = grad.map_or(S::zero(), |g| g.data[i]);
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for parameter `{name}`"
                    )));
                }
                m.data[i] = b1 * m.data[i] + (S::one() - b1) * g;
                v.data[i] = b2 * v.data[i] + (S::one() - b2) * g * g;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                tensor.data[i] = tensor.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        // One parameter, loss = (x - 3)^2; Adam should walk x toward 3.
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::scalar(0.0)).unwrap();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..400 {
            let mut tape = Tape::new();
            let nodes = store.register(&mut tape);
            let x = nodes.get("x").unwrap();
            let shifted = tape.add_imm(x, -3.0);
            let sq = tape.mul(shifted, shifted);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss);
            adam.step(&mut store, &nodes, &grads).unwrap();
        }
        let x = store.get("x").unwrap().item();
        assert!((x - 3.0).abs() < 1e-2, "x = {x}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::from_f64_slice(&[1.0, -2.0], &[2])).unwrap();
        let before = store.checksum();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let mut tape = Tape::new();
        let nodes = store.register(&mut tape);
        // Loss does not touch `w` at all.
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss);
        adam.step(&mut store, &nodes, &grads).unwrap();
        assert_eq!(store.checksum(), before);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(store.insert("a", Tensor::scalar(2.0)).is_err());
    }
}
