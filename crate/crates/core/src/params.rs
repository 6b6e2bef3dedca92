//! Named parameter store and the Adam optimizer.

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Ordered collection of named tensors. Iteration order is insertion order,
/// which keeps checkpoints and checksums reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and little-endian payloads, in store order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.entries {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters bound onto one tape as differentiable leaves.
pub struct BoundParams {
    ids: IndexMap<String, NodeId>,
}

impl BoundParams {
    pub fn bind(store: &ParamStore, tape: &mut Tape) -> Self {
        let mut ids = IndexMap::new();
        for (name, value) in store.iter() {
            ids.insert(name.to_string(), tape.leaf(value.clone()));
        }
        BoundParams { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Extract gradients by parameter name after a backward sweep.
    pub fn grads(&self, store: &ParamStore, grads: &crate::tape::Gradients) -> GradMap {
        let mut out = IndexMap::new();
        for (name, &id) in &self.ids {
            let shape = store.get(name).shape().to_vec();
            out.insert(name.clone(), grads.get_or_zeros(id, &shape));
        }
        GradMap { entries: out }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug)]
pub struct GradMap {
    entries: IndexMap<String, Tensor>,
}

impl GradMap {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let mut entries = IndexMap::new();
        for (name, t) in store.iter() {
            entries.insert(name.to_string(), Tensor::zeros(t.shape()));
        }
        GradMap { entries }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries[name]
    }

    pub fn add_assign(&mut self, other: &GradMap) {
        for (name, g) in &mut self.entries {
            *g = g.add(&other.entries[name]);
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for g in self.entries.values_mut() {
            *g = g.scale(c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Adam with decoupled weight decay. Moments are stored per parameter in
/// store order so optimizer state round-trips through checkpoints.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, t) in store.iter() {
            m.insert(name.to_string(), Tensor::zeros(t.shape()));
            v.insert(name.to_string(), Tensor::zeros(t.shape()));
        }
        Adam { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, m, v }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let g = grads.get(&name);
            let m = self.m.get_mut(&name).unwrap();
            let v = self.v.get_mut(&name).unwrap();
            let p = store.get_mut(&name);
            for i in 0..p.numel() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                let decayed = p.data()[i] * (1.0 - self.lr * self.weight_decay);
                p.data_mut()[i] = decayed - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn state_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, t) in &self.m {
            out.push((format!("adam.m.{name}"), t));
        }
        for (name, t) in &self.v {
            out.push((format!("adam.v.{name}"), t));
        }
        out
    }

    pub fn restore_state(&mut self, name: &str, value: Tensor) -> bool {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            if let Some(slot) = self.m.get_mut(rest) {
                *slot = value;
                return true;
            }
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            if let Some(slot) = self.v.get_mut(rest) {
                *slot = value;
                return true;
            }
        }
        false
    }
}
