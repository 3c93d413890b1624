//! Named parameter collections and their binding onto a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{CkdaError, Result};
use crate::tensor::Tensor;

/// Tensors keyed by canonical dotted names (`backbone.blocks.0.attn.qkv.weight`).
/// Iteration order is lexicographic, which keeps hashing and serialization stable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| CkdaError::State(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| CkdaError::State(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            for s in t.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Glorot-uniform initialised `[fan_in, fan_out]` weight.
pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(&[fan_in, fan_out], -a, a, rng)
}

/// Lazily pushes store entries onto a graph the first time they are used.
///
/// With `trainable = false` parameters enter as constants, which is how
/// frozen snapshots are evaluated.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: HashMap<String, Var>,
    trainable: bool,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            store,
            vars: HashMap::new(),
            trainable,
        }
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable {
            g.param(t)
        } else {
            g.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Gradients of every bound parameter, keyed by name. Parameters that
    /// did not influence the loss get no entry.
    pub fn collect_grads(&self, mut grads: Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.vars {
            if let Some(g) = grads.take(*v) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
