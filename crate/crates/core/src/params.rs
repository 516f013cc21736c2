//! Named parameter storage shared by every model module.
//!
//! Parameters live in an insertion-ordered flat store; modules bind the
//! ones they need onto a tape at the start of a forward pass and the
//! optimizer pulls gradients back out by entry index. Frozen entries
//! (the ViT trunk) bind as constants and never receive gradients.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::NotFound(alloc::format!("parameter {name}")))
    }

    pub fn entry_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

/// Records which store entry each bound [`Var`] came from so gradients can
/// be routed back after `backward`.
#[derive(Default)]
pub struct Binder {
    by_entry: BTreeMap<usize, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bind a named parameter onto the tape (trainable entries as leaves,
    /// frozen ones as constants). Binding the same name twice returns the
    /// same [`Var`].
    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Var {
        let idx = *store
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(&v) = self.by_entry.get(&idx) {
            return v;
        }
        let e = &store.entries[idx];
        let v = if e.trainable {
            tape.param(e.tensor.clone())
        } else {
            tape.constant(e.tensor.clone())
        };
        self.by_entry.insert(idx, v);
        v
    }

    /// Gradients per store entry index (trainable and actually reached).
    pub fn collect(&self, grads: &mut Grads) -> Vec<(usize, Tensor)> {
        self.by_entry
            .iter()
            .filter_map(|(&idx, &v)| grads.take(v).map(|g| (idx, g)))
            .collect()
    }
}

/// Xavier-normal linear weight (fan_in, fan_out).
pub fn linear_init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let std = libm::sqrt(2.0 / (fan_in + fan_out) as f64);
    Tensor::randn(&[fan_in, fan_out], std, rng)
}

/// He-normal convolution weight (cout, cin_per_group, k, k).
pub fn conv_init(cout: usize, cin_g: usize, k: usize, rng: &mut Rng) -> Tensor {
    let std = libm::sqrt(2.0 / (cin_g * k * k) as f64);
    Tensor::randn(&[cout, cin_g, k, k], std, rng)
}
