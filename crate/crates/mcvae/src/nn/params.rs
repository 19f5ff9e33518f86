//! Named parameter store shared by the model, the optimizer and checkpoints.
//!
//! Entries keep insertion order so checkpoint files and optimizer traversal
//! are deterministic. Non-trainable entries (batch-norm running statistics)
//! live here too so they serialize with everything else, but the optimizer
//! never touches them and they bind into graphs as constants.

use std::collections::HashMap;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{McvaeError, Result};

/// Stable handle to one entry in a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(McvaeError::InvalidArgument(format!(
                "duplicate parameter name: {name}"
            )));
        }
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
    }

    /// Total element count over trainable entries.
    pub fn trainable_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub(crate) fn entries(&self) -> &[Entry] {
        &self.entries
    }

    /// Overwrite an entry's values in place (shape must match).
    pub fn set(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let expected = self.entries[id.0].tensor.len();
        if expected != data.len() {
            return Err(McvaeError::DimensionMismatch {
                what: format!("parameter {}", self.entries[id.0].name),
                expected,
                got: data.len(),
            });
        }
        self.entries[id.0].tensor.data_mut().copy_from_slice(data);
        Ok(())
    }
}

/// Per-forward mapping from [`ParamId`]s to graph nodes.
///
/// Binding the same id twice returns the same node, so fan-out within one
/// graph accumulates gradients on a single leaf. Trainable entries become
/// `param` leaves; everything else binds as a constant.
#[derive(Debug, Default)]
pub struct Binding {
    bound: HashMap<ParamId, Var>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, g: &mut Graph, store: &Params, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = store.get(id).clone();
        let v = if store.is_trainable(id) {
            g.param(t)
        } else {
            g.input(t)
        };
        self.bound.insert(id, v);
        v
    }

    /// Gradients of every bound trainable leaf that the loss reached.
    pub fn grads(&self, g: &Graph, store: &Params) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .bound
            .iter()
            .filter(|(id, _)| store.is_trainable(**id))
            .filter_map(|(id, var)| g.grad(*var).map(|gr| (*id, gr.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
