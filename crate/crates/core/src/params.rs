//! Named parameter storage shared by the model, optimizer and checkpoints.

use std::collections::HashMap;

use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, name-addressable set of parameter tensors. Insertion order is
/// the canonical order for serialization and optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a new parameter, or replaces the value of an existing one.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.tensors[id.0] = value;
            return id;
        }
        let id = ParamId(self.names.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| &self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// New store holding only the parameters whose name satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        let mut out = ParamStore::new();
        for (_, name, t) in self.iter() {
            if keep(name) {
                out.insert(name, t.clone());
            }
        }
        out
    }

    /// Rounds every value through `f32` (storage-precision emulation).
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Trainable<'a> {
    All,
    None,
    Mask(&'a [bool]),
}

/// Registers parameters of a store on a tape, deciding per parameter whether
/// gradients are tracked.
#[derive(Debug, Clone, Copy)]
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Trainable<'a>,
}

impl<'a> Binder<'a> {
    /// Every parameter tracks gradients.
    pub fn all(store: &'a ParamStore) -> Self {
        Binder {
            store,
            trainable: Trainable::All,
        }
    }

    /// Inference: no parameter tracks gradients.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Binder {
            store,
            trainable: Trainable::None,
        }
    }

    /// `mask[id]` selects the trainable parameters.
    pub fn masked(store: &'a ParamStore, mask: &'a [bool]) -> Self {
        Binder {
            store,
            trainable: Trainable::Mask(mask),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        match self.trainable {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Mask(m) => m[id.0],
        }
    }

    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(self.store, id, self.is_trainable(id))
    }
}
