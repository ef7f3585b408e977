//! Named parameter storage and the per-step forward context.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{label, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Running statistics are stored here too, with `trainable == false`.
    pub trainable: bool,
}

/// Ordered, named collection of every tensor a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            entries: Vec::new(),
            seed,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Seed for initializing the next parameter, derived from the store seed
    /// and the parameter's position.
    pub fn next_seed(&self) -> u64 {
        Rng::derive(self.seed, &[label::INIT, self.entries.len() as u64]).next_u64()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Overwrites a value by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::invalid("ParamStore::set", alloc::format!("unknown parameter {name}")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Places every entry on the tape. Trainable entries track gradients
    /// when `track` is set.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|p| tape.leaf(p.value.clone(), track && p.trainable))
            .collect()
    }
}

/// Forward-pass context: the tape, the bound parameters and the
/// running-statistics updates produced by training-mode normalization.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    vars: Vec<Var>,
    train: bool,
    updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, train: bool, track: bool) -> Self {
        let vars = store.bind(tape, track);
        Self::with_vars(tape, store, vars, train)
    }

    /// Uses caller-provided tape nodes for the parameters, one per store
    /// entry in order.
    pub fn with_vars(tape: &'a mut Tape, store: &'a ParamStore, vars: Vec<Var>, train: bool) -> Self {
        assert_eq!(vars.len(), store.len(), "one tape node per parameter");
        Forward {
            tape,
            store,
            vars,
            train,
            updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        self.store.get(id)
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn push_update(&mut self, id: ParamId, value: Tensor) {
        self.updates.push((id, value));
    }

    pub fn into_updates(self) -> Vec<(ParamId, Tensor)> {
        self.updates
    }
}

impl ParamStore {
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, v) in updates {
            self.entries[id.0].value = v;
        }
    }
}
