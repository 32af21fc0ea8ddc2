//! Named, ordered parameter storage shared by the model, the optimizer and
//! checkpoint io. Registration order is fixed, which keeps initialization,
//! updates and serialization deterministic.

use std::collections::BTreeMap;

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (off for biases, norms and
    /// sensitivity parameters).
    pub decay: bool,
    /// Per-parameter learning-rate multiplier (1.0 for almost everything).
    pub lr_scale: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
            decay,
            lr_scale: 1.0,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).count()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.entries[id.0].lr_scale = scale;
    }

    /// Replaces a stored tensor, keeping its shape.
    pub fn load_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let idx = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::data(format!("unknown parameter {name}")))?;
        if self.entries[idx].value.shape() != value.shape() {
            return Err(Error::data(format!(
                "parameter {name}: shape {:?} does not match stored {:?}",
                value.shape(),
                self.entries[idx].value.shape()
            )));
        }
        self.entries[idx].value = value;
        Ok(())
    }

    /// Creates one leaf per parameter on the tape. Trainable parameters get
    /// gradient tracking; the same leaf is reused for every later access so
    /// gradient contributions accumulate correctly.
    pub fn bind<'g>(&self, tape: &'g Tape) -> BoundParams<'g> {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), e.trainable))
            .collect();
        BoundParams { vars }
    }

    /// Gathers per-parameter gradients in registration order.
    pub fn collect_grads(
        &self,
        bound: &BoundParams<'_>,
        grads: &crate::autodiff::tape::Gradients,
    ) -> Vec<Option<Tensor>> {
        bound.vars.iter().map(|v| grads.get(*v).cloned()).collect()
    }
}

/// Per-tape leaves for every parameter in a store.
pub struct BoundParams<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> BoundParams<'g> {
    /// Binds externally supplied leaves (finite-difference checks substitute
    /// perturbed parameter values this way). Order must match the store.
    pub fn from_vars(vars: Vec<Var<'g>>) -> Self {
        BoundParams { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }
}
