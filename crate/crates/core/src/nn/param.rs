use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Which part of the network a tensor belongs to. Drives freezing, audit
/// scope and the gradient-isolation probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Stem plus stages 1-3, shared by every branch.
    Trunk,
    /// Stage-4 weights of branch `i`.
    Branch(usize),
    /// BN neck + classifier of unit `i`.
    Head(usize),
    /// Side-embedding table.
    Lai,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Param,
    /// Non-learned state such as running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub kind: SlotKind,
    pub group: ParamGroup,
    /// Learnable but excluded from optimizer updates (e.g. a BN-neck bias).
    pub trainable: bool,
}

impl Slot {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Flat arena holding every weight and buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, slot: Slot) -> ParamId {
        assert!(
            !self.index.contains_key(&slot.name),
            "duplicate tensor name {}",
            slot.name
        );
        let id = self.slots.len();
        self.index.insert(slot.name.clone(), id);
        self.slots.push(slot);
        ParamId(id)
    }

    pub fn param(&mut self, name: String, shape: &[usize], value: Vec<f32>, group: ParamGroup) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "{name}");
        let grad = vec![0.0; value.len()];
        self.insert(Slot {
            name,
            shape: shape.to_vec(),
            value,
            grad,
            kind: SlotKind::Param,
            group,
            trainable: true,
        })
    }

    pub fn buffer(&mut self, name: String, shape: &[usize], value: Vec<f32>, group: ParamGroup) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "{name}");
        self.insert(Slot {
            name,
            shape: shape.to_vec(),
            value,
            grad: Vec::new(),
            kind: SlotKind::Buffer,
            group,
            trainable: false,
        })
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.slots[id.0].trainable = trainable;
    }

    pub fn value(&self, id: ParamId) -> &[f32] {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.slots[id.0].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.slots[id.0].grad
    }

    /// Value and gradient of the same slot, borrowed together.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&[f32], &mut [f32]) {
        let slot = &mut self.slots[id.0];
        (&slot.value, &mut slot.grad)
    }

    pub fn slot(&self, id: ParamId) -> &Slot {
        &self.slots[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Slot> {
        self.index.get(name).map(|&i| &self.slots[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Slot> {
        match self.index.get(name) {
            Some(&i) => Some(&mut self.slots[i]),
            None => None,
        }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [Slot] {
        &mut self.slots
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Number of learnable scalars, optionally filtered by group.
    pub fn count_params(&self, filter: impl Fn(ParamGroup) -> bool) -> usize {
        self.slots
            .iter()
            .filter(|s| s.kind == SlotKind::Param && filter(s.group))
            .map(Slot::numel)
            .sum()
    }
}

/// Naming context handed to layer constructors.
#[derive(Clone, Debug)]
pub struct Scope {
    prefix: String,
    pub group: ParamGroup,
}

impl Scope {
    pub fn new(prefix: &str, group: ParamGroup) -> Self {
        Self { prefix: prefix.to_string(), group }
    }

    pub fn sub(&self, name: impl std::fmt::Display) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope { prefix, group: self.group }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }
}
