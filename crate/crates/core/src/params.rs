//! Named parameter store and per-forward-pass binding.
//!
//! Parameters live outside any tape as [`RawTensor`]s. Each forward pass
//! binds the ones it touches onto a fresh tape through a [`Binder`]; after
//! `backward` the binder hands gradients back in a fixed (first-bound)
//! order, which keeps gradient reduction deterministic.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::tensor::{RawTensor, Result, Tape, TensorError, Var};

#[derive(Default, Clone)]
pub struct ParamSet {
    entries: Vec<(String, RawTensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: RawTensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&RawTensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RawTensor> {
        self.index.get(name).copied().map(|i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RawTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut RawTensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

pub struct Binder<'t, 'p> {
    pub tape: &'t Tape,
    params: &'p ParamSet,
    trainable: bool,
    bound: RefCell<HashMap<String, Var<'t>>>,
    order: RefCell<Vec<String>>,
}

impl<'t, 'p> Binder<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamSet, trainable: bool) -> Self {
        Self {
            tape,
            params,
            trainable,
            bound: RefCell::new(HashMap::new()),
            order: RefCell::new(Vec::new()),
        }
    }

    /// Tape variable for the named parameter; bound once per pass.
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let raw = self.params.get(name).ok_or_else(|| TensorError::InvalidArg {
            op: "binder",
            msg: format!("unknown parameter {name}"),
        })?;
        let var = if self.trainable {
            self.tape.param(&raw.shape, raw.data.clone())?
        } else {
            self.tape.leaf(&raw.shape, raw.data.clone())?
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        self.order.borrow_mut().push(name.to_string());
        Ok(var)
    }

    /// Gradients of every bound parameter, in first-bound order. Parameters
    /// untouched by the loss report zeros.
    pub fn grads(&self) -> Vec<(String, Vec<f64>)> {
        let bound = self.bound.borrow();
        self.order
            .borrow()
            .iter()
            .map(|name| {
                let var = bound[name];
                let g = var
                    .grad()
                    .unwrap_or_else(|| vec![0.0; var.numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}
