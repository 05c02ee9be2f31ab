//! Named parameter storage and lazy binding of parameters onto a tape.

use std::path::Path;

use indexmap::IndexMap;
use neurimg_tensor::{read_unt1, write_unt1, Tape, Tensor, Var};

use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Parameters in insertion order, which is also the gradient reduction and
/// serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.map.insert(name.into(), Param { value, trainable });
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| contract(format!("no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| contract(format!("no parameter `{name}`")))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.map.get_index_of(name)
    }

    pub fn param(&self, index: usize) -> (&str, &Param) {
        let (k, v) = self.map.get_index(index).expect("parameter index");
        (k, v)
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Param {
        self.map.get_index_mut(index).expect("parameter index").1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Marks exactly the parameters accepted by `keep` as trainable.
    pub fn set_trainable_where(&mut self, keep: impl Fn(&str) -> bool) {
        for (name, p) in self.map.iter_mut() {
            p.trainable = keep(name);
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.map.values().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Writes every parameter as `<prefix><name>.unt`.
    pub fn save(&self, dir: &Path, prefix: &str) -> Result<()> {
        for (name, p) in &self.map {
            write_unt1(dir.join(format!("{prefix}{name}.unt")), &p.value)?;
        }
        Ok(())
    }

    /// Reads back every known parameter, checking shapes.
    pub fn load(&mut self, dir: &Path, prefix: &str) -> Result<()> {
        for (name, p) in self.map.iter_mut() {
            let t = read_unt1(dir.join(format!("{prefix}{name}.unt")))?;
            if t.shape() != p.value.shape() {
                return Err(contract(format!(
                    "stored `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}

/// Binds parameters to one tape on first use. With `grads` set, trainable
/// parameters become gradient-tracking leaves.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    grads: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, grads: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            grads,
        }
    }

    /// A binder whose every parameter is already the given variable, in
    /// store order.
    pub fn preset(store: &'a ParamStore, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), store.len());
        Self {
            store,
            vars: vars.iter().map(|&v| Some(v)).collect(),
            grads: false,
        }
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| contract(format!("no parameter `{name}`")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let p = &self.store.param(i).1;
        let v = tape.leaf(p.value.clone(), self.grads && p.trainable);
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// Gradients of every bound parameter that received one, in store order.
    pub fn grads(&self, tape: &Tape) -> Vec<(usize, Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| tape.grad(v)).map(|g| (i, g.clone())))
            .collect()
    }
}
