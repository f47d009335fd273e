//! Binds named model parameters to tape leaves for one forward pass.

use std::collections::{BTreeMap, HashMap};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Which component a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Connector,
    Lora,
    Lm,
}

/// Parameter groups that receive gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub connector: bool,
    pub lora: bool,
    pub lm: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        connector: false,
        lora: false,
        lm: false,
    };

    pub fn includes(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Connector => self.connector,
            ParamGroup::Lora => self.lora,
            ParamGroup::Lm => self.lm,
        }
    }
}

/// Visitor interface shared by every parameterised component.
pub trait Parameters {
    /// Calls `f(name, tensor)` for every parameter, in a fixed order.
    fn visit<'s>(&'s self, f: &mut dyn FnMut(String, &'s Tensor));
    fn visit_mut<'s>(&'s mut self, f: &mut dyn FnMut(String, &'s mut Tensor));

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    fn named_mut(&mut self) -> BTreeMap<String, &mut Tensor> {
        let mut out = BTreeMap::new();
        self.visit_mut(&mut |n, t| {
            out.insert(n, t);
        });
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

pub struct Graph<'a> {
    pub tape: Tape<'a>,
    trainable: Trainable,
    bound: Vec<(String, Var)>,
    seen: HashMap<*const Tensor, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(trainable: Trainable) -> Self {
        Self {
            tape: Tape::new(),
            trainable,
            bound: Vec::new(),
            seen: HashMap::new(),
        }
    }

    /// Puts a parameter on the tape once per pass. `name` is only built for
    /// trainable parameters.
    pub fn param(&mut self, group: ParamGroup, t: &'a Tensor, name: impl FnOnce() -> String) -> Var {
        let key = t as *const Tensor;
        if let Some(&v) = self.seen.get(&key) {
            return v;
        }
        let rg = self.trainable.includes(group);
        let v = self.tape.leaf_ref(t, rg);
        if rg {
            self.bound.push((name(), v));
        }
        self.seen.insert(key, v);
        v
    }

    /// Gradients of `loss` for every trainable parameter that was bound.
    /// Parameters the loss does not reach get zeros.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut g = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .map(|(n, v)| {
                let t = g
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(*v).shape()));
                (n.clone(), t)
            })
            .collect())
    }
}
