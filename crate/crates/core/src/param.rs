//! Named parameters and the per-pass binding of parameters onto a tape.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::tensor::{Gradients, Tape, Tensor, Var};

/// A named tensor owned by a layer. Non-trainable parameters hold state
/// such as running statistics; they are checkpointed but never optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value,
            trainable: false,
        }
    }
}

/// Train/eval switch for layers whose behaviour differs at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Anything that owns parameters.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));
    fn set_mode(&mut self, mode: Mode);

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn num_trainable(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }
}

/// Binds parameters onto a tape for one forward pass.
///
/// Each parameter becomes one leaf no matter how often the pass reads it,
/// so its adjoint accumulates every use.
pub struct Ctx<'t> {
    tape: &'t Tape,
    track: bool,
    bound: RefCell<HashMap<String, Var<'t>>>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Ctx {
            tape,
            track: true,
            bound: RefCell::default(),
        }
    }

    /// A context that binds every parameter as a constant.
    pub fn no_grad(tape: &'t Tape) -> Self {
        Ctx {
            tape,
            track: false,
            bound: RefCell::default(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn param(&self, p: &Param) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(&p.name) {
            return *v;
        }
        let v = if self.track && p.trainable {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound.borrow_mut().insert(p.name.clone(), v);
        v
    }

    pub fn input(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Gradients of all trainable parameters read during the pass.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}
