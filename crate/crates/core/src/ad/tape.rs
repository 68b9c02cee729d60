use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Local backward rule: maps the upstream gradient to one optional gradient
/// per parent. `needs[i]` tells whether parent `i` requires a gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A single evaluation graph. Build a fresh tape for every forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    params: RefCell<Vec<(String, usize)>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// A leaf that accumulates a gradient during [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    /// Registers a trainable parameter as a leaf; its gradient is later
    /// available by name through [`Tape::param_grads`].
    pub fn param(&self, p: &Parameter) -> Var<'_> {
        let v = self.leaf(p.value.clone());
        self.params.borrow_mut().push((p.name.clone(), v.id));
        v
    }

    pub(crate) fn push_op(
        &self,
        value: Tensor,
        parents: &[Var<'_>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let (parents, backward): (Vec<usize>, Option<BackwardFn>) = if requires_grad {
            (
                parents.iter().map(|p| p.id).collect(),
                Some(Box::new(backward)),
            )
        } else {
            (Vec::new(), None)
        };
        self.push_node(Node {
            value: Rc::new(value),
            parents,
            backward,
            requires_grad,
        })
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a single-element root. Gradients accumulate
    /// across repeated calls.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        if !nodes[root.id].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor>> = Vec::new();
        pending.resize_with(root.id + 1, || None);
        pending[root.id] = Some(Tensor::full(root_value.shape(), 1.0));

        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize_with(nodes.len(), || None);
        }

        // Node ids are a topological order: parents always precede children.
        for id in (0..=root.id).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect();
                let parent_grads = bw(&g, &needs);
                for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                    if !need {
                        continue;
                    }
                    if let Some(pg) = pg {
                        debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape");
                        match &mut pending[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Gradient of the last backward root with respect to `v`, zero if
    /// nothing reached it.
    pub fn grad(&self, v: Var<'_>) -> Tensor {
        let grads = self.grads.borrow();
        match grads.get(v.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }

    /// Gradients of all registered parameters, summed per name.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let params = self.params.borrow();
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, id) in params.iter() {
            let g = self.grad(Var {
                tape: self,
                id: *id,
            });
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn grad(&self) -> Tensor {
        self.tape.grad(*self)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            name: name.into(),
            value,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Anything that owns parameters.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.parameters_mut().into_iter().find(|p| p.name == name)
    }

    /// Overwrites a named parameter, checking that the shape is unchanged.
    fn set_parameter(&mut self, name: &str, value: Tensor) -> crate::error::Result<()> {
        let p = self
            .parameter_mut(name)
            .ok_or_else(|| crate::error::Error::config(format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(crate::error::Error::shape("set_parameter", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }
}
