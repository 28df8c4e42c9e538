//! The append-only computation graph and reverse-mode gradient evaluation.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::array::Array;
use crate::error::{AutodiffError, Result};
use crate::ops::Op;

pub(crate) struct Node {
    pub(crate) value: Rc<Array>,
    pub(crate) op: Op,
    pub(crate) inputs: Vec<usize>,
    pub(crate) requires_grad: bool,
}

/// An append-only store of nodes.
///
/// Node ids are assigned in creation order, which is always a valid
/// topological order. While `recording` is on, every operation that touches
/// a differentiable node registers its derivative recipe; gradient evaluation
/// with `create_graph` keeps recording on, so gradients are themselves
/// differentiable to any order.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.len())
            .field("recording", &self.recording.get())
            .finish()
    }
}

/// Options for [`Graph::grad`].
#[derive(Clone, Copy, Debug, Default)]
pub struct GradOptions {
    /// Record the backward pass so the returned gradients can be differentiated again.
    pub create_graph: bool,
    /// Return zeros for inputs the output does not depend on instead of failing.
    pub allow_unused: bool,
}

impl GradOptions {
    pub fn create_graph() -> Self {
        Self {
            create_graph: true,
            allow_unused: false,
        }
    }

    pub fn allow_unused(mut self) -> Self {
        self.allow_unused = true;
        self
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    /// Runs `f` with recording disabled; nothing created inside is differentiable.
    pub fn no_grad<T>(&self, f: impl FnOnce() -> T) -> T {
        let prev = self.recording.replace(false);
        let out = f();
        self.recording.set(prev);
        out
    }

    /// A differentiable input.
    pub fn param(&self, value: Array) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A constant input.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array::scalar(v))
    }

    pub fn leaf(&self, value: Array, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var { graph: self, id }
    }

    pub(crate) fn push(&self, value: Array, op: Op, inputs: &[Var<'_>]) -> Var<'_> {
        let recording = self.recording.get();
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = recording && inputs.iter().any(|v| nodes[v.id].requires_grad);
        let id = nodes.len();
        let (op, inputs) = if requires_grad {
            (op, inputs.iter().map(|v| v.id).collect())
        } else {
            (Op::Leaf, Vec::new())
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            inputs,
            requires_grad,
        });
        Var { graph: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Returns one [`Var`] per requested input. With
    /// [`GradOptions::create_graph`] the backward pass is recorded and the
    /// returned gradients can be differentiated again; otherwise they are
    /// constants.
    pub fn grad<'g>(
        &'g self,
        output: Var<'g>,
        wrt: &[Var<'g>],
        opts: GradOptions,
    ) -> Result<Vec<Var<'g>>> {
        let out_shape = output.shape();
        if output.value().len() != 1 {
            return Err(AutodiffError::NonScalarOutput(out_shape));
        }
        for w in wrt {
            if !self.requires_grad_of(w.id) {
                return Err(AutodiffError::NotDifferentiable(w.id));
            }
        }
        let out = output.id;
        let lo = wrt.iter().map(|w| w.id).min().unwrap_or(out).min(out);

        // Which nodes in [lo, out] depend on some requested input.
        let span = out + 1 - lo;
        let mut needed = vec![false; span];
        let mut is_wrt = vec![false; span];
        for w in wrt {
            if w.id <= out {
                is_wrt[w.id - lo] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in lo..=out {
                let node = &nodes[i];
                needed[i - lo] = is_wrt[i - lo]
                    || (node.requires_grad
                        && node.inputs.iter().any(|&j| j >= lo && needed[j - lo]));
            }
        }

        let mut grads: Vec<Option<Var<'g>>> = vec![None; span];
        let prev = self.recording.replace(opts.create_graph);
        let result = (|| -> Result<()> {
            if !needed[out - lo] {
                return Ok(());
            }
            grads[out - lo] = Some(self.constant(Array::full(out_shape.clone(), 1.0)));
            for i in (lo..=out).rev() {
                if !needed[i - lo] {
                    continue;
                }
                let Some(g) = grads[i - lo] else { continue };
                let (op, inputs) = {
                    let nodes = self.nodes.borrow();
                    (nodes[i].op.clone(), nodes[i].inputs.clone())
                };
                if inputs.is_empty() {
                    continue;
                }
                let need: Vec<bool> = inputs
                    .iter()
                    .map(|&j| j >= lo && needed[j - lo])
                    .collect();
                if !need.iter().any(|&b| b) {
                    continue;
                }
                let in_vars: Vec<Var<'g>> = inputs.iter().map(|&j| Var { graph: self, id: j }).collect();
                let out_var = Var { graph: self, id: i };
                let input_grads = op.backward(&in_vars, out_var, g, &need)?;
                for ((&j, gj), &nj) in inputs.iter().zip(input_grads).zip(&need) {
                    if !nj {
                        continue;
                    }
                    let Some(gj) = gj else { continue };
                    let slot = &mut grads[j - lo];
                    *slot = Some(match slot.take() {
                        Some(prev) => prev.add(gj)?,
                        None => gj,
                    });
                }
            }
            Ok(())
        })();
        self.recording.set(prev);
        result?;

        wrt.iter()
            .map(|w| {
                let found = if w.id <= out { grads[w.id - lo] } else { None };
                match found {
                    Some(g) => Ok(g),
                    None if opts.allow_unused => Ok(self.constant(Array::zeros(w.shape()))),
                    None => Err(AutodiffError::Unreachable(w.id)),
                }
            })
            .collect()
    }
}

/// A handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
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

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Array> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// The value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// A constant copy of this node's value, cut off from the graph.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }
}
