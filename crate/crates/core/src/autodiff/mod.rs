//! Tape-based reverse-mode automatic differentiation with recordable backward.
//!
//! A [`Graph`] is an append-only list of nodes. Every op appends one node whose
//! inputs already exist, so node ids are a topological order. Backward rules
//! are written in terms of the same recorded ops; running [`backward`] with
//! `create_graph = true` therefore appends the gradient computation to the
//! graph, and a second backward pass can differentiate through it.

mod kernels;
mod ops;

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use ops::Op;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) use kernels::upsample as upsample_tensor;

struct Node {
    value: Rc<Tensor>,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

struct GraphInner {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

/// Shared handle to one computation graph. Cloning is cheap.
#[derive(Clone)]
pub struct Graph(Rc<GraphInner>);

/// A tensor recorded in a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph(Rc::new(GraphInner {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }))
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.0.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_recording(&self) -> bool {
        self.0.recording.get()
    }

    /// Runs `f` with op recording switched off: every value produced inside is
    /// a constant.
    pub fn no_grad<T>(&self, f: impl FnOnce() -> T) -> T {
        let prev = self.0.recording.replace(false);
        let out = f();
        self.0.recording.set(prev);
        out
    }

    pub fn same_as(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Recomputes every non-leaf node from its inputs and compares with the
    /// stored value bit for bit. Returns the first mismatching node id.
    pub fn replay(&self) -> Result<Option<usize>> {
        let nodes = self.0.nodes.borrow();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let fresh = node.op.forward(&inputs)?;
            let same = fresh.shape() == node.value.shape()
                && fresh.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(Some(id));
            }
        }
        Ok(None)
    }

    fn push(&self, value: Tensor, op: Op, inputs: Vec<usize>, requires_grad: bool) -> Var {
        let mut nodes = self.0.nodes.borrow_mut();
        debug_assert!(inputs.iter().all(|&i| i < nodes.len()));
        nodes.push(Node {
            value: Rc::new(value),
            op,
            inputs,
            requires_grad,
        });
        Var {
            graph: self.clone(),
            id: nodes.len() - 1,
        }
    }

    /// Evaluates `op` on `inputs` and records it if any input needs a gradient.
    pub(crate) fn apply(&self, op: Op, inputs: &[&Var]) -> Result<Var> {
        for v in inputs {
            if !v.graph.same_as(self) {
                return Err(Error::Graph(format!("{} operand belongs to a different graph", op.name())));
            }
        }
        let (values, track) = {
            let nodes = self.0.nodes.borrow();
            let values: Vec<Rc<Tensor>> = inputs.iter().map(|v| nodes[v.id].value.clone()).collect();
            let track = self.is_recording() && inputs.iter().any(|v| nodes[v.id].requires_grad);
            (values, track)
        };
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = op.forward(&refs)?;
        Ok(if track {
            self.push(out, op, inputs.iter().map(|v| v.id).collect(), true)
        } else {
            self.push(out, Op::Leaf, Vec::new(), false)
        })
    }
}

impl Var {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.0.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.0.nodes.borrow()[self.id].requires_grad
    }

    /// The same value as a constant in the same graph.
    pub fn detach(&self) -> Var {
        let v = (*self.value()).clone();
        self.graph.constant(v)
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

/// Gradients keyed by node id.
pub struct GradMap {
    grads: HashMap<usize, Var>,
    recorded: bool,
}

impl GradMap {
    pub fn get(&self, v: &Var) -> Option<&Var> {
        self.grads.get(&v.id)
    }

    /// Gradient value, or zeros of the right shape when `v` did not influence
    /// the output.
    pub fn value_or_zeros(&self, v: &Var) -> Tensor {
        match self.grads.get(&v.id) {
            Some(g) => (*g.value()).clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }

    /// True when the gradients are themselves recorded graph nodes.
    pub fn recorded(&self) -> bool {
        self.recorded
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Gradients of the scalar `output` with respect to every node that requires
/// a gradient. With `create_graph`, the returned gradients are recorded nodes
/// and can be differentiated again.
pub fn backward(output: &Var, create_graph: bool) -> Result<GradMap> {
    let g = output.graph.clone();
    let relevant: Vec<bool> = {
        let nodes = g.0.nodes.borrow();
        nodes[..=output.id].iter().map(|n| n.requires_grad).collect()
    };
    let grads = run_backward(output, relevant, create_graph)?;
    let grads = grads
        .into_iter()
        .enumerate()
        .filter_map(|(id, gr)| gr.map(|v| (id, v)))
        .collect();
    Ok(GradMap {
        grads,
        recorded: create_graph,
    })
}

/// Gradients of `output` with respect to `wrt` only. Nodes that do not lie
/// between `wrt` and `output` are skipped. Inputs that do not influence the
/// output get a zero gradient.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Result<Vec<Var>> {
    let g = output.graph.clone();
    for v in wrt {
        if !v.graph.same_as(&g) {
            return Err(Error::Graph(format!("node {} is not part of the output's graph", v.id)));
        }
    }
    let relevant: Vec<bool> = {
        let nodes = g.0.nodes.borrow();
        let mut rel = vec![false; output.id + 1];
        for v in wrt {
            if v.id <= output.id && nodes[v.id].requires_grad {
                rel[v.id] = true;
            }
        }
        for id in 0..=output.id {
            if !rel[id] && nodes[id].requires_grad && nodes[id].inputs.iter().any(|&i| rel[i]) {
                rel[id] = true;
            }
        }
        rel
    };
    let grads = run_backward(output, relevant, create_graph)?;
    Ok(wrt
        .iter()
        .map(|v| match grads.get(v.id).and_then(|x| x.clone()) {
            Some(gv) => gv,
            None => g.constant(Tensor::zeros(v.value().shape())),
        })
        .collect())
}

fn run_backward(output: &Var, relevant: Vec<bool>, create_graph: bool) -> Result<Vec<Option<Var>>> {
    let g = output.graph.clone();
    let out_value = output.value();
    if out_value.len() != 1 {
        return Err(Error::Graph(format!(
            "backward needs a scalar output, got shape {:?}",
            out_value.shape()
        )));
    }
    let prev = g.0.recording.replace(create_graph);
    let result = (|| {
        let mut grads: Vec<Option<Var>> = vec![None; output.id + 1];
        if relevant[output.id] {
            grads[output.id] = Some(g.constant(Tensor::ones(out_value.shape())));
        }
        for id in (0..=output.id).rev() {
            let Some(gout) = grads[id].clone() else { continue };
            let (op, inputs) = {
                let nodes = g.0.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].inputs.clone())
            };
            if matches!(op, Op::Leaf) {
                continue;
            }
            let needs: Vec<bool> = inputs.iter().map(|&i| relevant[i]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let in_vars: Vec<Var> = inputs.iter().map(|&i| Var { graph: g.clone(), id: i }).collect();
            let out_var = Var { graph: g.clone(), id };
            let contribs = op.backward(&in_vars, &out_var, &gout, &needs)?;
            for ((&i, need), contrib) in inputs.iter().zip(needs).zip(contribs) {
                if !need {
                    continue;
                }
                let Some(c) = contrib else { continue };
                grads[i] = Some(match grads[i].take() {
                    Some(acc) => acc.add(&c)?,
                    None => c,
                });
            }
        }
        Ok(grads)
    })();
    g.0.recording.set(prev);
    result
}
