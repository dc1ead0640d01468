//! Reverse-mode autodiff over `ndarray` f64 tensors.
//!
//! The graph is the `Rc` DAG itself: each [`Var`] owns its value, its
//! parents, and a VJP closure that builds the parents' cotangents *as new
//! graph nodes*. Because backward passes are expressed in the same
//! primitives as forward passes, `grad` output stays differentiable and
//! gradients of gradients (e.g. input-gradient penalties) come for free.

use ndarray::{ArrayD, IxDyn};
use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Maps (node, its cotangent) to one optional cotangent per parent.
pub(crate) type VjpFn = Box<dyn Fn(&Var, &Var) -> Vec<Option<Var>>>;

pub struct VarNode {
    pub(crate) id: u64,
    pub(crate) data: ArrayD<f64>,
    pub(crate) parents: Vec<Var>,
    pub(crate) vjp: Option<VjpFn>,
    pub(crate) needs_grad: bool,
}

/// A node in the autodiff graph. Cheap to clone.
#[derive(Clone)]
pub struct Var(pub(crate) Rc<VarNode>);

impl Var {
    /// A leaf that participates in differentiation.
    pub fn leaf(data: ArrayD<f64>) -> Self {
        Var(Rc::new(VarNode {
            id: fresh_id(),
            data,
            parents: Vec::new(),
            vjp: None,
            needs_grad: true,
        }))
    }

    /// A constant: gradients do not flow into it.
    pub fn constant(data: ArrayD<f64>) -> Self {
        Var(Rc::new(VarNode {
            id: fresh_id(),
            data,
            parents: Vec::new(),
            vjp: None,
            needs_grad: false,
        }))
    }

    pub fn scalar(v: f64) -> Self {
        Var::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_op(data: ArrayD<f64>, parents: Vec<Var>, vjp: VjpFn) -> Self {
        let needs_grad = parents.iter().any(|p| p.0.needs_grad);
        Var(Rc::new(VarNode {
            id: fresh_id(),
            data,
            // keep the graph only when something upstream needs it
            parents: if needs_grad { parents } else { Vec::new() },
            vjp: if needs_grad { Some(vjp) } else { None },
            needs_grad,
        }))
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.0.data.len(), 1, "item() on non-scalar");
        *self.0.data.iter().next().expect("empty tensor")
    }

    pub fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }
}

/// Gradients of a scalar `output` with respect to each var in `wrt`.
///
/// The returned vars are themselves graph nodes, so they can be combined
/// into new losses and differentiated again.
pub fn grad(output: &Var, wrt: &[&Var]) -> Vec<Var> {
    assert_eq!(output.len(), 1, "grad expects a scalar output");
    let order = topo_order(output);
    let mut cot: HashMap<u64, Var> = HashMap::new();
    cot.insert(
        output.id(),
        Var::constant(ArrayD::from_elem(output.data().raw_dim(), 1.0)),
    );
    for node in order.iter().rev() {
        let Some(g) = cot.get(&node.id()).cloned() else {
            continue;
        };
        let Some(vjp) = &node.0.vjp else { continue };
        let parent_cots = vjp(node, &g);
        debug_assert_eq!(parent_cots.len(), node.0.parents.len());
        for (parent, pg) in node.0.parents.iter().zip(parent_cots) {
            let Some(pg) = pg else { continue };
            if !parent.0.needs_grad {
                continue;
            }
            debug_assert_eq!(pg.shape(), parent.shape(), "cotangent shape mismatch");
            match cot.remove(&parent.id()) {
                Some(acc) => {
                    cot.insert(parent.id(), crate::ops::add(&acc, &pg));
                }
                None => {
                    cot.insert(parent.id(), pg);
                }
            }
        }
    }
    wrt.iter()
        .map(|v| {
            cot.get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(ArrayD::zeros(v.data().raw_dim())))
        })
        .collect()
}

/// Children-after-parents ordering of the grad-relevant subgraph.
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut done: HashSet<u64> = HashSet::new();
    // stack holds (node, next-parent-index)
    let mut stack: Vec<(Var, usize)> = vec![(root.clone(), 0)];
    let mut on_stack: HashSet<u64> = HashSet::new();
    on_stack.insert(root.id());
    while let Some((node, idx)) = stack.pop() {
        if idx < node.0.parents.len() {
            let parent = node.0.parents[idx].clone();
            stack.push((node, idx + 1));
            if parent.0.needs_grad && !done.contains(&parent.id()) && !on_stack.contains(&parent.id())
            {
                on_stack.insert(parent.id());
                stack.push((parent, 0));
            }
        } else {
            on_stack.remove(&node.id());
            if done.insert(node.id()) {
                order.push(node);
            }
        }
    }
    order
}
