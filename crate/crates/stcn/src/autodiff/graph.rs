//! Reverse-mode automatic differentiation over a dense-tensor expression
//! graph.
//!
//! Nodes are appended in construction order, so the node list is already a
//! topological order. Values are computed eagerly while the graph is built
//! (whenever every ancestor leaf is bound), which lets data-dependent
//! control flow — adaptive ODE stepping, nearest-neighbour routing — read
//! intermediate values mid-construction. `gradients` then runs one reverse
//! sweep over the recorded nodes.
//!
//! `stop_gradient` nodes forward their value unchanged and contribute
//! exactly zero to every upstream gradient.

use std::collections::BTreeMap;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Tanh,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LeafKind {
    /// Trainable; collected by [`Graph::gradients`].
    Param,
    /// Bound data; differentiated through but not reported.
    Input,
    /// Inline literal; never rebound.
    Constant,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(LeafKind),
    StopGradient,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar(f64),
    /// lhs shape = [leading.., trailing..], rhs shape = [trailing..];
    /// rhs is added to every leading slice.
    AddBcast,
    MatMul,
    Transpose,
    Unary(UnaryFn),
    /// Softmax over the last axis.
    Softmax,
    SumAll,
    MeanAll,
    /// Sum out one axis.
    SumAxis(usize),
    /// Select rows (axis 0) by index, repeats allowed.
    GatherRows(Vec<usize>),
    /// N-ary concatenation along axis 0 or 1.
    Concat(usize),
    Reshape,
    /// N-ary Σ coeff_i · x_i over same-shaped inputs.
    LinComb(Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(LeafKind::Param) => "param",
            Op::Leaf(LeafKind::Input) => "input",
            Op::Leaf(LeafKind::Constant) => "const",
            Op::StopGradient => "stop_gradient",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::AddBcast => "add_bcast",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Unary(UnaryFn::Tanh) => "tanh",
            Op::Unary(UnaryFn::Sigmoid) => "sigmoid",
            Op::Unary(UnaryFn::Exp) => "exp",
            Op::Unary(UnaryFn::Ln) => "ln",
            Op::Unary(UnaryFn::Sqrt) => "sqrt",
            Op::Unary(UnaryFn::Square) => "square",
            Op::Softmax => "softmax",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::GatherRows(_) => "gather_rows",
            Op::Concat(_) => "concat",
            Op::Reshape => "reshape",
            Op::LinComb(_) => "lincomb",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
    value: Option<Tensor>,
    /// Leaf name; used for bindings and gradient reporting.
    name: Option<String>,
}

/// A differentiable expression graph over [`Tensor`] values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn describe(&self, id: NodeId) -> String {
        let n = &self.nodes[id.0];
        match &n.name {
            Some(name) => format!("n{} ({} '{}')", id.0, n.op.name(), name),
            None => format!("n{} ({})", id.0, n.op.name()),
        }
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, shape: Vec<usize>, name: Option<String>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let value = if parents.iter().all(|p| self.nodes[p.0].value.is_some()) {
            let inputs: Vec<&Tensor> = parents
                .iter()
                .map(|p| self.nodes[p.0].value.as_ref().unwrap())
                .collect();
            Some(compute(&op, &inputs, &shape))
        } else {
            None
        };
        self.nodes.push(Node {
            op,
            parents,
            shape,
            value,
            name,
        });
        id
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Bound data leaf. Differentiated through, not reported by `gradients`.
    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf(LeafKind::Input),
            parents: vec![],
            shape,
            value: Some(value),
            name: Some(name.to_string()),
        });
        id
    }

    /// Data leaf with a declared shape but no value; must be supplied via
    /// [`Graph::evaluate`] bindings.
    pub fn input_unbound(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf(LeafKind::Input),
            parents: vec![],
            shape: shape.to_vec(),
            value: None,
            name: Some(name.to_string()),
        });
        id
    }

    /// Trainable parameter leaf; `gradients` reports ∂loss/∂p under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf(LeafKind::Param),
            parents: vec![],
            shape,
            value: Some(value),
            name: Some(name.to_string()),
        });
        id
    }

    /// Unnamed literal.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf(LeafKind::Constant),
            parents: vec![],
            shape,
            value: Some(value),
            name: None,
        });
        id
    }

    // ── Ops ─────────────────────────────────────────────────────────

    /// Identity forward; blocks all gradient flow through this edge.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::StopGradient, vec![x], shape, None)
    }

    fn same_shape_binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa != sb {
            return Err(Error::Shape(format!(
                "{} at new node n{}: {} is {:?} but {} is {:?}",
                op.name(),
                self.nodes.len(),
                self.describe(a),
                sa,
                self.describe(b),
                sb
            )));
        }
        let shape = sa.clone();
        Ok(self.push(op, vec![a, b], shape, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape_binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape_binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape_binary(Op::Mul, a, b)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Neg, vec![x], shape, None)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Scale(c), vec![x], shape, None)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::AddScalar(c), vec![x], shape, None)
    }

    /// `a + b` where `b`'s shape equals the trailing dims of `a`'s shape;
    /// `b` is added to every leading slice (e.g. bias over rows).
    pub fn add_bcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = &self.nodes[b.0].shape;
        if sb.len() > sa.len() || &sa[sa.len() - sb.len()..] != sb.as_slice() {
            return Err(Error::Shape(format!(
                "add_bcast at new node n{}: {:?} cannot broadcast over {:?}",
                self.nodes.len(),
                sb,
                sa
            )));
        }
        Ok(self.push(Op::AddBcast, vec![a, b], sa, None))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul at new node n{}: {} is {:?}, {} is {:?}",
                self.nodes.len(),
                self.describe(a),
                sa,
                self.describe(b),
                sb
            )));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul, vec![a, b], shape, None))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(Error::Shape(format!(
                "transpose at new node n{}: {} has rank {}",
                self.nodes.len(),
                self.describe(x),
                s.len()
            )));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(Op::Transpose, vec![x], shape, None))
    }

    fn unary(&mut self, f: UnaryFn, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Unary(f), vec![x], shape, None)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::Sigmoid, x)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::Exp, x)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::Ln, x)
    }

    /// √x with the zero subgradient at x = 0, so exact-zero residuals do
    /// not poison gradients.
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::Sqrt, x)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(UnaryFn::Square, x)
    }

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = &self.nodes[x.0].shape;
        if s.is_empty() {
            return Err(Error::Shape(format!(
                "softmax at new node n{}: scalar input {}",
                self.nodes.len(),
                self.describe(x)
            )));
        }
        let shape = s.clone();
        Ok(self.push(Op::Softmax, vec![x], shape, None))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumAll, vec![x], vec![], None)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanAll, vec![x], vec![], None)
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let s = &self.nodes[x.0].shape;
        if axis >= s.len() {
            return Err(Error::Shape(format!(
                "sum_axis at new node n{}: axis {} out of range for {:?}",
                self.nodes.len(),
                axis,
                s
            )));
        }
        let mut shape = s.clone();
        shape.remove(axis);
        Ok(self.push(Op::SumAxis(axis), vec![x], shape, None))
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let s = &self.nodes[x.0].shape;
        if s.is_empty() {
            return Err(Error::Shape(format!(
                "gather_rows at new node n{}: scalar input",
                self.nodes.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Shape(format!(
                "gather_rows at new node n{}: index {} out of range for {:?}",
                self.nodes.len(),
                bad,
                s
            )));
        }
        let mut shape = s.clone();
        shape[0] = indices.len();
        Ok(self.push(Op::GatherRows(indices.to_vec()), vec![x], shape, None))
    }

    /// Concatenates along `axis` (0 or 1).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero nodes".into()));
        }
        if axis > 1 {
            return Err(Error::Shape(format!("concat axis {} unsupported", axis)));
        }
        let first = self.nodes[parts[0].0].shape.clone();
        let mut shape = first.clone();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "concat axis {} out of range for {:?}",
                axis, shape
            )));
        }
        shape[axis] = 0;
        for &p in parts {
            let sp = &self.nodes[p.0].shape;
            let mut expect = sp.clone();
            if axis >= expect.len() {
                return Err(Error::Shape(format!(
                    "concat axis {} out of range for {:?}",
                    axis, sp
                )));
            }
            expect[axis] = first[axis];
            let mut base = first.clone();
            base[axis] = sp[axis];
            if expect != first && base != *sp {
                return Err(Error::Shape(format!(
                    "concat at new node n{}: {:?} does not align with {:?} on axis {}",
                    self.nodes.len(),
                    sp,
                    first,
                    axis
                )));
            }
            shape[axis] += sp[axis];
        }
        Ok(self.push(Op::Concat(axis), parts.to_vec(), shape, None))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = self.nodes[x.0].shape.iter().product();
        let want: usize = shape.iter().product();
        if n != want {
            return Err(Error::Shape(format!(
                "reshape at new node n{}: {:?} has {} values, target {:?} wants {}",
                self.nodes.len(),
                self.nodes[x.0].shape,
                n,
                shape,
                want
            )));
        }
        Ok(self.push(Op::Reshape, vec![x], shape.to_vec(), None))
    }

    /// Σ coeffs[i] · xs[i] over same-shaped nodes.
    pub fn lincomb(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::Shape("lincomb of zero terms".into()));
        }
        let shape = self.nodes[terms[0].1 .0].shape.clone();
        for &(_, id) in terms {
            if self.nodes[id.0].shape != shape {
                return Err(Error::Shape(format!(
                    "lincomb at new node n{}: {} is {:?}, expected {:?}",
                    self.nodes.len(),
                    self.describe(id),
                    self.nodes[id.0].shape,
                    shape
                )));
            }
        }
        let (coeffs, ids): (Vec<f64>, Vec<NodeId>) = terms.iter().copied().unzip();
        Ok(self.push(Op::LinComb(coeffs), ids, shape, None))
    }

    // ── Access ──────────────────────────────────────────────────────

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Forward value of a node in an all-bound graph.
    ///
    /// Panics if some ancestor leaf was created unbound; use
    /// [`Graph::evaluate`] for that flow.
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .unwrap_or_else(|| panic!("{} has no value; an ancestor leaf is unbound", self.describe(id)))
    }

    pub fn try_value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    /// Construction-time value of the named leaf, if any.
    pub fn leaf_value(&self, name: &str) -> Option<&Tensor> {
        self.nodes.iter().find_map(|n| {
            if matches!(n.op, Op::Leaf(_)) && n.name.as_deref() == Some(name) {
                n.value.as_ref()
            } else {
                None
            }
        })
    }

    // ── Evaluation ──────────────────────────────────────────────────

    /// Recomputes every node's forward value with the given leaf bindings
    /// (falling back to values bound at construction). Deterministic:
    /// identical bindings produce bit-identical outputs.
    pub fn evaluate(&self, bindings: &BTreeMap<String, Tensor>) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Leaf(_) => {
                    let bound = node.name.as_ref().and_then(|n| bindings.get(n));
                    match (bound, &node.value) {
                        (Some(t), _) => {
                            if t.shape() != node.shape.as_slice() {
                                return Err(Error::Shape(format!(
                                    "binding for {} is {:?}, declared {:?}",
                                    self.describe(NodeId(i)),
                                    t.shape(),
                                    node.shape
                                )));
                            }
                            t.clone()
                        }
                        (None, Some(t)) => t.clone(),
                        (None, None) => {
                            return Err(Error::UnboundLeaf(
                                node.name.clone().unwrap_or_else(|| format!("n{}", i)),
                            ))
                        }
                    }
                }
                op => {
                    let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &values[p.0]).collect();
                    compute(op, &inputs, &node.shape)
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    // ── Gradients ───────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// parameter leaf it depends on. Parameters the loss does not reach
    /// get zero gradients.
    pub fn gradients(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.shape.is_empty() && loss_node.shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(self.describe(loss)));
        }
        if loss_node.value.is_none() {
            return Err(Error::UnboundLeaf(format!(
                "{} has no forward value",
                self.describe(loss)
            )));
        }

        // Restrict the sweep to ancestors of the loss; unrelated nodes
        // (e.g. rejected adaptive-solver trial steps) cost nothing.
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![loss.0];
        reachable[loss.0] = true;
        while let Some(i) = stack.pop() {
            if matches!(self.nodes[i].op, Op::StopGradient) {
                continue; // do not walk past the marker
            }
            for p in &self.nodes[i].parents {
                if !reachable[p.0] {
                    reachable[p.0] = true;
                    stack.push(p.0);
                }
            }
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !reachable[i] {
                continue;
            }
            let Some(grad) = adjoint[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf(_) => {
                    adjoint[i] = Some(grad); // keep for collection
                }
                Op::StopGradient => {}
                op => {
                    let inputs: Vec<&Tensor> = node
                        .parents
                        .iter()
                        .map(|p| self.nodes[p.0].value.as_ref().unwrap())
                        .collect();
                    let out = node.value.as_ref().unwrap();
                    let parent_grads = backward(op, &inputs, out, &grad);
                    for (p, g) in node.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        match &mut adjoint[p.0] {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&g) {
                                    *a += v;
                                }
                            }
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(LeafKind::Param) = node.op {
                let name = node.name.clone().unwrap();
                let g = match adjoint[i].take() {
                    Some(g) => Tensor::new(node.shape.clone(), g)?,
                    None => Tensor::zeros(&node.shape),
                };
                out.insert(name, g);
            }
        }
        Ok(out)
    }
}

// ── Forward kernels ─────────────────────────────────────────────────

fn compute(op: &Op, inputs: &[&Tensor], out_shape: &[usize]) -> Tensor {
    let data = match op {
        Op::Leaf(_) => unreachable!("leaves are not computed"),
        Op::StopGradient | Op::Reshape => inputs[0].data().to_vec(),
        Op::Add => zip_map(inputs[0], inputs[1], |a, b| a + b),
        Op::Sub => zip_map(inputs[0], inputs[1], |a, b| a - b),
        Op::Mul => zip_map(inputs[0], inputs[1], |a, b| a * b),
        Op::Neg => inputs[0].data().iter().map(|v| -v).collect(),
        Op::Scale(c) => inputs[0].data().iter().map(|v| v * c).collect(),
        Op::AddScalar(c) => inputs[0].data().iter().map(|v| v + c).collect(),
        Op::AddBcast => {
            let a = inputs[0].data();
            let b = inputs[1].data();
            let m = b.len();
            a.iter()
                .enumerate()
                .map(|(i, v)| v + b[i % m])
                .collect()
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            let (ad, bd) = (a.data(), b.data());
            for i in 0..m {
                for p in 0..k {
                    let aik = ad[i * k + p];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += aik * bv;
                    }
                }
            }
            out
        }
        Op::Transpose => {
            let x = inputs[0];
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let xd = x.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = xd[i * c + j];
                }
            }
            out
        }
        Op::Unary(f) => {
            let map: fn(f64) -> f64 = match f {
                UnaryFn::Tanh => f64::tanh,
                UnaryFn::Sigmoid => |v| {
                    if v >= 0.0 {
                        1.0 / (1.0 + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (1.0 + e)
                    }
                },
                UnaryFn::Exp => f64::exp,
                UnaryFn::Ln => f64::ln,
                UnaryFn::Sqrt => f64::sqrt,
                UnaryFn::Square => |v| v * v,
            };
            inputs[0].data().iter().map(|&v| map(v)).collect()
        }
        Op::Softmax => {
            let x = inputs[0];
            let d = *x.shape().last().unwrap();
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(d) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = exps.iter().sum();
                out.extend(exps.iter().map(|e| e / s));
            }
            out
        }
        Op::SumAll => vec![inputs[0].data().iter().sum()],
        Op::MeanAll => {
            let n = inputs[0].len().max(1);
            vec![inputs[0].data().iter().sum::<f64>() / n as f64]
        }
        Op::SumAxis(axis) => {
            let x = inputs[0];
            let s = x.shape();
            let outer: usize = s[..*axis].iter().product();
            let mid = s[*axis];
            let inner: usize = s[*axis + 1..].iter().product();
            let xd = x.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    let obase = o * inner;
                    for i in 0..inner {
                        out[obase + i] += xd[base + i];
                    }
                }
            }
            out
        }
        Op::GatherRows(indices) => {
            let x = inputs[0];
            let stride: usize = x.shape()[1..].iter().product();
            let xd = x.data();
            let mut out = Vec::with_capacity(indices.len() * stride);
            for &i in indices {
                out.extend_from_slice(&xd[i * stride..(i + 1) * stride]);
            }
            out
        }
        Op::Concat(axis) => {
            if *axis == 0 {
                let mut out = Vec::new();
                for t in inputs {
                    out.extend_from_slice(t.data());
                }
                out
            } else {
                let rows = inputs[0].shape()[0];
                let total: usize = out_shape[1];
                let mut out = vec![0.0; rows * total];
                let mut col = 0;
                for t in inputs {
                    let c = t.shape()[1];
                    let td = t.data();
                    for r in 0..rows {
                        out[r * total + col..r * total + col + c]
                            .copy_from_slice(&td[r * c..(r + 1) * c]);
                    }
                    col += c;
                }
                out
            }
        }
        Op::LinComb(coeffs) => {
            let n = inputs[0].len();
            let mut out = vec![0.0; n];
            for (c, t) in coeffs.iter().zip(inputs) {
                for (o, v) in out.iter_mut().zip(t.data()) {
                    *o += c * v;
                }
            }
            out
        }
    };
    Tensor::new(out_shape.to_vec(), data).expect("op kernels produce shape-consistent output")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
}

// ── Backward kernels ────────────────────────────────────────────────

/// Per-parent gradient contributions; `None` marks a zero contribution.
fn backward(op: &Op, inputs: &[&Tensor], out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
    match op {
        Op::Leaf(_) | Op::StopGradient => unreachable!("handled by the sweep"),
        Op::Add => vec![Some(grad.to_vec()), Some(grad.to_vec())],
        Op::Sub => vec![
            Some(grad.to_vec()),
            Some(grad.iter().map(|g| -g).collect()),
        ],
        Op::Mul => vec![
            Some(zip_slices(grad, inputs[1].data(), |g, b| g * b)),
            Some(zip_slices(grad, inputs[0].data(), |g, a| g * a)),
        ],
        Op::Neg => vec![Some(grad.iter().map(|g| -g).collect())],
        Op::Scale(c) => vec![Some(grad.iter().map(|g| g * c).collect())],
        Op::AddScalar(_) | Op::Reshape => vec![Some(grad.to_vec())],
        Op::AddBcast => {
            let m = inputs[1].len();
            let mut gb = vec![0.0; m];
            for (i, g) in grad.iter().enumerate() {
                gb[i % m] += g;
            }
            vec![Some(grad.to_vec()), Some(gb)]
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let (ad, bd) = (a.data(), b.data());
            // ∂L/∂A = G·Bᵀ
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                for j in 0..n {
                    let g = grad[i * n + j];
                    if g == 0.0 {
                        continue;
                    }
                    let arow = &mut ga[i * k..(i + 1) * k];
                    for p in 0..k {
                        arow[p] += g * bd[p * n + j];
                    }
                }
            }
            // ∂L/∂B = Aᵀ·G
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let grow = &grad[i * n..(i + 1) * n];
                    let brow = &mut gb[p * n..(p + 1) * n];
                    for (bslot, g) in brow.iter_mut().zip(grow) {
                        *bslot += av * g;
                    }
                }
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Transpose => {
            let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = grad[j * r + i];
                }
            }
            vec![Some(gx)]
        }
        Op::Unary(f) => {
            let x = inputs[0].data();
            let y = out.data();
            let gx = match f {
                UnaryFn::Tanh => zip_slices(grad, y, |g, t| g * (1.0 - t * t)),
                UnaryFn::Sigmoid => zip_slices(grad, y, |g, s| g * s * (1.0 - s)),
                UnaryFn::Exp => zip_slices(grad, y, |g, e| g * e),
                UnaryFn::Ln => zip_slices(grad, x, |g, v| g / v),
                UnaryFn::Sqrt => grad
                    .iter()
                    .zip(y)
                    .map(|(g, s)| if *s > 0.0 { g * 0.5 / s } else { 0.0 })
                    .collect(),
                UnaryFn::Square => zip_slices(grad, x, |g, v| g * 2.0 * v),
            };
            vec![Some(gx)]
        }
        Op::Softmax => {
            let d = *out.shape().last().unwrap();
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for r in 0..y.len() / d {
                let ys = &y[r * d..(r + 1) * d];
                let gs = &grad[r * d..(r + 1) * d];
                let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for i in 0..d {
                    gx[r * d + i] = ys[i] * (gs[i] - dot);
                }
            }
            vec![Some(gx)]
        }
        Op::SumAll => vec![Some(vec![grad[0]; inputs[0].len()])],
        Op::MeanAll => {
            let n = inputs[0].len().max(1);
            vec![Some(vec![grad[0] / n as f64; inputs[0].len()])]
        }
        Op::SumAxis(axis) => {
            let s = inputs[0].shape();
            let outer: usize = s[..*axis].iter().product();
            let mid = s[*axis];
            let inner: usize = s[*axis + 1..].iter().product();
            let mut gx = vec![0.0; inputs[0].len()];
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    let gbase = o * inner;
                    for i in 0..inner {
                        gx[base + i] = grad[gbase + i];
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::GatherRows(indices) => {
            let stride: usize = inputs[0].shape()[1..].iter().product();
            let mut gx = vec![0.0; inputs[0].len()];
            for (k, &i) in indices.iter().enumerate() {
                let src = &grad[k * stride..(k + 1) * stride];
                let dst = &mut gx[i * stride..(i + 1) * stride];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![Some(gx)]
        }
        Op::Concat(axis) => {
            if *axis == 0 {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let n = t.len();
                        let g = grad[offset..offset + n].to_vec();
                        offset += n;
                        Some(g)
                    })
                    .collect()
            } else {
                let rows = inputs[0].shape()[0];
                let total: usize = out.shape()[1];
                let mut col = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let c = t.shape()[1];
                        let mut g = vec![0.0; rows * c];
                        for r in 0..rows {
                            g[r * c..(r + 1) * c]
                                .copy_from_slice(&grad[r * total + col..r * total + col + c]);
                        }
                        col += c;
                        Some(g)
                    })
                    .collect()
            }
        }
        Op::LinComb(coeffs) => coeffs
            .iter()
            .map(|c| Some(grad.iter().map(|g| g * c).collect()))
            .collect(),
    }
}

fn zip_slices(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::ones(&[2, 3]));
        let b = g.input("b", Tensor::ones(&[3, 1]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn stop_gradient_forwards_value_unchanged() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::from_vec(vec![1.5, -2.0]));
        let y = g.stop_gradient(x);
        assert_eq!(g.value(y).data(), &[1.5, -2.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = g.square(x);
        let loss = g.sum(sq);
        let grads = g.gradients(loss).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn stop_gradient_kills_one_branch() {
        // loss = sum(sg(x) · x) → grad is sg(x) = x, not 2x
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_vec(vec![2.0]));
        let sx = g.stop_gradient(x);
        let prod = g.mul(sx, x).unwrap();
        let loss = g.sum(prod);
        assert_eq!(g.value(loss).item(), 4.0);
        let grads = g.gradients(loss).unwrap();
        assert_eq!(grads["x"].data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.gradients(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::ones(&[2, 3]));
        let b = g.input("b", Tensor::ones(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{}", msg);
        assert!(msg.contains("[2, 3]"), "{}", msg);
    }

    #[test]
    fn evaluate_rebinds_leaves() {
        let mut g = Graph::new();
        let x = g.input_unbound("x", &[2]);
        let y = g.square(x);
        let s = g.sum(y);
        let mut bindings = BTreeMap::new();
        bindings.insert("x".to_string(), Tensor::from_vec(vec![3.0, 4.0]));
        let values = g.evaluate(&bindings).unwrap();
        assert_eq!(values[s.index()].item(), 25.0);

        // Unbound leaf without a binding is an error.
        assert!(matches!(
            g.evaluate(&BTreeMap::new()),
            Err(Error::UnboundLeaf(_))
        ));

        // Binding with the wrong shape is a shape error naming the leaf.
        let mut bad = BTreeMap::new();
        bad.insert("x".to_string(), Tensor::from_vec(vec![1.0]));
        assert!(matches!(g.evaluate(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn evaluate_is_deterministic() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::from_vec(vec![0.3, -1.7, 2.9]));
        let t = g.tanh(x);
        let sm = g.softmax(t).unwrap();
        let b = BTreeMap::new();
        let v1 = g.evaluate(&b).unwrap();
        let v2 = g.evaluate(&b).unwrap();
        assert_eq!(v1[sm.index()].data(), v2[sm.index()].data());
        assert_eq!(v1[sm.index()].data(), g.value(sm).data());
    }

    #[test]
    fn unreached_param_gets_zero_gradient()
    {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_vec(vec![1.0]));
        let y = g.param("y", Tensor::from_vec(vec![5.0]));
        let loss = g.sum(x);
        let grads = g.gradients(loss).unwrap();
        assert_eq!(grads["x"].data(), &[1.0]);
        assert_eq!(grads["y"].data(), &[0.0]);
        let _ = y;
    }
}
