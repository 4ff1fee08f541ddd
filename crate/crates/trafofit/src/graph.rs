//! Reverse-mode differentiation over a small static expression graph.
//!
//! A model compiles once into a [`Graph`] whose leaves are parameter
//! slices and per-observation data inputs; batches are run by rebinding
//! the inputs and replaying forward/backward passes. Nodes carry vector
//! values (scalars are vectors of length one) and elementwise binary ops
//! broadcast length-one operands.
//!
//! Evaluation is restricted to the ancestors of the requested head node,
//! so a graph can expose several alternative outputs (the four censoring
//! losses, prediction heads, penalties) without paying for the unused
//! ones.

use std::collections::HashMap;

use crate::error::{Result, TrafoError};
use crate::latent::LatentDistribution;
use crate::scalar::Scalar;

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum Op<S> {
    Const(Vec<S>),
    /// Data input slot, bound before each forward pass.
    Input { slot: usize, len: usize },
    /// A whole parameter slice as a vector.
    Param { slice: usize },
    /// One coefficient of a slice, selected by a per-observation index.
    GatherParam { slice: usize, index_slot: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Dot(NodeId, NodeId),
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    CumSum(NodeId),
    Sum(NodeId),
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize, len: usize },
    /// Elementwise max(x, floor); zero gradient on the floored side.
    FloorAt { x: NodeId, floor: S },
    CdfZ { dist: LatentDistribution, x: NodeId },
    /// 1 - F_Z, computed without upper-tail cancellation.
    SurvZ { dist: LatentDistribution, x: NodeId },
    LogPdfZ { dist: LatentDistribution, x: NodeId },
}

impl<S> Op<S> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Const(_) => "const",
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::GatherParam { .. } => "gather_param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Dot(..) => "dot",
            Op::MatVec { .. } => "matvec",
            Op::CumSum(_) => "cumsum",
            Op::Sum(_) => "sum",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::FloorAt { .. } => "floor_at",
            Op::CdfZ { .. } => "cdf_z",
            Op::SurvZ { .. } => "surv_z",
            Op::LogPdfZ { .. } => "log_pdf_z",
        }
    }

    fn children(&self) -> Vec<NodeId> {
        match self {
            Op::Const(_) | Op::Input { .. } | Op::Param { .. } | Op::GatherParam { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Dot(a, b) => vec![*a, *b],
            Op::MatVec { w, x, .. } => vec![*w, *x],
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::CumSum(a)
            | Op::Sum(a)
            | Op::Slice { x: a, .. }
            | Op::FloorAt { x: a, .. }
            | Op::CdfZ { x: a, .. }
            | Op::SurvZ { x: a, .. }
            | Op::LogPdfZ { x: a, .. } => vec![*a],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamSlice {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub trainable: bool,
    pub lr_multiplier: f64,
    /// One name per coefficient, used for warmstarts and reports.
    pub coef_names: Vec<String>,
}

/// Flat trainable parameter vector with named, disjoint slices.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<S> {
    values: Vec<S>,
    slices: Vec<ParamSlice>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            slices: Vec::new(),
        }
    }

    pub fn add_slice(
        &mut self,
        name: impl Into<String>,
        coef_names: Vec<String>,
        init: Vec<S>,
    ) -> usize {
        assert_eq!(coef_names.len(), init.len(), "one name per coefficient");
        let name = name.into();
        assert!(
            self.find_slice(&name).is_none(),
            "duplicate parameter slice `{name}`"
        );
        let start = self.values.len();
        let len = init.len();
        self.values.extend(init);
        self.slices.push(ParamSlice {
            name,
            start,
            len,
            trainable: true,
            lr_multiplier: 1.0,
            coef_names,
        });
        self.slices.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn slice(&self, id: usize) -> &ParamSlice {
        &self.slices[id]
    }

    pub fn slice_values(&self, id: usize) -> &[S] {
        let s = &self.slices[id];
        &self.values[s.start..s.start + s.len]
    }

    pub fn find_slice(&self, name: &str) -> Option<usize> {
        self.slices.iter().position(|s| s.name == name)
    }

    /// Global index of a coefficient by name, searching all slices.
    pub fn find_coef(&self, name: &str) -> Option<usize> {
        for s in &self.slices {
            if let Some(i) = s.coef_names.iter().position(|n| n == name) {
                return Some(s.start + i);
            }
        }
        None
    }

    pub fn set_trainable(&mut self, slice: usize, trainable: bool) {
        self.slices[slice].trainable = trainable;
    }

    pub fn set_lr_multiplier(&mut self, slice: usize, m: f64) {
        self.slices[slice].lr_multiplier = m;
    }

    pub fn set_coef(&mut self, global_index: usize, value: S) {
        self.values[global_index] = value;
    }

    /// Per-parameter (trainable, lr multiplier) view aligned with values.
    pub fn update_plan(&self) -> Vec<(bool, f64)> {
        let mut plan = vec![(false, 1.0); self.values.len()];
        for s in &self.slices {
            for p in plan.iter_mut().skip(s.start).take(s.len) {
                *p = (s.trainable, s.lr_multiplier);
            }
        }
        plan
    }
}

#[derive(Debug, Clone)]
pub struct Graph<S> {
    nodes: Vec<Op<S>>,
    lens: Vec<usize>,
    values: Vec<Vec<S>>,
    adjoints: Vec<Vec<S>>,
    input_lens: Vec<usize>,
    input_values: Vec<Vec<S>>,
    index_values: Vec<usize>,
    masks: HashMap<NodeId, Vec<bool>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            lens: Vec::new(),
            values: Vec::new(),
            adjoints: Vec::new(),
            input_lens: Vec::new(),
            input_values: Vec::new(),
            index_values: Vec::new(),
            masks: HashMap::new(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register a data input of fixed length; returns (node, slot).
    pub fn input(&mut self, len: usize) -> (NodeId, usize) {
        let slot = self.input_lens.len();
        self.input_lens.push(len);
        self.input_values.push(vec![S::zero(); len]);
        let id = self.push(Op::Input { slot, len });
        (id, slot)
    }

    /// Register a per-observation index slot (for parameter gathers).
    pub fn index_slot(&mut self) -> usize {
        self.index_values.push(0);
        self.index_values.len() - 1
    }

    pub fn constant(&mut self, v: Vec<S>) -> NodeId {
        self.push(Op::Const(v))
    }

    pub fn scalar(&mut self, v: S) -> NodeId {
        self.push(Op::Const(vec![v]))
    }

    pub fn push_with(&mut self, op: Op<S>, params: &ParameterStore<S>) -> NodeId {
        self.push_internal(op, Some(params))
    }

    /// Append a node. Panics on shape mismatches: the graph is built by
    /// the compiler, so these are internal bugs, not user errors.
    pub fn push(&mut self, op: Op<S>) -> NodeId {
        self.push_internal(op, None)
    }

    fn push_internal(&mut self, op: Op<S>, params: Option<&ParameterStore<S>>) -> NodeId {
        let id = self.nodes.len();
        for &c in &op.children() {
            assert!(c < id, "node {id} references unbuilt child {c}");
        }
        let len = self.infer_len(&op, params);
        self.nodes.push(op);
        self.lens.push(len);
        self.values.push(vec![S::zero(); len]);
        self.adjoints.push(vec![S::zero(); len]);
        id
    }

    fn infer_len(&self, op: &Op<S>, params: Option<&ParameterStore<S>>) -> usize {
        let l = |id: NodeId| self.lens[id];
        match op {
            Op::Const(v) => v.len(),
            Op::Input { len, .. } => *len,
            Op::Param { slice } => params
                .expect("Param nodes must be pushed with push_with")
                .slice(*slice)
                .len,
            Op::GatherParam { .. } => 1,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (la, lb) = (l(*a), l(*b));
                assert!(
                    la == lb || la == 1 || lb == 1,
                    "elementwise op on lengths {la} and {lb}"
                );
                la.max(lb)
            }
            Op::Dot(a, b) => {
                assert_eq!(l(*a), l(*b), "dot of unequal lengths");
                1
            }
            Op::MatVec { w, x, rows, cols } => {
                assert_eq!(l(*w), rows * cols, "matvec weight length");
                assert_eq!(l(*x), *cols, "matvec input length");
                *rows
            }
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::CumSum(a)
            | Op::FloorAt { x: a, .. }
            | Op::CdfZ { x: a, .. }
            | Op::SurvZ { x: a, .. }
            | Op::LogPdfZ { x: a, .. } => l(*a),
            Op::Sum(_) => 1,
            Op::Concat(xs) => xs.iter().map(|&x| l(x)).sum(),
            Op::Slice { x, start, len } => {
                assert!(start + len <= l(*x), "slice out of range");
                *len
            }
        }
    }

    pub fn len_of(&self, id: NodeId) -> usize {
        self.lens[id]
    }

    pub fn set_input(&mut self, slot: usize, values: &[S]) {
        assert_eq!(values.len(), self.input_lens[slot], "input slot {slot} length");
        self.input_values[slot].copy_from_slice(values);
    }

    pub fn set_index(&mut self, slot: usize, index: usize) {
        self.index_values[slot] = index;
    }

    /// Value of a node after a forward pass that covered it.
    pub fn value(&self, id: NodeId) -> &[S] {
        &self.values[id]
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        debug_assert_eq!(self.lens[id], 1);
        self.values[id][0]
    }

    fn mask_for(&mut self, head: NodeId) -> &Vec<bool> {
        if !self.masks.contains_key(&head) {
            let mut mask = vec![false; self.nodes.len()];
            mask[head] = true;
            for id in (0..=head).rev() {
                if mask[id] {
                    for c in self.nodes[id].children() {
                        mask[c] = true;
                    }
                }
            }
            self.masks.insert(head, mask);
        }
        &self.masks[&head]
    }

    /// Evaluate all ancestors of `head` in topological order and return
    /// its value. Non-finite results abort with the first offending node.
    pub fn forward(&mut self, params: &ParameterStore<S>, head: NodeId) -> Result<&[S]> {
        self.mask_for(head);
        let mask = self.masks.get(&head).expect("just built").clone();
        for id in 0..=head {
            if !mask[id] {
                continue;
            }
            self.eval_node(id, params);
        }
        if self.values[head].iter().any(|v| !v.is_finite()) {
            // Slow path: locate the first node that produced a non-finite
            // value for the diagnostic.
            for id in 0..=head {
                if mask[id] && self.values[id].iter().any(|v| !v.is_finite()) {
                    return Err(TrafoError::NonFinite {
                        node: id,
                        op: self.nodes[id].name().to_string(),
                        context: String::new(),
                    });
                }
            }
        }
        Ok(&self.values[head])
    }

    fn eval_node(&mut self, id: NodeId, params: &ParameterStore<S>) {
        // Split borrows: read children from earlier entries, write `id`.
        let (before, rest) = self.values.split_at_mut(id);
        let out = &mut rest[0];
        let op = &self.nodes[id];
        match op {
            Op::Const(v) => out.copy_from_slice(v),
            Op::Input { slot, .. } => out.copy_from_slice(&self.input_values[*slot]),
            Op::Param { slice } => out.copy_from_slice(params.slice_values(*slice)),
            Op::GatherParam { slice, index_slot } => {
                let idx = self.index_values[*index_slot];
                let s = params.slice(*slice);
                assert!(idx < s.len, "gather index {idx} out of slice `{}`", s.name);
                out[0] = params.values()[s.start + idx];
            }
            Op::Add(a, b) => binary(&before[*a], &before[*b], out, |x, y| x + y),
            Op::Sub(a, b) => binary(&before[*a], &before[*b], out, |x, y| x - y),
            Op::Mul(a, b) => binary(&before[*a], &before[*b], out, |x, y| x * y),
            Op::Neg(a) => unary(&before[*a], out, |x| -x),
            Op::Exp(a) => unary(&before[*a], out, |x| x.exp()),
            Op::Log(a) => unary(&before[*a], out, |x| x.ln()),
            Op::Sqrt(a) => unary(&before[*a], out, |x| x.sqrt()),
            Op::Softplus(a) => unary(&before[*a], out, softplus_s),
            Op::Sigmoid(a) => unary(&before[*a], out, sigmoid_s),
            Op::Tanh(a) => unary(&before[*a], out, |x| x.tanh()),
            Op::Relu(a) => unary(&before[*a], out, |x| x.max(S::zero())),
            Op::Dot(a, b) => {
                let mut acc = S::zero();
                for (x, y) in before[*a].iter().zip(&before[*b]) {
                    acc += *x * *y;
                }
                out[0] = acc;
            }
            Op::MatVec { w, x, rows, cols } => {
                let wv = &before[*w];
                let xv = &before[*x];
                for r in 0..*rows {
                    let mut acc = S::zero();
                    let row = &wv[r * cols..(r + 1) * cols];
                    for (wi, xi) in row.iter().zip(xv) {
                        acc += *wi * *xi;
                    }
                    out[r] = acc;
                }
            }
            Op::CumSum(a) => {
                let mut acc = S::zero();
                for (o, x) in out.iter_mut().zip(&before[*a]) {
                    acc += *x;
                    *o = acc;
                }
            }
            Op::Sum(a) => {
                let mut acc = S::zero();
                for x in &before[*a] {
                    acc += *x;
                }
                out[0] = acc;
            }
            Op::Concat(xs) => {
                let mut at = 0;
                for &x in xs {
                    let v = &before[x];
                    out[at..at + v.len()].copy_from_slice(v);
                    at += v.len();
                }
            }
            Op::Slice { x, start, len } => {
                out.copy_from_slice(&before[*x][*start..start + len]);
            }
            Op::FloorAt { x, floor } => {
                let f = *floor;
                unary(&before[*x], out, |v| v.max(f));
            }
            Op::CdfZ { dist, x } => {
                let d = *dist;
                unary(&before[*x], out, |v| d.cdf(v));
            }
            Op::SurvZ { dist, x } => {
                let d = *dist;
                unary(&before[*x], out, |v| d.surv(v));
            }
            Op::LogPdfZ { dist, x } => {
                let d = *dist;
                unary(&before[*x], out, |v| d.log_pdf(v));
            }
        }
    }

    /// Reverse pass from `head` with the given adjoint seed, accumulating
    /// parameter gradients into `grad` (full parameter-vector length).
    /// Gradients of frozen slices are never accumulated, so they stay
    /// exactly zero. Must follow a `forward` on the same head.
    pub fn backward(
        &mut self,
        params: &ParameterStore<S>,
        head: NodeId,
        seed: S,
        grad: &mut [S],
    ) {
        assert_eq!(grad.len(), params.len(), "gradient buffer length");
        let mask = self.masks.get(&head).expect("forward must run first").clone();
        for id in 0..=head {
            if mask[id] {
                self.adjoints[id].iter_mut().for_each(|a| *a = S::zero());
            }
        }
        for a in self.adjoints[head].iter_mut() {
            *a = seed;
        }
        for id in (0..=head).rev() {
            if !mask[id] {
                continue;
            }
            self.backprop_node(id, params, grad);
        }
    }

    fn backprop_node(&mut self, id: NodeId, params: &ParameterStore<S>, grad: &mut [S]) {
        let adj = std::mem::take(&mut self.adjoints[id]);
        let op = self.nodes[id].clone();
        match &op {
            Op::Const(_) | Op::Input { .. } => {}
            Op::Param { slice } => {
                let s = params.slice(*slice);
                if s.trainable {
                    for (g, a) in grad[s.start..s.start + s.len].iter_mut().zip(&adj) {
                        *g += *a;
                    }
                }
            }
            Op::GatherParam { slice, index_slot } => {
                let s = params.slice(*slice);
                if s.trainable {
                    let idx = self.index_values[*index_slot];
                    grad[s.start + idx] += adj[0];
                }
            }
            Op::Add(a, b) => {
                self.spread(*a, &adj, |_, ad| ad);
                self.spread(*b, &adj, |_, ad| ad);
            }
            Op::Sub(a, b) => {
                self.spread(*a, &adj, |_, ad| ad);
                self.spread(*b, &adj, |_, ad| -ad);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.values[*a].clone(), self.values[*b].clone());
                self.spread(*a, &adj, |i, ad| ad * pick(&vb, i));
                self.spread(*b, &adj, |i, ad| ad * pick(&va, i));
            }
            Op::Neg(a) => self.add_adj(*a, &adj, |_, ad| -ad),
            Op::Exp(a) => {
                let v = self.values[id].clone();
                self.add_adj(*a, &adj, |i, ad| ad * v[i]);
            }
            Op::Log(a) => {
                let x = self.values[*a].clone();
                self.add_adj(*a, &adj, |i, ad| ad / x[i]);
            }
            Op::Sqrt(a) => {
                let v = self.values[id].clone();
                self.add_adj(*a, &adj, |i, ad| ad * S::of_f64(0.5) / v[i]);
            }
            Op::Softplus(a) => {
                let x = self.values[*a].clone();
                self.add_adj(*a, &adj, |i, ad| ad * sigmoid_s(x[i]));
            }
            Op::Sigmoid(a) => {
                let v = self.values[id].clone();
                self.add_adj(*a, &adj, |i, ad| ad * v[i] * (S::one() - v[i]));
            }
            Op::Tanh(a) => {
                let v = self.values[id].clone();
                self.add_adj(*a, &adj, |i, ad| ad * (S::one() - v[i] * v[i]));
            }
            Op::Relu(a) => {
                let x = self.values[*a].clone();
                self.add_adj(*a, &adj, |i, ad| {
                    if x[i] > S::zero() {
                        ad
                    } else {
                        S::zero()
                    }
                });
            }
            Op::Dot(a, b) => {
                let (va, vb) = (self.values[*a].clone(), self.values[*b].clone());
                let s = adj[0];
                for (i, g) in self.adjoints[*a].iter_mut().enumerate() {
                    *g += s * vb[i];
                }
                for (i, g) in self.adjoints[*b].iter_mut().enumerate() {
                    *g += s * va[i];
                }
            }
            Op::MatVec { w, x, rows, cols } => {
                let wv = self.values[*w].clone();
                let xv = self.values[*x].clone();
                for r in 0..*rows {
                    let ar = adj[r];
                    for c in 0..*cols {
                        self.adjoints[*w][r * cols + c] += ar * xv[c];
                        self.adjoints[*x][c] += ar * wv[r * cols + c];
                    }
                }
            }
            Op::CumSum(a) => {
                // dx_i = sum_{k >= i} adj_k
                let mut acc = S::zero();
                for i in (0..adj.len()).rev() {
                    acc += adj[i];
                    self.adjoints[*a][i] += acc;
                }
            }
            Op::Sum(a) => {
                let s = adj[0];
                for g in self.adjoints[*a].iter_mut() {
                    *g += s;
                }
            }
            Op::Concat(xs) => {
                let mut at = 0;
                for &x in xs {
                    let l = self.lens[x];
                    for (g, a) in self.adjoints[x].iter_mut().zip(&adj[at..at + l]) {
                        *g += *a;
                    }
                    at += l;
                }
            }
            Op::Slice { x, start, .. } => {
                for (i, a) in adj.iter().enumerate() {
                    self.adjoints[*x][start + i] += *a;
                }
            }
            Op::FloorAt { x, floor } => {
                let xv = self.values[*x].clone();
                let f = *floor;
                self.add_adj(*x, &adj, |i, ad| {
                    if xv[i] > f {
                        ad
                    } else {
                        S::zero()
                    }
                });
            }
            Op::CdfZ { dist, x } => {
                let xv = self.values[*x].clone();
                let d = *dist;
                self.add_adj(*x, &adj, |i, ad| ad * d.pdf(xv[i]));
            }
            Op::SurvZ { dist, x } => {
                let xv = self.values[*x].clone();
                let d = *dist;
                self.add_adj(*x, &adj, |i, ad| -ad * d.pdf(xv[i]));
            }
            Op::LogPdfZ { dist, x } => {
                let xv = self.values[*x].clone();
                let d = *dist;
                self.add_adj(*x, &adj, |i, ad| ad * d.dlog_pdf(xv[i]));
            }
        }
        self.adjoints[id] = adj;
    }

    /// Accumulate a transformed adjoint into child `c`, handling the
    /// broadcast case where the child has length one.
    fn spread(&mut self, c: NodeId, adj: &[S], f: impl Fn(usize, S) -> S) {
        if self.lens[c] == 1 && adj.len() > 1 {
            let mut acc = S::zero();
            for (i, a) in adj.iter().enumerate() {
                acc += f(i, *a);
            }
            self.adjoints[c][0] += acc;
        } else {
            for (i, a) in adj.iter().enumerate() {
                self.adjoints[c][i] += f(i, *a);
            }
        }
    }

    fn add_adj(&mut self, c: NodeId, adj: &[S], f: impl Fn(usize, S) -> S) {
        for (i, a) in adj.iter().enumerate() {
            self.adjoints[c][i] += f(i, *a);
        }
    }
}

fn pick<S: Scalar>(v: &[S], i: usize) -> S {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn unary<S: Scalar>(x: &[S], out: &mut [S], f: impl Fn(S) -> S) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = f(*v);
    }
}

fn binary<S: Scalar>(a: &[S], b: &[S], out: &mut [S], f: impl Fn(S, S) -> S) {
    match (a.len(), b.len()) {
        (1, _) if b.len() > 1 => {
            for (o, y) in out.iter_mut().zip(b) {
                *o = f(a[0], *y);
            }
        }
        (_, 1) if a.len() > 1 => {
            for (o, x) in out.iter_mut().zip(a) {
                *o = f(*x, b[0]);
            }
        }
        _ => {
            for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                *o = f(*x, *y);
            }
        }
    }
}

fn sigmoid_s<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Numerically stabilized softplus: max(x, 0) + log1p(exp(-|x|)).
fn softplus_s<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn store(values: Vec<f64>) -> ParameterStore<f64> {
        let mut p = ParameterStore::new();
        let names = (0..values.len()).map(|i| format!("p{i}")).collect();
        p.add_slice("w", names, values);
        p
    }

    #[test]
    fn softplus_at_zero() {
        let mut g = Graph::<f64>::new();
        let p = store(vec![0.0]);
        let x = g.push_with(Op::Param { slice: 0 }, &p);
        let y = g.push(Op::Softplus(x));
        let v = g.forward(&p, y).unwrap()[0];
        assert_relative_eq!(v, 2f64.ln(), epsilon = 1e-15);

        let mut grad = vec![0.0];
        g.backward(&p, y, 1.0, &mut grad);
        assert_relative_eq!(grad[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::<f64>::new();
        let p = store(vec![0.0]);
        let x = g.push_with(Op::Param { slice: 0 }, &p);
        let y = g.push(Op::Sigmoid(x));
        assert_eq!(g.forward(&p, y).unwrap()[0], 0.5);
    }

    #[test]
    fn log_sum_exp_composite() {
        // log(exp(a) + exp(b)) at a = b = 0 -> log 2.
        let mut g = Graph::<f64>::new();
        let p = store(vec![0.0, 0.0]);
        let w = g.push_with(Op::Param { slice: 0 }, &p);
        let a = g.push(Op::Slice { x: w, start: 0, len: 1 });
        let b = g.push(Op::Slice { x: w, start: 1, len: 1 });
        let ea = g.push(Op::Exp(a));
        let eb = g.push(Op::Exp(b));
        let s = g.push(Op::Add(ea, eb));
        let y = g.push(Op::Log(s));
        let v = g.forward(&p, y).unwrap()[0];
        assert_relative_eq!(v, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn dot_gradient_is_other_operand() {
        let mut g = Graph::<f64>::new();
        let p = store(vec![1.0, -2.0, 0.5]);
        let w = g.push_with(Op::Param { slice: 0 }, &p);
        let (x, slot) = g.input(3);
        let y = g.push(Op::Dot(w, x));
        g.set_input(slot, &[3.0, 1.0, -1.0]);
        g.forward(&p, y).unwrap();
        let mut grad = vec![0.0; 3];
        g.backward(&p, y, 1.0, &mut grad);
        assert_eq!(grad, vec![3.0, 1.0, -1.0]);
    }

    /// Build a messy scalar function of five parameters exercising every
    /// differentiable op, and check reverse-mode against central finite
    /// differences.
    fn build_all_ops(g: &mut Graph<f64>, p: &ParameterStore<f64>) -> NodeId {
        let w = g.push_with(Op::Param { slice: 0 }, p);
        let w01 = g.push(Op::Slice { x: w, start: 0, len: 2 });
        let w23 = g.push(Op::Slice { x: w, start: 2, len: 2 });
        let w4 = g.push(Op::Slice { x: w, start: 4, len: 1 });

        let neg = g.push(Op::Neg(w01));
        let sp = g.push(Op::Softplus(neg));
        let sg = g.push(Op::Sigmoid(w23));
        let th = g.push(Op::Tanh(w01));
        let rl = g.push(Op::Relu(w23));
        let cat = g.push(Op::Concat(vec![sp, sg, th, rl]));
        let cs = g.push(Op::CumSum(cat));
        let mat = g.constant(vec![0.5, -1.0, 2.0, 0.3, 0.0, 1.5, -0.7, 0.2, 1.0, -0.1, 0.4, 0.8, 0.9, -1.2, 0.6, 0.05]);
        let mv = g.push(Op::MatVec { w: mat, x: cs, rows: 2, cols: 8 });
        let sq = g.push(Op::Mul(mv, mv));
        let tot = g.push(Op::Sum(sq));
        let scaled = g.push(Op::Mul(tot, w4));
        let sqrt_in = g.push(Op::Softplus(scaled));
        let sq2 = g.push(Op::Sqrt(sqrt_in));
        let z = g.push(Op::Sub(sq2, w4));
        let cdf = g.push(Op::CdfZ { dist: LatentDistribution::StdLogistic, x: z });
        let srv = g.push(Op::SurvZ { dist: LatentDistribution::StdNormal, x: z });
        let lp = g.push(Op::LogPdfZ { dist: LatentDistribution::MinExtremeValue, x: z });
        let fl = g.push(Op::FloorAt { x: cdf, floor: 1e-16 });
        let lg = g.push(Op::Log(fl));
        let ex = g.push(Op::Exp(srv));
        let mixed = g.push(Op::Add(lg, ex));
        let mixed2 = g.push(Op::Add(mixed, lp));
        g.push(Op::Sum(mixed2))
    }

    #[test]
    fn all_ops_match_finite_differences() {
        let base = vec![0.3, -0.8, 1.2, -0.4, 0.9];
        let p = store(base.clone());
        let mut g = Graph::<f64>::new();
        let head = build_all_ops(&mut g, &p);

        g.forward(&p, head).unwrap();
        let mut grad = vec![0.0; 5];
        g.backward(&p, head, 1.0, &mut grad);

        let h = 1e-6;
        for i in 0..5 {
            let mut pp = store(base.clone());
            pp.values_mut()[i] += h;
            let fp = g.forward(&pp, head).unwrap()[0];
            let mut pm = store(base.clone());
            pm.values_mut()[i] -= h;
            let fm = g.forward(&pm, head).unwrap()[0];
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(1e-4);
            assert!(
                ((grad[i] - fd) / denom).abs() < 1e-4,
                "param {i}: reverse {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn backward_linear_in_seed() {
        let p = store(vec![0.3, -0.8, 1.2, -0.4, 0.9]);
        let mut g = Graph::<f64>::new();
        let head = build_all_ops(&mut g, &p);
        g.forward(&p, head).unwrap();
        let mut g1 = vec![0.0; 5];
        g.backward(&p, head, 1.0, &mut g1);
        let mut g2 = vec![0.0; 5];
        g.backward(&p, head, 2.0, &mut g2);
        for i in 0..5 {
            assert_relative_eq!(g2[i], 2.0 * g1[i], max_relative = 1e-14);
        }
    }

    #[test]
    fn repeated_passes_bitwise_reproducible() {
        let p = store(vec![0.3, -0.8, 1.2, -0.4, 0.9]);
        let mut g = Graph::<f64>::new();
        let head = build_all_ops(&mut g, &p);
        let v1 = g.forward(&p, head).unwrap()[0];
        let mut g1 = vec![0.0; 5];
        g.backward(&p, head, 1.0, &mut g1);
        let v2 = g.forward(&p, head).unwrap()[0];
        let mut g2 = vec![0.0; 5];
        g.backward(&p, head, 1.0, &mut g2);
        assert_eq!(v1.to_bits(), v2.to_bits());
        for i in 0..5 {
            assert_eq!(g1[i].to_bits(), g2[i].to_bits());
        }
    }

    #[test]
    fn frozen_slices_get_zero_gradient() {
        let mut p = ParameterStore::<f64>::new();
        p.add_slice("a", vec!["a0".into()], vec![0.7]);
        p.add_slice("b", vec!["b0".into()], vec![-0.2]);
        p.set_trainable(1, false);

        let mut g = Graph::<f64>::new();
        let a = g.push_with(Op::Param { slice: 0 }, &p);
        let b = g.push_with(Op::Param { slice: 1 }, &p);
        let m = g.push(Op::Mul(a, b));
        let y = g.push(Op::Sum(m));
        g.forward(&p, y).unwrap();
        let mut grad = vec![0.0; 2];
        g.backward(&p, y, 1.0, &mut grad);
        assert_eq!(grad[0], -0.2);
        assert_eq!(grad[1], 0.0);
    }

    #[test]
    fn gather_param_routes_gradient() {
        let mut p = ParameterStore::<f64>::new();
        p.add_slice(
            "levels",
            vec!["l0".into(), "l1".into(), "l2".into()],
            vec![0.1, 0.2, 0.3],
        );
        let mut g = Graph::<f64>::new();
        let slot = g.index_slot();
        let picked = g.push(Op::GatherParam { slice: 0, index_slot: slot });
        let y = g.push(Op::Mul(picked, picked));
        g.set_index(slot, 2);
        let v = g.forward(&p, y).unwrap()[0];
        assert_relative_eq!(v, 0.09, epsilon = 1e-15);
        let mut grad = vec![0.0; 3];
        g.backward(&p, y, 1.0, &mut grad);
        assert_eq!(grad, vec![0.0, 0.0, 0.6]);
    }

    #[test]
    fn nan_diagnostic_names_first_bad_node() {
        let p = store(vec![-1.0]);
        let mut g = Graph::<f64>::new();
        let x = g.push_with(Op::Param { slice: 0 }, &p);
        let lg = g.push(Op::Log(x)); // log(-1) = NaN
        let y = g.push(Op::Exp(lg));
        match g.forward(&p, y) {
            Err(TrafoError::NonFinite { node, op, .. }) => {
                assert_eq!(node, lg);
                assert_eq!(op, "log");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn masked_forward_skips_unrelated_nodes() {
        let p = store(vec![-1.0]);
        let mut g = Graph::<f64>::new();
        let x = g.push_with(Op::Param { slice: 0 }, &p);
        let _poison = g.push(Op::Log(x)); // NaN, but not an ancestor of y
        let y = g.push(Op::Mul(x, x));
        let v = g.forward(&p, y).unwrap()[0];
        assert_eq!(v, 1.0);
    }

    #[test]
    fn cumsum_backward() {
        let p = store(vec![1.0, 2.0, 3.0]);
        let mut g = Graph::<f64>::new();
        let x = g.push_with(Op::Param { slice: 0 }, &p);
        let cs = g.push(Op::CumSum(x));
        let wts = g.constant(vec![1.0, 10.0, 100.0]);
        let y = g.push(Op::Dot(cs, wts));
        g.forward(&p, y).unwrap();
        let mut grad = vec![0.0; 3];
        g.backward(&p, y, 1.0, &mut grad);
        // y = 1*x1 + 10*(x1+x2) + 100*(x1+x2+x3)
        assert_eq!(grad, vec![111.0, 110.0, 100.0]);
    }

    #[test]
    fn broadcast_mul_backward() {
        let mut p = ParameterStore::<f64>::new();
        p.add_slice("s", vec!["s0".into()], vec![2.0]);
        let mut g = Graph::<f64>::new();
        let s = g.push_with(Op::Param { slice: 0 }, &p);
        let v = g.constant(vec![1.0, 2.0, 3.0]);
        let m = g.push(Op::Mul(s, v));
        let y = g.push(Op::Sum(m));
        g.forward(&p, y).unwrap();
        let mut grad = vec![0.0];
        g.backward(&p, y, 1.0, &mut grad);
        assert_eq!(grad[0], 6.0);
    }

    #[test]
    fn param_store_lookup() {
        let mut p = ParameterStore::<f64>::new();
        p.add_slice("shift:x", vec!["x".into()], vec![0.5]);
        p.add_slice(
            "interacting",
            vec!["theta_1".into(), "theta_2".into()],
            vec![0.0, 0.0],
        );
        assert_eq!(p.find_slice("interacting"), Some(1));
        assert_eq!(p.find_coef("x"), Some(0));
        assert_eq!(p.find_coef("theta_2"), Some(2));
        assert_eq!(p.find_coef("nope"), None);
        p.set_lr_multiplier(0, 0.1);
        let plan = p.update_plan();
        assert_eq!(plan[0], (true, 0.1));
        assert_eq!(plan[1], (true, 1.0));
    }
}
