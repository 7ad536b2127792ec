//! Reverse-mode gradient engine over a fixed op set.
//!
//! The op set is {input, affine, relu, add, scale, mse}; this covers every
//! architecture in the lab while keeping finite-difference certification of
//! the whole engine exhaustive. Graphs are DAGs built in topological order
//! (an op may only reference earlier nodes), values are row-major batches
//! `[batch x dim]`, and weights live outside the graph so the same graph can
//! be run with target weights, summed components, or per-sample masked sums.
//!
//! Two backward modes:
//! - [`Graph::backward_into`]: batched vector-Jacobian products from loss
//!   seeds, accumulating parameter gradients. Used by training loops.
//! - [`JacobianEngine`]: per-sample Jacobians of every output index with
//!   respect to each node, used by the attribution step (one backward pass
//!   per output dimension, executed together with an identity seed).
//!   Jacobians of nodes with no ReLU between them and the output do not
//!   depend on the sample and are cached until the weights change.
//!
//! ReLU convention: the derivative at exactly 0 is 0, everywhere, including
//! attributions.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::matrix::Matrix;
use crate::{shape_err, CoreError, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WeightId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BiasId(pub usize);

#[derive(Debug, Clone)]
pub struct WeightSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Updated during target training.
    pub trainable: bool,
    /// Part of the decomposition target set.
    pub decomposed: bool,
}

#[derive(Debug, Clone)]
pub struct BiasSpec {
    pub name: String,
    pub dim: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
pub enum NodeOp {
    /// External input number `slot`.
    Input { slot: usize },
    /// `y = W x + b` per row (`y = W^T x` when `transpose`).
    Affine {
        weight: WeightId,
        transpose: bool,
        bias: Option<BiasId>,
        input: NodeId,
    },
    Relu { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { input: NodeId, factor: f64 },
    /// Per-row mean squared error between two nodes; output dim 1.
    Mse { pred: NodeId, target: NodeId },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: NodeOp,
    pub dim: usize,
    pub name: String,
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub weights: Vec<WeightSpec>,
    pub biases: Vec<BiasSpec>,
    pub input_dims: Vec<usize>,
    pub output: NodeId,
}

/// Incremental graph construction with shape checking.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    weights: Vec<WeightSpec>,
    biases: Vec<BiasSpec>,
    input_dims: Vec<usize>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            weights: Vec::new(),
            biases: Vec::new(),
            input_dims: Vec::new(),
        }
    }

    pub fn weight(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        trainable: bool,
        decomposed: bool,
    ) -> WeightId {
        self.weights.push(WeightSpec {
            name: name.into(),
            rows,
            cols,
            trainable,
            decomposed,
        });
        WeightId(self.weights.len() - 1)
    }

    pub fn bias(&mut self, name: &str, dim: usize, trainable: bool) -> BiasId {
        self.biases.push(BiasSpec {
            name: name.into(),
            dim,
            trainable,
        });
        BiasId(self.biases.len() - 1)
    }

    pub fn input(&mut self, name: &str, dim: usize) -> NodeId {
        let slot = self.input_dims.len();
        self.input_dims.push(dim);
        self.push(NodeOp::Input { slot }, dim, name)
    }

    pub fn affine(
        &mut self,
        name: &str,
        weight: WeightId,
        transpose: bool,
        bias: Option<BiasId>,
        input: NodeId,
    ) -> Result<NodeId> {
        let spec = &self.weights[weight.0];
        let (in_dim, out_dim) = if transpose {
            (spec.rows, spec.cols)
        } else {
            (spec.cols, spec.rows)
        };
        if self.nodes[input].dim != in_dim {
            return Err(shape_err!(
                "GraphBuilder::affine",
                "weight {} expects input dim {in_dim}, node '{}' has {}",
                spec.name,
                self.nodes[input].name,
                self.nodes[input].dim
            ));
        }
        if let Some(b) = bias {
            if self.biases[b.0].dim != out_dim {
                return Err(shape_err!(
                    "GraphBuilder::affine",
                    "bias {} has dim {}, affine output is {out_dim}",
                    self.biases[b.0].name,
                    self.biases[b.0].dim
                ));
            }
        }
        Ok(self.push(
            NodeOp::Affine {
                weight,
                transpose,
                bias,
                input,
            },
            out_dim,
            name,
        ))
    }

    pub fn relu(&mut self, name: &str, input: NodeId) -> NodeId {
        let dim = self.nodes[input].dim;
        self.push(NodeOp::Relu { input }, dim, name)
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].dim != self.nodes[b].dim {
            return Err(shape_err!(
                "GraphBuilder::add",
                "dims {} vs {}",
                self.nodes[a].dim,
                self.nodes[b].dim
            ));
        }
        let dim = self.nodes[a].dim;
        Ok(self.push(NodeOp::Add { a, b }, dim, name))
    }

    pub fn scale(&mut self, name: &str, input: NodeId, factor: f64) -> NodeId {
        let dim = self.nodes[input].dim;
        self.push(NodeOp::Scale { input, factor }, dim, name)
    }

    pub fn mse(&mut self, name: &str, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.nodes[pred].dim != self.nodes[target].dim {
            return Err(shape_err!(
                "GraphBuilder::mse",
                "dims {} vs {}",
                self.nodes[pred].dim,
                self.nodes[target].dim
            ));
        }
        Ok(self.push(NodeOp::Mse { pred, target }, 1, name))
    }

    pub fn finish(self, output: NodeId) -> Graph {
        Graph {
            nodes: self.nodes,
            weights: self.weights,
            biases: self.biases,
            input_dims: self.input_dims,
            output,
        }
    }

    fn push(&mut self, op: NodeOp, dim: usize, name: &str) -> NodeId {
        self.nodes.push(Node {
            op,
            dim,
            name: name.into(),
        });
        self.nodes.len() - 1
    }
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn output_dim(&self) -> usize {
        self.nodes[self.output].dim
    }

    /// All affine nodes that read a decomposed weight, in graph order:
    /// `(node, weight, transpose, input_node)`. These are the "uses" the
    /// attribution inner products run over.
    pub fn decomposed_uses(&self) -> Vec<(NodeId, WeightId, bool, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(id, node)| match node.op {
                NodeOp::Affine {
                    weight,
                    transpose,
                    input,
                    ..
                } if self.weights[weight.0].decomposed => Some((id, weight, transpose, input)),
                _ => None,
            })
            .collect()
    }

    /// Runs the graph on a batch. `inputs[slot]` feeds input slot `slot`.
    pub fn forward_into(
        &self,
        weights: &[Matrix],
        biases: &[Vec<f64>],
        inputs: &[&Matrix],
        trace: &mut Trace,
    ) -> Result<()> {
        if inputs.len() != self.input_dims.len() {
            return Err(shape_err!(
                "forward",
                "graph has {} input slots, got {}",
                self.input_dims.len(),
                inputs.len()
            ));
        }
        let batch = if inputs.is_empty() { 0 } else { inputs[0].rows() };
        trace.ensure(self.nodes.len());
        trace.batch = batch;
        for (id, node) in self.nodes.iter().enumerate() {
            match node.op {
                NodeOp::Input { slot } => {
                    let x = inputs[slot];
                    if x.cols() != node.dim || x.rows() != batch {
                        return Err(shape_err!(
                            "forward",
                            "input slot {slot} expects [{batch} x {}], got [{} x {}]",
                            node.dim,
                            x.rows(),
                            x.cols()
                        ));
                    }
                    trace.values[id].reset(batch, node.dim);
                    trace.values[id].as_mut_slice().copy_from_slice(x.as_slice());
                }
                NodeOp::Affine {
                    weight,
                    transpose,
                    bias,
                    input,
                } => {
                    let w = &weights[weight.0];
                    let (x, out) = trace.pair_mut(input, id);
                    if transpose {
                        x.matmul_into(w, out)?;
                    } else {
                        x.matmul_transpose_into(w, out)?;
                    }
                    if let Some(b) = bias {
                        let bv = &biases[b.0];
                        for r in 0..batch {
                            let row = out.row_mut(r);
                            for (o, bj) in row.iter_mut().zip(bv.iter()) {
                                *o += bj;
                            }
                        }
                    }
                }
                NodeOp::Relu { input } => {
                    let (x, out) = trace.pair_mut(input, id);
                    out.reset(batch, node.dim);
                    for (o, &v) in out.as_mut_slice().iter_mut().zip(x.as_slice().iter()) {
                        *o = if v > 0.0 { v } else { 0.0 };
                    }
                }
                NodeOp::Add { a, b } => {
                    let (xa, out) = trace.pair_mut(a, id);
                    out.reset(batch, node.dim);
                    out.as_mut_slice().copy_from_slice(xa.as_slice());
                    let (xb, out) = trace.pair_mut(b, id);
                    for (o, &v) in out.as_mut_slice().iter_mut().zip(xb.as_slice().iter()) {
                        *o += v;
                    }
                }
                NodeOp::Scale { input, factor } => {
                    let (x, out) = trace.pair_mut(input, id);
                    out.reset(batch, node.dim);
                    for (o, &v) in out.as_mut_slice().iter_mut().zip(x.as_slice().iter()) {
                        *o = factor * v;
                    }
                }
                NodeOp::Mse { pred, target } => {
                    let d = self.nodes[pred].dim as f64;
                    let mut vals = vec![0.0; batch];
                    {
                        let p = &trace.values[pred];
                        let t = &trace.values[target];
                        for r in 0..batch {
                            let mut acc = 0.0;
                            for (pv, tv) in p.row(r).iter().zip(t.row(r).iter()) {
                                let diff = pv - tv;
                                acc += diff * diff;
                            }
                            vals[r] = acc / d;
                        }
                    }
                    let out = &mut trace.values[id];
                    out.reset(batch, 1);
                    for (r, v) in vals.into_iter().enumerate() {
                        out.set(r, 0, v);
                    }
                }
            }
        }
        Ok(())
    }

    /// Batched reverse pass from `seeds` (pairs of node id and `[batch x dim]`
    /// cotangent). Node gradients land in `grads`; parameter gradients are
    /// *accumulated* into `param_grads` when provided (callers zero them).
    pub fn backward_into(
        &self,
        weights: &[Matrix],
        trace: &Trace,
        seeds: &[(NodeId, &Matrix)],
        grads: &mut NodeGrads,
        mut param_grads: Option<&mut ParamGrads>,
    ) -> Result<()> {
        let batch = trace.batch;
        grads.ensure(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            grads.grads[id].reset(batch, node.dim);
        }
        for (node, seed) in seeds {
            if seed.rows() != batch || seed.cols() != self.nodes[*node].dim {
                return Err(shape_err!(
                    "backward",
                    "seed for node '{}' is [{} x {}], want [{batch} x {}]",
                    self.nodes[*node].name,
                    seed.rows(),
                    seed.cols(),
                    self.nodes[*node].dim
                ));
            }
            grads.grads[*node].add_scaled(seed, 1.0)?;
        }
        let mut scratch = Matrix::zeros(0, 0);
        for id in (0..self.nodes.len()).rev() {
            if grads.grads[id].as_slice().iter().all(|&v| v == 0.0) {
                continue;
            }
            match self.nodes[id].op {
                NodeOp::Input { .. } => {}
                NodeOp::Affine {
                    weight,
                    transpose,
                    bias,
                    input,
                } => {
                    let w = &weights[weight.0];
                    {
                        let g = &grads.grads[id];
                        if transpose {
                            g.matmul_transpose_into(w, &mut scratch)?;
                        } else {
                            g.matmul_into(w, &mut scratch)?;
                        }
                    }
                    grads.grads[input].add_scaled(&scratch, 1.0)?;
                    if let Some(pg) = param_grads.as_deref_mut() {
                        let g = &grads.grads[id];
                        let x = &trace.values[input];
                        if self.weights[weight.0].trainable || pg.force_all {
                            let dw = &mut pg.weights[weight.0];
                            for r in 0..batch {
                                if transpose {
                                    dw.add_outer(x.row(r), g.row(r), 1.0)?;
                                } else {
                                    dw.add_outer(g.row(r), x.row(r), 1.0)?;
                                }
                            }
                        }
                        if let Some(b) = bias {
                            if self.biases[b.0].trainable || pg.force_all {
                                let db = &mut pg.biases[b.0];
                                for r in 0..batch {
                                    for (dbj, gj) in db.iter_mut().zip(g.row(r).iter()) {
                                        *dbj += gj;
                                    }
                                }
                            }
                        }
                    }
                }
                NodeOp::Relu { input } => {
                    let x_ptr = &trace.values[input];
                    let (gin, gout) = grads.pair_mut(input, id);
                    relu_backward(gin.as_mut_slice(), gout.as_slice(), x_ptr.as_slice());
                }
                NodeOp::Add { a, b } => {
                    let (ga, gout) = grads.pair_mut(a, id);
                    ga.add_scaled(gout, 1.0)?;
                    let (gb, gout) = grads.pair_mut(b, id);
                    gb.add_scaled(gout, 1.0)?;
                }
                NodeOp::Scale { input, factor } => {
                    let (gin, gout) = grads.pair_mut(input, id);
                    gin.add_scaled(gout, factor)?;
                }
                NodeOp::Mse { pred, target } => {
                    let d = self.nodes[pred].dim as f64;
                    let gself = grads.grads[id].clone();
                    for (dst, sign) in [(pred, 1.0), (target, -1.0)] {
                        let p = &trace.values[pred];
                        let t = &trace.values[target];
                        let g = &mut grads.grads[dst];
                        for r in 0..batch {
                            let s = sign * 2.0 * gself.get(r, 0) / d;
                            let row = g.row_mut(r);
                            for (j, o) in row.iter_mut().enumerate() {
                                *o += s * (p.get(r, j) - t.get(r, j));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(feature = "fault-injection")]
pub mod fault {
    //! Test-only fault hook: flips the sign of the ReLU backward rule so the
    //! gradient certification suite can demonstrate that it catches a broken
    //! engine. No effect unless the feature is enabled *and* the flag is set.
    use std::sync::atomic::{AtomicBool, Ordering};

    static FLIP_RELU: AtomicBool = AtomicBool::new(false);

    pub fn set_flip_relu_backward(on: bool) {
        FLIP_RELU.store(on, Ordering::SeqCst);
    }

    pub(super) fn relu_sign() -> f64 {
        if FLIP_RELU.load(Ordering::SeqCst) {
            -1.0
        } else {
            1.0
        }
    }
}

#[inline]
fn relu_sign() -> f64 {
    #[cfg(feature = "fault-injection")]
    {
        fault::relu_sign()
    }
    #[cfg(not(feature = "fault-injection"))]
    {
        1.0
    }
}

#[inline]
fn relu_backward(gin: &mut [f64], gout: &[f64], x: &[f64]) {
    let sign = relu_sign();
    for i in 0..gin.len() {
        if x[i] > 0.0 {
            gin[i] += sign * gout[i];
        }
    }
}

/// Per-node values of a forward pass, `[batch x dim]` each.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub values: Vec<Matrix>,
    pub batch: usize,
}

impl Trace {
    pub fn new() -> Self {
        Trace::default()
    }

    fn ensure(&mut self, n: usize) {
        while self.values.len() < n {
            self.values.push(Matrix::zeros(0, 0));
        }
    }

    fn pair_mut(&mut self, src: NodeId, dst: NodeId) -> (&Matrix, &mut Matrix) {
        debug_assert!(src < dst);
        let (head, tail) = self.values.split_at_mut(dst);
        (&head[src], &mut tail[0])
    }

    pub fn value(&self, node: NodeId) -> &Matrix {
        &self.values[node]
    }
}

/// Per-node cotangents, same layout as a [`Trace`].
#[derive(Debug, Clone, Default)]
pub struct NodeGrads {
    pub grads: Vec<Matrix>,
}

impl NodeGrads {
    pub fn new() -> Self {
        NodeGrads::default()
    }

    fn ensure(&mut self, n: usize) {
        while self.grads.len() < n {
            self.grads.push(Matrix::zeros(0, 0));
        }
    }

    fn pair_mut(&mut self, src: NodeId, dst: NodeId) -> (&mut Matrix, &Matrix) {
        debug_assert!(src < dst);
        let (head, tail) = self.grads.split_at_mut(dst);
        (&mut head[src], &tail[0])
    }
}

/// Gradients aligned with `Graph::weights` / `Graph::biases`.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// When set, gradients are collected for every weight, trainable or not.
    pub force_all: bool,
}

impl ParamGrads {
    pub fn zeros_like(graph: &Graph) -> Self {
        ParamGrads {
            weights: graph
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows, w.cols))
                .collect(),
            biases: graph.biases.iter().map(|b| vec![0.0; b.dim]).collect(),
            force_all: false,
        }
    }

    pub fn zero(&mut self) {
        for w in &mut self.weights {
            w.fill(0.0);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Output Jacobians
// ---------------------------------------------------------------------------

/// Jacobian of the graph output with respect to one node, for one sample:
/// an `[n_out x node_dim]` matrix in one of three structured forms.
#[derive(Debug, Clone)]
pub enum Jac {
    /// Identity (node_dim == n_out).
    Identity,
    /// Diagonal (node_dim == n_out).
    Diag(Vec<f64>),
    Dense(Matrix),
}

impl Jac {
    fn into_dense(self, n_out: usize) -> Matrix {
        match self {
            Jac::Identity => Matrix::identity(n_out),
            Jac::Diag(d) => {
                let mut m = Matrix::zeros(n_out, n_out);
                for (i, &v) in d.iter().enumerate() {
                    m.set(i, i, v);
                }
                m
            }
            Jac::Dense(m) => m,
        }
    }

    /// `out += J * m` where `m` is `[node_dim x k]`, `out` is `[n_out x k]`.
    pub fn matmul_acc(&self, m: &Matrix, out: &mut Matrix) -> Result<()> {
        match self {
            Jac::Identity => out.add_scaled(m, 1.0),
            Jac::Diag(d) => {
                if m.rows() != d.len() {
                    return Err(shape_err!(
                        "Jac::matmul_acc",
                        "diag {} vs {}",
                        d.len(),
                        m.rows()
                    ));
                }
                for (i, &di) in d.iter().enumerate() {
                    if di == 0.0 {
                        continue;
                    }
                    let src = m.row(i);
                    let dst = out.row_mut(i);
                    for (o, &v) in dst.iter_mut().zip(src.iter()) {
                        *o += di * v;
                    }
                }
                Ok(())
            }
            Jac::Dense(j) => {
                if j.cols() != m.rows() || out.rows() != j.rows() || out.cols() != m.cols() {
                    return Err(shape_err!(
                        "Jac::matmul_acc",
                        "[{}x{}] * [{}x{}] -> [{}x{}]",
                        j.rows(),
                        j.cols(),
                        m.rows(),
                        m.cols(),
                        out.rows(),
                        out.cols()
                    ));
                }
                let k = m.cols();
                for i in 0..j.rows() {
                    let jrow = j.row(i);
                    let orow = out.row_mut(i);
                    for (kk, &jv) in jrow.iter().enumerate() {
                        if jv == 0.0 {
                            continue;
                        }
                        let mrow = &m.as_slice()[kk * k..(kk + 1) * k];
                        for idx in 0..k {
                            orow[idx] += jv * mrow[idx];
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// Writes row `o` of the Jacobian into `buf` (length node_dim).
    pub fn row_into(&self, o: usize, buf: &mut [f64]) {
        buf.iter_mut().for_each(|v| *v = 0.0);
        match self {
            Jac::Identity => buf[o] = 1.0,
            Jac::Diag(d) => buf[o] = d[o],
            Jac::Dense(m) => buf.copy_from_slice(m.row(o)),
        }
    }
}

/// One reverse edge of the DAG: how a node's Jacobian reaches one parent.
enum Edge {
    /// Through `J_parent += J_child * W` (or `W^T`).
    Affine { weight: WeightId, transpose: bool },
    /// Through the per-sample ReLU mask of the parent's pre-activations.
    Relu,
    /// Unchanged (add).
    Direct,
    /// Multiplied by a constant.
    Scaled(f64),
}

fn reverse_edges(op: &NodeOp) -> Vec<(NodeId, Edge)> {
    match *op {
        NodeOp::Input { .. } => Vec::new(),
        NodeOp::Affine {
            weight,
            transpose,
            input,
            ..
        } => vec![(input, Edge::Affine { weight, transpose })],
        NodeOp::Relu { input } => vec![(input, Edge::Relu)],
        NodeOp::Add { a, b } => vec![(a, Edge::Direct), (b, Edge::Direct)],
        NodeOp::Scale { input, factor } => vec![(input, Edge::Scaled(factor))],
        NodeOp::Mse { .. } => Vec::new(),
    }
}

/// Computes per-sample output Jacobians at every node that feeds the output.
///
/// Call [`JacobianEngine::prepare`] whenever the weights change: once for
/// target-model attributions, once per step when attributing through the
/// decomposition model.
pub struct JacobianEngine {
    n_out: usize,
    /// Node feeds the output through at least one path.
    reaches: Vec<bool>,
    /// Node's Jacobian is sample-independent (no ReLU above it).
    is_static: Vec<bool>,
    static_jac: Vec<Option<Jac>>,
    prepared: bool,
}

impl JacobianEngine {
    pub fn new(graph: &Graph) -> Result<Self> {
        if graph
            .nodes
            .iter()
            .any(|n| matches!(n.op, NodeOp::Mse { .. }))
        {
            return Err(CoreError::Config {
                context: "JacobianEngine",
                detail: "output Jacobians are defined for model graphs, not loss graphs".into(),
            });
        }
        let n = graph.nodes.len();
        let mut reaches = vec![false; n];
        let mut is_static = vec![false; n];
        reaches[graph.output] = true;
        is_static[graph.output] = true;
        // Children have larger ids than parents, so a single reverse scan
        // settles reachability and staticness.
        for id in (0..n).rev() {
            if !reaches[id] {
                continue;
            }
            let node_static = is_static[id];
            for (parent, edge) in reverse_edges(&graph.nodes[id].op) {
                let through = node_static && !matches!(edge, Edge::Relu);
                if !reaches[parent] {
                    reaches[parent] = true;
                    is_static[parent] = through;
                } else {
                    is_static[parent] = is_static[parent] && through;
                }
            }
        }
        Ok(JacobianEngine {
            n_out: graph.output_dim(),
            reaches,
            is_static,
            static_jac: vec![None; n],
            prepared: false,
        })
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    /// Rebuilds the sample-independent Jacobians for the given weights.
    pub fn prepare(&mut self, graph: &Graph, weights: &[Matrix]) -> Result<()> {
        for j in &mut self.static_jac {
            *j = None;
        }
        self.static_jac[graph.output] = Some(Jac::Identity);
        for id in (0..graph.nodes.len()).rev() {
            if !self.is_static[id] {
                continue;
            }
            let Some(jac) = self.static_jac[id].take() else {
                continue;
            };
            for (parent, edge) in reverse_edges(&graph.nodes[id].op) {
                if !self.is_static[parent] {
                    continue;
                }
                let contribution = match edge {
                    Edge::Affine { weight, transpose } => {
                        affine_jac(&jac, &weights[weight.0], transpose, self.n_out)?
                    }
                    Edge::Direct => jac.clone(),
                    Edge::Scaled(f) => scale_jac(&jac, f, self.n_out),
                    Edge::Relu => unreachable!("static parent below a ReLU"),
                };
                accumulate(&mut self.static_jac[parent], contribution, self.n_out);
            }
            self.static_jac[id] = Some(jac);
        }
        self.prepared = true;
        Ok(())
    }

    /// Computes Jacobians for sample `row` of `trace` into `ws`.
    pub fn sample(
        &self,
        graph: &Graph,
        weights: &[Matrix],
        trace: &Trace,
        row: usize,
        ws: &mut JacWorkspace,
    ) -> Result<()> {
        debug_assert!(self.prepared, "JacobianEngine::prepare not called");
        ws.ensure(graph.nodes.len());
        for j in &mut ws.dynamic {
            *j = None;
        }
        for id in (0..graph.nodes.len()).rev() {
            if !self.reaches[id] {
                continue;
            }
            let mut taken: Option<Jac> = None;
            let jac: &Jac = if self.is_static[id] {
                match &self.static_jac[id] {
                    Some(j) => j,
                    None => continue,
                }
            } else {
                match ws.dynamic[id].take() {
                    Some(j) => {
                        taken = Some(j);
                        taken.as_ref().unwrap()
                    }
                    None => continue,
                }
            };
            for (parent, edge) in reverse_edges(&graph.nodes[id].op) {
                if self.is_static[parent] {
                    continue; // already covered by prepare()
                }
                let contribution = match edge {
                    Edge::Affine { weight, transpose } => {
                        affine_jac(jac, &weights[weight.0], transpose, self.n_out)?
                    }
                    Edge::Direct => jac.clone(),
                    Edge::Scaled(f) => scale_jac(jac, f, self.n_out),
                    Edge::Relu => {
                        let pre = trace.values[parent].row(row);
                        relu_jac(jac, pre, self.n_out)
                    }
                };
                accumulate(&mut ws.dynamic[parent], contribution, self.n_out);
            }
            if let Some(j) = taken {
                ws.dynamic[id] = Some(j);
            }
        }
        Ok(())
    }

    /// The Jacobian for `node` after a [`JacobianEngine::sample`] call, or
    /// `None` if the node does not feed the output.
    pub fn jac<'a>(&'a self, ws: &'a JacWorkspace, node: NodeId) -> Option<&'a Jac> {
        if self.is_static[node] {
            self.static_jac[node].as_ref()
        } else {
            ws.dynamic[node].as_ref()
        }
    }
}

/// Per-sample scratch for [`JacobianEngine::sample`].
#[derive(Default)]
pub struct JacWorkspace {
    dynamic: Vec<Option<Jac>>,
}

impl JacWorkspace {
    pub fn new() -> Self {
        JacWorkspace::default()
    }

    fn ensure(&mut self, n: usize) {
        while self.dynamic.len() < n {
            self.dynamic.push(None);
        }
    }
}

/// Adds `contribution` into the slot, promoting the representation as needed.
fn accumulate(slot: &mut Option<Jac>, contribution: Jac, n_out: usize) {
    match slot.take() {
        None => *slot = Some(contribution),
        Some(existing) => {
            let mut dense = existing.into_dense(n_out);
            let other = contribution.into_dense(n_out);
            dense.add_scaled(&other, 1.0).expect("jac accumulate shape");
            *slot = Some(Jac::Dense(dense));
        }
    }
}

fn affine_jac(jac: &Jac, w: &Matrix, transpose: bool, n_out: usize) -> Result<Jac> {
    // J_parent = J_child * W (or J_child * W^T when the use transposes)
    match jac {
        Jac::Identity => Ok(Jac::Dense(if transpose { w.transpose() } else { w.clone() })),
        Jac::Diag(d) => {
            if transpose {
                let mut m = Matrix::zeros(n_out, w.rows());
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let dst = m.row_mut(o);
                    for (r, slot) in dst.iter_mut().enumerate() {
                        *slot = dv * w.get(r, o);
                    }
                }
                Ok(Jac::Dense(m))
            } else {
                let mut m = Matrix::zeros(n_out, w.cols());
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let src = w.row(o);
                    let dst = m.row_mut(o);
                    for (out, &v) in dst.iter_mut().zip(src.iter()) {
                        *out = dv * v;
                    }
                }
                Ok(Jac::Dense(m))
            }
        }
        Jac::Dense(j) => {
            let mut m = Matrix::zeros(0, 0);
            if transpose {
                j.matmul_transpose_into(w, &mut m)?;
            } else {
                j.matmul_into(w, &mut m)?;
            }
            Ok(Jac::Dense(m))
        }
    }
}

fn relu_jac(jac: &Jac, pre: &[f64], n_out: usize) -> Jac {
    let sign = relu_sign();
    match jac {
        Jac::Identity => Jac::Diag(
            pre.iter()
                .map(|&v| if v > 0.0 { sign } else { 0.0 })
                .collect(),
        ),
        Jac::Diag(d) => Jac::Diag(
            d.iter()
                .zip(pre.iter())
                .map(|(&dv, &v)| if v > 0.0 { sign * dv } else { 0.0 })
                .collect(),
        ),
        Jac::Dense(m) => {
            let mut out = Matrix::zeros(n_out, pre.len());
            for o in 0..n_out {
                let src = m.row(o);
                let dst = out.row_mut(o);
                for (j, &v) in pre.iter().enumerate() {
                    dst[j] = if v > 0.0 { sign * src[j] } else { 0.0 };
                }
            }
            Jac::Dense(out)
        }
    }
}

fn scale_jac(jac: &Jac, factor: f64, n_out: usize) -> Jac {
    match jac {
        Jac::Identity => Jac::Diag(vec![factor; n_out]),
        Jac::Diag(d) => Jac::Diag(d.iter().map(|v| v * factor).collect()),
        Jac::Dense(m) => {
            let mut out = m.clone();
            out.scale(factor);
            Jac::Dense(out)
        }
    }
}
