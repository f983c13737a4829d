//! Reverse-mode differentiation over a recorded graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] walks it once in reverse.

use std::collections::HashMap;

use crate::error::{Result, ScsmError};
use crate::ops::{self, BinaryOp};
use crate::params::{ParamId, ParamStore};
use crate::ssm::{self, DiagStateMatrix, Discretized, DtReading};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Binary(BinaryOp, NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    MatMul(NodeId, NodeId),
    Conv1x1(NodeId, NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    Conv1dSeq(NodeId, NodeId),
    Softmax(NodeId),
    Silu(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, rstd: Vec<f64> },
    Pool(NodeId, usize),
    Upsample(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Tensor },
    Scan(Box<ScanSaved>),
}

struct ScanSaved {
    x: NodeId,
    b: NodeId,
    c: NodeId,
    a_log: NodeId,
    a: DiagStateMatrix,
    disc: Discretized,
    h: Tensor,
    /// Entry of `a_log` that `dt` was read from, when `dt` is differentiable.
    dt_source: Option<usize>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for every bound parameter that received one.
    pub fn for_params(&self, graph: &Graph) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = graph
            .params
            .iter()
            .filter_map(|(&p, &n)| self.grads[n.0].clone().map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<NodeId> {
        value.check_finite(name)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => op_inputs(&op).iter().any(|&i| self.rg(i)),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Binds a stored parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let p = store.get(id);
        let n = self.leaf(p.value.clone(), p.trainable);
        self.params.insert(id, n);
        n
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::binary_forward(BinaryOp::Add, self.value(a), self.value(b))?;
        self.push(v, Op::Binary(BinaryOp::Add, a, b), "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::binary_forward(BinaryOp::Mul, self.value(a), self.value(b))?;
        self.push(v, Op::Binary(BinaryOp::Mul, a, b), "mul")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), "scale")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), "mean")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul_forward(self.value(a), self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn conv_1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::conv1x1_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(v, Op::Conv1x1(x, w, b), "conv_1x1")
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let v = ops::conv2d_forward(self.value(x), self.value(w), self.value(b), stride)?;
        self.push(v, Op::Conv2d { x, w, b, stride }, "conv2d")
    }

    pub fn conv1d_depthwise_seq(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let v = ops::conv1d_seq_forward(self.value(x), self.value(kernel))?;
        self.push(v, Op::Conv1dSeq(x, kernel), "conv1d_depthwise_seq")
    }

    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::softmax_forward(self.value(x));
        self.push(v, Op::Softmax(x), "softmax_lastdim")
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(ops::silu);
        self.push(v, Op::Silu(x), "silu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(ops::sigmoid);
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v.max(0.0));
        self.push(v, Op::Relu(x), "relu")
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (v, xhat, rstd) = ops::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta))?;
        self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd }, "layer_norm")
    }

    pub fn adaptive_avg_pool2d(&mut self, x: NodeId, p: usize) -> Result<NodeId> {
        let v = ops::adaptive_avg_pool2d_forward(self.value(x), p)?;
        self.push(v, Op::Pool(x, p), "adaptive_avg_pool2d")
    }

    pub fn upsample_nearest(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let v = ops::upsample_nearest_forward(self.value(x), out_h, out_w)?;
        self.push(v, Op::Upsample(x), "upsample_nearest")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = self.value(x).permute(perm)?;
        self.push(v, Op::Permute(x, perm.to_vec()), "permute")
    }

    /// Mean cross-entropy over the rows of `logits[N, classes]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = ops::cross_entropy_forward(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            "cross_entropy",
        )
    }

    /// Zero-order-hold discretisation followed by the diagonal scan over the
    /// sequence axis of `x[B,L,D]`. `a_log[D]` parameterises `a = -exp(a_log)`;
    /// `dt` is treated as a constant.
    pub fn ssm_scan(&mut self, x: NodeId, b_t: NodeId, c_t: NodeId, a_log: NodeId, dt: f64) -> Result<NodeId> {
        let a = DiagStateMatrix::from_log(self.value(a_log).data())?;
        let disc = ssm::zoh_discretize(&a, self.value(b_t), dt)?;
        let (y, h) = ssm::scan_with_states(&disc, self.value(c_t), self.value(x))?;
        let saved = ScanSaved { x, b: b_t, c: c_t, a_log, a, disc, h, dt_source: None };
        self.push(y, Op::Scan(Box::new(saved)), "ssm_scan")
    }

    /// Like [`Graph::ssm_scan`] but reads `dt = 1/sqrt(|a_j|)` from `a_log`
    /// itself, with the gradient flowing through that reading.
    pub fn ssm_scan_read_dt(
        &mut self,
        x: NodeId,
        b_t: NodeId,
        c_t: NodeId,
        a_log: NodeId,
        reading: DtReading,
    ) -> Result<NodeId> {
        let a = DiagStateMatrix::from_log(self.value(a_log).data())?;
        let (dt, j) = ssm::compute_dt_source(a.values(), reading)?;
        let disc = ssm::zoh_discretize(&a, self.value(b_t), dt)?;
        let (y, h) = ssm::scan_with_states(&disc, self.value(c_t), self.value(x))?;
        let saved = ScanSaved { x, b: b_t, c: c_t, a_log, a, disc, h, dt_source: Some(j) };
        self.push(y, Op::Scan(Box::new(saved)), "ssm_scan")
    }

    /// Accumulates gradients of a scalar `loss` into every reachable node that
    /// requires them.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(ScsmError::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, gi) in self.local_grads(node, &g) {
                if !self.rg(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let v = |id: NodeId| self.value(id);
        match &node.op {
            Op::Leaf => vec![],
            Op::Binary(op, a, b) => {
                let (ga, gb) = ops::binary_backward(*op, v(*a), v(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
            Op::Sum(a) => vec![(*a, Tensor::full(v(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = v(*a).numel() as f64;
                vec![(*a, Tensor::full(v(*a).shape(), g.item() / n))]
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = ops::matmul_backward(v(*a), v(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv1x1(x, w, b) => {
                let (gx, gw, gb) = ops::conv1x1_backward(v(*x), v(*w), g);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Conv2d { x, w, b, stride } => {
                let need_gw = self.rg(*w) || self.rg(*b);
                let (gx, gw, gb) = ops::conv2d_backward(v(*x), v(*w), *stride, g, self.rg(*x), need_gw);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Conv1dSeq(x, k) => {
                let (gx, gk) = ops::conv1d_seq_backward(v(*x), v(*k), g);
                vec![(*x, gx), (*k, gk)]
            }
            Op::Softmax(x) => vec![(*x, ops::softmax_backward(&node.value, g))],
            Op::Silu(x) => vec![(*x, v(*x).zip_map(g, |a, b| ops::silu_grad(a) * b).expect("shape"))],
            Op::Sigmoid(x) => vec![(*x, node.value.zip_map(g, |s, b| s * (1.0 - s) * b).expect("shape"))],
            Op::Relu(x) => vec![(*x, v(*x).zip_map(g, |a, b| if a > 0.0 { b } else { 0.0 }).expect("shape"))],
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (gx, gg, gb) = ops::layer_norm_backward(xhat, rstd, v(*gamma), g);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Pool(x, p) => vec![(*x, ops::adaptive_avg_pool2d_backward(v(*x).shape(), *p, g))],
            Op::Upsample(x) => vec![(*x, ops::upsample_nearest_backward(v(*x).shape(), g))],
            Op::Reshape(x) => vec![(*x, g.reshape(v(*x).shape()).expect("numel preserved"))],
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![(*x, g.permute(&inv).expect("valid inverse"))]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                vec![(*logits, ops::cross_entropy_backward(probs, labels, g.item()))]
            }
            Op::Scan(s) => {
                let sg = ssm::scan_backward(&s.a, &s.disc, v(s.b), v(s.c), v(s.x), &s.h, g);
                // a = -exp(a_log)  =>  d a / d a_log = a
                let mut ga_log: Vec<f64> = sg.a.iter().zip(s.a.values()).map(|(g, a)| g * a).collect();
                // dt = exp(-a_log[j] / 2)
                if let Some(j) = s.dt_source {
                    ga_log[j] -= sg.dt * s.disc.dt / 2.0;
                }
                let ga_log = Tensor::new(v(s.a_log).shape(), ga_log).expect("shape");
                vec![(s.x, sg.x), (s.b, sg.b_t), (s.c, sg.c_t), (s.a_log, ga_log)]
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Binary(_, a, b) | Op::MatMul(a, b) | Op::Conv1dSeq(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Softmax(a)
        | Op::Silu(a)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::Pool(a, _)
        | Op::Upsample(a)
        | Op::Reshape(a)
        | Op::Permute(a, _) => vec![*a],
        Op::Conv1x1(x, w, b) | Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Scan(s) => vec![s.x, s.b, s.c, s.a_log],
    }
}
