use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::special::{digamma, ln_gamma};

/// Index of a node on its [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive a node applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Const,
    Param,
    DropoutMask,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Log,
    Exp,
    Softplus,
    Relu,
    Lgamma,
    Abs,
    MatMul,
    Sum,
    Column,
    LogSumExpRows,
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Const,
    Param,
    DropoutMask,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    Lgamma(NodeId),
    Abs(NodeId),
    MatMul(NodeId, NodeId),
    Sum(NodeId),
    Column(NodeId, usize),
    LogSumExpRows(NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Const => OpKind::Const,
            Op::Param => OpKind::Param,
            Op::DropoutMask => OpKind::DropoutMask,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Neg(_) => OpKind::Neg,
            Op::Log(_) => OpKind::Log,
            Op::Exp(_) => OpKind::Exp,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Relu(_) => OpKind::Relu,
            Op::Lgamma(_) => OpKind::Lgamma,
            Op::Abs(_) => OpKind::Abs,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Sum(_) => OpKind::Sum,
            Op::Column(..) => OpKind::Column,
            Op::LogSumExpRows(_) => OpKind::LogSumExpRows,
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Append-only record of a computation. Values are computed eagerly as nodes
/// are pushed, so every node's inputs precede it.
pub struct Tape {
    nodes: Vec<Node>,
    seed: u64,
    rng: ChaCha8Rng,
}

/// Adjoints of the parameter nodes after [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    fn dim(x: usize, y: usize) -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    }
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape {
            op,
            left: a,
            right: b,
        }),
    }
}

fn slot(adj: &mut [Option<Tensor>], id: NodeId, shape: (usize, usize)) -> &mut Tensor {
    adj[id.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

#[inline]
fn bidx(shape: (usize, usize), r: usize, c: usize) -> usize {
    let rr = if shape.0 == 1 { 0 } else { r };
    let cc = if shape.1 == 1 { 0 } else { c };
    rr * shape.1 + cc
}

/// `c += a · b` where each operand is described by (pointer, row stride, col stride).
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: strides describe in-bounds views of `a` (m×k), `b` (k×n) and
    // `c` (m×n); the caller derives them from tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            seed,
            rng: rng_from(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
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

    /// The value computed for `id`. Nodes are evaluated when recorded, so this
    /// is a lookup.
    pub fn forward(&self, id: NodeId) -> &Tensor {
        self.value(id)
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_flag(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// A trainable leaf; [`Tape::backward`] reports its adjoint.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, value, true)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (rows, cols) = broadcast_shape(name, sa, sb)?;
        let va = self.nodes[a.0].value.data();
        let vb = self.nodes[b.0].value.data();
        let data: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    out.push(f(va[bidx(sa, r, c)], vb[bidx(sb, r, c)]));
                }
            }
            out
        };
        let value = Tensor::from_vec(rows, cols, data)?;
        let ng = self.grad_flag(&[a, b]);
        Ok(self.push(op, value, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let value = self.nodes[a.0].value.map(f);
        let ng = self.grad_flag(&[a]);
        self.push(op, value, ng)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::domain("log", format!("argument must be > 0, got {bad}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn lgamma(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::domain("lgamma", format!("argument must be > 0, got {bad}")));
        }
        Ok(self.unary(a, ln_gamma, Op::Lgamma(a)))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: (m, k),
                right: (k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            k as isize,
            1,
            self.nodes[b.0].value.data(),
            n as isize,
            1,
            &mut out,
        );
        let value = Tensor::from_vec(m, n, out)?;
        let ng = self.grad_flag(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    /// Sum of all elements, as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.grad_flag(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), ng)
    }

    /// Column `j` of `a` as an n×1 node.
    pub fn column(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        if j >= cols {
            return Err(Error::Shape {
                op: "column",
                left: (rows, cols),
                right: (rows, j + 1),
            });
        }
        let v = self.value(a);
        let data = (0..rows).map(|r| v.get(r, j)).collect();
        let ng = self.grad_flag(&[a]);
        Ok(self.push(Op::Column(a, j), Tensor::from_vec(rows, 1, data)?, ng))
    }

    /// Row-wise log-sum-exp, giving an n×1 node.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data = (0..v.rows())
            .map(|r| {
                let row = v.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let value = Tensor::column_vector(data);
        let ng = self.grad_flag(&[a]);
        self.push(Op::LogSumExpRows(a), value, ng)
    }

    /// Records a fresh inverted-dropout mask drawn from the tape's RNG and
    /// applies it to `a`. A zero rate is the identity and records nothing.
    pub fn dropout(&mut self, a: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let (rows, cols) = self.shape(a);
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let data = (0..rows * cols)
            .map(|_| if self.rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let mask = self.push(Op::DropoutMask, Tensor::from_vec(rows, cols, data)?, false);
        self.mul(a, mask)
    }

    /// Reverse sweep from a scalar `loss`, returning adjoints of every
    /// parameter node that influences it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss node, got shape {shape:?}"
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(node.op, Op::Param) {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }

        let grads = adj
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| if matches!(node.op, Op::Param) { g } else { None })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;

        match node.op {
            Op::Const | Op::Param | Op::DropoutMask => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (va, vb) = (val(a).data(), val(b).data());
                let (rows, cols) = g.shape();
                let gd = g.data();
                // d(out)/da and d(out)/db at one element.
                let partials = |x: f64, y: f64| -> (f64, f64) {
                    match node.op {
                        Op::Add(..) => (1.0, 1.0),
                        Op::Sub(..) => (1.0, -1.0),
                        Op::Mul(..) => (y, x),
                        _ => (1.0 / y, -x / (y * y)),
                    }
                };
                let (wa, wb) = (self.wants(a), self.wants(b));
                let mut ga = wa.then(|| Tensor::zeros(sa.0, sa.1));
                let mut gb = wb.then(|| Tensor::zeros(sb.0, sb.1));
                for r in 0..rows {
                    for c in 0..cols {
                        let (ia, ib) = (bidx(sa, r, c), bidx(sb, r, c));
                        let (pa, pb) = partials(va[ia], vb[ib]);
                        let gv = gd[r * cols + c];
                        if let Some(t) = ga.as_mut() {
                            t.data_mut()[ia] += gv * pa;
                        }
                        if let Some(t) = gb.as_mut() {
                            t.data_mut()[ib] += gv * pb;
                        }
                    }
                }
                for (id, part) in [(a, ga), (b, gb)] {
                    if let Some(part) = part {
                        let slot = slot(adj, id, part.shape());
                        for (s, p) in slot.data_mut().iter_mut().zip(part.data()) {
                            *s += p;
                        }
                    }
                }
            }
            Op::Neg(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::Lgamma(a)
            | Op::Abs(a) => {
                if !self.wants(a) {
                    return;
                }
                let x = val(a).data();
                let y = node.value.data();
                let d: fn(f64, f64) -> f64 = match node.op {
                    Op::Neg(_) => |_, _| -1.0,
                    Op::Log(_) => |x, _| 1.0 / x,
                    Op::Exp(_) => |_, y| y,
                    Op::Softplus(_) => |x, _| sigmoid(x),
                    Op::Relu(_) => |x, _| if x > 0.0 { 1.0 } else { 0.0 },
                    Op::Lgamma(_) => |x, _| digamma(x),
                    _ => |x, _| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    },
                };
                let slot = slot(adj, a, val(a).shape());
                for (((s, &gv), &xv), &yv) in slot.data_mut().iter_mut().zip(g.data()).zip(x).zip(y) {
                    *s += gv * d(xv, yv);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = val(a).shape();
                let n = val(b).cols();
                if self.wants(a) {
                    // dA += G · Bᵀ
                    let slot = slot(adj, a, (m, k));
                    gemm_acc(m, n, k, g.data(), n as isize, 1, val(b).data(), 1, n as isize, slot.data_mut());
                }
                if self.wants(b) {
                    // dB += Aᵀ · G
                    let slot = slot(adj, b, (k, n));
                    gemm_acc(k, m, n, val(a).data(), 1, k as isize, g.data(), n as isize, 1, slot.data_mut());
                }
            }
            Op::Sum(a) => {
                if !self.wants(a) {
                    return;
                }
                let gv = g.data()[0];
                let slot = slot(adj, a, val(a).shape());
                slot.data_mut().iter_mut().for_each(|s| *s += gv);
            }
            Op::Column(a, j) => {
                if !self.wants(a) {
                    return;
                }
                let (rows, cols) = val(a).shape();
                let slot = slot(adj, a, (rows, cols));
                for r in 0..rows {
                    slot.data_mut()[r * cols + j] += g.data()[r];
                }
            }
            Op::LogSumExpRows(a) => {
                if !self.wants(a) {
                    return;
                }
                let x = val(a);
                let (rows, cols) = x.shape();
                let lse = node.value.data();
                let slot = slot(adj, a, (rows, cols));
                for r in 0..rows {
                    for c in 0..cols {
                        slot.data_mut()[r * cols + c] += g.data()[r] * (x.get(r, c) - lse[r]).exp();
                    }
                }
            }
        }
    }
}
