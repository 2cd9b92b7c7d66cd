//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records every primitive applied to [`Var`]s whose inputs need
//! gradients. [`Tape::backward`] replays the adjoints in reverse recording
//! order, so each leaf's adjoint is complete once the sweep passes it.

use std::cell::{Ref, RefCell};

use crate::error::{invalid, shape_err, Result, TensorError};
use crate::tensor::{gemm, Tensor};

/// Arguments of `stable_atanh` are clamped to this magnitude.
pub const ATANH_CLAMP: f64 = 1.0 - 1e-7;

/// Additive mask value used to exclude attention entries.
pub const MASK_NEG: f64 = -1e9;

const SERIES_EPS: f64 = 1e-4;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Pointwise maps with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Ln,
    Sqrt,
    Square,
    Recip,
    Abs,
    Tanh,
    Sigmoid,
    Relu,
    /// tanh approximation of GELU.
    Gelu,
    Cos,
    /// sin(x)/x, continuous at 0.
    Sinc,
    /// tanh(s·x)/(s·x), continuous at 0.
    TanhRatio(f64),
    /// artanh(s·x)/(s·x) with the artanh argument clamped to [`ATANH_CLAMP`].
    AtanhRatio(f64),
    /// artanh with the argument clamped to ±[`ATANH_CLAMP`].
    StableAtanh,
    /// arccos(u)/√(1−u²), continuous at u = 1.
    AcosRatio,
    Clamp(f64, f64),
    /// 1 for x ≤ r, r/x beyond: the rescaling factor of a radius clip.
    RadiusClip(f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Recip => "recip",
            Unary::Abs => "abs",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Cos => "cos",
            Unary::Sinc => "sinc",
            Unary::TanhRatio(_) => "tanh_ratio",
            Unary::AtanhRatio(_) => "atanh_ratio",
            Unary::StableAtanh => "stable_atanh",
            Unary::AcosRatio => "acos_ratio",
            Unary::Clamp(..) => "clamp",
            Unary::RadiusClip(_) => "radius_clip",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Scale(k) => k * x,
            Unary::AddScalar(k) => x + k,
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
            Unary::Abs => x.abs(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh()),
            Unary::Cos => x.cos(),
            Unary::Sinc => {
                if x.abs() < SERIES_EPS {
                    let x2 = x * x;
                    1.0 - x2 / 6.0 + x2 * x2 / 120.0
                } else {
                    x.sin() / x
                }
            }
            Unary::TanhRatio(s) => {
                let u = s * x;
                if u.abs() < SERIES_EPS {
                    let u2 = u * u;
                    1.0 - u2 / 3.0 + 2.0 * u2 * u2 / 15.0
                } else {
                    u.tanh() / u
                }
            }
            Unary::AtanhRatio(s) => {
                let u = s * x;
                if u.abs() < SERIES_EPS {
                    let u2 = u * u;
                    1.0 + u2 / 3.0 + u2 * u2 / 5.0
                } else {
                    u.clamp(-ATANH_CLAMP, ATANH_CLAMP).atanh() / u
                }
            }
            Unary::StableAtanh => x.clamp(-ATANH_CLAMP, ATANH_CLAMP).atanh(),
            Unary::AcosRatio => {
                let t = 1.0 - x;
                if t.abs() < SERIES_EPS {
                    1.0 + t / 3.0 + 2.0 * t * t / 15.0
                } else {
                    x.acos() / (1.0 - x * x).sqrt()
                }
            }
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::RadiusClip(r) => {
                if x <= r {
                    1.0
                } else {
                    r / x
                }
            }
        }
    }

    /// Derivative at input `x`, given output `y = eval(x)`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Scale(k) => k,
            Unary::AddScalar(_) => 1.0,
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let inner = GELU_K * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Unary::Cos => -x.sin(),
            Unary::Sinc => {
                if x.abs() < SERIES_EPS {
                    -x / 3.0 + x * x * x / 30.0
                } else {
                    (x * x.cos() - x.sin()) / (x * x)
                }
            }
            Unary::TanhRatio(s) => {
                let u = s * x;
                let dh = if u.abs() < SERIES_EPS {
                    -2.0 * u / 3.0 + 8.0 * u * u * u / 15.0
                } else {
                    let t = u.tanh();
                    (u * (1.0 - t * t) - t) / (u * u)
                };
                s * dh
            }
            Unary::AtanhRatio(s) => {
                let u = s * x;
                let dh = if u.abs() < SERIES_EPS {
                    2.0 * u / 3.0 + 4.0 * u * u * u / 5.0
                } else if u.abs() >= ATANH_CLAMP {
                    -y / u
                } else {
                    (u / (1.0 - u * u) - u.atanh()) / (u * u)
                };
                s * dh
            }
            Unary::StableAtanh => {
                if x.abs() < ATANH_CLAMP {
                    1.0 / (1.0 - x * x)
                } else {
                    0.0
                }
            }
            Unary::AcosRatio => {
                let t = 1.0 - x;
                if t.abs() < SERIES_EPS {
                    -(1.0 / 3.0 + 4.0 * t / 15.0)
                } else {
                    (x * y - 1.0) / (1.0 - x * x)
                }
            }
            Unary::Clamp(lo, hi) => {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::RadiusClip(r) => {
                if x <= r {
                    0.0
                } else {
                    -r / (x * x)
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Unary(usize, Unary),
    Softmax(usize),
    LayerNorm(usize, Vec<f64>),
    Sum(usize),
    SumLast(usize),
    SumRows(usize),
    NormLast(usize),
    Concat(Vec<usize>, usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    GatherRows(usize, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Unary(_, u) => u.name(),
            Op::Softmax(_) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Sum(_) => "sum",
            Op::SumLast(_) => "sum_last",
            Op::SumRows(_) => "sum_rows",
            Op::NormLast(_) => "norm_last",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows(..) => "gather_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

/// Ordered record of primitive applications. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    nonfinite: RefCell<Option<(usize, &'static str)>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// First non-finite value recorded so far, if any.
    pub fn check_finite(&self) -> Result<()> {
        match *self.nonfinite.borrow() {
            Some((node, op)) => Err(TensorError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&self, value: Tensor, op: Op, grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if !value.is_finite() {
            let mut nf = self.nonfinite.borrow_mut();
            if nf.is_none() {
                *nf = Some((id, op.name()));
            }
        }
        let op = if grad { op } else { Op::Const };
        nodes.push(Node { value, op, grad });
        Var { tape: self, id }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let grad = self.needs_grad(inputs);
        self.push(value, op, grad)
    }

    /// Accumulates adjoints of `loss` into every gradient-carrying leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.grad {
                continue;
            }
            let acc = |target: usize, contrib: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !nodes[target].grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaves[id] = Some(g);
                }
                Op::Const => {}
                Op::Add(a, b) => {
                    let sa = nodes[*a].value.shape();
                    let sb = nodes[*b].value.shape();
                    acc(*a, g.sum_to_shape(sa)?, &mut grads);
                    acc(*b, g.sum_to_shape(sb)?, &mut grads);
                }
                Op::Sub(a, b) => {
                    let sa = nodes[*a].value.shape();
                    let sb = nodes[*b].value.shape();
                    acc(*a, g.sum_to_shape(sa)?, &mut grads);
                    acc(*b, g.map(|v| -v).sum_to_shape(sb)?, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].grad {
                        let ga = g.zip_with(vb, "mul", |x, y| x * y)?;
                        acc(*a, ga.sum_to_shape(va.shape())?, &mut grads);
                    }
                    if nodes[*b].grad {
                        let gb = g.zip_with(va, "mul", |x, y| x * y)?;
                        acc(*b, gb.sum_to_shape(vb.shape())?, &mut grads);
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].grad {
                        let ga = g.zip_with(vb, "div", |x, y| x / y)?;
                        acc(*a, ga.sum_to_shape(va.shape())?, &mut grads);
                    }
                    if nodes[*b].grad {
                        // d(a/b)/db = -out / b
                        let q = g.zip_with(&node.value, "div", |x, y| -x * y)?;
                        let gb = q.zip_with(vb, "div", |x, y| x / y)?;
                        acc(*b, gb.sum_to_shape(vb.shape())?, &mut grads);
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    if nodes[*a].grad {
                        // G (m×n) · Bᵀ (n×k)
                        let mut out = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), (n as isize, 1), vb.data(), (1, n as isize), &mut out);
                        acc(*a, Tensor::new(vec![m, k], out)?, &mut grads);
                    }
                    if nodes[*b].grad {
                        // Aᵀ (k×m) · G (m×n)
                        let mut out = vec![0.0; k * n];
                        gemm(k, m, n, va.data(), (1, k as isize), g.data(), (n as isize, 1), &mut out);
                        acc(*b, Tensor::new(vec![k, n], out)?, &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
                    if nodes[*a].grad {
                        // G (m×n) · B (n×k)
                        let mut out = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), (n as isize, 1), vb.data(), (k as isize, 1), &mut out);
                        acc(*a, Tensor::new(vec![m, k], out)?, &mut grads);
                    }
                    if nodes[*b].grad {
                        // Gᵀ (n×m) · A (m×k)
                        let mut out = vec![0.0; n * k];
                        gemm(n, m, k, g.data(), (1, n as isize), va.data(), (k as isize, 1), &mut out);
                        acc(*b, Tensor::new(vec![n, k], out)?, &mut grads);
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()?, &mut grads),
                Op::Reshape(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    acc(*a, g.reshape(shape)?, &mut grads);
                }
                Op::Unary(a, u) => {
                    let x = nodes[*a].value.data();
                    let y = node.value.data();
                    let data = g
                        .data()
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(gv, (&xv, &yv))| gv * u.derivative(xv, yv))
                        .collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), data)?, &mut grads);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut out = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let ys = &y.data()[r * c..(r + 1) * c];
                        let gs = &g.data()[r * c..(r + 1) * c];
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[r * c + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    acc(*a, Tensor::new(y.shape().to_vec(), out)?, &mut grads);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut out = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let ys = &y.data()[r * c..(r + 1) * c];
                        let gs = &g.data()[r * c..(r + 1) * c];
                        let mg = gs.iter().sum::<f64>() / c as f64;
                        let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            out[r * c + j] = inv_std[r] * (gs[j] - mg - ys[j] * mgy);
                        }
                    }
                    acc(*a, Tensor::new(y.shape().to_vec(), out)?, &mut grads);
                }
                Op::Sum(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    acc(*a, Tensor::full(shape, g.item()), &mut grads);
                }
                Op::SumLast(a) => {
                    let x = &nodes[*a].value;
                    let c = x.cols();
                    let mut out = vec![0.0; x.len()];
                    for (r, gv) in g.data().iter().enumerate() {
                        out[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = *gv);
                    }
                    acc(*a, Tensor::new(x.shape().to_vec(), out)?, &mut grads);
                }
                Op::SumRows(a) => {
                    let x = &nodes[*a].value;
                    let c = x.cols();
                    let mut out = vec![0.0; x.len()];
                    for r in 0..x.rows() {
                        out[r * c..(r + 1) * c].copy_from_slice(g.data());
                    }
                    acc(*a, Tensor::new(x.shape().to_vec(), out)?, &mut grads);
                }
                Op::NormLast(a) => {
                    let x = &nodes[*a].value;
                    let c = x.cols();
                    let mut out = vec![0.0; x.len()];
                    for r in 0..x.rows() {
                        let n = node.value.data()[r];
                        if n > 0.0 {
                            let k = g.data()[r] / n;
                            for j in 0..c {
                                out[r * c + j] = k * x.data()[r * c + j];
                            }
                        }
                    }
                    acc(*a, Tensor::new(x.shape().to_vec(), out)?, &mut grads);
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = &nodes[p].value;
                        let width = pv.shape()[*axis];
                        if nodes[p].grad {
                            acc(p, slice_tensor(&g, *axis, offset, width)?, &mut grads);
                        }
                        offset += width;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let xv = &nodes[*x].value;
                    let (r, c) = (xv.shape()[0], xv.shape()[1]);
                    let mut out = vec![0.0; r * c];
                    let (gr, gc) = (g.shape()[0], g.shape()[1]);
                    for i in 0..gr {
                        for j in 0..gc {
                            let (ti, tj) = if *axis == 0 { (i + start, j) } else { (i, j + start) };
                            out[ti * c + tj] = g.data()[i * gc + j];
                        }
                    }
                    acc(*x, Tensor::new(vec![r, c], out)?, &mut grads);
                }
                Op::GatherRows(a, idx) => {
                    let xv = &nodes[*a].value;
                    let c = xv.cols();
                    let mut out = vec![0.0; xv.len()];
                    for (dst, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            out[src * c + j] += g.data()[dst * c + j];
                        }
                    }
                    acc(*a, Tensor::new(xv.shape().to_vec(), out)?, &mut grads);
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn slice_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    if axis == 0 {
        Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())
    } else {
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        Tensor::new(vec![r, len], out)
    }
}

/// Adjoints of the leaves reached by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the right shape when `v` is off the loss path.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.value().shape().to_vec()),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        match self.grads.get_mut(v.id).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(v.value().shape().to_vec()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].grad
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.tensor())
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.zip_with(&nodes[other.id].value, op, f)?
        };
        Ok(self.tape.record(out, mk(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        Ok(self.tape.record(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `self · otherᵀ`, the usual layout for `x Wᵀ` with `W: out × in`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul_t(&nodes[other.id].value)?
        };
        Ok(self.tape.record(out, Op::MatMulT(self.id, other.id), &[self.id, other.id]))
    }

    pub fn t(self) -> Result<Var<'t>> {
        let out = self.value().transpose()?;
        Ok(self.tape.record(out, Op::Transpose(self.id), &[self.id]))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn unary(self, u: Unary) -> Var<'t> {
        let out = self.value().map(|x| u.eval(x));
        self.tape.record(out, Op::Unary(self.id, u), &[self.id])
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }
    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(Unary::Scale(k))
    }
    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(Unary::AddScalar(k))
    }
    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Ln)
    }
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }
    pub fn recip(self) -> Var<'t> {
        self.unary(Unary::Recip)
    }
    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }
    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }
    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }
    pub fn gelu(self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }
    pub fn cos(self) -> Var<'t> {
        self.unary(Unary::Cos)
    }
    pub fn sinc(self) -> Var<'t> {
        self.unary(Unary::Sinc)
    }
    pub fn stable_atanh(self) -> Var<'t> {
        self.unary(Unary::StableAtanh)
    }
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Unary::Clamp(lo, hi))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'t> {
        let out = {
            let x = self.value();
            let c = x.cols();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c.max(1)) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            Tensor::new(x.shape().to_vec(), out).expect("same shape")
        };
        self.tape.record(out, Op::Softmax(self.id), &[self.id])
    }

    /// Normalizes each row over the last axis; no affine part.
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let (out, inv) = {
            let x = self.value();
            let c = x.cols();
            let mut out = x.data().to_vec();
            let mut inv = Vec::with_capacity(x.rows());
            for row in out.chunks_mut(c.max(1)) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * is);
                inv.push(is);
            }
            (Tensor::new(x.shape().to_vec(), out).expect("same shape"), inv)
        };
        self.tape.record(out, Op::LayerNorm(self.id, inv), &[self.id])
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.record(out, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums over the last axis (keeps a trailing axis of size 1).
    pub fn sum_last(self) -> Var<'t> {
        let out = {
            let x = self.value();
            let c = x.cols();
            let data: Vec<f64> = x.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
            let mut shape = x.shape().to_vec();
            if let Some(l) = shape.last_mut() {
                *l = 1;
            } else {
                shape = vec![1];
            }
            Tensor::new(shape, data).expect("row sums")
        };
        self.tape.record(out, Op::SumLast(self.id), &[self.id])
    }

    pub fn mean_last(self) -> Var<'t> {
        let c = self.value().cols() as f64;
        self.sum_last().scale(1.0 / c)
    }

    /// Column sums of a matrix, shape `1 × cols`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if x.rank() != 2 {
                return invalid("sum_rows", format!("needs rank 2, got {:?}", x.shape()));
            }
            let c = x.cols();
            let mut acc = vec![0.0; c];
            for r in x.data().chunks(c.max(1)) {
                acc.iter_mut().zip(r).for_each(|(a, b)| *a += b);
            }
            Tensor::new(vec![1, c], acc)?
        };
        Ok(self.tape.record(out, Op::SumRows(self.id), &[self.id]))
    }

    pub fn mean_rows(self) -> Result<Var<'t>> {
        let r = self.value().rows() as f64;
        Ok(self.sum_rows()?.scale(1.0 / r))
    }

    /// Euclidean norm of each row over the last axis.
    pub fn norm_last(self) -> Var<'t> {
        let out = {
            let x = self.value();
            let c = x.cols();
            let data: Vec<f64> = x
                .data()
                .chunks(c.max(1))
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            let mut shape = x.shape().to_vec();
            if let Some(l) = shape.last_mut() {
                *l = 1;
            } else {
                shape = vec![1];
            }
            Tensor::new(shape, data).expect("row norms")
        };
        self.tape.record(out, Op::NormLast(self.id), &[self.id])
    }

    /// Concatenate rank-2 values along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return invalid("concat", "no inputs");
        };
        if axis > 1 {
            return invalid("concat", format!("axis {axis} out of range for rank 2"));
        }
        let tape = first.tape;
        let out = {
            let nodes = tape.nodes.borrow();
            let s0 = nodes[first.id].value.shape().to_vec();
            if s0.len() != 2 {
                return invalid("concat", format!("needs rank 2, got {s0:?}"));
            }
            let other = 1 - axis;
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                if s.len() != 2 || s[other] != s0[other] {
                    return shape_err("concat", &s0, s);
                }
                total += s[axis];
            }
            if axis == 0 {
                let mut data = Vec::with_capacity(total * s0[1]);
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.data());
                }
                Tensor::new(vec![total, s0[1]], data)?
            } else {
                let rows = s0[0];
                let mut data = Vec::with_capacity(rows * total);
                for i in 0..rows {
                    for p in parts {
                        data.extend_from_slice(nodes[p.id].value.row_slice(i));
                    }
                }
                Tensor::new(vec![rows, total], data)?
            }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(out, Op::Concat(ids.clone(), axis), &ids))
    }

    /// Contiguous block of rows (`axis = 0`) or columns (`axis = 1`) of a matrix.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if x.rank() != 2 || axis > 1 {
                return invalid("slice", format!("needs rank 2 and axis ≤ 1, got {:?}", x.shape()));
            }
            if start + len > x.shape()[axis] {
                return invalid(
                    "slice",
                    format!("range {start}..{} exceeds axis {axis} of {:?}", start + len, x.shape()),
                );
            }
            slice_tensor(&x, axis, start, len)?
        };
        Ok(self.tape.record(out, Op::Slice { x: self.id, axis, start }, &[self.id]))
    }

    /// Rows `x[idx[0]], x[idx[1]], …`; indices may repeat.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if x.rank() != 2 {
                return invalid("gather_rows", format!("needs rank 2, got {:?}", x.shape()));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= r {
                    return invalid("gather_rows", format!("row {i} out of range for {r} rows"));
                }
                data.extend_from_slice(x.row_slice(i));
            }
            Tensor::new(vec![idx.len(), c], data)?
        };
        Ok(self.tape.record(out, Op::GatherRows(self.id, idx.to_vec()), &[self.id]))
    }
}
