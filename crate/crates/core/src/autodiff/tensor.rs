//! Dense tensors recording a reverse-mode differentiation graph.
//!
//! Every tensor owns a row-major `Vec<f64>`. Operations on tensors that
//! require gradients record the producing [`Op`] together with their
//! parents, and [`Tensor::backward`] walks the recorded graph in reverse
//! topological order. Leaves accumulate into their `grad` slot, so a tensor
//! used twice receives the sum of both contributions.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph edges.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Primitive operations understood by the differentiation engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `[.., m, k] x [k, n]` (shared right operand) or batched `[.., m, k] x [.., k, n]`.
    MatMul,
    /// Elementwise; the right operand may be a trailing-shape suffix or a single element.
    Add,
    Sub,
    Mul,
    Div,
    Concat { axis: usize },
    TransposeLastTwo,
    Relu,
    Tanh,
    Exp,
    Log,
    Sqrt,
    SoftmaxLast,
    LogSoftmaxLast,
    Sum,
    SumLast,
    Mean,
    Slice { axis: usize, start: usize, end: usize },
    /// `k` tensors of shape `[.., d]` become `[.., k, d]`.
    StackChannels,
    /// `x: [B, C, L]`, `w: [O, C, K]`, `b: [O]`, stride 1, zero padding keeping `L`.
    Conv1d,
    Scale(f64),
    AddScalar(f64),
    ClampMin(f64),
    Reshape(Vec<usize>),
    /// Repeats a size-1 axis `count` times.
    RepeatAxis { axis: usize, count: usize },
    /// Solves `L x = b` (or `Lᵀ x = b`) for unit lower-triangular `L`.
    /// Only the strictly lower entries of `L` are read.
    TriSolve { transpose: bool },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Concat { .. } => "concat",
            Op::TransposeLastTwo => "transpose",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::SoftmaxLast => "softmax",
            Op::LogSoftmaxLast => "log_softmax",
            Op::Sum => "sum",
            Op::SumLast => "sum_last",
            Op::Mean => "mean",
            Op::Slice { .. } => "slice",
            Op::StackChannels => "stack",
            Op::Conv1d => "conv1d",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ClampMin(_) => "clamp_min",
            Op::Reshape(_) => "reshape",
            Op::RepeatAxis { .. } => "repeat_axis",
            Op::TriSolve { .. } => "tri_solve",
        }
    }
}

struct Node {
    op: Op,
    parents: Vec<Tensor>,
}

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Reference-counted handle to a tensor; cloning shares storage.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("data", &*self.0.data.borrow())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    /// Constant tensor (never receives gradients).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(&data, shape)?;
        Ok(Self::from_parts(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(&data, shape)?;
        Ok(Self::from_parts(shape.to_vec(), data, true, None))
    }

    fn check_shape(data: &[f64], shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != data.len() {
            return Err(Error::Dimension {
                op: "new",
                shapes: vec![shape.to_vec(), vec![data.len()]],
            });
        }
        Ok(())
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![1], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    /// Overwrites the values in place (used by optimizers and momentum blending).
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        let mut d = self.0.data.borrow_mut();
        if d.len() != values.len() {
            return Err(Error::dim("set_data", &[&self.0.shape, &[values.len()]]));
        }
        d.copy_from_slice(values);
        Ok(())
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    /// Accumulated gradient; zeros when nothing has reached this tensor.
    pub fn grad(&self) -> Vec<f64> {
        self.0
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn set_grad(&self, g: Vec<f64>) -> Result<()> {
        if g.len() != self.numel() {
            return Err(Error::dim("set_grad", &[&self.0.shape, &[g.len()]]));
        }
        *self.0.grad.borrow_mut() = Some(g);
        Ok(())
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// Deep copy as an independent leaf with the requested trainability.
    pub fn deep_copy(&self, requires_grad: bool) -> Tensor {
        Self::from_parts(self.0.shape.clone(), self.to_vec(), requires_grad, None)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Applies a primitive, recording a graph edge when any input is differentiable.
    pub fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let (shape, data) = forward(&op, inputs)?;
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = track.then(|| Node {
            op,
            parents: inputs.iter().map(|t| (*t).clone()).collect(),
        });
        Ok(Self::from_parts(shape, data, track, node))
    }

    /// Reverse-mode sweep from a single-element root.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            let Some(node) = &t.0.node else {
                let mut slot = t.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            };
            let parents: Vec<&Tensor> = node.parents.iter().collect();
            let needs: Vec<bool> = parents.iter().map(|p| p.requires_grad()).collect();
            let out = t.0.data.borrow();
            let pgrads = vjp(&node.op, &parents, &needs, &out, &t.0.shape, &g);
            for (p, pg) in parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                match grads.get_mut(&p.key()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(p.key(), pg);
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over differentiable nodes reachable from `self`.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.requires_grad() && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    // Convenience wrappers.

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(Op::MatMul, &[self, rhs])
    }
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Add, &[self, rhs])
    }
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Sub, &[self, rhs])
    }
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Mul, &[self, rhs])
    }
    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Div, &[self, rhs])
    }
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        Self::apply(Op::Concat { axis }, parts)
    }
    pub fn transpose(&self) -> Result<Tensor> {
        Self::apply(Op::TransposeLastTwo, &[self])
    }
    pub fn relu(&self) -> Result<Tensor> {
        Self::apply(Op::Relu, &[self])
    }
    pub fn tanh(&self) -> Result<Tensor> {
        Self::apply(Op::Tanh, &[self])
    }
    pub fn exp(&self) -> Result<Tensor> {
        Self::apply(Op::Exp, &[self])
    }
    pub fn ln(&self) -> Result<Tensor> {
        Self::apply(Op::Log, &[self])
    }
    pub fn sqrt(&self) -> Result<Tensor> {
        Self::apply(Op::Sqrt, &[self])
    }
    pub fn softmax(&self) -> Result<Tensor> {
        Self::apply(Op::SoftmaxLast, &[self])
    }
    pub fn log_softmax(&self) -> Result<Tensor> {
        Self::apply(Op::LogSoftmaxLast, &[self])
    }
    pub fn sum(&self) -> Result<Tensor> {
        Self::apply(Op::Sum, &[self])
    }
    pub fn sum_last(&self) -> Result<Tensor> {
        Self::apply(Op::SumLast, &[self])
    }
    pub fn mean(&self) -> Result<Tensor> {
        Self::apply(Op::Mean, &[self])
    }
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        Self::apply(Op::Slice { axis, start, end }, &[self])
    }
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        Self::apply(Op::StackChannels, parts)
    }
    pub fn conv1d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Conv1d, &[self, weight, bias])
    }
    pub fn scale(&self, k: f64) -> Result<Tensor> {
        Self::apply(Op::Scale(k), &[self])
    }
    pub fn add_scalar(&self, k: f64) -> Result<Tensor> {
        Self::apply(Op::AddScalar(k), &[self])
    }
    pub fn clamp_min(&self, floor: f64) -> Result<Tensor> {
        Self::apply(Op::ClampMin(floor), &[self])
    }
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Self::apply(Op::Reshape(shape.to_vec()), &[self])
    }
    pub fn repeat_axis(&self, axis: usize, count: usize) -> Result<Tensor> {
        Self::apply(Op::RepeatAxis { axis, count }, &[self])
    }
    /// `self` is the unit lower-triangular factor.
    pub fn tri_solve(&self, rhs: &Tensor, transpose: bool) -> Result<Tensor> {
        Self::apply(Op::TriSolve { transpose }, &[self, rhs])
    }
    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }
}

/// Splits a shape at `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || numel(b) == 1 || (b.len() <= a.len() && a.ends_with(b))
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return None;
    }
    let batch = numel(&a[..a.len() - 2]);
    if b.len() == 2 {
        Some((batch, m, k, n, true))
    } else if b[..b.len() - 2] == a[..a.len() - 2] {
        Some((batch, m, k, n, false))
    } else {
        None
    }
}

fn tri_dims(l: &[usize], b: &[usize]) -> Option<(usize, usize, usize, bool)> {
    if l.len() < 2 || b.len() < 2 {
        return None;
    }
    let n = l[l.len() - 1];
    if l[l.len() - 2] != n || b[b.len() - 2] != n {
        return None;
    }
    let k = b[b.len() - 1];
    let batch = numel(&b[..b.len() - 2]);
    if l.len() == 2 {
        Some((batch, n, k, true))
    } else if l[..l.len() - 2] == b[..b.len() - 2] {
        Some((batch, n, k, false))
    } else {
        None
    }
}

/// In-place unit-lower-triangular solve on one `n x k` right-hand side.
fn tri_solve_block(l: &[f64], x: &mut [f64], n: usize, k: usize, transpose: bool) {
    if !transpose {
        for i in 0..n {
            for j in 0..i {
                let lij = l[i * n + j];
                if lij != 0.0 {
                    for c in 0..k {
                        x[i * k + c] -= lij * x[j * k + c];
                    }
                }
            }
        }
    } else {
        for i in (0..n).rev() {
            for j in i + 1..n {
                let lji = l[j * n + i];
                if lji != 0.0 {
                    for c in 0..k {
                        x[i * k + c] -= lji * x[j * k + c];
                    }
                }
            }
        }
    }
}

fn forward(op: &Op, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    let arity = match op {
        Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::Div | Op::TriSolve { .. } => Some(2),
        Op::Conv1d => Some(3),
        Op::Concat { .. } | Op::StackChannels => None,
        _ => Some(1),
    };
    if let Some(n) = arity {
        if inputs.len() != n {
            return Err(Error::Contract(format!(
                "{} expects {n} inputs, got {}",
                op.name(),
                inputs.len()
            )));
        }
    } else if inputs.is_empty() {
        return Err(Error::Contract(format!("{} expects at least one input", op.name())));
    }
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    let bad = || Error::dim(op.name(), &shapes);
    let a = inputs[0].data();
    let sa = inputs[0].shape();
    let unary = |f: &dyn Fn(f64) -> f64| (sa.to_vec(), a.iter().map(|&x| f(x)).collect());

    Ok(match op {
        Op::MatMul => {
            let b = inputs[1].data();
            let (batch, m, k, n, shared) = matmul_dims(sa, shapes[1]).ok_or_else(bad)?;
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                let ao = &a[bi * m * k..(bi + 1) * m * k];
                let bo = if shared { &b[..] } else { &b[bi * k * n..(bi + 1) * k * n] };
                let oo = &mut out[bi * m * n..(bi + 1) * m * n];
                for i in 0..m {
                    let row = &mut oo[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = ao[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let brow = &bo[p * n..(p + 1) * n];
                        for (r, &bv) in row.iter_mut().zip(brow) {
                            *r += aip * bv;
                        }
                    }
                }
            }
            let mut shape = sa[..sa.len() - 2].to_vec();
            shape.extend([m, n]);
            (shape, out)
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            if !broadcast_ok(sa, shapes[1]) {
                return Err(bad());
            }
            let b = inputs[1].data();
            let nb = b.len();
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                Op::Mul => |x, y| x * y,
                _ => |x, y| x / y,
            };
            let out = a.iter().enumerate().map(|(i, &x)| f(x, b[i % nb])).collect();
            (sa.to_vec(), out)
        }
        Op::Concat { axis } => {
            let axis = *axis;
            if axis >= sa.len() {
                return Err(bad());
            }
            for s in &shapes[1..] {
                if s.len() != sa.len()
                    || s.iter().zip(sa).enumerate().any(|(i, (x, y))| i != axis && x != y)
                {
                    return Err(bad());
                }
            }
            let total: usize = shapes.iter().map(|s| s[axis]).sum();
            let (outer, _, inner) = split_axis(sa, axis);
            drop(a);
            let datas: Vec<Ref<Vec<f64>>> = inputs.iter().map(|t| t.data()).collect();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (d, s) in datas.iter().zip(&shapes) {
                    let chunk = s[axis] * inner;
                    out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = sa.to_vec();
            shape[axis] = total;
            (shape, out)
        }
        Op::TransposeLastTwo => {
            if sa.len() < 2 {
                return Err(bad());
            }
            let (m, n) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let batch = numel(&sa[..sa.len() - 2]);
            let mut out = vec![0.0; a.len()];
            for bi in 0..batch {
                let base = bi * m * n;
                for i in 0..m {
                    for j in 0..n {
                        out[base + j * m + i] = a[base + i * n + j];
                    }
                }
            }
            let mut shape = sa.to_vec();
            let r = shape.len();
            shape.swap(r - 1, r - 2);
            (shape, out)
        }
        Op::Relu => unary(&|x| x.max(0.0)),
        Op::Tanh => unary(&f64::tanh),
        Op::Exp => unary(&f64::exp),
        Op::Log => unary(&f64::ln),
        Op::Sqrt => unary(&f64::sqrt),
        Op::Scale(k) => unary(&|x| x * k),
        Op::AddScalar(k) => unary(&|x| x + k),
        Op::ClampMin(f) => unary(&|x| x.max(*f)),
        Op::SoftmaxLast | Op::LogSoftmaxLast => {
            let n = *sa.last().unwrap();
            let mut out = vec![0.0; a.len()];
            for (row, o) in a.chunks(n).zip(out.chunks_mut(n)) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                if *op == Op::SoftmaxLast {
                    for (oi, &x) in o.iter_mut().zip(row) {
                        *oi = (x - max).exp() / z;
                    }
                } else {
                    let lse = max + z.ln();
                    for (oi, &x) in o.iter_mut().zip(row) {
                        *oi = x - lse;
                    }
                }
            }
            (sa.to_vec(), out)
        }
        Op::Sum => (vec![1], vec![a.iter().sum()]),
        Op::Mean => (vec![1], vec![a.iter().sum::<f64>() / a.len() as f64]),
        Op::SumLast => {
            let n = *sa.last().unwrap();
            let out = a.chunks(n).map(|r| r.iter().sum()).collect();
            let shape = if sa.len() == 1 { vec![1] } else { sa[..sa.len() - 1].to_vec() };
            (shape, out)
        }
        Op::Slice { axis, start, end } => {
            let (axis, start, end) = (*axis, *start, *end);
            if axis >= sa.len() || start >= end || end > sa[axis] {
                return Err(bad());
            }
            let (outer, len, inner) = split_axis(sa, axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * len * inner;
                out.extend_from_slice(&a[base + start * inner..base + end * inner]);
            }
            let mut shape = sa.to_vec();
            shape[axis] = end - start;
            (shape, out)
        }
        Op::StackChannels => {
            if shapes.iter().any(|s| *s != sa) {
                return Err(bad());
            }
            let d = *sa.last().unwrap();
            let outer = numel(sa) / d;
            let k = inputs.len();
            drop(a);
            let datas: Vec<Ref<Vec<f64>>> = inputs.iter().map(|t| t.data()).collect();
            let mut out = Vec::with_capacity(outer * k * d);
            for o in 0..outer {
                for dd in &datas {
                    out.extend_from_slice(&dd[o * d..(o + 1) * d]);
                }
            }
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.extend([k, d]);
            (shape, out)
        }
        Op::Conv1d => {
            let (sw, sb) = (shapes[1], shapes[2]);
            if sa.len() != 3 || sw.len() != 3 || sb.len() != 1 || sw[1] != sa[1] || sb[0] != sw[0] || sw[2] % 2 == 0 {
                return Err(bad());
            }
            let (bsz, c, l) = (sa[0], sa[1], sa[2]);
            let (o_ch, kw) = (sw[0], sw[2]);
            let pad = kw / 2;
            let w = inputs[1].data();
            let bias = inputs[2].data();
            let mut out = vec![0.0; bsz * o_ch * l];
            for bi in 0..bsz {
                for o in 0..o_ch {
                    let orow = &mut out[(bi * o_ch + o) * l..(bi * o_ch + o + 1) * l];
                    orow.iter_mut().for_each(|v| *v = bias[o]);
                    for ci in 0..c {
                        let xrow = &a[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                        for kk in 0..kw {
                            let wv = w[(o * c + ci) * kw + kk];
                            for (pos, ov) in orow.iter_mut().enumerate() {
                                let src = pos + kk;
                                if src >= pad && src - pad < l {
                                    *ov += wv * xrow[src - pad];
                                }
                            }
                        }
                    }
                }
            }
            (vec![bsz, o_ch, l], out)
        }
        Op::Reshape(shape) => {
            if shape.is_empty() || shape.contains(&0) || numel(shape) != a.len() {
                return Err(Error::dim("reshape", &[sa, shape]));
            }
            (shape.clone(), a.clone())
        }
        Op::RepeatAxis { axis, count } => {
            let (axis, count) = (*axis, *count);
            if axis >= sa.len() || sa[axis] != 1 || count == 0 {
                return Err(bad());
            }
            let (outer, _, inner) = split_axis(sa, axis);
            let mut out = Vec::with_capacity(outer * count * inner);
            for o in 0..outer {
                for _ in 0..count {
                    out.extend_from_slice(&a[o * inner..(o + 1) * inner]);
                }
            }
            let mut shape = sa.to_vec();
            shape[axis] = count;
            (shape, out)
        }
        Op::TriSolve { transpose } => {
            let (batch, n, k, shared) = tri_dims(sa, shapes[1]).ok_or_else(bad)?;
            let mut x = inputs[1].to_vec();
            for bi in 0..batch {
                let l = if shared { &a[..] } else { &a[bi * n * n..(bi + 1) * n * n] };
                tri_solve_block(l, &mut x[bi * n * k..(bi + 1) * n * k], n, k, *transpose);
            }
            (shapes[1].to_vec(), x)
        }
    })
}

/// Vector-Jacobian products for each parent; `None` where not needed.
fn vjp(
    op: &Op,
    inputs: &[&Tensor],
    needs: &[bool],
    out: &[f64],
    out_shape: &[usize],
    g: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let a = inputs[0].data();
    let sa = inputs[0].shape();
    let unary = |f: &dyn Fn(usize) -> f64| vec![Some((0..a.len()).map(f).collect::<Vec<f64>>())];

    match op {
        Op::MatMul => {
            let b = inputs[1].data();
            let (batch, m, k, n, shared) = matmul_dims(sa, inputs[1].shape()).unwrap();
            let mut ga = needs[0].then(|| vec![0.0; a.len()]);
            let mut gb = needs[1].then(|| vec![0.0; b.len()]);
            for bi in 0..batch {
                let ao = &a[bi * m * k..(bi + 1) * m * k];
                let boff = if shared { 0 } else { bi * k * n };
                let bo = &b[boff..boff + k * n];
                let go = &g[bi * m * n..(bi + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    let gao = &mut ga[bi * m * k..(bi + 1) * m * k];
                    for i in 0..m {
                        let grow = &go[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bo[p * n..(p + 1) * n];
                            gao[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    let gbo = &mut gb[boff..boff + k * n];
                    for i in 0..m {
                        let grow = &go[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ao[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (dst, &gv) in gbo[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dst += aip * gv;
                            }
                        }
                    }
                }
            }
            vec![ga, gb]
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let b = inputs[1].data();
            let nb = b.len();
            let ga = needs[0].then(|| match op {
                Op::Add | Op::Sub => g.to_vec(),
                Op::Mul => g.iter().enumerate().map(|(i, &gi)| gi * b[i % nb]).collect(),
                _ => g.iter().enumerate().map(|(i, &gi)| gi / b[i % nb]).collect(),
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; nb];
                for (i, &gi) in g.iter().enumerate() {
                    let j = i % nb;
                    gb[j] += match op {
                        Op::Add => gi,
                        Op::Sub => -gi,
                        Op::Mul => gi * a[i],
                        _ => -gi * a[i] / (b[j] * b[j]),
                    };
                }
                gb
            });
            vec![ga, gb]
        }
        Op::Concat { axis } => {
            let axis = *axis;
            let (outer, _, inner) = split_axis(sa, axis);
            let total = out_shape[axis];
            let mut offset = 0;
            inputs
                .iter()
                .zip(needs)
                .map(|(t, &need)| {
                    let len = t.shape()[axis];
                    let r = need.then(|| {
                        let mut gi = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gi.extend_from_slice(&g[base..base + len * inner]);
                        }
                        gi
                    });
                    offset += len;
                    r
                })
                .collect()
        }
        Op::TransposeLastTwo => {
            let (m, n) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let batch = numel(&sa[..sa.len() - 2]);
            let mut ga = vec![0.0; a.len()];
            for bi in 0..batch {
                let base = bi * m * n;
                for i in 0..m {
                    for j in 0..n {
                        ga[base + i * n + j] = g[base + j * m + i];
                    }
                }
            }
            vec![Some(ga)]
        }
        Op::Relu => unary(&|i| if a[i] > 0.0 { g[i] } else { 0.0 }),
        Op::Tanh => unary(&|i| g[i] * (1.0 - out[i] * out[i])),
        Op::Exp => unary(&|i| g[i] * out[i]),
        Op::Log => unary(&|i| g[i] / a[i]),
        Op::Sqrt => unary(&|i| g[i] * 0.5 / out[i]),
        Op::Scale(k) => unary(&|i| g[i] * k),
        Op::AddScalar(_) | Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::ClampMin(f) => unary(&|i| if a[i] > *f { g[i] } else { 0.0 }),
        Op::SoftmaxLast => {
            let n = *sa.last().unwrap();
            let mut ga = vec![0.0; a.len()];
            for ((y, gr), o) in out.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                for ((oi, &yi), &gi) in o.iter_mut().zip(y).zip(gr) {
                    *oi = yi * (gi - dot);
                }
            }
            vec![Some(ga)]
        }
        Op::LogSoftmaxLast => {
            let n = *sa.last().unwrap();
            let mut ga = vec![0.0; a.len()];
            for ((y, gr), o) in out.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                let gs: f64 = gr.iter().sum();
                for ((oi, &yi), &gi) in o.iter_mut().zip(y).zip(gr) {
                    *oi = gi - yi.exp() * gs;
                }
            }
            vec![Some(ga)]
        }
        Op::Sum => vec![Some(vec![g[0]; a.len()])],
        Op::Mean => vec![Some(vec![g[0] / a.len() as f64; a.len()])],
        Op::SumLast => {
            let n = *sa.last().unwrap();
            unary(&|i| g[i / n])
        }
        Op::Slice { axis, start, end } => {
            let (outer, len, inner) = split_axis(sa, *axis);
            let width = (end - start) * inner;
            let mut ga = vec![0.0; a.len()];
            for o in 0..outer {
                let base = o * len * inner + start * inner;
                ga[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            vec![Some(ga)]
        }
        Op::StackChannels => {
            let d = *sa.last().unwrap();
            let outer = numel(sa) / d;
            let k = inputs.len();
            (0..k)
                .map(|c| {
                    needs[c].then(|| {
                        let mut gi = Vec::with_capacity(outer * d);
                        for o in 0..outer {
                            let base = (o * k + c) * d;
                            gi.extend_from_slice(&g[base..base + d]);
                        }
                        gi
                    })
                })
                .collect()
        }
        Op::Conv1d => {
            let sw = inputs[1].shape();
            let (bsz, c, l) = (sa[0], sa[1], sa[2]);
            let (o_ch, kw) = (sw[0], sw[2]);
            let pad = kw / 2;
            let w = inputs[1].data();
            let mut ga = needs[0].then(|| vec![0.0; a.len()]);
            let mut gw = needs[1].then(|| vec![0.0; w.len()]);
            let mut gbias = needs[2].then(|| vec![0.0; o_ch]);
            for bi in 0..bsz {
                for o in 0..o_ch {
                    let grow = &g[(bi * o_ch + o) * l..(bi * o_ch + o + 1) * l];
                    if let Some(gb) = gbias.as_mut() {
                        gb[o] += grow.iter().sum::<f64>();
                    }
                    for ci in 0..c {
                        let xoff = (bi * c + ci) * l;
                        for kk in 0..kw {
                            let widx = (o * c + ci) * kw + kk;
                            let wv = w[widx];
                            let mut acc = 0.0;
                            for (pos, &gv) in grow.iter().enumerate() {
                                let src = pos + kk;
                                if src >= pad && src - pad < l {
                                    let xi = xoff + src - pad;
                                    acc += gv * a[xi];
                                    if let Some(ga) = ga.as_mut() {
                                        ga[xi] += gv * wv;
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
            vec![ga, gw, gbias]
        }
        Op::RepeatAxis { axis, count } => {
            let (outer, _, inner) = split_axis(sa, *axis);
            let mut ga = vec![0.0; a.len()];
            for o in 0..outer {
                for r in 0..*count {
                    let src = &g[(o * count + r) * inner..(o * count + r + 1) * inner];
                    for (d, s) in ga[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            vec![Some(ga)]
        }
        Op::TriSolve { transpose } => {
            let (batch, n, k, shared) = tri_dims(sa, inputs[1].shape()).unwrap();
            let mut gb = g.to_vec();
            let mut gl = needs[0].then(|| vec![0.0; a.len()]);
            for bi in 0..batch {
                let loff = if shared { 0 } else { bi * n * n };
                let l = &a[loff..loff + n * n];
                let gbo = &mut gb[bi * n * k..(bi + 1) * n * k];
                // A x = b  =>  gb = A^{-T} g, gA = -gb x^T
                tri_solve_block(l, gbo, n, k, !transpose);
                if let Some(gl) = gl.as_mut() {
                    let x = &out[bi * n * k..(bi + 1) * n * k];
                    for i in 0..n {
                        for j in 0..i {
                            let acc: f64 = if !transpose {
                                (0..k).map(|c| gbo[i * k + c] * x[j * k + c]).sum()
                            } else {
                                (0..k).map(|c| x[i * k + c] * gbo[j * k + c]).sum()
                            };
                            gl[loff + i * n + j] -= acc;
                        }
                    }
                }
            }
            vec![gl, needs[1].then_some(gb)]
        }
    }
}
