//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! A [`Graph`] is built fresh for every forward pass. Each call appends one
//! node holding its output value and whatever the backward rule needs
//! (pooling argmax, dropout mask, loss residuals). [`Graph::backward`] walks
//! the record from the loss node down to index 0.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::ops::{
    maxpool2d, Activation, Conv2dPlan, ConvTransposePlan, Padding,
};
use crate::tensor::{gemm, Scalar, Tensor, TensorError, Trans};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Error)]
pub enum AutogradError {
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to this computation record")]
    ForeignVar,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Act(Var, Activation),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        plan: Conv2dPlan,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        plan: ConvTransposePlan,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectStep {
        x: Var,
        step: usize,
    },
    StackSteps(Vec<Var>),
    MulConst {
        x: Var,
        factor: Tensor<T>,
    },
    Sum(Var),
    SumSquares(Var),
    Rmse {
        pred: Var,
        residual: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Act(..) => "activation",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectStep { .. } => "select_step",
            Op::StackSteps(..) => "stack_steps",
            Op::MulConst { .. } => "mul_const",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
            Op::Rmse { .. } => "rmse",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The computation record: an append-only list of executed primitives.
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [n] => Some((1, n)),
        [r, c] => Some((r, c)),
        _ => None,
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded ops in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn contains(&self, v: Var) -> bool {
        v.graph == self.id && v.index < self.nodes.len()
    }

    fn check(&self, v: Var) {
        assert!(self.contains(v), "variable from another computation record");
    }

    fn node(&self, v: Var) -> &Node<T> {
        self.check(v);
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A fixed input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf that receives a gradient after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        }
    }

    /// `[B, N] x [N, M] -> [B, M]`; a 1-D left operand yields `[M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (rows, n) = as_matrix(&sa).ok_or_else(|| Self::mismatch("matmul", &sa, &sb))?;
        let [bn, m] = sb[..] else {
            return Err(Self::mismatch("matmul", &sa, &sb));
        };
        if bn != n {
            return Err(Self::mismatch("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); rows * m];
        gemm(
            Trans::No,
            Trans::No,
            rows,
            n,
            m,
            T::one(),
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        let shape = if sa.len() == 1 { vec![m] } else { vec![rows, m] };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts_unchecked(shape, out), Op::MatMul(a, b), needs))
    }

    /// Adds a `[M]` bias to every row of `[.., M]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let m = *sx.last().expect("non-empty shape");
        if sb != [m] {
            return Err(Self::mismatch("add_bias", &sx, &sb));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(m) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v = *v + bv;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias(x, b), needs))
    }

    /// Affine layer `x · w + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Self::mismatch(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts_unchecked(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, factor), needs)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        let needs = self.needs(x);
        self.push(out, Op::Act(x, kind), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let plan = Conv2dPlan::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [plan.out_channels] {
                return Err(Self::mismatch("conv2d bias", self.shape(b), &[plan.out_channels]));
            }
        }
        let out = plan.forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_parts_unchecked(plan.output_shape(), out);
        Ok(self.push(value, Op::Conv2d { x, w, b, plan }, needs))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var, TensorError> {
        let plan = ConvTransposePlan::new(
            self.shape(x),
            self.shape(w),
            stride,
            padding,
            output_padding,
        )?;
        if let Some(b) = b {
            if self.shape(b) != [plan.geom.channels] {
                return Err(Self::mismatch(
                    "conv_transpose2d bias",
                    self.shape(b),
                    &[plan.geom.channels],
                ));
            }
        }
        let out = plan.forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::from_parts_unchecked(plan.output_shape(), out);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, plan }, needs))
    }

    pub fn maxpool2d(&mut self, x: Var, pool: usize, stride: usize) -> Result<Var, TensorError> {
        let pooled = maxpool2d(self.value(x), pool, stride)?;
        let needs = self.needs(x);
        Ok(self.push(
            pooled.output,
            Op::MaxPool {
                x,
                argmax: pooled.argmax,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Concatenates 2-D operands along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::Invalid("concat needs operands and axis 0 or 1".into()));
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        for s in &shapes {
            if s.len() != 2 || s[1 - axis] != shapes[0][1 - axis] {
                return Err(Self::mismatch("concat", &shapes[0], s));
            }
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let value = if axis == 0 {
            let data = parts
                .iter()
                .flat_map(|&p| self.value(p).data().iter().copied())
                .collect();
            Tensor::from_parts_unchecked(vec![total, shapes[0][1]], data)
        } else {
            let rows = shapes[0][0];
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (&p, s) in parts.iter().zip(&shapes) {
                    data.extend_from_slice(&self.value(p).data()[r * s[1]..(r + 1) * s[1]]);
                }
            }
            Tensor::from_parts_unchecked(vec![rows, total], data)
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Columns `start..start + len` of a 2-D operand.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let [rows, cols] = s[..] else {
            return Err(Self::mismatch("slice_cols", &s, &[start, len]));
        };
        if len == 0 || start + len > cols {
            return Err(Self::mismatch("slice_cols", &s, &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![rows, len], data),
            Op::SliceCols { x, start },
            needs,
        ))
    }

    /// Picks step `step` of a `[B, T, R]` sequence as `[B, R]`.
    pub fn select_step(&mut self, x: Var, step: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let [b, t, r] = s[..] else {
            return Err(Self::mismatch("select_step", &s, &[step]));
        };
        if step >= t {
            return Err(Self::mismatch("select_step", &s, &[step]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * r);
        for i in 0..b {
            let base = (i * t + step) * r;
            data.extend_from_slice(&src[base..base + r]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![b, r], data),
            Op::SelectStep { x, step },
            needs,
        ))
    }

    /// Stacks `T` operands of shape `[B, R]` into `[B, T, R]`.
    pub fn stack_steps(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self
            .shape(*parts.first().ok_or_else(|| TensorError::Invalid("stack_steps needs operands".into()))?)
            .to_vec();
        let [b, r] = first[..] else {
            return Err(Self::mismatch("stack_steps", &first, &[]));
        };
        for &p in parts {
            if self.shape(p) != first.as_slice() {
                return Err(Self::mismatch("stack_steps", &first, self.shape(p)));
            }
        }
        let t = parts.len();
        let mut data = vec![T::zero(); b * t * r];
        for (step, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for i in 0..b {
                let dst = (i * t + step) * r;
                data[dst..dst + r].copy_from_slice(&src[i * r..(i + 1) * r]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![b, t, r], data),
            Op::StackSteps(parts.to_vec()),
            needs,
        ))
    }

    /// Elementwise product with a fixed tensor (dropout masks, projections).
    pub fn mul_const(&mut self, x: Var, factor: Tensor<T>) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if vx.shape() != factor.shape() {
            return Err(Self::mismatch("mul_const", vx.shape(), factor.shape()));
        }
        let data = vx.data().iter().zip(factor.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::from_parts_unchecked(vx.shape().to_vec(), data);
        let needs = self.needs(x);
        Ok(self.push(out, Op::MulConst { x, factor }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), needs)
    }

    /// `sum(x ∘ weights)`: a scalar projection used by gradient checks.
    pub fn dot_const(&mut self, x: Var, weights: Tensor<T>) -> Result<Var, TensorError> {
        let p = self.mul_const(x, weights)?;
        Ok(self.sum(p))
    }

    /// Root-mean-square error of `pred` against a fixed target of equal shape.
    pub fn rmse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, TensorError> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() {
            return Err(Self::mismatch("rmse", vp.shape(), target.shape()));
        }
        let residual: Vec<T> = vp.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
        let n = T::from_f64(residual.len() as f64);
        let mse = residual.iter().map(|&d| d * d).sum::<T>() / n;
        let needs = self.needs(pred);
        Ok(self.push(Tensor::scalar(mse.sqrt()), Op::Rmse { pred, residual }, needs))
    }

    /// Propagates d(loss)/d(node) back through the record.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutogradError> {
        if !self.contains(loss) {
            return Err(AutogradError::ForeignVar);
        }
        let loss_value = &self.nodes[loss.index].value;
        if loss_value.len() != 1 {
            return Err(AutogradError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));

        for index in (0..=loss.index).rev() {
            let node = &self.nodes[index];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[index].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[index] = Some(g);
                continue;
            }
            self.propagate(node, g, &mut grads);
        }
        // Interior gradients were consumed; only leaves remain populated.
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.index].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.index].value.shape());
        match &mut grads[v.index] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (rows, n) = as_matrix(va.shape()).expect("checked in forward");
                let m = vb.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); rows * n];
                    gemm(Trans::No, Trans::Yes, rows, m, n, T::one(), g.data(), vb.data(), T::zero(), &mut da);
                    self.accumulate(grads, *a, Tensor::from_parts_unchecked(va.shape().to_vec(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); n * m];
                    gemm(Trans::Yes, Trans::No, n, rows, m, T::one(), va.data(), g.data(), T::zero(), &mut db);
                    self.accumulate(grads, *b, Tensor::from_parts_unchecked(vec![n, m], db));
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*b) {
                    let m = self.shape(*b)[0];
                    let mut db = vec![T::zero(); m];
                    for row in g.data().chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts_unchecked(vec![m], db));
                }
                self.accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, hadamard(&g, vb));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, hadamard(&g, va));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Act(x, kind) => {
                let vx = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .zip(node.value.data())
                    .map(|((&gv, &xv), &yv)| gv * kind.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts_unchecked(vx.shape().to_vec(), data));
            }
            Op::Conv2d { x, w, b, plan } => {
                let (dx, dw, db) = plan.backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_parts_unchecked(self.shape(*x).to_vec(), dx));
                }
                self.accumulate(grads, *w, Tensor::from_parts_unchecked(self.shape(*w).to_vec(), dw));
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_parts_unchecked(self.shape(*b).to_vec(), db));
                }
            }
            Op::ConvTranspose2d { x, w, b, plan } => {
                let (dx, dw, db) = plan.backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_parts_unchecked(self.shape(*x).to_vec(), dx));
                }
                self.accumulate(grads, *w, Tensor::from_parts_unchecked(self.shape(*w).to_vec(), dw));
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_parts_unchecked(self.shape(*b).to_vec(), db));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x).to_vec());
                let d = dx.data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    d[idx] = d[idx] + gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts_unchecked(shape, g.into_data()));
            }
            Op::Concat { parts, axis } => {
                let gd = g.data();
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.needs(p) {
                            let t = Tensor::from_parts_unchecked(
                                self.shape(p).to_vec(),
                                gd[offset..offset + len].to_vec(),
                            );
                            self.accumulate(grads, p, t);
                        }
                        offset += len;
                    }
                } else {
                    let total = g.shape()[1];
                    let rows = g.shape()[0];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        if self.needs(p) {
                            let mut data = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                data.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                            }
                            self.accumulate(grads, p, Tensor::from_parts_unchecked(vec![rows, w], data));
                        }
                        offset += w;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x).to_vec();
                let len = g.shape()[1];
                let mut dx = Tensor::zeros(s.clone());
                let d = dx.data_mut();
                for (r, row) in g.data().chunks(len).enumerate() {
                    d[r * s[1] + start..r * s[1] + start + len].copy_from_slice(row);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SelectStep { x, step } => {
                let s = self.shape(*x).to_vec();
                let (t, r) = (s[1], s[2]);
                let mut dx = Tensor::zeros(s.clone());
                let d = dx.data_mut();
                for (i, row) in g.data().chunks(r).enumerate() {
                    let base = (i * t + step) * r;
                    d[base..base + r].copy_from_slice(row);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::StackSteps(parts) => {
                let (b, t, r) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                for (step, &p) in parts.iter().enumerate() {
                    if !self.needs(p) {
                        continue;
                    }
                    let mut data = Vec::with_capacity(b * r);
                    for i in 0..b {
                        let base = (i * t + step) * r;
                        data.extend_from_slice(&g.data()[base..base + r]);
                    }
                    self.accumulate(grads, p, Tensor::from_parts_unchecked(vec![b, r], data));
                }
            }
            Op::MulConst { x, factor } => {
                self.accumulate(grads, *x, hadamard(&g, factor));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gv));
            }
            Op::SumSquares(x) => {
                let two_g = g.data()[0] + g.data()[0];
                let dx = self.value(*x).map(|v| v * two_g);
                self.accumulate(grads, *x, dx);
            }
            Op::Rmse { pred, residual } => {
                let loss = node.value.data()[0];
                let n = T::from_f64(residual.len() as f64);
                // d/dp sqrt(mean(r^2)) = r / (n * loss); zero residual gives zero gradient
                let coef = if loss > T::zero() {
                    g.data()[0] / (n * loss)
                } else {
                    T::zero()
                };
                let data = residual.iter().map(|&r| r * coef).collect();
                self.accumulate(
                    grads,
                    *pred,
                    Tensor::from_parts_unchecked(self.shape(*pred).to_vec(), data),
                );
            }
        }
    }
}

fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_parts_unchecked(a.shape().to_vec(), data)
}

/// Gradients of one backward pass, indexed by leaf [`Var`].
pub struct Gradients<T> {
    graph: u64,
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; leaves the loss does not depend on get zeros.
    pub fn wrt(&self, v: Var) -> Result<Tensor<T>, AutogradError> {
        if v.graph != self.graph || v.index >= self.grads.len() {
            return Err(AutogradError::ForeignVar);
        }
        Ok(match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.index].clone()),
        })
    }

    /// Moves a leaf gradient out, avoiding a copy.
    pub fn take(&mut self, v: Var) -> Result<Tensor<T>, AutogradError> {
        if v.graph != self.graph || v.index >= self.grads.len() {
            return Err(AutogradError::ForeignVar);
        }
        Ok(self.grads[v.index]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.index].clone())))
    }
}

/// Compares reverse-mode gradients against central differences.
///
/// The numeric derivative uses the fourth-order five-point stencil
/// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`.
/// `build` receives one trainable leaf per entry of `inputs` and must return a
/// scalar. The result is the maximum over all coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64, AutogradError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    grad_check_steps(build, inputs, &vec![epsilon; inputs.len()])
}

/// [`grad_check`] with a separate step size per input.
pub fn grad_check_steps<F>(build: F, inputs: &[Tensor<f64>], steps: &[f64]) -> Result<f64, AutogradError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    if steps.len() != inputs.len() {
        return Err(TensorError::Invalid(format!("{} steps for {} inputs", steps.len(), inputs.len())).into());
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64, AutogradError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(AutogradError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var)?;
        let epsilon = steps[which];
        for coord in 0..inputs[which].len() {
            let original = inputs[which].data()[coord];
            let mut at = |offset: f64| -> Result<f64, AutogradError> {
                probe[which].data_mut()[coord] = original + offset;
                eval(&probe)
            };
            let (p1, m1) = (at(epsilon)?, at(-epsilon)?);
            let (p2, m2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
            probe[which].data_mut()[coord] = original;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
            let a = analytic.data()[coord];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn linear_map_gradient_is_input() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
        let x = g.constant(t(&[1, 2], &[1.5, -2.0]));
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.5, 1.5, 1.5, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x);
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn unreferenced_param_gets_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = g.sum_squares(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0; 3]);
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn rejects_non_scalar_and_foreign_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(AutogradError::NonScalarLoss(_))));
        let mut other = Graph::<f64>::new();
        let y = other.param(t(&[1], &[1.0]));
        assert!(matches!(g.backward(y), Err(AutogradError::ForeignVar)));
    }

    #[test]
    fn shared_operand_accumulates() {
        // loss = sum(x * x) -> 2x
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn record_order_is_execution_order() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2], &[1.0, 2.0]));
        let s = g.sigmoid(x);
        let th = g.tanh(s);
        let _ = g.sum(th);
        assert_eq!(g.op_names(), vec!["leaf", "activation", "activation", "sum"]);
    }

    #[test]
    fn rmse_of_identical_is_zero_with_zero_grad() {
        let mut g = Graph::<f64>::new();
        let target = t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        let p = g.param(target.clone());
        let l = g.rmse(p, &target).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(p).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
