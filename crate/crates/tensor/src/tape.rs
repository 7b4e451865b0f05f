use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::{split_axis, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Softmax(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Gelu(Var),
    Sigmoid(Var),
    L1(Var, Var),
    NormalizeRows(Var),
    BceWithLogits(Var, Tensor<T>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Ordered record of tensor operations supporting reverse-mode gradients.
///
/// Every node's parents have smaller indices than the node itself, so
/// [`Tape::backward`] is a single reverse pass. Leaf gradients accumulate
/// across calls until [`Tape::zero_grad`].
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that collects gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never collects gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        let rank = self.shape(v).len();
        if axis >= rank {
            return Err(TensorError::Axis { op, axis, rank });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(va.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a, b])
    }

    fn unary(&mut self, op: Op<T>, a: Var, f: impl Fn(T) -> T) -> Var {
        let value = self.nodes[a.0].value.map(f);
        self.push(value, op, &[a])
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip_with(Op::Div(a, b), a, b, |x, y| x / y))
    }

    /// Adds a bias vector of the last-axis extent to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(bias).to_vec();
        let n = sb.iter().product::<usize>();
        if sa.is_empty() || sa[sa.len() - 1] != n || sb.iter().filter(|&&d| d != 1).count() > 1 {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sb,
            });
        }
        let bv = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(&bv) {
                *x = *x + b;
            }
        }
        let value = Tensor::from_vec(sa, data)?;
        Ok(self.push(value, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(Op::Scale(a, s), a, |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(Op::AddScalar(a), a, |x| x + s)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let data = kernels::transpose(self.value(a).data(), r, c);
        let value = Tensor::from_vec(vec![c, r], data)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_vec(shape.to_vec(), self.value(a).data().to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of(v.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(if mean { "mean_axis" } else { "sum_axis" }, a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        if mean {
            let d = T::of(len as f64);
            out.iter_mut().for_each(|v| *v = *v / d);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let value = Tensor::from_vec(oshape, out)?;
        let op = if mean {
            Op::MeanAxis(a, axis)
        } else {
            Op::SumAxis(a, axis)
        };
        Ok(self.push(value, op, &[a]))
    }

    /// Sums over one axis, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut oshape = base.clone();
        oshape[axis] = total;
        let (outer, _, inner) = split_axis(&oshape, axis);
        let mut out = Vec::with_capacity(oshape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::from_vec(oshape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let shape = self.shape(a).to_vec();
        if start + len > shape[axis] {
            return Err(TensorError::Contract(format!(
                "slice {start}..{} out of bounds for axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * ext + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let value = Tensor::from_vec(oshape, out)?;
        Ok(self.push(value, Op::Slice { src: a, axis, start }, &[a]))
    }

    /// Softmax along `axis`, stabilized by subtracting the running maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.value(a).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut max = T::neg_infinity();
                for l in 0..len {
                    max = max.max(out[at(l)]);
                }
                let mut total = T::zero();
                for l in 0..len {
                    let e = (out[at(l)] - max).exp();
                    out[at(l)] = e;
                    total = total + e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / total;
                }
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(value, Op::Softmax(a, axis), &[a]))
    }

    /// Normalizes over the last axis (population variance), then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: shape.clone(),
        })?;
        for p in [gamma, beta] {
            if self.value(p).len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::of(eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let (mean, inv_std) = row_stats(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[j] + b[j];
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            &[x, gamma, beta],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Op::Gelu(a), a, |x| {
            let k = T::of(GELU_K);
            let c = T::of(GELU_C);
            let half = T::of(0.5);
            half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    /// Mean absolute difference, as a rank-0 tensor.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1", a, b)?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let s: T = va.iter().zip(vb).map(|(&x, &y)| (x - y).abs()).sum();
        let value = Tensor::scalar(s / T::of(va.len() as f64));
        Ok(self.push(value, Op::L1(a, b), &[a, b]))
    }

    /// Scales each row of a rank-2 tensor to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.value(a).dims2("normalize_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            let inv = T::one() / row_norm(row);
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
        let value = Tensor::from_vec(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::NormalizeRows(a), &[a]))
    }

    /// Elementwise binary cross entropy of `sigmoid(logits)` against
    /// `targets`, computed in the overflow-free logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let s = self.value(logits);
        let data = s
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let value = Tensor::from_vec(s.shape().to_vec(), data)?;
        Ok(self.push(value, Op::BceWithLogits(logits, targets.clone()), &[logits]))
    }

    /// Reverse pass from a one-element `loss`, accumulating into the
    /// gradients of every reachable leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                op => self.backward_op(op, &node.value, &g, &mut grads),
            }
        }
        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, &d)| *a = *a + d),
                None => node.grad = Some(Tensor::from_vec(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], to: Var, contribution: Vec<T>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc
                .iter_mut()
                .zip(&contribution)
                .for_each(|(a, &d)| *a = *a + d),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: &Var| self.nodes[v.0].value.data();
        match op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2("matmul").expect("rank 2");
                let n = out.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(g, val(b), &mut da, m, n, k);
                    self.send(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(val(a), g, &mut db, m, k, n);
                    self.send(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.iter().map(|&d| -d).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                if self.wants(*a) {
                    self.send(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.wants(*b) {
                    self.send(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                if self.wants(*a) {
                    self.send(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d / y).collect());
                }
                if self.wants(*b) {
                    let db = g
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(&d, (&x, &y))| -d * x / (y * y))
                        .collect();
                    self.send(grads, *b, db);
                }
            }
            Op::AddRow(a, bias) => {
                self.send(grads, *a, g.to_vec());
                if self.wants(*bias) {
                    let n = self.nodes[bias.0].value.len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(s, &d)| *s = *s + d);
                    }
                    self.send(grads, *bias, db);
                }
            }
            Op::Scale(a, s) => self.send(grads, *a, g.iter().map(|&d| d * *s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.send(grads, *a, g.to_vec()),
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                self.send(grads, *a, kernels::transpose(g, r, c));
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                self.send(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                self.send(grads, *a, vec![g[0] / T::of(n as f64); n]);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let shape = self.nodes[a.0].value.shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let scale = match op {
                    Op::MeanAxis(..) => T::one() / T::of(len as f64),
                    _ => T::one(),
                };
                let mut da = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            da[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                self.send(grads, *a, da);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let total = out.shape()[*axis] * inner;
                for p in parts {
                    let block = self.nodes[p.0].value.shape()[*axis] * inner;
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let from = o * total + offset;
                            dp.extend_from_slice(&g[from..from + block]);
                        }
                        self.send(grads, *p, dp);
                    }
                    offset += block;
                }
            }
            Op::Slice { src, axis, start } => {
                let shape = self.nodes[src.0].value.shape();
                let (outer, ext, inner) = split_axis(shape, *axis);
                let len = out.shape()[*axis];
                let mut ds = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    let to = (o * ext + start) * inner;
                    let from = o * len * inner;
                    ds[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                }
                self.send(grads, *src, ds);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut da = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let mut dot = T::zero();
                        for l in 0..len {
                            dot = dot + g[at(l)] * y[at(l)];
                        }
                        for l in 0..len {
                            da[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                self.send(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = val(x);
                let gv = val(gamma);
                let n = gv.len();
                let nf = T::of(n as f64);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let mut xhat = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                for (r, (row, grow)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                    let (mean, inv_std) = row_stats(row, *eps);
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * inv_std;
                        dxhat[j] = grow[j] * gv[j];
                        dgamma[j] = dgamma[j] + grow[j] * xhat[j];
                        dbeta[j] = dbeta[j] + grow[j];
                        mean_dxhat = mean_dxhat + dxhat[j];
                        mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xhat[j];
                    }
                    mean_dxhat = mean_dxhat / nf;
                    mean_dxhat_xhat = mean_dxhat_xhat / nf;
                    let drow = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        drow[j] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.send(grads, *x, dx);
                self.send(grads, *gamma, dgamma);
                self.send(grads, *beta, dbeta);
            }
            Op::Gelu(a) => {
                let k = T::of(GELU_K);
                let c = T::of(GELU_C);
                let half = T::of(0.5);
                let three_c = T::of(3.0 * GELU_C);
                let da = g
                    .iter()
                    .zip(val(a))
                    .map(|(&d, &x)| {
                        let t = (k * (x + c * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * k * (T::one() + three_c * x * x);
                        d * (half * (T::one() + t) + half * x * dt)
                    })
                    .collect();
                self.send(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = g
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &y)| d * y * (T::one() - y))
                    .collect();
                self.send(grads, *a, da);
            }
            Op::L1(a, b) => {
                let (va, vb) = (val(a), val(b));
                let scale = g[0] / T::of(va.len() as f64);
                let da: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .map(|(&x, &y)| {
                        let diff = x - y;
                        if diff > T::zero() {
                            scale
                        } else if diff < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.wants(*b) {
                    self.send(grads, *b, da.iter().map(|&d| -d).collect());
                }
                self.send(grads, *a, da);
            }
            Op::NormalizeRows(a) => {
                let xv = val(a);
                let c = out.shape()[1];
                let mut da = vec![T::zero(); xv.len()];
                for (r, ((xrow, yrow), grow)) in xv
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(g.chunks(c))
                    .enumerate()
                {
                    let norm = row_norm(xrow);
                    let yg = kernels::dot(yrow, grow);
                    for j in 0..c {
                        da[r * c + j] = (grow[j] - yrow[j] * yg) / norm;
                    }
                }
                self.send(grads, *a, da);
            }
            Op::BceWithLogits(a, targets) => {
                let da = g
                    .iter()
                    .zip(val(a).iter().zip(targets.data()))
                    .map(|(&d, (&x, &t))| d * (sigmoid(x) - t))
                    .collect();
                self.send(grads, *a, da);
            }
        }
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn row_stats<T: Element>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn row_norm<T: Element>(row: &[T]) -> T {
    kernels::dot(row, row).sqrt().max(T::of(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_gradient_of_sum() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(a, b).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::from_vec(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let out = tape.value(y).data();
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-6 && out[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_bad_axis() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.softmax(x, 2),
            Err(TensorError::Axis { axis: 2, rank: 2, .. })
        ));
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4);

        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[1, 3], &[7.0, 7.0, 7.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l1_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.5, -2.0]));
        let d = tape.l1(x, x).unwrap();
        assert_eq!(tape.value(d).item().unwrap(), 0.0);
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let b = tape.constant(t(&[2], &[1.0, 3.0]));
        let d = tape.l1(a, b).unwrap();
        assert_eq!(tape.value(d).item().unwrap(), 2.0);
    }

    #[test]
    fn backward_sum_gives_ones_and_square_gives_2x() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(vec![2]))
        );
    }

    #[test]
    fn constants_never_collect_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.param(Tensor::from_fn(&[2, 2], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        assert_eq!(
            tape.value(c).data(),
            &[0.0, 1.0, 2.0, 10.0, 11.0, 3.0, 4.0, 5.0, 12.0, 13.0]
        );
        let back = tape.slice(c, 1, 3, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(b).data());
    }

    #[test]
    fn add_row_broadcasts_bias() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[3, 2]));
        let b = tape.param(t(&[2], &[1.0, -1.0]));
        let y = tape.add_row(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[3.0, 3.0]);
    }
}
