//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Handles ([`Var`]) are plain indices, so the tape owns all storage and a
//! forward pass is just a sequence of `tape.op(..)` calls. Nodes are appended
//! in evaluation order, which makes the node list a valid topological order;
//! [`Tape::backward`] walks it once in reverse.
//!
//! Broadcasting is limited to a one-element operand against a tensor of any
//! shape. Row-wise bias addition is expressed as `ones[B×1] · b[1×n]`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shaped row-major array of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_elem(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::from_elem(shape, S::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::from_elem(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Element `(i, j)` of a matrix.
    pub fn at(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log,
    Neg,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Reduce(ReduceOp, Var, Option<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
}

/// Recorded computation graph. One tape per worker; rebuild per step.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], p: usize, q: usize, r: usize) -> Vec<S> {
    let mut c = vec![S::zero(); p * r];
    for i in 0..p {
        let row = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == S::zero() {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (cj, &bkj) in row.iter_mut().zip(brow) {
                *cj += aik * bkj;
            }
        }
    }
    c
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input. Receives a gradient from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, value: S) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Matrix product of `[p×q]` and `[q×r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.value(a).data, &self.value(b).data, p, q, r);
        Ok(self.push(
            Tensor {
                shape: vec![p, r],
                data,
            },
            Op::MatMul(a, b),
        ))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: S, y: S| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
        };
        let out = if ta.shape == tb.shape {
            Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else if tb.len() == 1 {
            let y = tb.data[0];
            ta.map(|x| f(x, y))
        } else if ta.len() == 1 {
            let x = ta.data[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::Dimension {
                op: "elementwise",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        };
        Ok(self.push(out, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `a * c` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let k = self.constant_scalar(c);
        self.binary(BinaryOp::Mul, a, k)
            .expect("scalar broadcast is always shape-compatible")
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: S) -> Var {
        let k = self.constant_scalar(c);
        self.binary(BinaryOp::Add, a, k)
            .expect("scalar broadcast is always shape-compatible")
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if op == UnaryOp::Log {
            if let Some(i) = ta.data.iter().position(|&x| !(x > S::zero())) {
                return Err(Error::Domain {
                    op: "log",
                    index: i,
                    value: ta.data[i].to_f64_lossy(),
                });
            }
        }
        let out = match op {
            UnaryOp::Sigmoid => ta.map(S::sigmoid),
            UnaryOp::Tanh => ta.map(S::tanh),
            UnaryOp::Relu => ta.map(|x| x.max(S::zero())),
            UnaryOp::Softplus => ta.map(S::softplus),
            UnaryOp::Exp => ta.map(S::exp),
            UnaryOp::Log => ta.map(S::ln),
            UnaryOp::Neg => ta.map(|x| -x),
            UnaryOp::Abs => ta.map(S::abs),
        };
        Ok(self.push(out, Op::Unary(op, a)))
    }

    fn unary_total(&mut self, op: UnaryOp, a: Var) -> Var {
        self.unary(op, a).expect("total on all inputs")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary_total(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary_total(UnaryOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary_total(UnaryOp::Relu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary_total(UnaryOp::Softplus, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary_total(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary_total(UnaryOp::Neg, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary_total(UnaryOp::Abs, a)
    }

    /// Sum or mean over one axis (which is removed) or over all elements.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let ta = self.value(a);
        let out = match axis {
            None => {
                if op == ReduceOp::Mean && ta.is_empty() {
                    return Err(Error::Degenerate("mean of an empty tensor".into()));
                }
                let s: S = ta.data.iter().copied().sum();
                let v = match op {
                    ReduceOp::Sum => s,
                    ReduceOp::Mean => s / S::from_usize(ta.len()).unwrap(),
                };
                Tensor::scalar(v)
            }
            Some(ax) => {
                if ax >= ta.shape.len() {
                    return Err(Error::Dimension {
                        op: "reduce",
                        lhs: ta.shape.clone(),
                        rhs: vec![ax],
                    });
                }
                let (outer, n, inner) = split_axis(&ta.shape, ax);
                if op == ReduceOp::Mean && n == 0 {
                    return Err(Error::Degenerate("mean over an empty axis".into()));
                }
                let mut data = vec![S::zero(); outer * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let src = &ta.data[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (d, &x) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    let denom = S::from_usize(n).unwrap();
                    data.iter_mut().for_each(|d| *d /= denom);
                }
                let mut shape = ta.shape.clone();
                shape.remove(ax);
                Tensor { shape, data }
            }
        };
        Ok(self.push(out, Op::Reduce(op, a, axis)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Sum, a, None).expect("sum is total")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, None)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Degenerate("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec(), axis)))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.shape.len() || start + len > ta.shape[axis] {
            return Err(Error::Dimension {
                op: "slice",
                lhs: ta.shape.clone(),
                rhs: vec![axis, start, len],
            });
        }
        let (outer, n, inner) = split_axis(&ta.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            data.extend_from_slice(&ta.data[from..from + len * inner]);
        }
        let mut shape = ta.shape.clone();
        shape[axis] = len;
        Ok(self.push(Tensor { shape, data }, Op::Slice { input: a, axis, start }))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (p, q, r) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    // dA = dC · Bᵀ
                    let mut da = vec![S::zero(); p * q];
                    for i in 0..p {
                        for k in 0..q {
                            let mut s = S::zero();
                            for j in 0..r {
                                s += g[i * r + j] * tb.data[k * r + j];
                            }
                            da[i * q + k] = s;
                        }
                    }
                    // dB = Aᵀ · dC
                    let mut db = vec![S::zero(); q * r];
                    for i in 0..p {
                        for k in 0..q {
                            let aik = ta.data[i * q + k];
                            if aik == S::zero() {
                                continue;
                            }
                            for j in 0..r {
                                db[k * r + j] += aik * g[i * r + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Binary(op, a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let n = g.len();
                    let at = |k: usize| if ta.len() == 1 { ta.data[0] } else { ta.data[k] };
                    let bt = |k: usize| if tb.len() == 1 { tb.data[0] } else { tb.data[k] };
                    let (ga, gb): (Vec<S>, Vec<S>) = match op {
                        BinaryOp::Add => (g.clone(), g),
                        BinaryOp::Sub => (g.clone(), g.iter().map(|&x| -x).collect()),
                        BinaryOp::Mul => (
                            (0..n).map(|k| g[k] * bt(k)).collect(),
                            (0..n).map(|k| g[k] * at(k)).collect(),
                        ),
                    };
                    accumulate(&mut grads, *a, reduce_broadcast(ga, ta.len()));
                    accumulate(&mut grads, *b, reduce_broadcast(gb, tb.len()));
                }
                Op::Unary(op, a) => {
                    let x = &self.value(*a).data;
                    let y = &node.value.data;
                    let zero = S::zero();
                    let one = S::one();
                    let d: Vec<S> = g
                        .iter()
                        .enumerate()
                        .map(|(k, &gk)| {
                            let local = match op {
                                UnaryOp::Sigmoid => y[k] * (one - y[k]),
                                UnaryOp::Tanh => one - y[k] * y[k],
                                UnaryOp::Relu => {
                                    if x[k] > zero {
                                        one
                                    } else {
                                        zero
                                    }
                                }
                                UnaryOp::Softplus => x[k].sigmoid(),
                                UnaryOp::Exp => y[k],
                                UnaryOp::Log => one / x[k],
                                UnaryOp::Neg => -one,
                                UnaryOp::Abs => {
                                    if x[k] > zero {
                                        one
                                    } else if x[k] < zero {
                                        -one
                                    } else {
                                        zero
                                    }
                                }
                            };
                            gk * local
                        })
                        .collect();
                    accumulate(&mut grads, *a, d);
                }
                Op::Reduce(op, a, axis) => {
                    let ta = self.value(*a);
                    let d = match axis {
                        None => {
                            let v = match op {
                                ReduceOp::Sum => g[0],
                                ReduceOp::Mean => g[0] / S::from_usize(ta.len()).unwrap(),
                            };
                            vec![v; ta.len()]
                        }
                        Some(ax) => {
                            let (outer, n, inner) = split_axis(&ta.shape, *ax);
                            let scale = match op {
                                ReduceOp::Sum => S::one(),
                                ReduceOp::Mean => S::one() / S::from_usize(n).unwrap(),
                            };
                            let mut d = vec![S::zero(); ta.len()];
                            for o in 0..outer {
                                for k in 0..n {
                                    for j in 0..inner {
                                        d[(o * n + k) * inner + j] = g[o * inner + j] * scale;
                                    }
                                }
                            }
                            d
                        }
                    };
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat(parts, axis) => {
                    let (outer, total, inner) = split_axis(&node.value.shape, *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.shape(p)[*axis];
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            d.extend_from_slice(&g[from..from + len * inner]);
                        }
                        accumulate(&mut grads, p, d);
                        offset += len;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let ti = self.value(*input);
                    let (outer, n, inner) = split_axis(&ti.shape, *axis);
                    let len = node.value.shape[*axis];
                    let mut d = vec![S::zero(); ti.len()];
                    for o in 0..outer {
                        let from = (o * n + start) * inner;
                        d[from..from + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut grads, *input, d);
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf => Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g.unwrap_or_else(|| vec![S::zero(); node.value.len()]),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, d: Vec<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(d),
    }
}

fn reduce_broadcast<S: Scalar>(g: Vec<S>, target_len: usize) -> Vec<S> {
    if target_len == 1 && g.len() != 1 {
        vec![g.into_iter().sum()]
    } else {
        g
    }
}

/// Gradients of a scalar loss with respect to every leaf on the tape.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a leaf; `None` for constants and intermediate nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a leaf. Panics if `v` is not a leaf.
    pub fn wrt(&self, v: Var) -> &Tensor<S> {
        self.get(v).expect("gradient requested for a non-leaf node")
    }
}

/// Compares autodiff gradients against central differences.
///
/// `build` must construct a scalar loss from the supplied leaves and be
/// deterministic. Returns the maximum over every leaf entry of
/// `|autodiff - fd| / max(1e-8, |fd|)`.
pub fn grad_check<S, F>(build: F, leaves: &[Tensor<S>], eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<S>]| -> Result<(Tape<S>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = eval(leaves)?;
    let grads = tape.backward(loss)?;

    let floor = S::lit(1e-8);
    let two_eps = eps + eps;
    let mut worst = S::zero();
    let mut probe = leaves.to_vec();
    for (li, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(var);
        for k in 0..leaves[li].len() {
            let orig = leaves[li].data[k];
            probe[li].data[k] = orig + eps;
            let (t, _, l) = eval(&probe)?;
            let up = t.value(l).item();
            probe[li].data[k] = orig - eps;
            let (t, _, l) = eval(&probe)?;
            let down = t.value(l).item();
            probe[li].data[k] = orig;

            let fd = (up - down) / two_eps;
            let err = (analytic.data[k] - fd).abs() / fd.abs().max(floor);
            if err > worst || err.is_nan() {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>())
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let b = random(&mut rng, &[3, 3]);
        let i = tape.constant(Tensor::identity(3));
        let bv = tape.constant(b.clone());
        let c = tape.matmul(i, bv).unwrap();
        assert_eq!(tape.value(c), &b);

        let x = tape.constant(t(&[1, 1], &[2.0]));
        let y = tape.constant(t(&[1, 1], &[3.0]));
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z).data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, &[4, 5]);
        let b = random(&mut rng, &[5, 3]);
        let mut expect = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                for k in 0..5 {
                    expect[i * 3 + j] += a.at(i, k) * b.at(k, j);
                }
            }
        }
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let c = tape.matmul(av, bv).unwrap();
        for (x, y) in tape.value(c).data().iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let z = tape.constant(Tensor::zeros(vec![3]));
        let o = tape.constant(Tensor::ones(vec![3]));
        let a = tape.add(x, z).unwrap();
        let m = tape.mul(x, o).unwrap();
        let p = tape.mul(x, y).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(tape.value(m).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(tape.value(p).data(), &[4.0, 10.0, 18.0]);

        let w = tape.constant(Tensor::zeros(vec![2]));
        assert!(matches!(tape.add(x, w), Err(Error::Dimension { .. })));
    }

    #[test]
    fn unary_values() {
        let mut tape = Tape::new();
        let zero = tape.constant_scalar(0.0);
        let minus = tape.constant_scalar(-1.0);
        let s = tape.sigmoid(zero);
        let sp = tape.softplus(zero);
        let r = tape.relu(minus);
        assert_eq!(tape.value(s).item(), 0.5);
        assert!((tape.value(sp).item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(tape.value(r).item(), 0.0);
    }

    #[test]
    fn log_rejects_nonpositive_with_index() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 0.0, 2.0]));
        match tape.log(x) {
            Err(Error::Domain { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn relu_and_abs_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let r = tape.relu(x);
        let a = tape.abs(x);
        let s = tape.add(r, a).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).item(), 0.0);
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        assert_eq!(tape.value(s).item(), 6.0);

        let ones = tape.constant(Tensor::ones(vec![4, 4]));
        let m = tape.mean(ones).unwrap();
        assert_eq!(tape.value(m).item(), 1.0);

        let g = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.reduce(ReduceOp::Sum, g, Some(0)).unwrap();
        assert_eq!(tape.value(c).shape(), &[2]);
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);

        let empty = tape.constant(Tensor::zeros(vec![0]));
        assert!(matches!(tape.mean(empty), Err(Error::Degenerate(_))));
        assert!(tape.reduce(ReduceOp::Sum, g, Some(2)).is_err());
    }

    #[test]
    fn concat_and_slice() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1], &[1.0]));
        let b = tape.constant(t(&[1, 1], &[2.0]));
        let single = tape.concat(&[a], 0).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[3, 2]);
        let y = random(&mut rng, &[3, 4]);
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let xy = tape.concat(&[xv, yv], 1).unwrap();
        let x2 = tape.slice(xy, 1, 0, 2).unwrap();
        let y2 = tape.slice(xy, 1, 2, 4).unwrap();
        assert_eq!(tape.value(x2), &x);
        assert_eq!(tape.value(y2), &y);

        let bad = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(matches!(tape.concat(&[xv, bad], 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x), &Tensor::ones(vec![2, 3]));

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zeroes_unreachable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]));
        let unused = tape.leaf(Tensor::ones(vec![3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused), &Tensor::zeros(vec![3]));
    }

    #[test]
    fn leaf_used_twice_accumulates() {
        // f(x) = sum(x ⊙ w) + sum(x ⊙ w) equals the duplicated-leaf graph
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xv = random(&mut rng, &[5]);
        let wv = random(&mut rng, &[5]);

        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone());
        let w = tape.constant(wv.clone());
        let a = tape.mul(x, w).unwrap();
        let b = tape.mul(x, w).unwrap();
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s);
        let shared = tape.backward(l).unwrap().wrt(x).clone();

        let mut tape = Tape::new();
        let x1 = tape.leaf(xv.clone());
        let x2 = tape.leaf(xv);
        let w = tape.constant(wv);
        let a = tape.mul(x1, w).unwrap();
        let b = tape.mul(x2, w).unwrap();
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        let summed: Vec<f64> = g
            .wrt(x1)
            .data()
            .iter()
            .zip(g.wrt(x2).data())
            .map(|(p, q)| p + q)
            .collect();
        assert_eq!(shared.data(), &summed[..]);
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[4, 3]);
        let err = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn grad_check_sigmoid_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, &[6]);
        let err = grad_check(
            |tape, v| {
                // gain 4 keeps each layer's derivative near 1 so the
                // product does not vanish below difference roundoff
                let mut h = v[0];
                for _ in 0..10 {
                    let a = tape.scale(h, 4.0);
                    let a = tape.offset(a, -2.0);
                    h = tape.sigmoid(a);
                }
                Ok(tape.sum(h))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn grad_check_constant_function() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![3]));
        let c = tape.constant_scalar(4.0);
        let zero = tape.scale(x, 0.0);
        let s = tape.sum(zero);
        let l = tape.add(s, c).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
    }

    /// Every differentiable op against central differences on inputs in (-2, 2).
    #[test]
    fn every_op_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..5 {
            let a = random(&mut rng, &[3, 4]);
            let b = random(&mut rng, &[4, 2]);
            let c = random(&mut rng, &[3, 4]);
            let k = random(&mut rng, &[1]);
            let pos = a.map(|x| x.abs() + 0.5);
            let err = grad_check(
                |tape, v| {
                    let m = tape.matmul(v[0], v[1])?;
                    let add = tape.add(v[0], v[2])?;
                    let sub = tape.sub(v[0], v[2])?;
                    let mul = tape.mul(add, sub)?;
                    let bc = tape.mul(mul, v[3])?;
                    let mut terms = vec![tape.sum(m), tape.sum(bc)];
                    for op in [
                        UnaryOp::Sigmoid,
                        UnaryOp::Tanh,
                        UnaryOp::Relu,
                        UnaryOp::Softplus,
                        UnaryOp::Exp,
                        UnaryOp::Neg,
                        UnaryOp::Abs,
                    ] {
                        let u = tape.unary(op, v[2])?;
                        let w = tape.mul(u, v[0])?;
                        terms.push(tape.sum(w));
                    }
                    let lg = tape.log(v[4])?;
                    terms.push(tape.sum(lg));
                    let r0 = tape.reduce(ReduceOp::Mean, v[0], Some(0))?;
                    let r1 = tape.reduce(ReduceOp::Sum, v[2], Some(1))?;
                    let cat = tape.concat(&[v[0], v[2]], 1)?;
                    let sl = tape.slice(cat, 1, 2, 4)?;
                    let sq = tape.mul(sl, sl)?;
                    let r0sq = tape.mul(r0, r0)?;
                    let r1sq = tape.mul(r1, r1)?;
                    terms.extend([tape.sum(sq), tape.sum(r0sq), tape.sum(r1sq)]);
                    let mut total = terms[0];
                    for &t in &terms[1..] {
                        total = tape.add(total, t)?;
                    }
                    Ok(total)
                },
                &[a, b, c, k, pos],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "trial {trial}: err {err}");
        }
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&mut rng, &[3, 3]);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(a.clone());
            let y = tape.matmul(x, x).unwrap();
            let z = tape.tanh(y);
            let l = tape.sum(z);
            let g = tape.backward(l).unwrap();
            (tape.value(l).item().to_bits(), g.wrt(x).clone())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert!(g1.data().iter().zip(g2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
