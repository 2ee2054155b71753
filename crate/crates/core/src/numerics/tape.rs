//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! record in exact reverse order and accumulates gradients additively, so a
//! value consumed by several ops receives the sum of their contributions.

use super::gemm::{gemm, Layout};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
        shared_rhs: bool,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Expand(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Abs(Var),
    Powf {
        a: Var,
        e: T,
    },
    Clamp {
        a: Var,
        lo: T,
        hi: T,
    },
    SoftmaxLast(Var),
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    IndexRows {
        a: Var,
        idx: Vec<usize>,
    },
    SliceLast {
        a: Var,
        start: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitives and their outputs.
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require grad or does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps every flat output index of a permutation to its flat input index.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(&out_shape);
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(offset);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            offset += mapped[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= mapped[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    out
}

/// Flat source index for each output element of an explicit broadcast.
fn expand_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let mapped: Vec<usize> = in_shape
        .iter()
        .zip(&in_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(offset);
        for ax in (0..out_shape.len()).rev() {
            counter[ax] += 1;
            offset += mapped[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= mapped[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    out
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<T: Scalar> Tape<T> {
    /// New tape. Non-finite detection follows the build: on with debug assertions.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape consistent")
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.check_finite && value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf; it participates in differentiation iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.is_requires_grad(),
        )
    }

    /// Records a differentiable leaf from raw values.
    pub fn param(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        check_len("param", &shape, &data)?;
        self.push("param", shape, data, Op::Leaf, true)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let shape = shape.into();
        check_len("constant", &shape, &data)?;
        self.push("constant", shape, data, Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n = numel(&shape);
        self.constant(shape, vec![T::zero(); n])
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push("detach", shape, value, Op::Leaf, false)
    }

    /// Matrix product over the last two axes, batched over leading axes.
    /// The right operand may be a plain matrix shared by every batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(err());
        }
        let batch = numel(lead);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); batch * n * m];
        // a shared right operand lets the whole batch run as one product
        let (groups, rows) = if shared_rhs { (1, batch * n) } else { (batch, n) };
        for bi in 0..groups {
            let bo = if shared_rhs { bv } else { &bv[bi * k * m..(bi + 1) * k * m] };
            gemm(
                rows,
                k,
                m,
                &av[bi * rows * k..(bi + 1) * rows * k],
                Layout::row_major(k),
                bo,
                Layout::row_major(m),
                &mut out[bi * rows * m..(bi + 1) * rows * m],
                Layout::row_major(m),
                false,
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([n, m]);
        let rg = self.rg(&[a, b]);
        self.push(
            "matmul",
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                shared_rhs,
            },
            rg,
        )
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension {
                op: "permute",
                msg: format!("invalid permutation {:?} for shape {:?}", perm, s),
            });
        }
        let map = permute_map(&s, perm);
        let av = self.value(a);
        let out: Vec<T> = map.iter().map(|&i| av[i]).collect();
        let shape = perm.iter().map(|&p| s[p]).collect();
        let rg = self.rg(&[a]);
        self.push(
            "permute",
            shape,
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Dimension {
                op: "transpose",
                msg: format!("rank {} < 2", r),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let v = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("reshape", shape, v, Op::Reshape(a), rg)
    }

    /// Explicit broadcast: size-1 axes of `a` are repeated to match `shape`.
    pub fn expand(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let s = self.shape(a).to_vec();
        if s.len() != shape.len() || s.iter().zip(&shape).any(|(&x, &y)| x != y && x != 1) {
            return Err(Error::Shape {
                op: "expand",
                lhs: s,
                rhs: shape,
            });
        }
        let map = expand_map(&s, &shape);
        let av = self.value(a);
        let out: Vec<T> = map.iter().map(|&i| av[i]).collect();
        let rg = self.rg(&[a]);
        self.push("expand", shape, out, Op::Expand(a), rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(name, shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    /// Adds a vector of the last-axis length to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap_or(&0);
        if self.value(row).len() != d || self.shape(row).len() != 1 {
            return Err(Error::Shape {
                op: "add_row",
                lhs: s,
                rhs: self.shape(row).to_vec(),
            });
        }
        let rv = self.value(row);
        let out: Vec<T> = self
            .value(a)
            .chunks(d.max(1))
            .flat_map(|c| c.iter().zip(rv).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(&[a, row]);
        self.push("add_row", s, out, Op::AddRow { a, row }, rg)
    }

    /// `a @ w + b` for a weight `[in, out]` and bias `[out]`.
    pub fn affine(&mut self, a: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(a, w)?;
        self.add_row(y, b)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out: Vec<T> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(name, shape, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale { a, c })
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.ln(), Op::Log(a))
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("log_sigmoid", a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.abs(), Op::Abs(a))
    }

    /// `a^e` for nonnegative `a`.
    pub fn powf(&mut self, a: Var, e: T) -> Result<Var> {
        self.unary("powf", a, |x| x.powf(e), Op::Powf { a, e })
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input lies inside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary("clamp", a, |x| x.max(lo).min(hi), Op::Clamp { a, lo, hi })
    }

    /// Softmax over the last axis, stabilized by max-subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::Dimension {
                op: "softmax_last",
                msg: "empty last axis".into(),
            });
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let rg = self.rg(&[a]);
        self.push("softmax_last", s, out, Op::SoftmaxLast(a), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap_or(&0);
        if d == 0 || self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: s,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::lit(1e-5);
        let dn = T::from_usize(d).unwrap();
        let x = self.value(a);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = x.len() / d;
        let mut xhat = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[a, gamma, beta]);
        self.push(
            "layer_norm",
            s,
            out,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push("sum", vec![1], vec![v], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Dimension {
                op: "mean",
                msg: "mean of empty tensor".into(),
            });
        }
        let v = self.value(a).iter().copied().sum::<T>() / T::from_usize(n).unwrap();
        let rg = self.rg(&[a]);
        self.push("mean", vec![1], vec![v], Op::Mean(a), rg)
    }

    /// Sums over the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let mut s = self.shape(a).to_vec();
        let d = *s.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::Dimension {
                op: "sum_last",
                msg: "empty last axis".into(),
            });
        }
        let out: Vec<T> = self.value(a).chunks(d).map(|c| c.iter().copied().sum()).collect();
        *s.last_mut().unwrap() = 1;
        let rg = self.rg(&[a]);
        self.push("sum_last", s, out, Op::SumLast(a), rg)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Dimension {
            op: "concat",
            msg: "no operands".into(),
        })?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::Dimension {
                op: "concat",
                msg: format!("axis {} out of range for {:?}", axis, s0),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len()
                || s.iter()
                    .zip(&s0)
                    .enumerate()
                    .any(|(i, (&x, &y))| i != axis && x != y)
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer = numel(&s0[..axis]);
        let inner = numel(&s0[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Gathers entries along the first axis; indices may repeat.
    pub fn index_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let rows = *s.first().unwrap_or(&0);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension {
                op: "index_rows",
                msg: format!("index {} out of range for {} rows", bad, rows),
            });
        }
        let inner = numel(&s[1..]);
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&av[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let rg = self.rg(&[a]);
        self.push(
            "index_rows",
            shape,
            out,
            Op::IndexRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let mut s = self.shape(a).to_vec();
        let d = *s.last().unwrap_or(&0);
        if start + len > d {
            return Err(Error::Dimension {
                op: "slice_last",
                msg: format!("range {}..{} exceeds last extent {}", start, start + len, d),
            });
        }
        let out: Vec<T> = self
            .value(a)
            .chunks(d.max(1))
            .flat_map(|c| c[start..start + len].iter().copied())
            .collect();
        *s.last_mut().unwrap() = len;
        let rg = self.rg(&[a]);
        self.push("slice_last", s, out, Op::SliceLast { a, start }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], len: usize, v: Var, f: impl FnOnce(&mut [T])) {
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(buf);
        }
        let len_of = |v: Var| nodes[v.0].value.len();
        let val = |v: Var| &nodes[v.0].value[..];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                shared_rhs,
            } => {
                let (a, b, batch, n, k, m) = (*a, *b, *batch, *n, *k, *m);
                let av = val(a);
                let bv = val(b);
                let (groups, rows) = if *shared_rhs { (1, batch * n) } else { (batch, n) };
                if want(a) {
                    acc(grads, len_of(a), a, |ga| {
                        for bi in 0..groups {
                            let bo = if *shared_rhs { bv } else { &bv[bi * k * m..(bi + 1) * k * m] };
                            gemm(
                                rows,
                                m,
                                k,
                                &g[bi * rows * m..(bi + 1) * rows * m],
                                Layout::row_major(m),
                                bo,
                                Layout::transposed(m),
                                &mut ga[bi * rows * k..(bi + 1) * rows * k],
                                Layout::row_major(k),
                                true,
                            );
                        }
                    });
                }
                if want(b) {
                    acc(grads, len_of(b), b, |gb| {
                        for bi in 0..groups {
                            let gbo = if *shared_rhs { &mut gb[..] } else { &mut gb[bi * k * m..(bi + 1) * k * m] };
                            gemm(
                                k,
                                rows,
                                m,
                                &av[bi * rows * k..(bi + 1) * rows * k],
                                Layout::transposed(k),
                                &g[bi * rows * m..(bi + 1) * rows * m],
                                Layout::row_major(m),
                                gbo,
                                Layout::row_major(m),
                                true,
                            );
                        }
                    });
                }
            }
            Op::Permute { a, perm } => {
                let map = permute_map(&nodes[a.0].shape, perm);
                acc(grads, len_of(*a), *a, |ga| {
                    for (o, &src) in map.iter().enumerate() {
                        ga[src] += g[o];
                    }
                });
            }
            Op::Reshape(a) => acc(grads, len_of(*a), *a, |ga| add_into(ga, g)),
            Op::Expand(a) => {
                let map = expand_map(&nodes[a.0].shape, &node.shape);
                acc(grads, len_of(*a), *a, |ga| {
                    for (o, &src) in map.iter().enumerate() {
                        ga[src] += g[o];
                    }
                });
            }
            Op::Add(a, b) => {
                if want(*a) {
                    acc(grads, len_of(*a), *a, |ga| add_into(ga, g));
                }
                if want(*b) {
                    acc(grads, len_of(*b), *b, |gb| add_into(gb, g));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(grads, len_of(*a), *a, |ga| add_into(ga, g));
                }
                if want(*b) {
                    acc(grads, len_of(*b), *b, |gb| {
                        for (o, &x) in gb.iter_mut().zip(g) {
                            *o -= x;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if want(*a) {
                    acc(grads, len_of(*a), *a, |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    });
                }
                if want(*b) {
                    acc(grads, len_of(*b), *b, |gb| {
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if want(*a) {
                    acc(grads, len_of(*a), *a, |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] / bv[i];
                        }
                    });
                }
                if want(*b) {
                    acc(grads, len_of(*b), *b, |gb| {
                        for i in 0..g.len() {
                            gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                        }
                    });
                }
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (av, bv) = (val(*a), val(*b));
                let pick_a = |i: usize| if is_max { av[i] >= bv[i] } else { av[i] <= bv[i] };
                if want(*a) {
                    acc(grads, len_of(*a), *a, |ga| {
                        for i in 0..g.len() {
                            if pick_a(i) {
                                ga[i] += g[i];
                            }
                        }
                    });
                }
                if want(*b) {
                    acc(grads, len_of(*b), *b, |gb| {
                        for i in 0..g.len() {
                            if !pick_a(i) {
                                gb[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::AddRow { a, row } => {
                if want(*a) {
                    acc(grads, len_of(*a), *a, |ga| add_into(ga, g));
                }
                if want(*row) {
                    let d = len_of(*row);
                    acc(grads, d, *row, |gr| {
                        for c in g.chunks(d.max(1)) {
                            add_into(gr, c);
                        }
                    });
                }
            }
            Op::Scale { a, c } => acc(grads, len_of(*a), *a, |ga| {
                for (o, &x) in ga.iter_mut().zip(g) {
                    *o += x * *c;
                }
            }),
            Op::AddScalar(a) => acc(grads, len_of(*a), *a, |ga| add_into(ga, g)),
            Op::Relu(a) => {
                let av = val(*a);
                acc(grads, len_of(*a), *a, |ga| {
                    for i in 0..g.len() {
                        if av[i] > T::zero() {
                            ga[i] += g[i];
                        }
                    }
                })
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(grads, len_of(*a), *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (T::one() - y[i]);
                    }
                })
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(grads, len_of(*a), *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                })
            }
            Op::Log(a) => {
                let av = val(*a);
                acc(grads, len_of(*a), *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / av[i];
                    }
                })
            }
            Op::LogSigmoid(a) => {
                let av = val(*a);
                acc(grads, len_of(*a), *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(-av[i]);
                    }
                })
            }
            Op::Abs(a) => {
                let av = val(*a);
                acc(grads, len_of(*a), *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * av[i].signum() * if av[i] == T::zero() { T::zero() } else { T::one() };
                    }
                })
            }
            Op::Powf { a, e } => {
                let av = val(*a);
                let e = *e;
                acc(grads, len_of(*a), *a, |ga| {
                    for i in 0..g.len() {
                        if e != T::zero() {
                            ga[i] += g[i] * e * av[i].powf(e - T::one());
                        }
                    }
                })
            }
            Op::Clamp { a, lo, hi } => {
                let av = val(*a);
                acc(grads, len_of(*a), *a, |ga| {
                    for i in 0..g.len() {
                        if av[i] >= *lo && av[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                })
            }
            Op::SoftmaxLast(a) => {
                let y = &node.value;
                let d = *node.shape.last().unwrap();
                acc(grads, len_of(*a), *a, |ga| {
                    for r in 0..y.len() / d {
                        let ys = &y[r * d..(r + 1) * d];
                        let gs = &g[r * d..(r + 1) * d];
                        let dot: T = ys.iter().zip(gs).map(|(&p, &q)| p * q).sum();
                        for j in 0..d {
                            ga[r * d + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let gv = val(*gamma);
                let dn = T::from_usize(d).unwrap();
                if want(*a) {
                    acc(grads, len_of(*a), *a, |ga| {
                        for r in 0..rstd.len() {
                            let gs = &g[r * d..(r + 1) * d];
                            let hs = &xhat[r * d..(r + 1) * d];
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for j in 0..d {
                                let gh = gs[j] * gv[j];
                                s1 += gh;
                                s2 += gh * hs[j];
                            }
                            for j in 0..d {
                                let gh = gs[j] * gv[j];
                                ga[r * d + j] += rstd[r] * (gh - s1 / dn - hs[j] * s2 / dn);
                            }
                        }
                    });
                }
                if want(*gamma) {
                    acc(grads, d, *gamma, |gg| {
                        for (i, (&x, &h)) in g.iter().zip(xhat).enumerate() {
                            gg[i % d] += x * h;
                        }
                    });
                }
                if want(*beta) {
                    acc(grads, d, *beta, |gb| {
                        for (i, &x) in g.iter().enumerate() {
                            gb[i % d] += x;
                        }
                    });
                }
            }
            Op::Sum(a) => acc(grads, len_of(*a), *a, |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = T::from_usize(len_of(*a)).unwrap();
                acc(grads, len_of(*a), *a, |ga| {
                    for o in ga.iter_mut() {
                        *o += g[0] / n;
                    }
                })
            }
            Op::SumLast(a) => {
                let d = *nodes[a.0].shape.last().unwrap();
                acc(grads, len_of(*a), *a, |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g[i / d];
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let s0 = &node.shape;
                let outer = numel(&s0[..*axis]);
                let inner = numel(&s0[axis + 1..]);
                let total = s0[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].shape[*axis] * inner;
                    if want(p) {
                        acc(grads, len_of(p), p, |gp| {
                            for o in 0..outer {
                                add_into(
                                    &mut gp[o * len..(o + 1) * len],
                                    &g[o * total + off..o * total + off + len],
                                );
                            }
                        });
                    }
                    off += len;
                }
            }
            Op::IndexRows { a, idx } => {
                let inner = numel(&nodes[a.0].shape[1..]);
                acc(grads, len_of(*a), *a, |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[i * inner..(i + 1) * inner], &g[r * inner..(r + 1) * inner]);
                    }
                })
            }
            Op::SliceLast { a, start } => {
                let d = *nodes[a.0].shape.last().unwrap();
                let len = *node.shape.last().unwrap();
                acc(grads, len_of(*a), *a, |ga| {
                    if len == 0 {
                        return;
                    }
                    for (r, c) in g.chunks(len).enumerate() {
                        add_into(&mut ga[r * d + start..r * d + start + len], c);
                    }
                })
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn check_len<T>(op: &'static str, shape: &[usize], data: &[T]) -> Result<()> {
    if numel(shape) != data.len() {
        return Err(Error::Dimension {
            op,
            msg: format!("shape {:?} needs {} values, got {}", shape, numel(shape), data.len()),
        });
    }
    Ok(())
}
