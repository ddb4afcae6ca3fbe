//! Dense `f64` tensors and a reverse-mode tape.
//!
//! A [`Tape`] records every forward operation in execution order. Values are
//! addressed through [`Var`] handles, which are only meaningful for the tape
//! that produced them. Parameters live outside the tape as [`Tensor`]s and are
//! copied in with [`Tape::param`] at the start of each step; after
//! [`Tape::backward`] their gradients are read back with [`Tape::grad`].
//!
//! Matrix products accumulate each output element left to right over the
//! inner dimension, so two products over the same operands are bit-identical
//! regardless of whether they ran batched or one slice at a time.

use serde::{Deserialize, Serialize};

use crate::error::{NonError, Result};

/// Dense row-major value array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(NonError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NonError::Contract("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(NonError::Shape {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchedMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    AddStackBias { x: Var, bias: Var },
    Affine { x: Var, scale: f64 },
    Pointwise { x: Var, kernel: Kernel },
    Softmax { x: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    LnClamped { x: Var, eps: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of forward operations with their backward rules.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    track_kinks: bool,
    kinks: Vec<i8>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (outer, axis length, inner) for a row-major shape split at `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// out[r×c] += a[r×k] · b[k×c]
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * c..(p + 1) * c];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[r×k] += g[r×c] · b[k×c]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let brow = &b[p * c..(p + 1) * c];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

// out[k×c] += a[r×k]ᵀ · g[r×c]
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape that records the sign of every kink input (relu arguments and
    /// clamped log arguments). Used by [`grad_check`] to skip coordinates
    /// whose perturbation crosses a non-differentiable point.
    pub fn with_kink_tracking() -> Self {
        Tape {
            track_kinks: true,
            ..Tape::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.value.clone(),
            grad: None,
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// was reachable from it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn kink_signature(&self) -> &[i8] {
        &self.kinks
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.values.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.values, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NonError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; r * c];
        gemm(self.value(a), self.value(b), &mut out, r, k, c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![r, c], out, Op::MatMul(a, b), rg))
    }

    /// Independent matmul per leading stack slice: `[c×b×d1] · [c×d1×d2]`.
    pub fn batched_matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[0] != sw[0] || sx[2] != sw[1] {
            return Err(NonError::Shape {
                op: "batched_matmul",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (c, b, d1, d2) = (sx[0], sx[1], sx[2], sw[2]);
        let mut out = vec![0.0; c * b * d2];
        let (xv, wv) = (self.value(x), self.value(w));
        for s in 0..c {
            gemm(
                &xv[s * b * d1..(s + 1) * b * d1],
                &wv[s * d1 * d2..(s + 1) * d1 * d2],
                &mut out[s * b * d2..(s + 1) * b * d2],
                b,
                d1,
                d2,
            );
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(vec![c, b, d2], out, Op::BatchedMatMul(x, w), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NonError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds `bias` broadcast over the leading axes of `x`; the bias shape
    /// must equal the trailing axes of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(NonError::Shape {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let n = numel(sb).max(1);
        let bv = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % n])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(sx.to_vec(), out, Op::AddBias { x, bias }, rg))
    }

    /// `[c×b×d] + [c×d]`, the bias of slice `s` added to every row of slice `s`.
    pub fn add_stack_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 3 || sb.len() != 2 || sx[0] != sb[0] || sx[2] != sb[1] {
            return Err(NonError::Shape {
                op: "add_stack_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (b, d) = (sx[1], sx[2]);
        let bv = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[(i / (b * d)) * d + i % d])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(sx.to_vec(), out, Op::AddStackBias { x, bias }, rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|v| scale * v + shift).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Affine { x, scale }, rg)
    }

    pub fn pointwise(&mut self, x: Var, kernel: Kernel) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = match kernel {
            Kernel::Relu => xv.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Kernel::Sigmoid => xv.iter().map(|&v| sigmoid(v)).collect(),
            Kernel::Tanh => xv.iter().map(|v| v.tanh()).collect(),
        };
        if self.track_kinks && kernel == Kernel::Relu {
            let signs: Vec<i8> = xv.iter().map(|v| v.partial_cmp(&0.0).map_or(0, |o| o as i8)).collect();
            self.kinks.extend(signs);
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Pointwise { x, kernel }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.pointwise(x, Kernel::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.pointwise(x, Kernel::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.pointwise(x, Kernel::Tanh)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NonError::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xv[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (xv[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| NonError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(NonError::Contract(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(NonError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v)[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(inputs.len());
        for v in inputs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(*v));
            lifted.push(self.reshape(*v, s)?);
        }
        self.concat(&lifted, 0)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(NonError::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&xv[from..from + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(oshape, out, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(NonError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, r, c) = match shape.as_slice() {
            [r, c] => (1, *r, *c),
            [b, r, c] => (*b, *r, *c),
            _ => {
                return Err(NonError::Shape {
                    op: "transpose",
                    lhs: shape,
                    rhs: vec![],
                })
            }
        };
        let out = transpose_last2(self.value(x), batch, r, c);
        let mut oshape = shape;
        let k = oshape.len();
        oshape.swap(k - 2, k - 1);
        let rg = self.rg(x);
        Ok(self.push(oshape, out, Op::Transpose(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::MeanAll(x), rg)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NonError::Contract(format!(
                "sum axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(oshape, out, Op::SumAxis { x, axis }, rg))
    }

    /// Row gather from a `[n×d]` table; backward scatter-adds into the
    /// gathered rows only.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(NonError::Shape {
                op: "gather_rows",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(NonError::Contract(format!(
                "embedding index {bad} out of range for table of {n} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let out = xv.iter().map(|&v| v.max(eps).ln()).collect();
        if self.track_kinks {
            let signs: Vec<i8> = xv.iter().map(|&v| if v > eps { 1 } else { -1 }).collect();
            self.kinks.extend(signs);
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::LnClamped { x, eps }, rg)
    }

    /// Reverse pass from a single-element `loss`. Gradients from previous
    /// calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NonError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        // Accumulates into the gradient slot of `v`, allocating on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |da| gemm_nt(g, &nodes[b.0].value, da, r, k, c));
                acc(*b, &mut |db| gemm_tn(&nodes[a.0].value, g, db, r, k, c));
            }
            Op::BatchedMatMul(x, w) => {
                let (sx, sw) = (&nodes[x.0].shape, &nodes[w.0].shape);
                let (cs, b, d1, d2) = (sx[0], sx[1], sx[2], sw[2]);
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                acc(*x, &mut |dx| {
                    for s in 0..cs {
                        gemm_nt(
                            &g[s * b * d2..(s + 1) * b * d2],
                            &wv[s * d1 * d2..(s + 1) * d1 * d2],
                            &mut dx[s * b * d1..(s + 1) * b * d1],
                            b,
                            d1,
                            d2,
                        );
                    }
                });
                acc(*w, &mut |dw| {
                    for s in 0..cs {
                        gemm_tn(
                            &xv[s * b * d1..(s + 1) * b * d1],
                            &g[s * b * d2..(s + 1) * b * d2],
                            &mut dw[s * d1 * d2..(s + 1) * d1 * d2],
                            b,
                            d1,
                            d2,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |dx| add_into(dx, g));
                let n = nodes[bias.0].value.len();
                acc(*bias, &mut |db| {
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                });
            }
            Op::AddStackBias { x, bias } => {
                acc(*x, &mut |dx| add_into(dx, g));
                let (b, d) = (node.shape[1], node.shape[2]);
                acc(*bias, &mut |db| {
                    for (i, gv) in g.iter().enumerate() {
                        db[(i / (b * d)) * d + i % d] += gv;
                    }
                });
            }
            Op::Affine { x, scale } => {
                acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, gv)| *d += scale * gv));
            }
            Op::Pointwise { x, kernel } => {
                let (xv, yv) = (&nodes[x.0].value, &node.value);
                acc(*x, &mut |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i]
                            * match kernel {
                                Kernel::Relu => {
                                    if xv[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Kernel::Sigmoid => yv[i] * (1.0 - yv[i]),
                                Kernel::Tanh => 1.0 - yv[i] * yv[i],
                            };
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let width = nodes[v.0].shape[*axis] * inner;
                    acc(*v, &mut |dv| {
                        for o in 0..outer {
                            let from = o * total * inner + offset;
                            add_into(&mut dv[o * width..(o + 1) * width], &g[from..from + width]);
                        }
                    });
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(&nodes[x.0].shape, *axis);
                let len = node.shape[*axis];
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        let to = (o * n + start) * inner;
                        add_into(
                            &mut dx[to..to + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, g)),
            Op::Transpose(x) => {
                let s = &node.shape;
                let k = s.len();
                let batch = if k == 3 { s[0] } else { 1 };
                let back = transpose_last2(g, batch, s[k - 2], s[k - 1]);
                acc(*x, &mut |dx| add_into(dx, &back));
            }
            Op::SumAll(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::MeanAll(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(&nodes[x.0].shape, *axis);
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for j in 0..n {
                            let to = (o * n + j) * inner;
                            add_into(&mut dx[to..to + inner], &g[o * inner..(o + 1) * inner]);
                        }
                    }
                });
            }
            Op::GatherRows { table, indices } => {
                let d = nodes[table.0].shape[1];
                acc(*table, &mut |dt| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::LnClamped { x, eps } => {
                let xv = &nodes[x.0].value;
                acc(*x, &mut |dx| {
                    for i in 0..g.len() {
                        if xv[i] > *eps {
                            dx[i] += g[i] / xv[i];
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn transpose_last2(v: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for s in 0..batch {
        let base = s * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = v[base + i * c + j];
            }
        }
    }
    out
}

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink.
    pub skipped: usize,
}

/// Compares analytic gradients of `f` against central differences with step
/// `eps`. The error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh tape and one `Var` per entry of `params`, in order,
/// and must return a single-element loss.
pub fn grad_check<F>(params: &mut [Tensor], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::with_kink_tracking();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };

    let (mut tape, vars, loss) = eval(params)?;
    tape.backward(loss)?;
    let baseline = tape.kink_signature().to_vec();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(v, p)| tape.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (p, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = params[p].values[i];
            params[p].values[i] = orig + eps;
            let (plus_tape, _, plus) = eval(params)?;
            params[p].values[i] = orig - eps;
            let (minus_tape, _, minus) = eval(params)?;
            params[p].values[i] = orig;
            if plus_tape.kink_signature() != baseline || minus_tape.kink_signature() != baseline {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus_tape.scalar(plus) - minus_tape.scalar(minus)) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
