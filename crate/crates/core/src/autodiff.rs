//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and a backward
//! rule. [`Tape::backward`] walks the nodes in reverse recorded order, so each
//! node's gradient is complete before it is propagated to its inputs.

use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation implemented outside this module.
pub trait CustomOp: Send {
    /// Gradients for each input given the output gradient. Entries for
    /// inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
    Sum,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalarVar(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ReduceRows(Var, Reduce, Vec<usize>),
    ReverseTime(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Glu(Var, Vec<f64>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// Elementwise product with a constant of the same length (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if t.numel() != c.len() {
            return Err(shape_err!("mul_const: {} vs {}", t.numel(), c.len()));
        }
        let data = t.data().iter().zip(&c).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    /// 2-D matrix product `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(shape_err!("transpose needs 2-D, got {:?}", self.shape(a)));
        }
        let out = self.value(a).transpose2();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    fn row_op(&mut self, a: Var, b: Var, what: &str) -> Result<usize> {
        let c = *self.shape(a).last().unwrap_or(&0);
        if self.shape(b) != [c] {
            return Err(shape_err!("{what}: {:?} with {:?}", self.shape(a), self.shape(b)));
        }
        Ok(c)
    }

    /// `a[..., c] + b[c]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.row_op(a, b, "add_row")?;
        let bv = self.value(b).data();
        let ta = self.value(a);
        let data = ta.data().chunks_exact(c).flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    /// `a[..., c] * b[c]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.row_op(a, b, "mul_row")?;
        let bv = self.value(b).data();
        let ta = self.value(a);
        let data = ta.data().chunks_exact(c).flat_map(|row| row.iter().zip(bv).map(|(x, b)| x * b)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MulRow(a, b), rg))
    }

    /// `a * s` where `s` holds a single value.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err!("mul_scalar_var: scalar has shape {:?}", self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let rg = self.rg(a) || self.rg(s);
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * sv).collect());
        Ok(self.push(out, Op::MulScalarVar(a, s), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Concatenates tensors along their first axis. All trailing dims must match.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| contract_err!("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err!("concat_rows: {:?} vs tail {:?}", s, tail));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Reduces a 2-D `[r, c]` tensor over its rows, giving `[c]`. Max ties
    /// resolve to the lowest row index.
    pub fn reduce_rows(&mut self, a: Var, kind: Reduce) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] == 0 {
            return Err(shape_err!("reduce_rows needs non-empty 2-D, got {:?}", s));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![0.0; c];
        let mut arg = Vec::new();
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for i in 0..r {
                    for j in 0..c {
                        out[j] += d[i * c + j];
                    }
                }
                if kind == Reduce::Mean {
                    out.iter_mut().for_each(|v| *v /= r as f64);
                }
            }
            Reduce::Max => {
                arg = vec![0; c];
                out.copy_from_slice(&d[..c]);
                for i in 1..r {
                    for j in 0..c {
                        if d[i * c + j] > out[j] {
                            out[j] = d[i * c + j];
                            arg[j] = i;
                        }
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![c], out), Op::ReduceRows(a, kind, arg), rg))
    }

    /// Reverses the middle (time) axis of a `[s, t, d]` tensor.
    pub fn reverse_time(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 {
            return Err(shape_err!("reverse_time needs 3-D, got {:?}", s));
        }
        let out = reverse_time_data(self.value(a).data(), s[0], s[1], s[2]);
        let out = Tensor::from_parts(s.to_vec(), out);
        let rg = self.rg(a);
        Ok(self.push(out, Op::ReverseTime(a), rg))
    }

    /// Layer normalization over the last dimension with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.row_op(x, gain, "layer_norm gain")?;
        self.row_op(x, bias, "layer_norm bias")?;
        let t = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.numel() / c;
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Gated linear unit over the last dimension: `a[..., :c] * sigmoid(a[..., c:])`.
    pub fn glu(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let c2 = *s.last().unwrap_or(&0);
        if c2 % 2 != 0 || c2 == 0 {
            return Err(shape_err!("glu needs an even last dim, got {:?}", s));
        }
        let c = c2 / 2;
        let d = self.value(a).data();
        let rows = d.len() / c2;
        let mut out = Vec::with_capacity(rows * c);
        let mut gates = Vec::with_capacity(rows * c);
        for r in 0..rows {
            let row = &d[r * c2..(r + 1) * c2];
            for j in 0..c {
                let sg = sigmoid(row[c + j]);
                gates.push(sg);
                out.push(row[j] * sg);
            }
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = c;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Glu(a, gates), rg))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: impl CustomOp + 'static) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom(inputs.to_vec(), Box::new(op)), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g))
            }
            Op::MulConst(a, c) => acc(*a, &|s| {
                for i in 0..s.len() {
                    s[i] += g[i] * c[i];
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| gemm_nt_acc(g, vb, s, m, n, k));
                acc(*b, &|s| gemm_tn_acc(va, g, s, m, k, n));
            }
            Op::Transpose(a) => {
                let s0 = self.nodes[a.0].value.shape();
                let (r, c) = (s0[0], s0[1]);
                acc(*a, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::AddRow(a, b) => {
                let c = self.nodes[b.0].value.numel();
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &|s| {
                    for gr in g.chunks_exact(c) {
                        s.iter_mut().zip(gr).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let c = self.nodes[b.0].value.numel();
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| {
                    for (sr, gr) in s.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((s, g), b) in sr.iter_mut().zip(gr).zip(vb) {
                            *s += g * b;
                        }
                    }
                });
                acc(*b, &|s| {
                    for (gr, ar) in g.chunks_exact(c).zip(va.chunks_exact(c)) {
                        for ((s, g), a) in s.iter_mut().zip(gr).zip(ar) {
                            *s += g * a;
                        }
                    }
                });
            }
            Op::MulScalarVar(a, sv) => {
                let (va, k) = (val(*a), val(*sv)[0]);
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k));
                acc(*sv, &|s| s[0] += g.iter().zip(va).map(|(g, x)| g * x).sum::<f64>());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                });
            }
            Op::Ln(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x[i];
                    }
                });
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * g[i] * x[i];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                acc(*a, &|s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &|s| {
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            s[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    acc(p, &|s| s.iter_mut().zip(&g[off..off + n]).for_each(|(s, g)| *s += g));
                    off += n;
                }
            }
            Op::ReduceRows(a, kind, arg) => {
                let s0 = self.nodes[a.0].value.shape();
                let (r, c) = (s0[0], s0[1]);
                acc(*a, &|s| match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let k = if *kind == Reduce::Mean { 1.0 / r as f64 } else { 1.0 };
                        for i in 0..r {
                            for j in 0..c {
                                s[i * c + j] += g[j] * k;
                            }
                        }
                    }
                    Reduce::Max => {
                        for j in 0..c {
                            s[arg[j] * c + j] += g[j];
                        }
                    }
                });
            }
            Op::ReverseTime(a) => {
                let s0 = self.nodes[a.0].value.shape();
                let rev = reverse_time_data(g, s0[0], s0[1], s0[2]);
                acc(*a, &|s| s.iter_mut().zip(&rev).for_each(|(s, g)| *s += g));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let c = self.nodes[gain.0].value.numel();
                let gv = val(*gain);
                let rows = xhat.len() / c;
                acc(*gain, &|s| {
                    for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ((s, g), x) in s.iter_mut().zip(gr).zip(xr) {
                            *s += g * x;
                        }
                    }
                });
                acc(*bias, &|s| {
                    for gr in g.chunks_exact(c) {
                        s.iter_mut().zip(gr).for_each(|(s, g)| *s += g);
                    }
                });
                acc(*x, &|s| {
                    let cf = c as f64;
                    for r in 0..rows {
                        let base = r * c;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let d = g[base + j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xhat[base + j];
                        }
                        for j in 0..c {
                            let d = g[base + j] * gv[j];
                            s[base + j] +=
                                inv_std[r] * (d - sum_d / cf - xhat[base + j] * sum_dx / cf);
                        }
                    }
                });
            }
            Op::Glu(a, gates) => {
                let x = val(*a);
                let c = *node.value.shape().last().unwrap();
                let c2 = 2 * c;
                acc(*a, &|s| {
                    for r in 0..g.len() / c {
                        for j in 0..c {
                            let u = x[r * c2 + j];
                            let sg = gates[r * c + j];
                            let gr = g[r * c + j];
                            s[r * c2 + j] += gr * sg;
                            s[r * c2 + c + j] += gr * u * sg * (1.0 - sg);
                        }
                    }
                });
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                let out = op.backward(&vals, &node.value, g, &needs);
                for ((v, gi), need) in inputs.iter().zip(out).zip(&needs) {
                    if let (Some(gi), true) = (gi, need) {
                        acc(*v, &|s| s.iter_mut().zip(&gi).for_each(|(s, g)| *s += g));
                    }
                }
            }
        }
    }
}

pub(crate) fn reverse_time_data(d: &[f64], s: usize, t: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for i in 0..s {
        for k in 0..t {
            let src = (i * t + k) * c;
            let dst = (i * t + (t - 1 - k)) * c;
            out[dst..dst + c].copy_from_slice(&d[src..src + c]);
        }
    }
    out
}
