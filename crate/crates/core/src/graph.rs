//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass. Nodes are appended in evaluation
//! order, so the tape itself is a topological order and [`Graph::backward`]
//! walks it once in reverse. Parameters live outside the graph in a
//! [`ParamStore`]; a graph only copies their values in, which keeps a trained
//! model shareable across threads while each thread records its own graph.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{
    broadcast_shape, broadcast_walk, matmul_at_kernel, matmul_bt_kernel, matmul_kernel, numel,
    split_axis, strides, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    /// Elementwise map; stores dy/dx evaluated at the forward input.
    Unary(Var, Vec<f64>),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// Row normalisation; keeps the normalised rows and `1/σ` per row.
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SumAxis(Var, usize),
    SumAll(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Squash(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant: no gradient is propagated into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a parameter into the graph; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    // ----- elementwise binary with broadcasting -----

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, ta.shape(), tb.shape())?;
        let mut out = vec![0.0; numel(&shape)];
        let (da, db) = (ta.data(), tb.data());
        broadcast_walk(&shape, ta.shape(), tb.shape(), |o, ia, ib| {
            out[o] = f(da[ia], db[ib]);
        });
        Ok((Tensor::new(shape, out)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    // ----- elementwise unary -----

    /// `y = scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// Elementwise map with a caller-supplied derivative. This is also how a
    /// test can plant a deliberately wrong gradient rule.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let local = if self.rg(x) {
            t.data().iter().map(|&v| df(v)).collect()
        } else {
            Vec::new()
        };
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Unary(x, local), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(x, f64::ln, |v| 1.0 / v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(x, f64::sqrt, |v| 0.5 / v.sqrt())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, |v| 2.0 * v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), |v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, |v| 1.0 - v.tanh().powi(2))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, |v| {
            let s = sigmoid(v);
            s * (1.0 - s)
        })
    }

    /// `ln(sigmoid(x))`, finite for every finite `x`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.map(x, log_sigmoid, |v| 1.0 - sigmoid(v))
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.map(
            x,
            move |v| v.max(floor),
            move |v| if v > floor { 1.0 } else { 0.0 },
        )
    }

    // ----- linear algebra -----

    /// `a[..., k] · b[k, n] -> [..., n]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let err = || Error::Shape {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if ta.rank() < 1 || tb.rank() != 2 {
            return Err(err());
        }
        let k = *ta.shape().last().unwrap();
        if tb.shape()[0] != k {
            return Err(err());
        }
        let n = tb.shape()[1];
        let m = ta.len() / k.max(1);
        let data = matmul_kernel(ta.data(), tb.data(), m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::MatMul(a, b), rg))
    }

    /// `x[..., k] · w[k, n] + b[n]` as a single node.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let Node { value, .. } = self.nodes.pop().expect("just pushed");
        let mut value = value;
        let n = self.value(w).shape()[1];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [n] {
                return Err(Error::Shape {
                    op: "linear bias",
                    lhs: tb.shape().to_vec(),
                    rhs: vec![n],
                });
            }
            let bias = tb.data().to_vec();
            for row in value.data_mut().chunks_mut(n.max(1)) {
                row.iter_mut().zip(&bias).for_each(|(v, b)| *v += b);
            }
        }
        debug_assert_eq!(y.0, self.nodes.len());
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Normalises each row over the last axis, then applies `gain` and `bias`
    /// (both `[d]`): `(x − mean) / √(var + eps) · gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.shape().last().copied().unwrap_or(0);
        if tx.rank() == 0 || tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.len() / d.max(1);
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(d.max(1)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let std = (var + eps).sqrt();
            inv_std.push(1.0 / std);
            for (k, v) in row.iter().enumerate() {
                let h = (v - mean) / std;
                xhat.push(h);
                out.push(h * tg.data()[k] + tb.data()[k]);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Batched matmul over the leading dim: `[g,m,k]·[g,k,n]`, or
    /// `[g,m,k]·[g,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let err = || Error::Shape {
            op: "bmm",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(err());
        }
        let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (kb, n) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if kb != k {
            return Err(err());
        }
        let mut data = Vec::with_capacity(g * m * n);
        for gi in 0..g {
            let ab = &ta.data()[gi * m * k..(gi + 1) * m * k];
            let bb = &tb.data()[gi * k * n..(gi + 1) * k * n];
            let c = if trans_b {
                matmul_bt_kernel(ab, bb, m, k, n)
            } else {
                matmul_kernel(ab, bb, m, k, n)
            };
            data.extend_from_slice(&c);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([g, m, n], data)?, Op::Bmm { a, b, trans_b }, rg))
    }

    // ----- reductions -----

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        Ok(())
    }

    /// Sum over `axis`, keeping it as a size-1 dim.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        if inner == 1 {
            for (o, row) in out.iter_mut().zip(d.chunks_exact(n.max(1))) {
                *o = row.iter().sum();
            }
        } else {
            for o in 0..outer {
                for a in 0..n {
                    let base = (o * n + a) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += d[base + i];
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.value(x).shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let max = (0..n).map(|a| out[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..n {
                    let e = (out[at(a)] - max).exp();
                    out[at(a)] = e;
                    z += e;
                }
                for a in 0..n {
                    out[at(a)] /= z;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NonFinite("log_softmax input".into()));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let max = (0..n).map(|a| out[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|a| (out[at(a)] - max).exp()).sum::<f64>().ln();
                for a in 0..n {
                    out[at(a)] -= lse;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x, axis), rg))
    }

    // ----- movement -----

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reorders axes: output dim `i` is input dim `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Shape {
                op: "permute",
                lhs: t.shape().to_vec(),
                rhs: axes.to_vec(),
            });
        }
        let (shape, data) = permute_data(t.shape(), t.data(), axes);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Permute(x, axes.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis(*first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
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
            for &v in xs {
                let t = self.value(v);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (outer, n, inner) = split_axis(t.shape(), axis);
        if start + len > n {
            return Err(Error::Shape {
                op: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { x, axis, start }, rg))
    }

    /// Row lookup: `table[V, d]`, ids -> `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!(
                "row id {bad} out of range for table of {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new([ids.len(), d], data)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks one column per row: `x[R, C]`, idx -> `[R]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != idx.len() {
            return Err(Error::Shape {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let c = t.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Contract(format!(
                "column {bad} out of range for {c} columns"
            )));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| t.data()[r * c + i])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new([idx.len()], data)?,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Capsule squashing along the last axis: `s · ‖s‖ / (1 + ‖s‖²)`, with `0 ↦ 0`.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(Error::Axis { axis: 0, rank: 0 });
        }
        let h = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        if h > 0 {
            for v in data.chunks_mut(h) {
                let scale = squash_scale(v.iter().map(|x| x * x).sum());
                v.iter_mut().for_each(|x| *x *= scale);
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Squash(x), rg))
    }

    // ----- backward -----

    /// Reverse pass from a scalar `loss`. Returns the gradient of every node
    /// that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    /// Runs [`Graph::backward`] and adds parameter gradients into `store`.
    /// Calling it twice without zeroing accumulates.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = &grads.grads[v.0] {
                let p = store.get_mut(id);
                if !p.trainable {
                    continue;
                }
                for (acc, x) in p.grad.data_mut().iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                acc(*a, &mut |ga| {
                    broadcast_walk(out_shape, sa, sb, |o, ia, _| ga[ia] += g[o])
                });
                acc(*b, &mut |gb| {
                    broadcast_walk(out_shape, sa, sb, |o, _, ib| gb[ib] += sign * g[o])
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (da, db) = (ta.data(), tb.data());
                acc(*a, &mut |ga| {
                    broadcast_walk(out_shape, ta.shape(), tb.shape(), |o, ia, ib| {
                        ga[ia] += g[o] * db[ib]
                    })
                });
                acc(*b, &mut |gb| {
                    broadcast_walk(out_shape, ta.shape(), tb.shape(), |o, ia, ib| {
                        gb[ib] += g[o] * da[ia]
                    })
                });
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (da, db) = (ta.data(), tb.data());
                acc(*a, &mut |ga| {
                    broadcast_walk(out_shape, ta.shape(), tb.shape(), |o, ia, ib| {
                        ga[ia] += g[o] / db[ib]
                    })
                });
                acc(*b, &mut |gb| {
                    broadcast_walk(out_shape, ta.shape(), tb.shape(), |o, ia, ib| {
                        gb[ib] -= g[o] * da[ia] / (db[ib] * db[ib])
                    })
                });
            }
            Op::Affine(x, s) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b)
            }),
            Op::Unary(x, local) => acc(*x, &mut |gx| {
                for ((a, b), l) in gx.iter_mut().zip(g).zip(local) {
                    *a += b * l;
                }
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let k = tb.shape()[0];
                let n = tb.shape()[1];
                let m = ta.len() / k.max(1);
                acc(*a, &mut |ga| {
                    let d = matmul_bt_kernel(g, tb.data(), m, n, k);
                    ga.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                });
                acc(*b, &mut |gb| {
                    let d = matmul_at_kernel(ta.data(), g, m, k, n);
                    gb.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                });
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let m = tx.len() / k.max(1);
                acc(*x, &mut |gx| {
                    let d = matmul_bt_kernel(g, tw.data(), m, n, k);
                    gx.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                });
                acc(*w, &mut |gw| {
                    let d = matmul_at_kernel(tx.data(), g, m, k, n);
                    gw.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in g.chunks(n.max(1)) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *out_shape.last().unwrap();
                let gv = val(*gain).data();
                acc(*gain, &mut |gg| {
                    for (hr, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                        for k in 0..d {
                            gg[k] += gr[k] * hr[k];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*x, &mut |gx| {
                    let rows = xhat.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d));
                    for (((hr, gr), dr), &r) in rows.zip(inv_std) {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for k in 0..d {
                            let dh = gr[k] * gv[k];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[k];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for k in 0..d {
                            dr[k] += r * (gr[k] * gv[k] - mean_dh - hr[k] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (groups, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = out_shape[2];
                acc(*a, &mut |ga| {
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &tb.data()[gi * k * n..(gi + 1) * k * n];
                        let d = if *trans_b {
                            matmul_kernel(gg, bb, m, n, k)
                        } else {
                            matmul_bt_kernel(gg, bb, m, n, k)
                        };
                        ga[gi * m * k..(gi + 1) * m * k]
                            .iter_mut()
                            .zip(d)
                            .for_each(|(x, y)| *x += y);
                    }
                });
                acc(*b, &mut |gb| {
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let ab = &ta.data()[gi * m * k..(gi + 1) * m * k];
                        let d = if *trans_b {
                            matmul_at_kernel(gg, ab, m, n, k)
                        } else {
                            matmul_at_kernel(ab, gg, m, k, n)
                        };
                        gb[gi * k * n..(gi + 1) * k * n]
                            .iter_mut()
                            .zip(d)
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for a in 0..n {
                            for i in 0..inner {
                                gx[(o * n + a) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Softmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(out_shape, *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * n + a) * inner + i;
                            let dot: f64 = (0..n).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..n {
                                gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x, axis) => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(out_shape, *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * n + a) * inner + i;
                            let gs: f64 = (0..n).map(|a| g[at(a)]).sum();
                            for a in 0..n {
                                gx[at(a)] += g[at(a)] - y[at(a)].exp() * gs;
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)
            }),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, back) = permute_data(out_shape, g, &inverse);
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b)
                });
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = val(v).shape()[*axis];
                    acc(v, &mut |gx| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            for t in 0..n * inner {
                                gx[dst + t] += g[src + t];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let len = out_shape[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = val(*table).shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::Pick { x, idx } => {
                let c = val(*x).shape()[1];
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * c + i] += g[r];
                    }
                });
            }
            Op::Squash(x) => {
                let s = val(*x).data();
                let h = *out_shape.last().unwrap();
                acc(*x, &mut |gx| {
                    for ((sv, gv), dv) in s.chunks(h).zip(g.chunks(h)).zip(gx.chunks_mut(h)) {
                        let n2: f64 = sv.iter().map(|v| v * v).sum();
                        if n2 == 0.0 {
                            continue;
                        }
                        let n = n2.sqrt();
                        let scale = n / (1.0 + n2);
                        // d(scale)/dn / n, with scale(n) = n / (1 + n²)
                        let k = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2)) / n;
                        let dot: f64 = sv.iter().zip(gv).map(|(a, b)| a * b).sum();
                        for ((d, a), b) in dv.iter_mut().zip(sv).zip(gv) {
                            *d += scale * b + k * dot * a;
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Multiplier applied to a vector of squared norm `n2` by squashing.
pub fn squash_scale(n2: f64) -> f64 {
    if n2 == 0.0 {
        0.0
    } else {
        n2.sqrt() / (1.0 + n2)
    }
}

fn permute_data(shape: &[usize], data: &[f64], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out_shape, out);
    }
    if rank > 0 && axes[rank - 1] == rank - 1 {
        // Last axis stays put: copy contiguous runs.
        let run = shape[rank - 1];
        if run == 0 {
            return (out_shape, out);
        }
        let mut idx = vec![0usize; rank - 1];
        let mut off = 0usize;
        for _ in 0..total / run {
            out.extend_from_slice(&data[off..off + run]);
            let mut d = rank - 1;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                off += step[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= step[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(data[off]);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}
