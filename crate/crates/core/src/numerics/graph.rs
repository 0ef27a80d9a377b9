//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Nodes are
//! appended in evaluation order, so a reverse sweep over the node list is a
//! valid topological order for the backward pass. Operations whose inputs are
//! all constants are evaluated eagerly without recording a backward closure,
//! which keeps inference graphs cheap.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::params::ParamSet;
use crate::numerics::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-parent gradient contributions, `None` for parents that need none.
type Grads = Vec<Option<Vec<f64>>>;
type BackwardFn = Box<dyn Fn(&[f64], &[&Tensor], &Tensor) -> Grads>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Parameters bound onto a graph, addressable by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, usize>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node. Existing [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        let id = self.nodes.len() - 1;
        self.params.insert(name.to_string(), id);
        Var(id)
    }

    /// Binds every parameter: trainable entries become differentiable leaves,
    /// frozen entries become constants.
    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        let mut vars = IndexMap::new();
        for (name, tensor, trainable) in params.iter() {
            let v = if trainable {
                self.param(name, tensor.clone())
            } else {
                self.constant(tensor.clone())
            };
            vars.insert(name.to_string(), v);
        }
        Bound { vars }
    }

    /// Binds every parameter as a constant (inference).
    pub fn bind_frozen(&mut self, params: &ParamSet) -> Bound {
        let mut vars = IndexMap::new();
        for (name, tensor, _) in params.iter() {
            vars.insert(name.to_string(), self.constant(tensor.clone()));
        }
        Bound { vars }
    }

    fn push<F>(&mut self, op: &'static str, value: Tensor, parents: &[Var], backward: F) -> Result<Var>
    where
        F: Fn(&[f64], &[&Tensor], &Tensor) -> Grads + 'static,
    {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per entry of
    /// `params`; trainable parameters off the path get zeros.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Result<IndexMap<String, Tensor>> {
        let grads = self.backward_all(loss)?;
        let mut out = IndexMap::new();
        for (name, tensor, trainable) in params.iter() {
            if !trainable {
                continue;
            }
            let g = self
                .params
                .get(name)
                .and_then(|&id| grads[id].clone())
                .map(|data| Tensor::raw(tensor.shape().to_vec(), data))
                .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
            out.insert(name.to_string(), g);
        }
        Ok(out)
    }

    /// Gradients of `loss` with respect to every node that requires them.
    pub fn backward_all(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        self.sweep(loss, None)
    }

    /// Reverse sweep; interior gradients are released once consumed except
    /// for `keep`.
    fn sweep(&self, loss: Var, keep: Option<usize>) -> Result<Vec<Option<Vec<f64>>>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_values: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let contributions = backward(&g, &parent_values, &node.value);
            for (&p, contrib) in node.parents.iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            if keep == Some(id) {
                grads[id] = Some(g);
            }
        }
        Ok(grads)
    }

    /// Gradient of `loss` with respect to one node, zeros when unreachable.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        let grads = self.sweep(loss, Some(wrt.0))?;
        let shape = self.shape(wrt).to_vec();
        Ok(match grads.get(wrt.0).cloned().flatten() {
            Some(d) => Tensor::raw(shape, d),
            None => Tensor::zeros(&shape),
        })
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64) -> (f64, f64),
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let a_big = if sa == sb || sa.ends_with(&sb) {
            true
        } else if sb.ends_with(&sa) {
            false
        } else {
            return Err(Error::shape(op, &sa, &sb));
        };
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = if a_big { sa.clone() } else { sb.clone() };
        let n = out_shape.iter().product::<usize>();
        let (la, lb) = (va.len(), vb.len());
        let data: Vec<f64> = (0..n).map(|i| f(va.data()[i % la], vb.data()[i % lb])).collect();
        let value = Tensor::raw(out_shape, data);
        self.push(op, value, &[a, b], move |g, p, _| {
            let (xa, xb) = (p[0].data(), p[1].data());
            let mut ga = vec![0.0; la];
            let mut gb = vec![0.0; lb];
            for (i, &gi) in g.iter().enumerate() {
                let (da, db) = df(xa[i % la], xb[i % lb]);
                ga[i % la] += gi * da;
                gb[i % lb] += gi * db;
            }
            vec![Some(ga), Some(gb)]
        })
    }

    /// Elementwise sum; the lower-rank operand broadcasts over leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _| (1.0, 1.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| (1.0, -1.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, |x, y| (1.0 / y, -x / (y * y)))
    }

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, value, &[x], move |g, p, out| {
            let grad = g
                .iter()
                .zip(p[0].data())
                .zip(out.data())
                .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Some(grad)]
        })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu, |x, _| kernels::gelu_grad(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, kernels::softplus, |x, _| kernels::sigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, &[x], move |g, _, _| vec![Some(g.iter().map(|v| v * c).collect())])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push("add_scalar", value, &[x], |g, _, _| vec![Some(g.to_vec())])
    }

    // ---------------------------------------------------------------------
    // reductions and shape

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let n = self.value(x).len();
        self.push("sum", value, &[x], move |g, _, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("sum_axis: axis {axis} out of range"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.push("sum_axis", Tensor::raw(out_shape, out), &[x], move |g, _, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or_else(|| Error::InvalidShape {
            shape: self.shape(x).to_vec(),
            reason: format!("mean_axis: axis {axis} out of range"),
        })?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, &[x], |g, _, _| vec![Some(g.to_vec())])
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("permute: invalid axes {axes:?}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(&shape);
        let n = self.value(x).len();
        // gather index: for every output flat position, the input flat position
        let mut index = vec![0usize; n];
        let mut coord = vec![0usize; rank];
        for slot in index.iter_mut() {
            *slot = coord.iter().zip(axes).map(|(&c, &a)| c * in_strides[a]).sum();
            for d in (0..rank).rev() {
                coord[d] += 1;
                if coord[d] < out_shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        self.push("permute", Tensor::raw(out_shape, data), &[x], move |g, _, _| {
            let mut gx = vec![0.0; n];
            for (o, &i) in index.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        })
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::InvalidArgument("concat_rows: no inputs".into()))?)
            .to_vec();
        let mut rows = 0;
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::shape("concat_rows", &first, s));
            }
            rows += s[0];
            sizes.push(self.value(p).len());
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = rows;
        self.push("concat_rows", Tensor::raw(shape, data), parts, move |g, _, _| {
            let mut off = 0;
            sizes
                .iter()
                .map(|&n| {
                    let part = g[off..off + n].to_vec();
                    off += n;
                    Some(part)
                })
                .collect()
        })
    }

    /// Rows `start..start+len` of axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("slice_rows: rows {start}..{} out of range", start + len),
            });
        }
        let row: usize = shape[1..].iter().product();
        let total = self.value(x).len();
        let data = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        self.push("slice_rows", Tensor::raw(out_shape, data), &[x], move |g, _, _| {
            let mut gx = vec![0.0; total];
            gx[start * row..(start + len) * row].copy_from_slice(g);
            vec![Some(gx)]
        })
    }

    // ---------------------------------------------------------------------
    // linear algebra

    /// Matrix product over the trailing two axes. `b` is either rank 2
    /// (shared across the batch) or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared = sb.len() == 2;
        if k != k2 || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let boff = if shared { 0 } else { bi * k * n };
            kernels::gemm(
                m,
                k,
                n,
                &va[bi * m * k..(bi + 1) * m * k],
                &vb[boff..boff + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        self.push("matmul", Tensor::raw(shape, out), &[a, b], move |g, p, _| {
            let (xa, xb) = (p[0].data(), p[1].data());
            let mut ga = vec![0.0; xa.len()];
            let mut gb = vec![0.0; xb.len()];
            for bi in 0..batch {
                let boff = if shared { 0 } else { bi * k * n };
                let gblk = &g[bi * m * n..(bi + 1) * m * n];
                // dA = G · Bᵀ  (m×n · n×k)
                let bt = kernels::transpose(k, n, &xb[boff..boff + k * n]);
                kernels::gemm(m, n, k, gblk, &bt, &mut ga[bi * m * k..(bi + 1) * m * k]);
                // dB = Aᵀ · G  (k×m · m×n)
                let at = kernels::transpose(m, k, &xa[bi * m * k..(bi + 1) * m * k]);
                kernels::gemm(k, m, n, &at, gblk, &mut gb[boff..boff + k * n]);
            }
            vec![Some(ga), Some(gb)]
        })
    }

    /// Swaps the trailing two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: "transpose needs rank ≥ 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::InvalidShape {
            shape: shape.clone(),
            reason: "softmax of a scalar".into(),
        })?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            let inv = 1.0 / total;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        self.push("softmax", Tensor::raw(shape, out), &[x], move |g, _, y| {
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), out) in g.chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                let s = kernels::dot(gr, yr);
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - s);
                }
            }
            vec![Some(gx)]
        })
    }

    /// `softmax(scale · q kᵀ) v` over batched `[B, Tq, dh]`, `[B, Tk, dh]`,
    /// `[B, Tk, dv]`. Only the attention weights are kept for the backward
    /// pass.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 || sq[0] != sk[0] || sk[0] != sv[0] || sq[2] != sk[2] || sk[1] != sv[1] {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let (bn, tq, dh, tk, dv) = (sq[0], sq[1], sq[2], sk[1], sv[2]);
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; bn * tq * tk];
        let mut out = vec![0.0; bn * tq * dv];
        for bi in 0..bn {
            let pb = &mut probs[bi * tq * tk..(bi + 1) * tq * tk];
            kernels::gemm_nt(tq, dh, tk, &vq[bi * tq * dh..(bi + 1) * tq * dh], &vk[bi * tk * dh..(bi + 1) * tk * dh], pb);
            for row in pb.chunks_mut(tk) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = ((*x - max) * scale).exp();
                    total += *x;
                }
                let inv = 1.0 / total;
                row.iter_mut().for_each(|x| *x *= inv);
            }
            kernels::gemm_nn(tq, tk, dv, pb, &vv[bi * tk * dv..(bi + 1) * tk * dv], &mut out[bi * tq * dv..(bi + 1) * tq * dv]);
        }
        self.push("attention", Tensor::raw(vec![bn, tq, dv], out), &[q, k, v], move |g, p, _| {
            let (xq, xk, xv) = (p[0].data(), p[1].data(), p[2].data());
            let mut gq = vec![0.0; xq.len()];
            let mut gk = vec![0.0; xk.len()];
            let mut gv = vec![0.0; xv.len()];
            let mut ds = vec![0.0; tq * tk];
            for bi in 0..bn {
                let pb = &probs[bi * tq * tk..(bi + 1) * tq * tk];
                let gb = &g[bi * tq * dv..(bi + 1) * tq * dv];
                let (qb, kb, vb) = (
                    &xq[bi * tq * dh..(bi + 1) * tq * dh],
                    &xk[bi * tk * dh..(bi + 1) * tk * dh],
                    &xv[bi * tk * dv..(bi + 1) * tk * dv],
                );
                let gvb = &mut gv[bi * tk * dv..(bi + 1) * tk * dv];
                // dV = Pᵀ G
                for i in 0..tq {
                    let grow = &gb[i * dv..(i + 1) * dv];
                    for (j, &pij) in pb[i * tk..(i + 1) * tk].iter().enumerate() {
                        for (o, &gi) in gvb[j * dv..(j + 1) * dv].iter_mut().zip(grow) {
                            *o += pij * gi;
                        }
                    }
                }
                // dP = G Vᵀ, then through the softmax and the scale
                ds.iter_mut().for_each(|x| *x = 0.0);
                kernels::gemm_nt(tq, dv, tk, gb, vb, &mut ds);
                for (dr, pr) in ds.chunks_mut(tk).zip(pb.chunks(tk)) {
                    let s = kernels::dot(dr, pr);
                    for (d, &pi) in dr.iter_mut().zip(pr) {
                        *d = pi * (*d - s) * scale;
                    }
                }
                kernels::gemm_nn(tq, tk, dh, &ds, kb, &mut gq[bi * tq * dh..(bi + 1) * tq * dh]);
                // dK = dSᵀ Q
                let gkb = &mut gk[bi * tk * dh..(bi + 1) * tk * dh];
                for i in 0..tq {
                    let qrow = &qb[i * dh..(i + 1) * dh];
                    for (j, &dij) in ds[i * tk..(i + 1) * tk].iter().enumerate() {
                        for (o, &qv) in gkb[j * dh..(j + 1) * dh].iter_mut().zip(qrow) {
                            *o += dij * qv;
                        }
                    }
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / d;
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (row[i] - mean) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gs[i] + bs[i];
            }
        }
        self.push("layer_norm", Tensor::raw(shape, out), &[x, gamma, beta], move |g, p, _| {
            let gs = p[1].data();
            let mut gx = vec![0.0; g.len()];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for i in 0..d {
                    gg[i] += gr[i] * hr[i];
                    gb[i] += gr[i];
                    let dh = gr[i] * gs[i];
                    sum_dh += dh;
                    sum_dh_h += dh * hr[i];
                }
                let inv_d = 1.0 / d as f64;
                for i in 0..d {
                    let dh = gr[i] * gs[i];
                    gx[r * d + i] = inv_std[r] * (dh - inv_d * sum_dh - hr[i] * inv_d * sum_dh_h);
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        })
    }

    // ---------------------------------------------------------------------
    // image ops

    /// Same-padded 2D convolution. `x: [N, C, H, W]`, `w: [O, C, k, k]` with
    /// odd `k`, `bias: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, c, h, wd) = match sx.as_slice() {
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(Error::shape("conv2d", &sx, &sw)),
        };
        let (o, k) = match sw.as_slice() {
            [o, ci, k, k2] if *ci == c && k == k2 && k % 2 == 1 => (*o, *k),
            _ => return Err(Error::shape("conv2d", &sx, &sw)),
        };
        if self.shape(bias) != [o] {
            return Err(Error::shape("conv2d", &sw, self.shape(bias)));
        }
        let hw = h * wd;
        let ck = c * k * k;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(bias).data();
        let mut out = vec![0.0; n * o * hw];
        let mut cols_cache = Vec::with_capacity(n);
        for b in 0..n {
            let cols = if k == 1 {
                xs[b * c * hw..(b + 1) * c * hw].to_vec()
            } else {
                kernels::im2col(c, h, wd, k, &xs[b * c * hw..(b + 1) * c * hw])
            };
            let dst = &mut out[b * o * hw..(b + 1) * o * hw];
            for (oc, row) in dst.chunks_mut(hw).enumerate() {
                row.fill(bs[oc]);
            }
            kernels::gemm(o, ck, hw, ws, &cols, dst);
            cols_cache.push(cols);
        }
        self.push("conv2d", Tensor::raw(vec![n, o, h, wd], out), &[x, w, bias], move |g, p, _| {
            let ws = p[1].data();
            let wt = kernels::transpose(o, ck, ws);
            let mut gx = vec![0.0; n * c * hw];
            let mut gw = vec![0.0; o * ck];
            let mut gb = vec![0.0; o];
            for b in 0..n {
                let gblk = &g[b * o * hw..(b + 1) * o * hw];
                for (oc, row) in gblk.chunks(hw).enumerate() {
                    gb[oc] += row.iter().sum::<f64>();
                }
                // dW += G · colsᵀ
                kernels::gemm_nt(o, hw, ck, gblk, &cols_cache[b], &mut gw);
                // dcols = Wᵀ · G
                let mut dcols = vec![0.0; ck * hw];
                kernels::gemm(ck, o, hw, &wt, gblk, &mut dcols);
                let dst = &mut gx[b * c * hw..(b + 1) * c * hw];
                if k == 1 {
                    dst.iter_mut().zip(&dcols).for_each(|(a, v)| *a += v);
                } else {
                    kernels::col2im(c, h, wd, k, &dcols, dst);
                }
            }
            vec![Some(gx), Some(gw), Some(gb)]
        })
    }

    /// Bilinear resampling (half-pixel centres) of the trailing two axes.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                shape,
                reason: "resize needs rank ≥ 2".into(),
            });
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if (h, w) == (oh, ow) {
            return Ok(x);
        }
        let planes = self.value(x).len() / (h * w);
        let data = kernels::resize_bilinear(planes, h, w, oh, ow, self.value(x).data());
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([oh, ow]);
        self.push("resize_bilinear", Tensor::raw(out_shape, data), &[x], move |g, _, _| {
            vec![Some(kernels::resize_bilinear_adjoint(planes, h, w, oh, ow, g))]
        })
    }

    /// Expands `[N, C]` to `[N, C, h, w]` by repeating each value spatially.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                shape,
                reason: "broadcast_spatial expects [N, C]".into(),
            });
        }
        let hw = h * w;
        let data = self.value(x).data().iter().flat_map(|&v| std::iter::repeat_n(v, hw)).collect();
        self.push(
            "broadcast_spatial",
            Tensor::raw(vec![shape[0], shape[1], h, w], data),
            &[x],
            move |g, _, _| vec![Some(g.chunks(hw).map(|c| c.iter().sum()).collect())],
        )
    }

    /// Sums `patches: [K, p, p]` into an `r×r` canvas at the given top-left
    /// offsets.
    pub fn place_patches(&mut self, patches: Var, offsets: &[(usize, usize)], r: usize) -> Result<Var> {
        let shape = self.shape(patches).to_vec();
        let (k, p) = match shape.as_slice() {
            [k, p, q] if p == q => (*k, *p),
            _ => {
                return Err(Error::InvalidShape {
                    shape,
                    reason: "place_patches expects [K, p, p]".into(),
                })
            }
        };
        if offsets.len() != k || offsets.iter().any(|&(y, x)| y + p > r || x + p > r) {
            return Err(Error::InvalidArgument(format!(
                "place_patches: {} offsets for {k} patches of size {p} on a {r}×{r} canvas",
                offsets.len()
            )));
        }
        let src = self.value(patches).data();
        let mut out = vec![0.0; r * r];
        for (i, &(y0, x0)) in offsets.iter().enumerate() {
            for y in 0..p {
                for x in 0..p {
                    out[(y0 + y) * r + x0 + x] += src[(i * p + y) * p + x];
                }
            }
        }
        let offsets = offsets.to_vec();
        self.push("place_patches", Tensor::raw(vec![r, r], out), &[patches], move |g, _, _| {
            let mut gp = vec![0.0; k * p * p];
            for (i, &(y0, x0)) in offsets.iter().enumerate() {
                for y in 0..p {
                    for x in 0..p {
                        gp[(i * p + y) * p + x] = g[(y0 + y) * r + x0 + x];
                    }
                }
            }
            vec![Some(gp)]
        })
    }

    /// Rotary embedding of `x: [H, T, dh]` with per-token angle tables
    /// `cos, sin: [T, dh/2]` (one angle per rotation pair).
    pub fn rotary(&mut self, x: Var, cos: &Tensor, sin: &Tensor) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (heads, t, dh) = match shape.as_slice() {
            [h, t, d] => (*h, *t, *d),
            _ => return Err(Error::shape("rotary", &shape, cos.shape())),
        };
        if dh % 2 != 0 || cos.shape() != [t, dh / 2] || sin.shape() != [t, dh / 2] {
            return Err(Error::shape("rotary", &shape, cos.shape()));
        }
        let half = dh / 2;
        let (cs, sn) = (cos.data().to_vec(), sin.data().to_vec());
        let rotate = move |src: &[f64], sign: f64| {
            let mut out = vec![0.0; src.len()];
            for hd in 0..heads {
                for ti in 0..t {
                    let base = (hd * t + ti) * dh;
                    for i in 0..half {
                        let (c, s) = (cs[ti * half + i], sign * sn[ti * half + i]);
                        let (a, b) = (src[base + 2 * i], src[base + 2 * i + 1]);
                        out[base + 2 * i] = a * c - b * s;
                        out[base + 2 * i + 1] = a * s + b * c;
                    }
                }
            }
            out
        };
        let data = rotate(self.value(x).data(), 1.0);
        self.push("rotary", Tensor::raw(shape, data), &[x], move |g, _, _| vec![Some(rotate(g, -1.0))])
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
