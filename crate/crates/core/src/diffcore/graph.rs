//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operator applied during a forward pass.
//! [`Graph::backward`] walks the tape in reverse and writes parameter
//! gradients into a [`ParameterStore`]. Summation order is fixed, so the same
//! inputs always produce bitwise-identical values and gradients.

use std::collections::HashMap;

use crate::diffcore::params::{ParamId, ParameterStore};
use crate::error::{HgmError, Result};
use crate::tensor::{gemm, gemm_strided, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Input,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Silu(Var, Vec<f32>),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f32, f32)> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<f32> },
    ConcatCols(Vec<Var>),
    SegmentMax { x: Var, argmax: Vec<u32> },
    SegmentMean { x: Var, groups: usize },
    Reshape(Var),
    Mse { pred: Var, target: Vec<f32> },
    Sum(Var),
}

/// Geometry of a batched multi-head attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub heads: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Per-node gradients returned by [`Graph::gradients`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HgmError::Shape(msg.into()))
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(HgmError::NonFinite(format!("output of {}", op_name(&op))));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant)
    }

    /// Leaf outside the parameter store that still receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input)
    }

    /// Leaf for a stored parameter. Repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param)?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return shape_err(format!("matmul {:?} x {:?}", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return shape_err(format!("bias {:?} for input {:?}", bv.shape(), xv.shape()));
        }
        let mut out = xv.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    /// `x·w + b`, broadcasting over all leading dims of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] || bv.len() != wv.cols() {
            return shape_err(format!("affine {:?} x {:?} + {:?}", xv.shape(), wv.shape(), bv.shape()));
        }
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        gemm(m, k, n, xv.data(), false, wv.data(), false, &mut out, true);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::Affine(x, w, b))
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("elementwise {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, op)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let sig: Vec<f32> = xv.data().iter().map(|v| sigmoid(*v)).collect();
        let data = xv.data().iter().zip(&sig).map(|(v, s)| v * s).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(t, Op::Silu(x, sig))
    }

    /// Max-subtracted softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return shape_err("layer_norm affine width");
        }
        let mut out = xv.clone();
        let mut stats = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * gv.data()[j] + bv.data()[j];
            }
            stats.push((mean, rstd));
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, stats })
    }

    /// Scaled dot-product attention for `batch` independent groups split into
    /// `heads` column blocks. `q` is `[batch·queries, d]`, `k` and `v` are
    /// `[batch·keys, d]`. Heads are concatenated back to width `d`; the
    /// output projection is left to the caller.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let AttnShape { batch, queries, keys, heads } = shape;
        if heads == 0 || d % heads != 0 {
            return Err(HgmError::HeadSplit { dim: d, heads });
        }
        if kv.cols() != d || vv.cols() != d {
            return shape_err("attention widths differ");
        }
        if qv.rows() != batch * queries || kv.rows() != batch * keys || vv.rows() != batch * keys {
            return shape_err(format!(
                "attention rows q={} k={} v={} for batch {batch}",
                qv.rows(),
                kv.rows(),
                vv.rows()
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0f32; batch * heads * queries * keys];
        let mut out = vec![0.0f32; batch * queries * d];
        let ds = d as isize;
        for b in 0..batch {
            for h in 0..heads {
                let qo = b * queries * d + h * dh;
                let ko = b * keys * d + h * dh;
                let po = (b * heads + h) * queries * keys;
                let p = &mut probs[po..po + queries * keys];
                // scores = Qh · Khᵀ
                gemm_strided(
                    queries, dh, keys,
                    &qv.data()[qo..], ds, 1,
                    &kv.data()[ko..], 1, ds,
                    p, keys as isize, false,
                );
                for row in p.chunks_mut(keys) {
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_in_place(row);
                }
                // out_h = P · Vh
                gemm_strided(
                    queries, keys, dh,
                    p, keys as isize, 1,
                    &vv.data()[ko..], ds, 1,
                    &mut out[qo..], ds, false,
                );
            }
        }
        let t = Tensor::new(vec![batch * queries, d], out)?;
        self.push(t, Op::Attention { q, k, v, shape, probs })
    }

    /// Attention weights recorded by an [`Graph::attention`] node, laid out
    /// as `[batch, heads, queries, keys]`.
    pub fn attention_weights(&self, var: Var) -> Option<&[f32]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let t = Tensor::concat_cols(&tensors)?;
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    /// Column-wise max over `groups` equal consecutive row blocks.
    pub fn segment_max(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if groups == 0 || rows % groups != 0 {
            return shape_err(format!("{rows} rows do not split into {groups} groups"));
        }
        let per = rows / groups;
        let mut out = vec![f32::NEG_INFINITY; groups * c];
        let mut argmax = vec![0u32; groups * c];
        for g in 0..groups {
            for r in 0..per {
                let row = xv.row(g * per + r);
                for j in 0..c {
                    if row[j] > out[g * c + j] {
                        out[g * c + j] = row[j];
                        argmax[g * c + j] = r as u32;
                    }
                }
            }
        }
        let t = Tensor::new(vec![groups, c], out)?;
        self.push(t, Op::SegmentMax { x, argmax })
    }

    /// Column-wise mean over `groups` equal consecutive row blocks.
    pub fn segment_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if groups == 0 || rows % groups != 0 {
            return shape_err(format!("{rows} rows do not split into {groups} groups"));
        }
        let per = rows / groups;
        let mut out = vec![0.0f32; groups * c];
        for g in 0..groups {
            let acc = &mut out[g * c..(g + 1) * c];
            for r in 0..per {
                for (a, v) in acc.iter_mut().zip(xv.row(g * per + r)) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= per as f32);
        }
        let t = Tensor::new(vec![groups, c], out)?;
        self.push(t, Op::SegmentMean { x, groups })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return shape_err(format!("mse {:?} vs {:?}", pv.shape(), target.shape()));
        }
        let n = pv.len() as f32;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f32>()
            / n;
        self.push(Tensor::scalar(loss), Op::Mse { pred, target: target.data().to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f32>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from a scalar `loss`, returning the gradient of every
    /// node that the loss depends on.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(HgmError::NonScalarLoss(lv.shape().to_vec()));
        }
        let needs = self.needs_grad();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            if !needs[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads, &needs)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Computes gradients and writes them into `store`. Parameters the loss
    /// does not reach get a zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (id, var) in &self.params {
            if let Some(g) = grads.get(*var) {
                if !g.is_finite() {
                    return Err(HgmError::NonFinite(format!("gradient of {}", store.name(*id))));
                }
                store.grad_mut(*id).data_mut().copy_from_slice(g.data());
            }
        }
        Ok(())
    }

    /// Nodes that are parameters or depend on one. Constants and anything
    /// computed only from constants never receive gradients.
    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Constant => false,
                Op::Param | Op::Input => true,
                op => op_inputs(op).iter().any(|v| needs[v.0]),
            };
        }
        needs
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        needs: &[bool],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Param | Op::Input => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs[a.0] {
                    let da = acc(grads, *a, av.shape());
                    gemm(m, n, k, g.data(), false, bv.data(), true, da.data_mut(), true);
                }
                if needs[b.0] {
                    let db = acc(grads, *b, bv.shape());
                    gemm(k, m, n, av.data(), true, g.data(), false, db.data_mut(), true);
                }
            }
            Op::Affine(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                if needs[x.0] {
                    let dx = acc(grads, *x, xv.shape());
                    gemm(m, n, k, g.data(), false, wv.data(), true, dx.data_mut(), true);
                }
                if needs[w.0] {
                    let dw = acc(grads, *w, wv.shape());
                    gemm(k, m, n, xv.data(), true, g.data(), false, dw.data_mut(), true);
                }
                if needs[b.0] {
                    let bshape = self.value(*b).shape().to_vec();
                    let db = acc(grads, *b, &bshape);
                    for row in g.data().chunks(n) {
                        for (d, v) in db.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                pass_through(grads, *x, g);
                let bshape = self.value(*b).shape().to_vec();
                let db = acc(grads, *b, &bshape);
                let c = g.cols();
                for row in g.data().chunks(c) {
                    for (d, v) in db.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            Op::Add(a, b) => {
                if needs[a.0] {
                    pass_through(grads, *a, g);
                }
                if needs[b.0] {
                    pass_through(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                let da = acc(grads, *a, g.shape());
                for ((d, gv), y) in da.data_mut().iter_mut().zip(g.data()).zip(&bv) {
                    *d += gv * y;
                }
                let db = acc(grads, *b, g.shape());
                for ((d, gv), x) in db.data_mut().iter_mut().zip(g.data()).zip(&av) {
                    *d += gv * x;
                }
            }
            Op::Scale(x, s) => {
                let dx = acc(grads, *x, g.shape());
                for (d, gv) in dx.data_mut().iter_mut().zip(g.data()) {
                    *d += gv * s;
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data().to_vec();
                let dx = acc(grads, *x, g.shape());
                for ((d, gv), xv) in dx.data_mut().iter_mut().zip(g.data()).zip(&xs) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Silu(x, sig) => {
                let xv = self.value(*x);
                let local: Vec<f32> = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(sig)
                    .map(|((gv, xv), s)| gv * s * (1.0 + xv * (1.0 - s)))
                    .collect();
                match &mut grads[x.0] {
                    Some(dx) => add_into(dx, &local),
                    slot => *slot = Some(Tensor::new(g.shape().to_vec(), local)?),
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let dx = acc(grads, *x, g.shape());
                for ((drow, grow), yrow) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(out.data().chunks(c))
                {
                    softmax_backward_row(drow, grow, yrow);
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data().to_vec();
                let c = xv.cols();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let mut dxs = vec![0.0f32; xv.len()];
                let mut xhat = vec![0.0f32; c];
                let mut dxhat = vec![0.0f32; c];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xrow = xv.row(r);
                    let grow = g.row(r);
                    for j in 0..c {
                        xhat[j] = (xrow[j] - mean) * rstd;
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gam[j];
                    }
                    let m1 = dxhat.iter().sum::<f32>() / c as f32;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                    let drow = &mut dxs[r * c..(r + 1) * c];
                    for j in 0..c {
                        drow[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                let xshape = xv.shape().to_vec();
                add_into(acc(grads, *x, &xshape), &dxs);
                add_into(acc(grads, *gamma, &[c]), &dgamma);
                add_into(acc(grads, *beta, &[c]), &dbeta);
            }
            Op::Attention { q, k, v, shape, probs } => {
                self.attention_backward(*q, *k, *v, *shape, probs, g, grads, needs);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let total = g.cols();
                for p in parts {
                    let pshape = self.value(*p).shape().to_vec();
                    let w = *pshape.last().unwrap();
                    if !needs[p.0] {
                        offset += w;
                        continue;
                    }
                    let dp = acc(grads, *p, &pshape);
                    for (drow, grow) in dp.data_mut().chunks_mut(w).zip(g.data().chunks(total)) {
                        for (d, gv) in drow.iter_mut().zip(&grow[offset..offset + w]) {
                            *d += gv;
                        }
                    }
                    offset += w;
                }
            }
            Op::SegmentMax { x, argmax } => {
                let xshape = self.value(*x).shape().to_vec();
                let c = g.cols();
                let groups = g.rows();
                let per = self.value(*x).rows() / groups;
                let dx = acc(grads, *x, &xshape);
                for gi in 0..groups {
                    for j in 0..c {
                        let r = argmax[gi * c + j] as usize;
                        dx.data_mut()[(gi * per + r) * c + j] += g.data()[gi * c + j];
                    }
                }
            }
            Op::SegmentMean { x, groups } => {
                let xshape = self.value(*x).shape().to_vec();
                let c = g.cols();
                let per = self.value(*x).rows() / groups;
                let dx = acc(grads, *x, &xshape);
                for gi in 0..*groups {
                    let grow = &g.data()[gi * c..(gi + 1) * c];
                    for r in 0..per {
                        let off = (gi * per + r) * c;
                        for (d, gv) in dx.data_mut()[off..off + c].iter_mut().zip(grow) {
                            *d += gv / per as f32;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let xshape = self.value(*x).shape().to_vec();
                let reshaped = g.clone().reshape(&xshape)?;
                pass_through(grads, *x, &reshaped);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let n = pv.len() as f32;
                let scale = 2.0 * g.data()[0] / n;
                let pshape = pv.shape().to_vec();
                let pdata = pv.data().to_vec();
                let dp = acc(grads, *pred, &pshape);
                for ((d, p), t) in dp.data_mut().iter_mut().zip(&pdata).zip(target) {
                    *d += scale * (p - t);
                }
            }
            Op::Sum(x) => {
                let xshape = self.value(*x).shape().to_vec();
                let s = g.data()[0];
                let dx = acc(grads, *x, &xshape);
                dx.data_mut().iter_mut().for_each(|d| *d += s);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: &[f32],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        needs: &[bool],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let AttnShape { batch, queries, keys, heads } = shape;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let ds = d as isize;
        let mut dq = vec![0.0f32; qv.len()];
        let mut dk = vec![0.0f32; kv.len()];
        let mut dv = vec![0.0f32; vv.len()];
        let mut dp = vec![0.0f32; queries * keys];
        for b in 0..batch {
            for h in 0..heads {
                let qo = b * queries * d + h * dh;
                let ko = b * keys * d + h * dh;
                let po = (b * heads + h) * queries * keys;
                let p = &probs[po..po + queries * keys];
                // dVh += Pᵀ · dOh
                gemm_strided(
                    keys, queries, dh,
                    p, 1, keys as isize,
                    &g.data()[qo..], ds, 1,
                    &mut dv[ko..], ds, true,
                );
                // dP = dOh · Vhᵀ
                gemm_strided(
                    queries, dh, keys,
                    &g.data()[qo..], ds, 1,
                    &vv.data()[ko..], 1, ds,
                    &mut dp, keys as isize, false,
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                for (drow, prow) in dp.chunks_mut(keys).zip(p.chunks(keys)) {
                    let dot: f32 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (dd, pp) in drow.iter_mut().zip(prow) {
                        *dd = pp * (*dd - dot) * scale;
                    }
                }
                // dQh += dS · Kh
                gemm_strided(
                    queries, keys, dh,
                    &dp, keys as isize, 1,
                    &kv.data()[ko..], ds, 1,
                    &mut dq[qo..], ds, true,
                );
                // dKh += dSᵀ · Qh
                gemm_strided(
                    keys, queries, dh,
                    &dp, 1, keys as isize,
                    &qv.data()[qo..], ds, 1,
                    &mut dk[ko..], ds, true,
                );
            }
        }
        let (qs, ks, vs) = (qv.shape().to_vec(), kv.shape().to_vec(), vv.shape().to_vec());
        for (var, shape, d) in [(q, qs, dq), (k, ks, dk), (v, vs, dv)] {
            if needs[var.0] {
                pass_through(grads, var, &Tensor::new(shape, d).expect("matching length"));
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Constant => "constant",
        Op::Param => "param",
        Op::Input => "input",
        Op::MatMul(..) => "matmul",
        Op::AddBias(..) => "add_bias",
        Op::Affine(..) => "affine",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Silu(..) => "silu",
        Op::Softmax(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Attention { .. } => "attention",
        Op::ConcatCols(_) => "concat_cols",
        Op::SegmentMax { .. } => "segment_max",
        Op::SegmentMean { .. } => "segment_mean",
        Op::Reshape(_) => "reshape",
        Op::Mse { .. } => "mse",
        Op::Sum(_) => "sum",
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Param | Op::Input => vec![],
        Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Affine(x, w, b) => vec![*x, *w, *b],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::ConcatCols(parts) => parts.clone(),
        Op::Scale(x, _)
        | Op::Relu(x)
        | Op::Silu(x, _)
        | Op::Softmax(x)
        | Op::Reshape(x)
        | Op::Sum(x)
        | Op::SegmentMax { x, .. }
        | Op::SegmentMean { x, .. } => vec![*x],
        Op::Mse { pred, .. } => vec![*pred],
    }
}

/// Adds `g` into the gradient slot of `var`, moving a copy in when empty.
fn pass_through(grads: &mut [Option<Tensor>], var: Var, g: &Tensor) {
    match &mut grads[var.0] {
        Some(dx) => add_into(dx, g.data()),
        slot => *slot = Some(g.clone()),
    }
}

fn acc<'a>(grads: &'a mut [Option<Tensor>], var: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[var.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into(dst: &mut Tensor, src: &[f32]) {
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn softmax_backward_row(dx: &mut [f32], g: &[f32], y: &[f32]) {
    let dot: f32 = g.iter().zip(y).map(|(a, b)| a * b).sum();
    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
        *d += yv * (gv - dot);
    }
}
