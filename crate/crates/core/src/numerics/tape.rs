//! Record-then-reverse automatic differentiation.
//!
//! Every kernel evaluates eagerly, appends a node to the tape and remembers
//! enough to apply its vector-Jacobian product later. Recording order is a
//! topological order, so the backward pass is a single reverse sweep.

use std::collections::BTreeMap;

use super::array::{strides, NdArray};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    RowNormalize(Var),
    MeanLast(Var),
    SumAll(Var),
    Standardize { x: Var, inv_std: Vec<f64> },
    MaskedFill(Var, Vec<bool>),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    op: Op,
    requires_grad: bool,
}

/// The computation graph of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient with respect to a recorded node; zero when the node is not on
    /// the loss path.
    pub fn wrt(&self, v: Var) -> NdArray {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => NdArray::from_parts(shape.clone(), g.clone()),
            None => NdArray::zeros(shape),
        }
    }

    /// Gradients of every named parameter leaf.
    pub fn named(&self) -> BTreeMap<String, NdArray> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.wrt(*v)))
            .collect()
    }
}

fn dim_err(kernel: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension {
        kernel,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Maps each flat output index of a permutation to its flat input index.
fn permute_map(in_shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        map.push(
            idx.iter()
                .zip(axes)
                .map(|(&i, &a)| i * in_strides[a])
                .sum(),
        );
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

/// Numpy-style broadcast of `in_shape` up to `out_shape`, as a gather map.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if in_shape.len() > out_shape.len() {
        return None;
    }
    let pad = out_shape.len() - in_shape.len();
    let in_strides = strides(in_shape);
    for (i, &d) in in_shape.iter().enumerate() {
        if d != 1 && d != out_shape[pad + i] {
            return None;
        }
    }
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let mut off = 0;
        for (i, &d) in in_shape.iter().enumerate() {
            if d != 1 {
                off += idx[pad + i] * in_strides[i];
            }
        }
        map.push(off);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(map)
}

fn last_axis(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
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

    fn push(&mut self, value: NdArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        kernel: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(kernel.to_string()));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(NdArray::from_parts(shape, data), op, rg))
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An anonymous differentiable leaf.
    pub fn leaf(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A named differentiable leaf, reported by [`Gradients::named`].
    pub fn param(&mut self, name: &str, value: NdArray) -> Var {
        let v = self.leaf(value);
        self.params.push((name.to_string(), v));
        v
    }

    /// Registers every array of a parameter map as a named leaf.
    pub fn bind(&mut self, params: &BTreeMap<String, NdArray>) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(k, v)| (k.clone(), self.param(k, v.clone())))
            .collect()
    }

    /// Registers every array as a non-differentiable constant.
    pub fn bind_frozen(&mut self, params: &BTreeMap<String, NdArray>) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(k, v)| (k.clone(), self.constant(v.clone())))
            .collect()
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, kernel: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(kernel, sa, sb));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        kernel: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(kernel, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.record(kernel, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|v| v * c).collect();
        let shape = self.shape(a).to_vec();
        self.record("scale", shape, data, Op::Scale(a, c), &[a])
    }

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[.., k, n]`
    /// with the same leading extents or a shared `[k, n]` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared_rhs = sb.len() == 2 && sa.len() > 2;
        if k != kb || (!shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(dim_err("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let ao = &av[t * m * k..(t + 1) * m * k];
            let bo = if shared_rhs {
                bv
            } else {
                &bv[t * k * n..(t + 1) * k * n]
            };
            let oo = &mut out[t * m * n..(t + 1) * m * n];
            for i in 0..m {
                for p in 0..k {
                    let x = ao[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bo[p * n..(p + 1) * n];
                    for (o, &y) in oo[i * n..(i + 1) * n].iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        self.record("matmul", shape, out, Op::MatMul { a, b, shared_rhs }, &[a, b])
    }

    /// Affine map over the last axis: `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let y = if sx.len() == 1 {
            let x2 = self.reshape(x, &[1, sx[0]])?;
            let y2 = self.matmul(x2, w)?;
            let n = self.shape(y2)[1];
            self.reshape(y2, &[n])?
        } else {
            self.matmul(x, w)?
        };
        match b {
            Some(b) => {
                let shape = self.shape(y).to_vec();
                let bb = self.broadcast_to(b, &shape)?;
                self.add(y, bb)
            }
            None => Ok(y),
        }
    }

    fn gather(
        &mut self,
        kernel: &'static str,
        a: Var,
        shape: Vec<usize>,
        map: Vec<usize>,
    ) -> Result<Var> {
        let av = self.value(a).data();
        let data = map.iter().map(|&i| av[i]).collect();
        self.record(kernel, shape, data, Op::Gather(a, map), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if seen != (0..sa.len()).collect::<Vec<_>>() {
            return Err(dim_err("permute", &sa, axes));
        }
        let (shape, map) = permute_map(&sa, axes);
        self.gather("permute", a, shape, map)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(dim_err("transpose", self.shape(a), &[]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if shape.iter().product::<usize>() != sa.iter().product::<usize>() {
            return Err(dim_err("reshape", sa, shape));
        }
        let n = shape.iter().product();
        self.gather("reshape", a, shape.to_vec(), (0..n).collect())
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let map = broadcast_map(&sa, shape).ok_or_else(|| dim_err("broadcast", &sa, shape))?;
        self.gather("broadcast", a, shape.to_vec(), map)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len() || &sp[..sp.len() - 1] != lead {
                return Err(dim_err("concat", &first, sp));
            }
            widths.push(last_axis(sp));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.record("concat", shape, data, Op::Concat(parts.to_vec()), parts)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.record("relu", shape, data, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|v| v.abs()).collect();
        let shape = self.shape(a).to_vec();
        self.record("abs", shape, data, Op::Abs(a), &[a])
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = last_axis(&shape);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.record("softmax", shape, data, Op::Softmax(a), &[a])
    }

    /// Divides each last-axis row by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = last_axis(&shape);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.record("row_normalize", shape, data, Op::RowNormalize(a), &[a])
    }

    /// Mean over the last axis, which is dropped.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = last_axis(&shape);
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        let out = shape[..shape.len().saturating_sub(1)].to_vec();
        self.record("mean_last", out, data, Op::MeanLast(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.record("sum", vec![], vec![s], Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Zero-mean, unit-variance standardization over the last axis using the
    /// population variance and `sqrt(var + eps)` as denominator.
    pub fn standardize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = last_axis(&shape);
        let mut data = self.value(a).data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / n);
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.record("standardize", shape, data, Op::Standardize { x: a, inv_std }, &[a])
    }

    /// Replaces entries where `mask` is true by `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if mask.len() != self.value(a).numel() {
            return Err(dim_err("masked_fill", &sa, &[mask.len()]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        self.record("masked_fill", sa, data, Op::MaskedFill(a, mask.to_vec()), &[a])
    }

    /// Mean cross-entropy of `[batch, classes]` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(dim_err("cross_entropy", &sl, &[labels.len()]));
        }
        let c = sl[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("class id {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(sl[0] * c);
        let mut loss = 0.0;
        for (row, &y) in self.value(logits).data().chunks(c).zip(labels) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        loss /= labels.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.record("cross_entropy", vec![], vec![loss], op, &[logits])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn vjp(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g));
            }
            Op::MatMul { a, b, shared_rhs } => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for t in 0..batch {
                        let bo = if *shared_rhs { 0 } else { t * k * n };
                        for i in 0..m {
                            let grow = &g[t * m * n + i * n..t * m * n + (i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[bo + p * n..bo + (p + 1) * n];
                                s[t * m * k + i * k + p] +=
                                    grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for t in 0..batch {
                        let bo = if *shared_rhs { 0 } else { t * k * n };
                        for i in 0..m {
                            let grow = &g[t * m * n + i * n..t * m * n + (i + 1) * n];
                            for p in 0..k {
                                let x = av[t * m * k + i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (o, gv) in s[bo + p * n..bo + (p + 1) * n].iter_mut().zip(grow) {
                                    *o += x * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Gather(a, map) => {
                acc(*a, &mut |s| {
                    for (o, &src) in map.iter().enumerate() {
                        s[src] += g[o];
                    }
                });
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| last_axis(self.nodes[p.0].value.shape()))
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    acc(p, &mut |s| {
                        for r in 0..rows {
                            for j in 0..w {
                                s[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > 0.0 {
                            s[i] += g[i];
                        } else if av[i] < 0.0 {
                            s[i] -= g[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = last_axis(node.value.shape());
                acc(*a, &mut |s| {
                    for r in 0..y.len() / n {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            s[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::RowNormalize(a) => {
                let y = node.value.data();
                let x = val(*a);
                let n = last_axis(node.value.shape());
                acc(*a, &mut |s| {
                    for r in 0..y.len() / n {
                        let sum: f64 = x[r * n..(r + 1) * n].iter().sum();
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            s[r * n + j] += (gr[j] - dot) / sum;
                        }
                    }
                });
            }
            Op::MeanLast(a) => {
                let n = last_axis(self.nodes[a.0].value.shape());
                acc(*a, &mut |s| {
                    for (i, v) in s.iter_mut().enumerate() {
                        *v += g[i / n] / n as f64;
                    }
                });
            }
            Op::SumAll(a) => {
                acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Standardize { x, inv_std } => {
                let y = node.value.data();
                let n = last_axis(node.value.shape());
                acc(*x, &mut |s| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            s[r * n + j] += is * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::MaskedFill(a, mask) => {
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if !mask[i] {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |s| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            s[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}
