//! Reverse-mode automatic differentiation over an append-only node list.
//!
//! Nodes are created in evaluation order, so creation order is a topological order
//! and the backward sweep is a single reverse pass over the list.

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, Conv3dSpec};
use crate::tensor::{NdArray, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Relu(Var),
    SumAll(Var),
    SoftmaxRows(Var),
    MatmulNt(Var, Var),
    ColumnSum(Var),
    MaskWeight(Var, Var),
    Conv3d {
        x: Var,
        w: Var,
        spec: Conv3dSpec,
    },
    AvgPool3d {
        x: Var,
        window: [usize; 3],
        stride: [usize; 3],
    },
    GlobalAvgPool(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    Concat(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: NdArray<T>,
    },
}

impl<T> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Relu(..) => "relu",
            Op::SumAll(..) => "sum",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::MatmulNt(..) => "matmul_nt",
            Op::ColumnSum(..) => "column_sum",
            Op::MaskWeight(..) => "mask_weight",
            Op::Conv3d { .. } => "conv3d",
            Op::AvgPool3d { .. } => "avg_pool3d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Concat(..) => "concat",
            Op::Linear { .. } => "linear",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: NdArray<T>,
    grad: Option<NdArray<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records array operations and computes gradients by a reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: NdArray<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: NdArray<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &NdArray<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&NdArray<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<NdArray<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        parents_of(&self.nodes[v.0].op)
    }

    fn push(&mut self, value: NdArray<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: NdArray<T>, op: Op<T>) -> Var {
        let requires = parents_of(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.derived(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.derived(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.derived(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.derived(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.derived(v, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.derived(v, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = ops::relu(self.value(a));
        self.derived(v, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = NdArray::scalar(self.value(a).sum());
        self.derived(v, Op::SumAll(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = ops::softmax_rows(self.value(a))?;
        Ok(self.derived(v, Op::SoftmaxRows(a)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.derived(v, Op::MatmulNt(a, b)))
    }

    /// Sum over rows of a `[R, G]` matrix, giving `[G]`.
    pub fn column_sum(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let [_, cols] = m.shape() else {
            return Err(Error::Shape(format!("column_sum needs a matrix, got {:?}", m.shape())));
        };
        let cols = *cols;
        let mut out = vec![T::zero(); cols];
        for row in m.data().chunks(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let v = NdArray::new(vec![cols], out)?;
        Ok(self.derived(v, Op::ColumnSum(a)))
    }

    /// Multiply a `[N, C, ...]` kernel bank by a `[N, C]` mask broadcast over the kernel taps.
    pub fn mask_weight(&mut self, w: Var, mask: Var) -> Result<Var> {
        let (wv, mv) = (self.value(w), self.value(mask));
        if wv.ndim() < 2 || mv.shape() != &wv.shape()[..2] {
            return Err(Error::Shape(format!(
                "mask {:?} does not match kernel bank {:?}",
                mv.shape(),
                wv.shape()
            )));
        }
        let taps: usize = wv.shape()[2..].iter().product();
        let mut out = wv.data().to_vec();
        for (block, &m) in out.chunks_mut(taps).zip(mv.data()) {
            for v in block {
                *v = *v * m;
            }
        }
        let v = NdArray::new(wv.shape().to_vec(), out)?;
        Ok(self.derived(v, Op::MaskWeight(w, mask)))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, spec: Conv3dSpec) -> Result<Var> {
        let v = ops::conv3d(self.value(x), self.value(w), &spec)?;
        Ok(self.derived(v, Op::Conv3d { x, w, spec }))
    }

    pub fn avg_pool3d(&mut self, x: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let v = ops::avg_pool3d(self.value(x), window, stride)?;
        Ok(self.derived(v, Op::AvgPool3d { x, window, stride }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = ops::global_avg_pool(self.value(x))?;
        Ok(self.derived(v, Op::GlobalAvgPool(x)))
    }

    /// Training-mode batch norm. Also returns the biased batch `(mean, var)`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (v, cache) = ops::batch_norm_train(self.value(x), self.value(gamma), self.value(beta))?;
        let stats = (cache.mean.clone(), cache.var.clone());
        let out = self.derived(v, Op::BatchNorm { x, gamma, beta, cache });
        Ok((out, stats.0, stats.1))
    }

    /// Fixed per-channel affine map; used for eval-mode batch norm.
    pub fn channel_affine(&mut self, x: Var, scale: Vec<T>, shift: &[T]) -> Result<Var> {
        let v = ops::channel_affine(self.value(x), &scale, shift)?;
        Ok(self.derived(v, Op::ChannelAffine { x, scale }))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let arrays: Vec<&NdArray<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = NdArray::concat_channels(&arrays)?;
        Ok(self.derived(v, Op::Concat(parts.to_vec())))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.derived(v, Op::Linear { x, w, b }))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), labels)?;
        Ok(self.derived(
            NdArray::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Accumulate `d loss / d node` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = NdArray::full(self.value(loss).shape(), T::one());
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (parent, dg) in contributions {
                let node = &mut self.nodes[parent.0];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&dg)?,
                    None => node.grad = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &NdArray<T>) -> Result<Vec<(Var, NdArray<T>)>> {
        let mut out = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.zip_map(self.value(*b), |x, y| x * y)?));
                out.push((*b, g.zip_map(self.value(*a), |x, y| x * y)?));
            }
            Op::Scale(a, s) => out.push((*a, g.map(|v| v * *s))),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::Square(a) => {
                let two = T::lit(2.0);
                out.push((*a, g.zip_map(self.value(*a), |gv, x| two * x * gv)?));
            }
            Op::Relu(a) => {
                let dx = g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })?;
                out.push((*a, dx));
            }
            Op::SumAll(a) => {
                out.push((*a, NdArray::full(self.value(*a).shape(), g.data()[0])));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let cols = y.shape()[1];
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..cols {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*a, NdArray::new(y.shape().to_vec(), dx)?));
            }
            Op::MatmulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    for r in 0..m {
                        for j in 0..n {
                            let gv = gd[r * n + j];
                            for t in 0..k {
                                da[r * k + t] += gv * bd[j * k + t];
                            }
                        }
                    }
                    out.push((*a, NdArray::new(vec![m, k], da)?));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); n * k];
                    for r in 0..m {
                        for j in 0..n {
                            let gv = gd[r * n + j];
                            for t in 0..k {
                                db[j * k + t] += gv * ad[r * k + t];
                            }
                        }
                    }
                    out.push((*b, NdArray::new(vec![n, k], db)?));
                }
            }
            Op::ColumnSum(a) => {
                let shape = self.value(*a).shape().to_vec();
                let cols = shape[1];
                let gd = g.data();
                out.push((*a, NdArray::from_fn(&shape, |i| gd[i % cols])));
            }
            Op::MaskWeight(w, mask) => {
                let (wv, mv) = (self.value(*w), self.value(*mask));
                let taps: usize = wv.shape()[2..].iter().product();
                if self.wants(*w) {
                    let mut dw = g.data().to_vec();
                    for (block, &m) in dw.chunks_mut(taps).zip(mv.data()) {
                        for v in block {
                            *v = *v * m;
                        }
                    }
                    out.push((*w, NdArray::new(wv.shape().to_vec(), dw)?));
                }
                if self.wants(*mask) {
                    let dm = g
                        .data()
                        .chunks(taps)
                        .zip(wv.data().chunks(taps))
                        .map(|(gb, wb)| gb.iter().zip(wb).map(|(&p, &q)| p * q).sum())
                        .collect();
                    out.push((*mask, NdArray::new(mv.shape().to_vec(), dm)?));
                }
            }
            Op::Conv3d { x, w, spec } => {
                let xv = self.value(*x);
                if self.wants(*x) {
                    let s = xv.shape();
                    let dx = ops::conv3d_backward_input(g, self.value(*w), spec, [s[2], s[3], s[4]])?;
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    out.push((*w, ops::conv3d_backward_weight(g, xv, spec)?));
                }
            }
            Op::AvgPool3d { x, window, stride } => {
                let s = self.value(*x).shape();
                let dx = ops::avg_pool3d_backward(g, [s[2], s[3], s[4]], *window, *stride)?;
                out.push((*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                out.push((*x, ops::global_avg_pool_backward(g, [s[2], s[3], s[4]])?));
            }
            Op::BatchNorm { x, gamma, beta, cache } => {
                let (dx, dgamma, dbeta) = ops::batch_norm_train_backward(g, self.value(*gamma), cache)?;
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::ChannelAffine { x, scale } => {
                let zero = vec![T::zero(); scale.len()];
                out.push((*x, ops::channel_affine(g, scale, &zero)?));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if self.wants(p) {
                        out.push((p, g.narrow_channels(start, c)?));
                    }
                    start += c;
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, f) = (xv.shape()[0], xv.shape()[1]);
                let k = wv.shape()[0];
                let gd = g.data();
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); batch * f];
                    for r in 0..batch {
                        for j in 0..k {
                            let gv = gd[r * k + j];
                            for t in 0..f {
                                dx[r * f + t] += gv * wv.data()[j * f + t];
                            }
                        }
                    }
                    out.push((*x, NdArray::new(vec![batch, f], dx)?));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); k * f];
                    for r in 0..batch {
                        for j in 0..k {
                            let gv = gd[r * k + j];
                            for t in 0..f {
                                dw[j * f + t] += gv * xv.data()[r * f + t];
                            }
                        }
                    }
                    out.push((*w, NdArray::new(vec![k, f], dw)?));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k];
                    for row in gd.chunks(k) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((*b, NdArray::new(vec![k], db)?));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.shape()[1];
                let scale = g.data()[0] / T::lit(labels.len() as f64);
                let mut d = probs.data().to_vec();
                for (row, &l) in d.chunks_mut(k).zip(labels) {
                    row[l] = row[l] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                out.push((*logits, NdArray::new(probs.shape().to_vec(), d)?));
            }
        }
        out.retain(|(p, _)| self.wants(*p));
        Ok(out)
    }
}

fn parents_of<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatmulNt(a, b) | Op::MaskWeight(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Square(a)
        | Op::Relu(a)
        | Op::SumAll(a)
        | Op::SoftmaxRows(a)
        | Op::ColumnSum(a)
        | Op::GlobalAvgPool(a) => vec![*a],
        Op::Conv3d { x, w, .. } => vec![*x, *w],
        Op::AvgPool3d { x, .. } | Op::ChannelAffine { x, .. } => vec![*x],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Concat(parts) => parts.clone(),
        Op::Linear { x, w, b } => vec![*x, *w, *b],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}
