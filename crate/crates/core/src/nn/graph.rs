//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value and the inputs it was computed from. [`Graph::backward`]
//! walks the tape in reverse, and [`Graph::backward_from`] starts from arbitrary
//! seed gradients, which is what the split-learning protocol needs when a
//! gradient arrives from across the network.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x · wᵀ` with x: n×k, w: m×k.
    MatMulT(Var, Var),
    /// `a · b` with a: n×k, b: k×m.
    MatMul(Var, Var),
    /// Adds a length-m vector to every row of an n×m matrix.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    EmbedMean {
        table: Var,
        ids: Vec<Vec<usize>>,
    },
    /// Softmax probabilities are kept for the backward pass.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a named parameter bound with [`Graph::param`].
    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|v| self.get(*v))
    }

    /// Named parameter gradients in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.get(*v).map(|g| (n.as_str(), g)))
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; it participates in backprop iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Binds a named parameter. Binding the same name twice returns the same node.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        if let Some(v) = self.params.get(name) {
            return *v;
        }
        let mut value = t.clone();
        value.zero_grad();
        let v = self.push(value.with_requires_grad(trainable), Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let ((n, k), (m, k2)) = (dims2(xv), dims2(wv));
        if k != k2 || wv.shape().len() != 2 {
            return Err(Error::shape("matmul_t", xv.shape(), wv.shape()));
        }
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xr = &xd[i * k..(i + 1) * k];
            for j in 0..m {
                let wr = &wd[j * k..(j + 1) * k];
                out[i * m + j] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMulT(x, w), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((n, k), (k2, m)) = (dims2(av), dims2(bv));
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for t in 0..k {
                let s = ad[i * k + t];
                if s == 0.0 {
                    continue;
                }
                let br = &bd[t * m..(t + 1) * m];
                for (o, b) in out[i * m..(i + 1) * m].iter_mut().zip(br) {
                    *o += s * b;
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), needs))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (n, m) = dims2(xv);
        if bv.len() != m {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let bd = bv.data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::AddRow(x, b), needs))
    }

    fn zip_op(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let mut t = Tensor::zeros(av.shape());
        t.data_mut()
            .iter_mut()
            .zip(av.data())
            .for_each(|(o, x)| *o = f(*x));
        let needs = self.needs(a);
        self.push(t, op, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_op(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(p) => self.value(*p).rows(),
            None => return Err(Error::InvalidInput("concat of zero tensors".into())),
        };
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for p in parts {
            if self.value(*p).rows() != n {
                return Err(Error::shape("concat_cols", &[n], self.value(*p).shape()));
            }
        }
        let m: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            Tensor::matrix(n, m, out)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = dims2(xv);
        if len == 0 || start + len > m {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::matrix(n, len, out)?,
            Op::SliceCols { x, start },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Row i of the result is the mean of the embedding rows named by `ids[i]`.
    pub fn embed_mean(&mut self, table: Var, ids: Vec<Vec<usize>>) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = dims2(tv);
        let mut out = vec![0.0; ids.len() * d];
        for (i, seq) in ids.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::InvalidInput("empty token sequence".into()));
            }
            let inv = 1.0 / seq.len() as f64;
            for &id in seq {
                if id >= vocab {
                    return Err(Error::InvalidInput(format!(
                        "token id {id} outside vocabulary of {vocab}"
                    )));
                }
                for (o, e) in out[i * d..(i + 1) * d].iter_mut().zip(tv.row(id)) {
                    *o += e * inv;
                }
            }
        }
        let n = ids.len();
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::matrix(n, d, out)?,
            Op::EmbedMean { table, ids },
            needs,
        ))
    }

    /// Mean softmax cross-entropy over rows, stabilised with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = dims2(lv);
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: c,
                });
            }
            let row = lv.row(i);
            let (arg, max) = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (j, &z)| if z > acc.1 { (j, z) } else { acc },
                );
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != arg)
                .map(|(_, z)| (z - max).exp())
                .sum();
            let tail = rest.ln_1p();
            let lse = max + tail;
            total += (max - row[y]) + tail;
            for (p, z) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(Error::shape("mse", pv.shape(), tv.shape()));
        }
        let s: f64 = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let v = s / pv.len() as f64;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(v), Op::Mse(pred, target), needs))
    }

    /// `x · Wᵀ + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_t(x, w)?;
        self.add_row(y, b)
    }

    /// Dense layer with a low-rank residual: `x·Wᵀ + b + scale·(x·Aᵀ)·Bᵀ`.
    pub fn lora_dense(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        a: Var,
        bb: Var,
        scale: f64,
    ) -> Result<Var> {
        let base = self.dense(x, w, b)?;
        let down = self.matmul_t(x, a)?;
        let up = self.matmul_t(down, bb)?;
        let up = self.scale(up, scale);
        self.add(base, up)
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.backward_from(&[(loss, Tensor::scalar(1.0))])
    }

    /// Backpropagates from explicit output gradients.
    pub fn backward_from(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            if !self.needs(*v) {
                return Err(Error::DetachedGraph);
            }
            let shape = self.value(*v).shape();
            if g.len() != self.value(*v).len() {
                return Err(Error::shape("backward seed", shape, g.shape()));
            }
            accumulate(&mut grads[v.0], g.data());
            start = start.max(v.0 + 1);
        }
        for idx in (0..start).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        // Only leaves and explicitly seeded nodes keep meaningful values, but
        // intermediate gradients are retained as they are useful for split points.
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMulT(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let ((n, k), (m, _)) = (dims2(xv), dims2(wv));
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * k];
                    for i in 0..n {
                        let dxr = &mut dx[i * k..(i + 1) * k];
                        for j in 0..m {
                            let g = gy[i * m + j];
                            if g == 0.0 {
                                continue;
                            }
                            for (d, wv) in dxr.iter_mut().zip(wv.row(j)) {
                                *d += g * wv;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; m * k];
                    for i in 0..n {
                        let xr = xv.row(i);
                        for j in 0..m {
                            let g = gy[i * m + j];
                            if g == 0.0 {
                                continue;
                            }
                            for (d, xv) in dw[j * k..(j + 1) * k].iter_mut().zip(xr) {
                                *d += g * xv;
                            }
                        }
                    }
                    accumulate(&mut grads[w.0], &dw);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ((n, k), (_, m)) = (dims2(av), dims2(bv));
                if self.needs(*a) {
                    let mut da = vec![0.0; n * k];
                    for i in 0..n {
                        for t in 0..k {
                            da[i * k + t] = gy[i * m..(i + 1) * m]
                                .iter()
                                .zip(bv.row(t))
                                .map(|(g, b)| g * b)
                                .sum();
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * m];
                    for i in 0..n {
                        for t in 0..k {
                            let s = av.data()[i * k + t];
                            for (d, g) in db[t * m..(t + 1) * m]
                                .iter_mut()
                                .zip(&gy[i * m..(i + 1) * m])
                            {
                                *d += s * g;
                            }
                        }
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::AddRow(x, b) => {
                if self.needs(*x) {
                    accumulate(&mut grads[x.0], gy);
                }
                if self.needs(*b) {
                    let m = self.value(*b).len();
                    let mut db = vec![0.0; m];
                    for row in gy.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], gy);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], gy);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], gy);
                }
                if self.needs(*b) {
                    let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let d: Vec<f64> = gy.iter().zip(bv).map(|(g, b)| g * b).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if self.needs(*b) {
                    let d: Vec<f64> = gy.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = gy.iter().map(|g| g * c).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = gy
                    .iter()
                    .zip(y.data())
                    .map(|(g, t)| g * (1.0 - t * t))
                    .collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = gy
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = gy
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = gy.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                accumulate(&mut grads[a.0], &d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], &vec![gy[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], &vec![gy[0] / n as f64; n]);
            }
            Op::ConcatCols(parts) => {
                let n = y.rows();
                let m = y.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs(*p) {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&gy[i * m + offset..i * m + offset + w]);
                        }
                        accumulate(&mut grads[p.0], &d);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (n, m) = dims2(xv);
                let len = y.cols();
                let mut d = vec![0.0; n * m];
                for i in 0..n {
                    d[i * m + start..i * m + start + len]
                        .copy_from_slice(&gy[i * len..(i + 1) * len]);
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], gy),
            Op::EmbedMean { table, ids } => {
                let (vocab, d) = dims2(self.value(*table));
                let mut dt = vec![0.0; vocab * d];
                for (i, seq) in ids.iter().enumerate() {
                    let inv = 1.0 / seq.len() as f64;
                    for &id in seq {
                        for (o, g) in dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&gy[i * d..(i + 1) * d])
                        {
                            *o += g * inv;
                        }
                    }
                }
                accumulate(&mut grads[table.0], &dt);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let n = labels.len();
                let s = gy[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &yl) in labels.iter().enumerate() {
                    d[i * c + yl] -= s;
                }
                accumulate(&mut grads[logits.0], &d);
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let s = 2.0 * gy[0] / pv.len() as f64;
                let d: Vec<f64> = pv.iter().zip(tv).map(|(p, t)| s * (p - t)).collect();
                if self.needs(*t) {
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    accumulate(&mut grads[t.0], &neg);
                }
                if self.needs(*p) {
                    accumulate(&mut grads[p.0], &d);
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
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
