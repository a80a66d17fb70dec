//! Wengert-list reverse mode.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the list in reverse and accumulates gradients into the leaves
//! that were registered with `requires_grad`. Intermediate gradients are
//! transient, so calling `backward` twice doubles leaf gradients.

use super::tensor::{self, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Var),
    Concat { a: Var, b: Var, axis: usize },
    Tanh(Var),
    Softmax { x: Var, temperature: T },
    Log(Var),
    L2Normalize(Var),
    Cosine(Var, Var),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient (frozen weights, data).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Accumulated gradient of a `requires_grad` leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Leaves that would receive gradients.
    pub fn trainable_leaves(&self) -> Vec<Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, _)| Var(i))
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.require_2d("transpose", a)?;
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// `a (m×n) + b (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.require_2d("add_row", a)?;
        if self.shape(b) != [1, n] {
            return Err(Error::dim("add_row", self.shape(a), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..m {
            for j in 0..n {
                let x = &mut out.data_mut()[i * n + j];
                *x = *x + bias[j];
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::AddRow(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Scale(a, c))
    }

    /// Multiplies row `i` of `a (m×n)` by `s[i]` where `s` is `m×1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.require_2d("scale_rows", a)?;
        if self.value(s).numel() != m {
            return Err(Error::dim("scale_rows", self.shape(a), self.shape(s)));
        }
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..m {
            for x in &mut out.data_mut()[i * n..(i + 1) * n] {
                *x = *x * sv[i];
            }
        }
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, rg, Op::ScaleRows(a, s)))
    }

    /// Concatenates two matrices along rows (`axis = 0`) or the last axis (`axis = 1`).
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ra, ca) = self.require_2d("concat", a)?;
        let (rb, cb) = self.require_2d("concat", b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = match axis {
            0 if ca == cb => {
                let mut d = va.data().to_vec();
                d.extend_from_slice(vb.data());
                Tensor::new(vec![ra + rb, ca], d)?
            }
            1 if ra == rb => {
                let mut d = Vec::with_capacity(ra * (ca + cb));
                for i in 0..ra {
                    d.extend_from_slice(va.row_slice(i));
                    d.extend_from_slice(vb.row_slice(i));
                }
                Tensor::new(vec![ra, ca + cb], d)?
            }
            0 | 1 => return Err(Error::dim("concat", va.shape(), vb.shape())),
            _ => return Err(Error::Parameter(format!("concat axis {axis} not in {{0, 1}}"))),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Concat { a, b, axis }))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Tanh(a))
    }

    pub fn softmax(&mut self, x: Var, temperature: T) -> Result<Var> {
        let out = tensor::softmax(self.value(x), temperature)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Softmax { x, temperature }))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| !(v > T::zero())) {
            return Err(Error::Degenerate(format!("log of non-positive value {bad}")));
        }
        let out = self.value(a).map(|x| x.ln());
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Log(a)))
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let out = tensor::l2_normalize(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::L2Normalize(a)))
    }

    /// Scalar (`1×1`) cosine similarity.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = tensor::cosine_sim(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(c), rg, Op::Cosine(a, b)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.require_2d("gather_rows", a)?;
        if idx.is_empty() {
            return Err(Error::Parameter("gather_rows with empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Parameter(format!("row index {bad} out of range for {m} rows")));
        }
        let src = self.value(a);
        let mut d = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            d.extend_from_slice(src.row_slice(i));
        }
        let out = Tensor::new(vec![idx.len(), n], d)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::lit(v.numel() as f64));
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Mean(a))
    }

    /// Column means of a matrix: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.require_2d("mean_rows", a)?;
        let v = self.value(a);
        let inv = T::one() / T::lit(m as f64);
        let mut d = vec![T::zero(); n];
        for i in 0..m {
            for (acc, &x) in d.iter_mut().zip(v.row_slice(i)) {
                *acc = *acc + x;
            }
        }
        for x in &mut d {
            *x = *x * inv;
        }
        let out = Tensor::new(vec![1, n], d)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::MeanRows(a)))
    }

    /// Mean over rows of `-log softmax(logits_b)[targets_b]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, n) = self.require_2d("cross_entropy", logits)?;
        if targets.len() != b {
            return Err(Error::dim("cross_entropy", &[b, n], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= n) {
            return Err(Error::Parameter(format!("target {bad} out of range for {n} classes")));
        }
        let mut total = T::zero();
        for (r, &y) in targets.iter().enumerate() {
            // log-sum-exp form keeps large logits finite
            let row = self.value(logits).row_slice(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[y]);
        }
        let out = Tensor::scalar(total / T::lit(b as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into trainable leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let slot = &mut self.nodes[idx].grad;
                match slot {
                    Some(acc) => acc.add_assign(&g)?,
                    None => *slot = Some(g),
                }
                continue;
            }
            for (parent, pg) in self.local_grads(idx, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                vec![
                    (*a, tensor::matmul(g, &bv.transpose())?),
                    (*b, tensor::matmul(&av.transpose(), g)?),
                ]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, b) => {
                let (m, n) = g.dims2();
                let mut db = vec![T::zero(); n];
                for i in 0..m {
                    for (acc, &x) in db.iter_mut().zip(g.row_slice(i)) {
                        *acc = *acc + x;
                    }
                }
                vec![(*a, g.clone()), (*b, Tensor::new(vec![1, n], db)?)]
            }
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(self.value(*b), "mul", |x, y| x * y)?),
                (*b, g.zip_map(self.value(*a), "mul", |x, y| x * y)?),
            ],
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
            Op::ScaleRows(a, s) => {
                let av = self.value(*a);
                let sv = self.value(*s);
                let (m, n) = av.dims2();
                let mut da = g.clone();
                let mut ds = vec![T::zero(); m];
                for i in 0..m {
                    let si = sv.data()[i];
                    for j in 0..n {
                        let k = i * n + j;
                        ds[i] = ds[i] + g.data()[k] * av.data()[k];
                        da.data_mut()[k] = g.data()[k] * si;
                    }
                }
                vec![(*a, da), (*s, Tensor::new(sv.shape().to_vec(), ds)?)]
            }
            Op::Concat { a, b, axis } => {
                let (ra, ca) = self.value(*a).dims2();
                let (rb, cb) = self.value(*b).dims2();
                let (mut da, mut db) = (Vec::new(), Vec::new());
                if *axis == 0 {
                    da.extend_from_slice(&g.data()[..ra * ca]);
                    db.extend_from_slice(&g.data()[ra * ca..]);
                } else {
                    for i in 0..ra {
                        let row = g.row_slice(i);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                }
                vec![
                    (*a, Tensor::new(vec![ra, ca], da)?),
                    (*b, Tensor::new(vec![rb, cb], db)?),
                ]
            }
            Op::Tanh(a) => vec![(*a, g.zip_map(y, "tanh", |gi, yi| gi * (T::one() - yi * yi))?)],
            Op::Softmax { x, temperature } => {
                let (r, c) = y.dims2();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let inner = tensor::dot(yr, gr);
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - inner) / *temperature;
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::Log(a) => vec![(*a, g.zip_map(self.value(*a), "log", |gi, xi| gi / xi)?)],
            Op::L2Normalize(a) => {
                let xv = self.value(*a);
                let (r, c) = y.dims2();
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    let xr = xv.row_slice(i);
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let n = tensor::dot(xr, xr).sqrt();
                    let proj = tensor::dot(yr, gr);
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * proj) / n;
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), dx)?)]
            }
            Op::Cosine(a, b) => {
                let gs = g.data()[0];
                let av = self.value(*a);
                let bv = self.value(*b);
                let na = av.norm();
                let nb = bv.norm();
                let c = tensor::dot(av.data(), bv.data()) / (na * nb);
                let da = av.zip_map(bv, "cosine", |ai, bi| {
                    gs * (bi / (na * nb) - c * ai / (na * na))
                })?;
                let db = bv.zip_map(av, "cosine", |bi, ai| {
                    gs * (ai / (na * nb) - c * bi / (nb * nb))
                })?;
                vec![(*a, da), (*b, db)]
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let n = src.cols();
                let mut da = Tensor::zeros(src.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        let x = &mut da.data_mut()[i * n + j];
                        *x = *x + g.data()[r * n + j];
                    }
                }
                vec![(*a, da)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(self.shape(*a))?)],
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a), g.data()[0]))],
            Op::Mean(a) => {
                let n = T::lit(self.value(*a).numel() as f64);
                vec![(*a, Tensor::full(self.shape(*a), g.data()[0] / n))]
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2();
                let inv = T::one() / T::lit(m as f64);
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(g.data().iter().map(|&x| x * inv));
                }
                vec![(*a, Tensor::new(vec![m, n], d)?)]
            }
            Op::CrossEntropy { logits, targets } => {
                let gs = g.data()[0];
                let probs = tensor::softmax(self.value(*logits), T::one())?;
                let b = T::lit(targets.len() as f64);
                let n = probs.cols();
                let mut d = probs.into_data();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * n + t] = d[r * n + t] - T::one();
                }
                for x in &mut d {
                    *x = *x * gs / b;
                }
                vec![(*logits, Tensor::new(self.shape(*logits).to_vec(), d)?)]
            }
        };
        Ok(out)
    }
}
