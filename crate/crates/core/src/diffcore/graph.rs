//! Define-by-run tape of tensor operations with reverse-mode gradients.
//!
//! Every operation appends a node holding its output value and the
//! information its backward rule needs. Nodes are only ever appended, so the
//! recording order is a topological order and [`Graph::backward`] is a single
//! reverse sweep.

use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
        skip_zero: bool,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    MaskRows {
        src: Var,
        keep: Vec<bool>,
    },
    MaskedMaxPool {
        src: Var,
        argmax: Vec<usize>,
    },
    MaskedMean {
        src: Var,
        mask: Vec<bool>,
        seq_len: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Dropout(Var),
    Sum(Var),
    Mean(Var),
    BceWithLogits(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op,
    /// Saved forward state: attention probabilities, normalized activations,
    /// dropout multipliers or labels, depending on `op`.
    aux: Vec<F>,
}

/// Recorded computation. Rebuilt for every forward pass.
#[derive(Debug)]
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<F>, op: Op, inputs: &[Var], aux: Vec<F>) -> Var {
        value.grad = None;
        value.requires_grad = inputs
            .iter()
            .any(|v| self.nodes[v.0].value.requires_grad);
        self.nodes.push(Node { value, op, aux });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor; it receives a gradient if `requires_grad` is set.
    pub fn leaf(&mut self, mut t: Tensor<F>) -> Var {
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<F>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Softmax weights of an attention node, laid out `[batch, head, query, key]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[F]> {
        match self.nodes[v.0].op {
            Op::Attention { .. } => Some(&self.nodes[v.0].aux),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() < 2 || bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul of {:?} by {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            av.data(),
            (k as isize, 1),
            bv.data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let mut shape = av.shape()[..av.shape().len() - 1].to_vec();
        shape.push(n);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b], Vec::new()))
    }

    /// Pointwise add or multiply of two identically shaped tensors.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "{kind:?} of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data: Vec<F> = match kind {
            ElementwiseKind::Add => av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect(),
            ElementwiseKind::Mul => av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
        };
        let t = Tensor::new(av.shape(), data)?;
        let op = match kind {
            ElementwiseKind::Add => Op::Add(a, b),
            ElementwiseKind::Mul => Op::Mul(a, b),
        };
        Ok(self.push(t, op, &[a, b], Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Mul, a, b)
    }

    /// Adds a length-`c` vector to every row of `x`; the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if bv.shape().len() != 1 || bv.len() != xv.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} over rows of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                for (o, &b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
        }
        let t = Tensor::new(xv.shape(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias], Vec::new()))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let f = F::from_f64_lossy(factor);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|&v| v * f).collect())
            .expect("same shape");
        self.push(t, Op::Scale(x, factor), &[x], Vec::new())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let t = Tensor::new(
            xv.shape(),
            xv.data().iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect(),
        )
        .expect("same shape");
        self.push(t, Op::Relu(x), &[x], Vec::new())
    }

    fn gather_impl(&mut self, table: Var, ids: &[usize], skip_zero: bool) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "row gather needs a 2-d table, got {:?}",
                tv.shape()
            )));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!(
                    "id {id} out of range for table with {vocab} rows"
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                skip_zero,
            },
            &[table],
            Vec::new(),
        ))
    }

    /// Embedding lookup: gathers rows of `table`; the backward pass scatter-adds
    /// into every row except the padding row 0.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_impl(table, ids, true)
    }

    /// Gathers rows of any tensor, e.g. to repeat or pick sequence positions.
    pub fn select_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let sv = &self.nodes[src.0].value;
        let (r, c) = (sv.rows(), sv.cols());
        if sv.shape().len() != 2 {
            let flat = self.reshape(src, &[r, c])?;
            return self.gather_impl(flat, rows, false);
        }
        self.gather_impl(src, rows, false)
    }

    /// Joins tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::Shape("concat of nothing".into()));
        };
        let rows = self.nodes[first.0].value.rows();
        for p in parts {
            if self.nodes[p.0].value.rows() != rows {
                return Err(Error::Shape(format!(
                    "concat of {:?} and {:?}",
                    self.nodes[first.0].value.shape(),
                    self.nodes[p.0].value.shape()
                )));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(&[rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts, Vec::new()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x], Vec::new()))
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if keep.len() != xv.rows() {
            return Err(Error::Shape(format!(
                "row mask of length {} over {:?}",
                keep.len(),
                xv.shape()
            )));
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                data[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = F::zero());
            }
        }
        let t = Tensor::new(xv.shape(), data)?;
        Ok(self.push(
            t,
            Op::MaskRows {
                src: x,
                keep: keep.to_vec(),
            },
            &[x],
            Vec::new(),
        ))
    }

    fn check_seq(&self, x: Var, mask: &[bool], seq_len: usize) -> Result<(usize, usize)> {
        let xv = &self.nodes[x.0].value;
        if seq_len == 0 || !xv.rows().is_multiple_of(seq_len) || mask.len() != xv.rows() {
            return Err(Error::Shape(format!(
                "sequence op over {:?} with seq_len {seq_len} and mask of {}",
                xv.shape(),
                mask.len()
            )));
        }
        Ok((xv.rows() / seq_len, xv.cols()))
    }

    /// Coordinate-wise max over the valid positions of each length-`seq_len`
    /// group of rows; a group with no valid position yields zeros.
    pub fn masked_max_pool(&mut self, x: Var, mask: &[bool], seq_len: usize) -> Result<Var> {
        let (groups, d) = self.check_seq(x, mask, seq_len)?;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![F::zero(); groups * d];
        let mut argmax = vec![usize::MAX; groups * d];
        for g in 0..groups {
            for p in 0..seq_len {
                let r = g * seq_len + p;
                if !mask[r] {
                    continue;
                }
                for j in 0..d {
                    let v = xv[r * d + j];
                    let slot = g * d + j;
                    if argmax[slot] == usize::MAX || v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = r;
                    }
                }
            }
        }
        let t = Tensor::new(&[groups, d], out)?;
        Ok(self.push(t, Op::MaskedMaxPool { src: x, argmax }, &[x], Vec::new()))
    }

    /// Mean over the valid positions of each group; zeros when none are valid.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool], seq_len: usize) -> Result<Var> {
        let (groups, d) = self.check_seq(x, mask, seq_len)?;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![F::zero(); groups * d];
        for g in 0..groups {
            let valid: Vec<usize> = (0..seq_len)
                .map(|p| g * seq_len + p)
                .filter(|&r| mask[r])
                .collect();
            if valid.is_empty() {
                continue;
            }
            let inv = F::one() / F::from_usize(valid.len()).unwrap();
            for &r in &valid {
                for j in 0..d {
                    out[g * d + j] += xv[r * d + j] * inv;
                }
            }
        }
        let t = Tensor::new(&[groups, d], out)?;
        Ok(self.push(
            t,
            Op::MaskedMean {
                src: x,
                mask: mask.to_vec(),
                seq_len,
            },
            &[x],
            Vec::new(),
        ))
    }

    /// Multi-head scaled dot-product attention over groups of `seq_len` rows.
    ///
    /// `q`, `k`, `v` are `(B·seq_len) × D`; keys whose mask flag is false get
    /// weight zero. A query whose group has no valid key outputs zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &[bool],
        seq_len: usize,
    ) -> Result<Var> {
        let (batch, d) = self.check_seq(q, mask, seq_len)?;
        let shape = self.nodes[q.0].value.shape().to_vec();
        if self.nodes[k.0].value.shape() != shape.as_slice()
            || self.nodes[v.0].value.shape() != shape.as_slice()
        {
            return Err(Error::Shape(format!(
                "attention q {:?}, k {:?}, v {:?}",
                shape,
                self.nodes[k.0].value.shape(),
                self.nodes[v.0].value.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let n = seq_len;
        let mut probs = vec![F::zero(); batch * heads * n * n];
        let mut out = vec![F::zero(); batch * n * d];
        let mut scores = vec![F::zero(); n];
        for b in 0..batch {
            let valid: Vec<usize> = (0..n).filter(|&j| mask[b * n + j]).collect();
            if valid.is_empty() {
                continue;
            }
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let qi = &qd[(b * n + i) * d + off..(b * n + i) * d + off + dh];
                    let mut max = F::neg_infinity();
                    for &j in &valid {
                        let kj = &kd[(b * n + j) * d + off..(b * n + j) * d + off + dh];
                        let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<F>() * scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut z = F::zero();
                    let prow = &mut probs[((b * heads + h) * n + i) * n..((b * heads + h) * n + i + 1) * n];
                    for &j in &valid {
                        let e = (scores[j] - max).exp();
                        prow[j] = e;
                        z += e;
                    }
                    for &j in &valid {
                        prow[j] = prow[j] / z;
                    }
                    let orow = &mut out[(b * n + i) * d + off..(b * n + i) * d + off + dh];
                    for &j in &valid {
                        let p = prow[j];
                        let vj = &vd[(b * n + j) * d + off..(b * n + j) * d + off + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
            },
            &[q, k, v],
            probs,
        ))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let d = xv.cols();
        for p in [gain, bias] {
            let pv = &self.nodes[p.0].value;
            if pv.shape() != [d] {
                return Err(Error::Shape(format!(
                    "layer norm parameter {:?} over {:?}",
                    pv.shape(),
                    xv.shape()
                )));
            }
        }
        let rows = xv.rows();
        let (g, b) = (self.nodes[gain.0].value.data(), self.nodes[bias.0].value.data());
        let eps = F::from_f64_lossy(eps);
        let df = F::from_usize(d).unwrap();
        let mut aux = vec![F::zero(); rows * d + rows];
        let mut out = vec![F::zero(); rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let inv = F::one() / (var + eps).sqrt();
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                aux[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
            aux[rows * d + r] = inv;
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias }, &[x, gain, bias], aux))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. Callers skip it outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let xv = &self.nodes[x.0].value;
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let scales: Vec<F> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&scales).map(|(&v, &s)| v * s).collect();
        let t = Tensor::new(xv.shape(), data)?;
        Ok(self.push(t, Op::Dropout(x), &[x], scales))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = F::from_f64_lossy(wide_sum(self.nodes[x.0].value.data()));
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], Vec::new())
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = F::from_f64_lossy(wide_sum(xv.data()) / xv.len() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x], Vec::new()))
    }

    /// Mean binary cross-entropy computed from logits in the stable form
    /// `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[F]) -> Result<Var> {
        let zv = &self.nodes[logits.0].value;
        if zv.is_empty() {
            return Err(Error::Contract("loss over an empty batch".into()));
        }
        if zv.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} logits against {} labels",
                zv.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y != F::zero() && y != F::one()) {
            return Err(Error::Contract("labels must be 0 or 1".into()));
        }
        let loss = zv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| stable_bce(z, y).to_f64().unwrap())
            .sum::<f64>()
            / labels.len() as f64;
        let loss = F::from_f64_lossy(loss);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits(logits),
            &[logits],
            labels.to_vec(),
        ))
    }

    /// Fills `grad` of every node that requires one with `∂loss/∂node`.
    ///
    /// Gradients from an earlier call are discarded first, so repeated calls
    /// give identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        if !self.nodes[loss.0].value.requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].value.grad = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.nodes[i].value.grad.take() else {
                continue;
            };
            if self.nodes[i].value.requires_grad {
                let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
                self.propagate(i, &op, &gout);
                self.nodes[i].op = op;
            }
            self.nodes[i].value.grad = Some(gout);
        }
        Ok(())
    }

    /// Runs `f` on the gradient buffer of `v`, allocating it on first use.
    /// The buffer is moved out while `f` runs so every node value stays
    /// readable, including `v`'s own.
    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [F], &Self)) {
        if !self.nodes[v.0].value.requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let mut g = self.nodes[v.0]
            .value
            .grad
            .take()
            .unwrap_or_else(|| vec![F::zero(); n]);
        f(&mut g, self);
        self.nodes[v.0].value.grad = Some(g);
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &[F]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                self.accumulate(*a, |ga, s| {
                    F::gemm(m, n, k, g, (n as isize, 1), s.data(*b), (1, n as isize), ga, true);
                });
                self.accumulate(*b, |gb, s| {
                    F::gemm(k, m, n, s.data(*a), (1, k as isize), g, (n as isize, 1), gb, true);
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(v, |gv, _| add_into(gv, g));
                }
            }
            Op::Mul(a, b) => {
                self.accumulate(*a, |ga, s| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(s.data(*b)) {
                        *o += gi * y;
                    }
                });
                self.accumulate(*b, |gb, s| {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(s.data(*a)) {
                        *o += gi * x;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                self.accumulate(*x, |gx, _| add_into(gx, g));
                self.accumulate(*bias, |gb, _| {
                    let c = gb.len();
                    if c > 0 {
                        for row in g.chunks(c) {
                            add_into(gb, row);
                        }
                    }
                });
            }
            Op::Scale(x, factor) => {
                let f = F::from_f64_lossy(*factor);
                self.accumulate(*x, |gx, _| {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi * f;
                    }
                });
            }
            Op::Relu(x) => {
                self.accumulate(*x, |gx, s| {
                    for ((o, &gi), &xv) in gx.iter_mut().zip(g).zip(s.data(*x)) {
                        if xv > F::zero() {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Gather {
                table,
                ids,
                skip_zero,
            } => {
                let d = self.nodes[table.0].value.cols();
                self.accumulate(*table, |gt, _| {
                    for (r, &id) in ids.iter().enumerate() {
                        if *skip_zero && id == 0 {
                            continue;
                        }
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let rows = self.nodes[i].value.rows();
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    self.accumulate(*p, |gp, _| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::Reshape(x) => self.accumulate(*x, |gx, _| add_into(gx, g)),
            Op::MaskRows { src, keep } => {
                let c = self.nodes[i].value.cols();
                self.accumulate(*src, |gs, _| {
                    for (r, &k) in keep.iter().enumerate() {
                        if k {
                            add_into(&mut gs[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        }
                    }
                });
            }
            Op::MaskedMaxPool { src, argmax } => {
                let d = self.nodes[i].value.cols();
                self.accumulate(*src, |gs, _| {
                    for (slot, &r) in argmax.iter().enumerate() {
                        if r != usize::MAX {
                            gs[r * d + slot % d] += g[slot];
                        }
                    }
                });
            }
            Op::MaskedMean { src, mask, seq_len } => {
                let d = self.nodes[i].value.cols();
                let groups = self.nodes[i].value.rows();
                self.accumulate(*src, |gs, _| {
                    for gi in 0..groups {
                        let rows: Vec<usize> = (0..*seq_len)
                            .map(|p| gi * seq_len + p)
                            .filter(|&r| mask[r])
                            .collect();
                        if rows.is_empty() {
                            continue;
                        }
                        let inv = F::one() / F::from_usize(rows.len()).unwrap();
                        for r in rows {
                            for j in 0..d {
                                gs[r * d + j] += g[gi * d + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
            } => {
                let (dq, dk, dv) = self.attention_backward(i, *q, *k, *v, *heads, *seq_len, g);
                self.accumulate(*q, |gq, _| add_into(gq, &dq));
                self.accumulate(*k, |gk, _| add_into(gk, &dk));
                self.accumulate(*v, |gv, _| add_into(gv, &dv));
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = self.nodes[i].value.cols();
                let rows = self.nodes[i].value.rows();
                let aux = &self.nodes[i].aux;
                let (xhat, inv_std) = aux.split_at(rows * d);
                let gn = self.data(*gain);
                let df = F::from_usize(d).unwrap();
                let mut dx = vec![F::zero(); rows * d];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gn[j];
                        s1 += dxh;
                        s2 += dxh * xr[j];
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                    }
                    let c = inv_std[r] / df;
                    for j in 0..d {
                        let dxh = gr[j] * gn[j];
                        dx[r * d + j] = c * (df * dxh - s1 - xr[j] * s2);
                    }
                }
                self.accumulate(*x, |gx, _| add_into(gx, &dx));
                self.accumulate(*gain, |gg, _| add_into(gg, &dgain));
                self.accumulate(*bias, |gb, _| add_into(gb, &dbias));
            }
            Op::Dropout(x) => {
                let scales = std::mem::take(&mut self.nodes[i].aux);
                self.accumulate(*x, |gx, _| {
                    for ((o, &gi), &s) in gx.iter_mut().zip(g).zip(&scales) {
                        *o += gi * s;
                    }
                });
                self.nodes[i].aux = scales;
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(*x, |gx, _| gx.iter_mut().for_each(|o| *o += g0));
            }
            Op::Mean(x) => {
                let n = F::from_usize(self.nodes[x.0].value.len()).unwrap();
                let g0 = g[0] / n;
                self.accumulate(*x, |gx, _| gx.iter_mut().for_each(|o| *o += g0));
            }
            Op::BceWithLogits(z) => {
                let labels = std::mem::take(&mut self.nodes[i].aux);
                let n = F::from_usize(labels.len()).unwrap();
                let g0 = g[0] / n;
                self.accumulate(*z, |gz, s| {
                    for ((o, &zv), &y) in gz.iter_mut().zip(s.data(*z)).zip(&labels) {
                        *o += g0 * (sigmoid(zv) - y);
                    }
                });
                self.nodes[i].aux = labels;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        i: usize,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        n: usize,
        g: &[F],
    ) -> (Vec<F>, Vec<F>, Vec<F>) {
        let d = self.nodes[i].value.cols();
        let batch = self.nodes[i].value.rows() / n;
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let probs = &self.nodes[i].aux;
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![F::zero(); qd.len()];
        let mut dk = vec![F::zero(); kd.len()];
        let mut dv = vec![F::zero(); vd.len()];
        let mut dscore = vec![F::zero(); n];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for qi in 0..n {
                    let prow = &probs[((b * heads + h) * n + qi) * n..((b * heads + h) * n + qi + 1) * n];
                    let gi = &g[(b * n + qi) * d + off..(b * n + qi) * d + off + dh];
                    let mut weighted = F::zero();
                    for j in 0..n {
                        let p = prow[j];
                        if p == F::zero() {
                            dscore[j] = F::zero();
                            continue;
                        }
                        let base = (b * n + j) * d + off;
                        let vj = &vd[base..base + dh];
                        let dp = gi.iter().zip(vj).map(|(&x, &y)| x * y).sum::<F>();
                        dscore[j] = dp;
                        weighted += p * dp;
                        for (o, &x) in dv[base..base + dh].iter_mut().zip(gi) {
                            *o += p * x;
                        }
                    }
                    let qbase = (b * n + qi) * d + off;
                    for j in 0..n {
                        let p = prow[j];
                        if p == F::zero() {
                            continue;
                        }
                        let ds = p * (dscore[j] - weighted) * scale;
                        let kbase = (b * n + j) * d + off;
                        for t in 0..dh {
                            dq[qbase + t] += ds * kd[kbase + t];
                            dk[kbase + t] += ds * qd[qbase + t];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

/// Reductions accumulate in f64 so long f32 sums keep their precision.
fn wide_sum<F: Real>(xs: &[F]) -> f64 {
    xs.iter().map(|x| x.to_f64().unwrap()).sum()
}

pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn stable_bce<F: Real>(z: F, y: F) -> F {
    z.max(F::zero()) - z * y + (-z.abs()).exp().ln_1p()
}
