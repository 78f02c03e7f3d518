//! Recorded computation trace with reverse-mode gradients.
//!
//! Every node stores its forward value and the primitive that produced it.
//! Forward kernels are pure functions of operand values, so [`Graph::replay`]
//! can recompute the whole trace and compare it against what was recorded.

use super::real::Real;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Matrix plus a row vector added to every row.
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Gelu(Var),
    Softmax(Var),
    /// Multi-head scaled dot-product attention, block-diagonal over `segments`
    /// (each `(start, len)` is one independent sequence of rows).
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
    },
    Sum(Var),
    /// Mean over rows of `-log softmax(logits)[label]`.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    /// Mean over rows of JSD(softmax(a), softmax(b)).
    Jsd {
        a: Var,
        b: Var,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that gradients are reported for.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = forward(&op, |v| &self.nodes[v.0].value)?;
        let needs_grad = inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(a, c))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddRowBias(x, bias))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.record(Op::GatherRows(table, ids))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.record(Op::ConcatRows(parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.record(Op::SliceRows { x, start, len })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.record(Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Gelu(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Softmax(x))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: Vec<(usize, usize)>) -> Result<Var> {
        self.record(Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        self.record(Op::CrossEntropy { logits, labels })
    }

    pub fn jsd(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Jsd { a, b })
    }

    /// Recompute every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<S>>> {
        let mut values: Vec<Tensor<S>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => forward(op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(root.value.shape(), S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn backprop_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, zip_map(g, self.val(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, zip_map(g, self.val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let c = S::from_f64(*c);
                    accumulate(grads, *a, map(g, |x| x * c));
                }
            }
            Op::AddRowBias(x, b) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.needs(*b) {
                    let cols = g.cols();
                    let mut gb = vec![S::zero(); cols];
                    for r in 0..g.rows() {
                        for (acc, &v) in gb.iter_mut().zip(g.row(r)) {
                            *acc = *acc + v;
                        }
                    }
                    let gb = Tensor::new(self.val(*b).shape().to_vec(), gb).expect("bias shape");
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let av = self.val(*a);
                let bv = self.val(*b);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(&[m, k]);
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        n,
                        false,
                        bv.data(),
                        n,
                        true,
                        S::zero(),
                        ga.data_mut(),
                        k,
                    );
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(&[k, n]);
                    gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        k,
                        true,
                        g.data(),
                        n,
                        false,
                        S::zero(),
                        gb.data_mut(),
                        n,
                    );
                    accumulate(grads, *b, gb);
                }
            }
            Op::GatherRows(table, ids) => {
                if self.needs(*table) {
                    let tv = self.val(*table);
                    let cols = tv.cols();
                    let mut gt = Tensor::zeros(tv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt.data_mut()[id * cols..(id + 1) * cols];
                        for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                            *d = *d + s;
                        }
                    }
                    accumulate(grads, *table, gt);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = self.val(*p);
                    let rows = pv.shape()[0];
                    if self.needs(*p) {
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), data).expect("concat part"));
                    }
                    offset += rows;
                }
            }
            Op::SliceRows { x, start, len } => {
                if self.needs(*x) {
                    let xv = self.val(*x);
                    let cols = xv.cols();
                    let mut gx = Tensor::zeros(xv.shape());
                    gx.data_mut()[start * cols..(start + len) * cols].copy_from_slice(g.data());
                    accumulate(grads, *x, gx);
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (gx, ggamma, gbeta) =
                    layer_norm_backward(self.val(*x), self.val(*gamma), S::from_f64(*eps), g, self.needs(*x));
                if self.needs(*x) {
                    accumulate(grads, *x, gx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, ggamma);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, gbeta);
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, zip_map(g, self.val(*x), |gy, v| gy * gelu_grad(v)));
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut gx = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        softmax_vjp(y.row(r), g.row(r), &mut gx.data_mut()[r * cols..(r + 1) * cols]);
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
            } => {
                let (gq, gk, gv) = attention_backward(self.val(*q), self.val(*k), self.val(*v), *heads, segments, g);
                for (var, grad) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.needs(var) {
                        accumulate(grads, var, grad);
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, Tensor::filled(self.val(*x).shape(), g.item()));
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let z = self.val(*logits);
                    let cols = z.cols();
                    let scale = g.item() / S::from_f64((labels.len()) as f64);
                    let mut gz = Tensor::zeros(z.shape());
                    for (r, &y) in labels.iter().enumerate() {
                        let out = &mut gz.data_mut()[r * cols..(r + 1) * cols];
                        softmax_row(z.row(r), out);
                        out[y] = out[y] - S::one();
                        for o in out.iter_mut() {
                            *o = *o * scale;
                        }
                    }
                    accumulate(grads, *logits, gz);
                }
            }
            Op::Jsd { a, b } => {
                let av = self.val(*a);
                let bv = self.val(*b);
                let cols = av.cols();
                let rows = av.rows();
                let scale = g.item() / S::from_f64((rows) as f64);
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                let mut p = vec![S::zero(); cols];
                let mut q = vec![S::zero(); cols];
                let mut dp = vec![S::zero(); cols];
                let mut dq = vec![S::zero(); cols];
                let half = S::from_f64(0.5);
                for r in 0..rows {
                    softmax_row(av.row(r), &mut p);
                    softmax_row(bv.row(r), &mut q);
                    for j in 0..cols {
                        let m = (p[j] + q[j]) * half;
                        dp[j] = if p[j] > S::zero() {
                            half * (p[j] / m).ln() * scale
                        } else {
                            S::zero()
                        };
                        dq[j] = if q[j] > S::zero() {
                            half * (q[j] / m).ln() * scale
                        } else {
                            S::zero()
                        };
                    }
                    softmax_vjp(&p, &dp, &mut ga.data_mut()[r * cols..(r + 1) * cols]);
                    softmax_vjp(&q, &dq, &mut gb.data_mut()[r * cols..(r + 1) * cols]);
                }
                if self.needs(*a) {
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gb);
                }
            }
        }
    }
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<S: Real>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) | Op::MatMul(a, b) => vec![*a, *b],
        Op::Scale(a, _) | Op::Gelu(a) | Op::Softmax(a) | Op::Sum(a) => vec![*a],
        Op::GatherRows(t, _) => vec![*t],
        Op::ConcatRows(parts) => parts.clone(),
        Op::SliceRows { x, .. } => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Jsd { a, b } => vec![*a, *b],
    }
}

fn map<S: Real>(x: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map<S: Real>(x: &Tensor<S>, y: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = x.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn same_shape<S: Real>(what: &str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix_dims<S: Real>(what: &str, t: &Tensor<S>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape(format!("{what}: expected a matrix, got {other:?}"))),
    }
}

/// Forward kernel of one primitive.
fn forward<'a, S: Real>(op: &Op, val: impl Fn(Var) -> &'a Tensor<S>) -> Result<Tensor<S>> {
    match op {
        Op::Leaf => Err(Error::InvalidArgument("leaf has no forward kernel".into())),
        Op::Add(a, b) => {
            let (a, b) = (val(*a), val(*b));
            same_shape("add", a, b)?;
            Ok(zip_map(a, b, |x, y| x + y))
        }
        Op::Mul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            same_shape("mul", a, b)?;
            Ok(zip_map(a, b, |x, y| x * y))
        }
        Op::Scale(a, c) => {
            let c = S::from_f64(*c);
            Ok(map(val(*a), |x| x * c))
        }
        Op::AddRowBias(x, b) => {
            let (x, b) = (val(*x), val(*b));
            if b.rank() != 1 || b.len() != x.cols() {
                return Err(Error::Shape(format!(
                    "row bias {:?} against {:?}",
                    b.shape(),
                    x.shape()
                )));
            }
            let cols = x.cols();
            let mut out = x.clone();
            for r in 0..x.rows() {
                for (o, &bb) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(b.data()) {
                    *o = *o + bb;
                }
            }
            Ok(out)
        }
        Op::MatMul(a, b) => {
            let (a, b) = (val(*a), val(*b));
            let (m, k) = matrix_dims("matmul lhs", a)?;
            let (k2, n) = matrix_dims("matmul rhs", b)?;
            if k != k2 {
                return Err(Error::Shape(format!("matmul {:?} @ {:?}", a.shape(), b.shape())));
            }
            let mut out = Tensor::zeros(&[m, n]);
            gemm(
                m,
                k,
                n,
                a.data(),
                k,
                false,
                b.data(),
                n,
                false,
                S::zero(),
                out.data_mut(),
                n,
            );
            Ok(out)
        }
        Op::GatherRows(table, ids) => {
            let t = val(*table);
            let (rows, cols) = matrix_dims("gather table", t)?;
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(Error::InvalidArgument(format!(
                        "row id {id} out of range for table with {rows} rows"
                    )));
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::new(vec![ids.len(), cols], data)
        }
        Op::ConcatRows(parts) => {
            let Some(first) = parts.first() else {
                return Err(Error::Shape("concat of zero parts".into()));
            };
            let cols = matrix_dims("concat part", val(*first))?.1;
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let pv = val(*p);
                let (r, c) = matrix_dims("concat part", pv)?;
                if c != cols {
                    return Err(Error::Shape(format!("concat width {c} vs {cols}")));
                }
                rows += r;
                data.extend_from_slice(pv.data());
            }
            Tensor::new(vec![rows, cols], data)
        }
        Op::SliceRows { x, start, len } => {
            let xv = val(*x);
            let (rows, cols) = matrix_dims("slice input", xv)?;
            if start + len > rows {
                return Err(Error::Shape(format!("slice {start}+{len} of {rows} rows")));
            }
            Tensor::new(vec![*len, cols], xv.data()[start * cols..(start + len) * cols].to_vec())
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (x, gamma, beta) = (val(*x), val(*gamma), val(*beta));
            let cols = x.cols();
            if gamma.len() != cols || beta.len() != cols {
                return Err(Error::Shape(format!(
                    "layer norm params {:?}/{:?} against width {cols}",
                    gamma.shape(),
                    beta.shape()
                )));
            }
            let eps = S::from_f64(*eps);
            let mut out = Tensor::zeros(x.shape());
            for r in 0..x.rows() {
                let row = x.row(r);
                let (mean, rstd) = row_moments(row, eps);
                let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
                for j in 0..cols {
                    dst[j] = (row[j] - mean) * rstd * gamma.data()[j] + beta.data()[j];
                }
            }
            Ok(out)
        }
        Op::Gelu(x) => Ok(map(val(*x), gelu)),
        Op::Softmax(x) => softmax(val(*x)),
        Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
        } => attention_forward(val(*q), val(*k), val(*v), *heads, segments),
        Op::Sum(x) => Ok(Tensor::scalar(val(*x).data().iter().fold(S::zero(), |acc, &v| acc + v))),
        Op::CrossEntropy { logits, labels } => {
            let z = val(*logits);
            check_labels(z, labels)?;
            let mut total = S::zero();
            for (r, &y) in labels.iter().enumerate() {
                let row = z.row(r);
                total = total + log_sum_exp(row) - row[y];
            }
            Ok(Tensor::scalar(total / S::from_f64((labels.len()) as f64)))
        }
        Op::Jsd { a, b } => {
            let (a, b) = (val(*a), val(*b));
            same_shape("jsd", a, b)?;
            let cols = a.cols();
            let mut p = vec![S::zero(); cols];
            let mut q = vec![S::zero(); cols];
            let mut total = S::zero();
            for r in 0..a.rows() {
                softmax_row(a.row(r), &mut p);
                softmax_row(b.row(r), &mut q);
                total = total + jsd_terms(&p, &q);
            }
            Ok(Tensor::scalar(total / S::from_f64((a.rows()) as f64)))
        }
    }
}

fn check_labels<S: Real>(z: &Tensor<S>, labels: &[usize]) -> Result<()> {
    if z.rank() == 0 || z.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "cross entropy: {} labels for logits {:?}",
            labels.len(),
            z.shape()
        )));
    }
    let classes = z.cols();
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

pub(crate) fn row_moments<S: Real>(row: &[S], eps: S) -> (S, S) {
    let n = S::from_f64((row.len()) as f64);
    let mean = row.iter().fold(S::zero(), |a, &v| a + v) / n;
    let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, (var + eps).sqrt().recip())
}

fn layer_norm_backward<S: Real>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    eps: S,
    g: &Tensor<S>,
    want_x: bool,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let cols = x.cols();
    let n = S::from_f64((cols) as f64);
    let mut gx = Tensor::zeros(if want_x { x.shape() } else { &[0] });
    let mut ggamma = Tensor::zeros(gamma.shape());
    let mut gbeta = Tensor::zeros(gamma.shape());
    let mut xhat = vec![S::zero(); cols];
    let mut dxhat = vec![S::zero(); cols];
    for r in 0..x.rows() {
        let row = x.row(r);
        let gy = g.row(r);
        let (mean, rstd) = row_moments(row, eps);
        for j in 0..cols {
            xhat[j] = (row[j] - mean) * rstd;
            dxhat[j] = gy[j] * gamma.data()[j];
            ggamma.data_mut()[j] = ggamma.data()[j] + gy[j] * xhat[j];
            gbeta.data_mut()[j] = gbeta.data()[j] + gy[j];
        }
        if want_x {
            let mean_d = dxhat.iter().fold(S::zero(), |a, &v| a + v) / n;
            let mean_dx = dxhat.iter().zip(&xhat).fold(S::zero(), |a, (&d, &h)| a + d * h) / n;
            let dst = &mut gx.data_mut()[r * cols..(r + 1) * cols];
            for j in 0..cols {
                dst[j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
    }
    (gx, ggamma, gbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

pub(crate) fn log_sum_exp<S: Real>(row: &[S]) -> S {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let s = row.iter().fold(S::zero(), |a, &v| a + (v - max).exp());
    max + s.ln()
}

pub(crate) fn softmax_row<S: Real>(row: &[S], out: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut total = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// `out = J_softmax(y)^T g` for one row.
fn softmax_vjp<S: Real>(y: &[S], g: &[S], out: &mut [S]) {
    let dot = y.iter().zip(g).fold(S::zero(), |a, (&yy, &gg)| a + yy * gg);
    for j in 0..y.len() {
        out[j] = out[j] + y[j] * (g[j] - dot);
    }
}

/// JSD of two distributions in natural-log units; `0·log 0` counts as 0.
pub(crate) fn jsd_terms<S: Real>(p: &[S], q: &[S]) -> S {
    let half = S::from_f64(0.5);
    let mut total = S::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        let m = (pi + qi) * half;
        if pi > S::zero() {
            total = total + half * pi * (pi / m).ln();
        }
        if qi > S::zero() {
            total = total + half * qi * (qi / m).ln();
        }
    }
    // Rounding can leave a tiny negative residue for p == q.
    total.max(S::zero())
}

/// Row-wise softmax over the last axis of a rank-1 or rank-2 tensor.
pub fn softmax<S: Real>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() == 0 || x.rank() > 2 {
        return Err(Error::Shape(format!(
            "softmax expects rank 1 or 2, got {:?}",
            x.shape()
        )));
    }
    x.ensure_finite("softmax input")?;
    let cols = x.cols();
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        softmax_row(x.row(r), &mut out.data_mut()[r * cols..(r + 1) * cols]);
    }
    Ok(out)
}

fn check_segments(rows: usize, segments: &[(usize, usize)]) -> Result<()> {
    let mut next = 0;
    for &(start, len) in segments {
        if start != next || len == 0 {
            return Err(Error::Shape(format!(
                "attention segments must tile the rows in order, got {segments:?}"
            )));
        }
        next = start + len;
    }
    if next != rows {
        return Err(Error::Shape(format!("attention segments cover {next} of {rows} rows")));
    }
    Ok(())
}

fn attention_dims<S: Real>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    segments: &[(usize, usize)],
) -> Result<(usize, usize)> {
    let (rows, width) = matrix_dims("attention q", q)?;
    same_shape("attention k", q, k)?;
    same_shape("attention v", q, v)?;
    if heads == 0 || width % heads != 0 {
        return Err(Error::Shape(format!("width {width} not divisible by {heads} heads")));
    }
    check_segments(rows, segments)?;
    Ok((width, width / heads))
}

/// Row-softmaxed scaled scores of one (segment, head) block.
fn attention_probs<S: Real>(q: &[S], k: &[S], width: usize, len: usize, head_dim: usize, scale: S, probs: &mut [S]) {
    gemm(
        len,
        head_dim,
        len,
        q,
        width,
        false,
        k,
        width,
        true,
        S::zero(),
        probs,
        len,
    );
    for r in 0..len {
        let row = &mut probs[r * len..(r + 1) * len];
        for v in row.iter_mut() {
            *v = *v * scale;
        }
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
}

fn attention_forward<S: Real>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    segments: &[(usize, usize)],
) -> Result<Tensor<S>> {
    let (width, head_dim) = attention_dims(q, k, v, heads, segments)?;
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut out = Tensor::zeros(q.shape());
    let mut probs = Vec::new();
    for &(start, len) in segments {
        probs.resize(len * len, S::zero());
        for h in 0..heads {
            let off = start * width + h * head_dim;
            attention_probs(
                &q.data()[off..],
                &k.data()[off..],
                width,
                len,
                head_dim,
                scale,
                &mut probs,
            );
            gemm(
                len,
                len,
                head_dim,
                &probs,
                len,
                false,
                &v.data()[off..],
                width,
                false,
                S::zero(),
                &mut out.data_mut()[off..],
                width,
            );
        }
    }
    Ok(out)
}

fn attention_backward<S: Real>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    heads: usize,
    segments: &[(usize, usize)],
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let width = q.cols();
    let head_dim = width / heads;
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut gq = Tensor::zeros(q.shape());
    let mut gk = Tensor::zeros(q.shape());
    let mut gv = Tensor::zeros(q.shape());
    let mut probs = Vec::new();
    let mut dprobs = Vec::new();
    for &(start, len) in segments {
        probs.resize(len * len, S::zero());
        dprobs.resize(len * len, S::zero());
        for h in 0..heads {
            let off = start * width + h * head_dim;
            attention_probs(
                &q.data()[off..],
                &k.data()[off..],
                width,
                len,
                head_dim,
                scale,
                &mut probs,
            );
            // dV = P^T dO
            gemm(
                len,
                len,
                head_dim,
                &probs,
                len,
                true,
                &g.data()[off..],
                width,
                false,
                S::zero(),
                &mut gv.data_mut()[off..],
                width,
            );
            // dP = dO V^T
            gemm(
                len,
                head_dim,
                len,
                &g.data()[off..],
                width,
                false,
                &v.data()[off..],
                width,
                true,
                S::zero(),
                &mut dprobs,
                len,
            );
            // dS = scale * P ⊙ (dP - rowdot(dP, P))
            for r in 0..len {
                let p = &probs[r * len..(r + 1) * len];
                let dp = &mut dprobs[r * len..(r + 1) * len];
                let dot = p.iter().zip(dp.iter()).fold(S::zero(), |a, (&x, &y)| a + x * y);
                for j in 0..len {
                    dp[j] = scale * p[j] * (dp[j] - dot);
                }
            }
            // dQ = dS K, dK = dS^T Q
            gemm(
                len,
                len,
                head_dim,
                &dprobs,
                len,
                false,
                &k.data()[off..],
                width,
                false,
                S::zero(),
                &mut gq.data_mut()[off..],
                width,
            );
            gemm(
                len,
                len,
                head_dim,
                &dprobs,
                len,
                true,
                &q.data()[off..],
                width,
                false,
                S::zero(),
                &mut gk.data_mut()[off..],
                width,
            );
        }
    }
    (gq, gk, gv)
}
