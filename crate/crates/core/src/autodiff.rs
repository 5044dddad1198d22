//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends one node holding its output value and the ids of
//! its inputs, so the tape is topologically ordered by construction.
//! [`Tape::backward`] walks it once in reverse and returns a [`Gradients`]
//! table; parameters pick up their share with [`Gradients::accumulate_into`],
//! which adds (`+=`) into the tensor's stored gradient.
//!
//! Each operation checks its output for NaN/Inf and fails with
//! [`LtdError::Numeric`] instead of letting a non-finite value propagate.

use crate::error::{dim_err, LtdError, Result};
use crate::tensor::{c, matmul_into, Real, Tensor};

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
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax(Var),
    Gelu(Var),
    QuickGelu(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    StraightThrough {
        soft: Var,
    },
    Mixture {
        weights: Var,
        items: Vec<Tensor<T>>,
    },
    BceWithLogits {
        z: Var,
        label: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The recorded computation. One tape per forward pass; not shared across threads.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It receives gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that takes part in differentiation, regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let mut v = t.clone();
        v.requires_grad = true;
        self.leaf(v)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(LtdError::Numeric(format!("non-finite output from {}", op_name(&op))));
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            [n] => Ok((1, *n)),
            s => dim_err(format!("{what}: expected a matrix, got shape {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return dim_err(format!("matmul inner dimensions {k} vs {k2}"));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push(t, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op_name(&op))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// `x[m×n] + b[n]` with `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_row")?;
        if self.value(b).numel() != n {
            return dim_err(format!(
                "add_row: bias of {} values for {n} columns",
                self.value(b).numel()
            ));
        }
        let vx = self.value(x);
        let vb = self.value(b).data();
        let mut data = vx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = data[i * n + j] + vb[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(t, Op::AddRow(x, b), &[x, b])
    }

    /// `x·w + b` for a row-major `[in, out]` weight.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Normalizes every row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(LtdError::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let vx = self.value(x);
        let d = vx.cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return dim_err(format!(
                "layer_norm: gamma/beta of {}/{} values for width {d}",
                self.value(gamma).numel(),
                self.value(beta).numel()
            ));
        }
        let rows = vx.rows();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let dn: T = c(d as f64);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + c(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, len, inner) = axis_split(vx.shape(), axis)?;
        let src = vx.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| src[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..len {
                    let e = (src[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    total = total + e;
                }
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / total;
                }
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(t, Op::Softmax { x, axis }, &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(t, Op::Gelu(x), &[x])
    }

    /// `x·σ(1.702x)`.
    pub fn quick_gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * sigmoid(c::<T>(1.702) * v)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(t, Op::QuickGelu(x), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        self.push(t, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return dim_err(format!("column slice {start}..{} of width {n}", start + len));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        self.push(t, Op::SliceCols { x, start }, &[x])
    }

    /// Stacks matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_rows of nothing");
        };
        let (_, n) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, w) = self.matrix_dims(p, "concat_rows")?;
            if w != n {
                return dim_err(format!("concat_rows: width {w} vs {n}"));
            }
            rows += m;
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, n], out)?;
        self.push(t, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_cols of nothing");
        };
        let (m, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, w) = self.matrix_dims(p, "concat_cols")?;
            if r != m {
                return dim_err(format!("concat_cols: {r} rows vs {m}"));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], out)?;
        self.push(t, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / c(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Inner product of two same-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Forward value is `hard`; backward hands the incoming gradient to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Tensor<T>, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return dim_err(format!(
                "straight_through: hard {:?} vs soft {:?}",
                hard.shape(),
                self.shape(soft)
            ));
        }
        self.push(hard, Op::StraightThrough { soft }, &[soft])
    }

    /// `Σᵢ weights[i] · items[i]` over constant, same-shape items.
    pub fn mixture(&mut self, weights: Var, items: Vec<Tensor<T>>) -> Result<Var> {
        let w = self.value(weights).data();
        if w.len() != items.len() || items.is_empty() {
            return dim_err(format!("mixture: {} weights for {} items", w.len(), items.len()));
        }
        let shape = items[0].shape().to_vec();
        if items.iter().any(|t| t.shape() != shape.as_slice()) {
            return dim_err("mixture: items differ in shape");
        }
        let mut out = vec![T::zero(); items[0].numel()];
        for (&wi, item) in w.iter().zip(&items) {
            for (o, &v) in out.iter_mut().zip(item.data()) {
                *o = *o + wi * v;
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Mixture { weights, items }, &[weights])
    }

    /// Numerically stable binary cross-entropy on a scalar logit.
    pub fn bce_with_logits(&mut self, z: Var, label: T) -> Result<Var> {
        if self.value(z).numel() != 1 {
            return dim_err("bce_with_logits expects a scalar logit");
        }
        let zv = self.value(z).data()[0];
        let loss = bce_value(zv, label);
        self.push(Tensor::scalar(loss), Op::BceWithLogits { z, label }, &[z])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(LtdError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = dims2(self.shape(*b)).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = dC·Bᵀ
                acc(*a, &|ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s = s + g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] = ga[i * k + p] + s;
                        }
                    }
                });
                // dB = Aᵀ·dC
                acc(*b, &|gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] = gb[p * n + j] + a_ip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(self.shape(*a));
                acc(*a, &|ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = ga[i * n + j] + g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| add_assign(ga, g));
                acc(*b, &|gb| add_assign(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|ga| add_assign(ga, g));
                acc(*b, &|gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                });
                acc(*b, &|gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &|ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x = *x + y * *s;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let n = self.value(*b).numel();
                acc(*x, &|gx| add_assign(gx, g));
                acc(*b, &|gb| {
                    for row in g.chunks(n) {
                        add_assign(gb, row);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                let dn: T = c(d as f64);
                acc(*x, &|gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gy[j] * gam[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xh[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dxh = gy[j] * gam[j];
                            gx[r * d + j] = gx[r * d + j] + rs * (dxh - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(*gamma, &|gg| {
                    for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gy[j] * xh[j];
                        }
                    }
                });
                acc(*beta, &|gb| {
                    for gy in g.chunks(d) {
                        add_assign(gb, gy);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis).expect("validated in forward");
                acc(*x, &|gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum::<T>();
                            for k in 0..len {
                                gx[idx(k)] = gx[idx(k)] + out[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let d = node.value.cols();
                acc(*x, &|gx| {
                    for (r, (gy, y)) in g.chunks(d).zip(out.chunks(d)).enumerate() {
                        let total = gy.iter().copied().sum::<T>();
                        for j in 0..d {
                            gx[r * d + j] = gx[r * d + j] + gy[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|gx| {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::QuickGelu(x) => {
                let xv = self.value(*x).data();
                let k: T = c(1.702);
                acc(*x, &|gx| {
                    for i in 0..gx.len() {
                        let s = sigmoid(k * xv[i]);
                        gx[i] = gx[i] + g[i] * (s + k * xv[i] * s * (T::one() - s));
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let d = node.value.cols();
                acc(*x, &|gx| add_assign(&mut gx[start * d..start * d + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let (m, len) = dims2(node.value.shape());
                let n = dims2(self.shape(*x)).1;
                acc(*x, &|gx| {
                    for i in 0..m {
                        add_assign(&mut gx[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &|gp| add_assign(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2(node.value.shape());
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).numel() / m;
                    acc(p, &|gp| {
                        for i in 0..m {
                            add_assign(&mut gp[i * w..(i + 1) * w], &g[i * total + col..i * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::Sum(x) => {
                acc(*x, &|gx| gx.iter_mut().for_each(|v| *v = *v + g[0]));
            }
            Op::Mean(x) => {
                let n: T = c(self.value(*x).numel() as f64);
                acc(*x, &|gx| gx.iter_mut().for_each(|v| *v = *v + g[0] / n));
            }
            Op::StraightThrough { soft } => {
                acc(*soft, &|gs| add_assign(gs, g));
            }
            Op::Mixture { weights, items } => {
                acc(*weights, &|gw| {
                    for (gi, item) in gw.iter_mut().zip(items) {
                        let s = item.data().iter().zip(g).map(|(&v, &gg)| v * gg).sum::<T>();
                        *gi = *gi + s;
                    }
                });
            }
            Op::BceWithLogits { z, label } => {
                let zv = self.value(*z).data()[0];
                acc(*z, &|gz| gz[0] = gz[0] + g[0] * (sigmoid(zv) - *label));
            }
        }
    }
}

/// Per-node gradients produced by one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the node is off the loss path or does not require grad.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. `v`, zeros if `v` did not contribute.
    pub fn wrt(&self, v: Var, tape: &Tape<T>) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); tape.value(v).numel()])
    }

    /// `tensor.grad += ∂loss/∂v`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => tensor.accumulate_grad(g),
            None => {
                tensor.grad_mut();
                Ok(())
            }
        }
    }
}

fn dims2(s: &[usize]) -> (usize, usize) {
    match s {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        _ => unreachable!("matrix ops validate rank"),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return dim_err(format!("axis {axis} out of range for {shape:?}"));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn add_assign<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a = *a + b;
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRow(..) => "add_row",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax(_) => "log_softmax",
        Op::Gelu(_) => "gelu",
        Op::QuickGelu(_) => "quick_gelu",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::StraightThrough { .. } => "straight_through",
        Op::Mixture { .. } => "mixture",
        Op::BceWithLogits { .. } => "bce_with_logits",
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let inner = c::<T>(SQRT_2_OVER_PI) * (x + c::<T>(GELU_CUBIC) * x * x * x);
    c::<T>(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let k: T = c(SQRT_2_OVER_PI);
    let a: T = c(GELU_CUBIC);
    let t = (k * (x + a * x * x * x)).tanh();
    let half: T = c(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * a * x * x)
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `max(z,0) − z·y + ln(1 + e^{−|z|})`.
#[inline]
pub fn bce_value<T: Real>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let v = tape.constant(t(&[2, 1], &[5.0, 7.0]));
        let r = tape.matmul(p, v).unwrap();
        assert_eq!(tape.value(r).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected = naive_matmul(&a, &b, 3, 4, 2);
        let mut tape = Tape::<f64>::new();
        let va = tape.constant(t(&[3, 4], &a));
        let vb = tape.constant(t(&[4, 2], &b));
        let r = tape.matmul(va, vb).unwrap();
        for (x, y) in tape.value(r).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(LtdError::Dimension(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[3], &[2.5, 2.5, 2.5]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for (v, e) in tape.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((v - e).abs() < 1e-9);
        }

        let gg = tape.constant(Tensor::ones(&[4]));
        assert!(matches!(tape.layer_norm(x, gg, b, 1e-5), Err(LtdError::Dimension(_))));
    }

    #[test]
    fn layer_norm_moments_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..64).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![64], data).unwrap());
        let g = tape.constant(Tensor::ones(&[64]));
        let b = tape.constant(Tensor::zeros(&[64]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let out = tape.value(y).data();
        let mean = out.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        let var = out.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.softmax(x, 0).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (v, ei) in tape.value(y).data().iter().zip(&e) {
            assert!((v - ei / z).abs() < 1e-6);
        }
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_axis0_columns_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 9.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        for j in 0..3 {
            let s = v.at(&[0, j]) + v.at(&[1, j]);
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_sum_and_dot() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x, &tape), vec![1.0; 6]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let y = tape.leaf(t(&[3], &[-4.0, 0.5, 2.0]).with_grad());
        let unused = tape.leaf(t(&[2], &[1.0, 1.0]).with_grad());
        let d = tape.dot(x, y).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.wrt(x, &tape), vec![-4.0, 0.5, 2.0]);
        assert_eq!(g.wrt(y, &tape), vec![1.0, 2.0, 3.0]);
        assert_eq!(g.wrt(unused, &tape), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(tape.backward(x), Err(LtdError::Contract(_))));
    }

    #[test]
    fn backward_accumulates_on_reuse() {
        // loss = sum(x * x) uses x twice
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[3.0, -1.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x, &tape), vec![6.0, -2.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![1], vec![f32::MAX]).unwrap());
        assert!(matches!(tape.scale(x, 10.0), Err(LtdError::Numeric(_))));
    }

    #[test]
    fn straight_through_forward_is_hard() {
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(t(&[3], &[0.2, 0.5, 0.3]).with_grad());
        let hard = t(&[3], &[0.0, 1.0, 0.0]);
        let w = tape.straight_through(hard.clone(), s).unwrap();
        assert_eq!(tape.value(w), &hard);
        let items = vec![t(&[2], &[1.0, 2.0]), t(&[2], &[3.0, 4.0]), t(&[2], &[5.0, 6.0])];
        let m = tape.mixture(w, items).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 4.0]);
        let total = tape.sum(m).unwrap();
        let g = tape.backward(total).unwrap();
        assert_eq!(g.wrt(s, &tape), vec![3.0, 7.0, 11.0]);
    }

    #[test]
    fn bce_values() {
        assert!((bce_value(0.0f64, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_value(100.0f64, 1.0) < 1e-40);
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::scalar(0.0).with_grad());
        let l = tape.bce_with_logits(z, 1.0).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(z, &tape), vec![-0.5]);
    }
}
