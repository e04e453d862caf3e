use std::f64::consts::PI;

use super::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
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
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Gelu(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Dynamic computation tape. Every operation appends a node holding its
/// forward value; [`Graph::backward`] replays the tape in reverse.
///
/// Forward operations refuse to produce NaN or infinite values.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

// tanh-approximation GELU constants (GPT-2)
const GELU_CUBIC: f64 = 0.044715;

fn gelu_parts(x: f64) -> (f64, f64) {
    let c = (2.0 / PI).sqrt();
    let u = c * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let slope = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_CUBIC * x * x);
    (value, slope)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Shapes of every node recorded at or after `start`.
    pub fn shapes_since(&self, start: usize) -> Vec<Vec<usize>> {
        self.nodes[start..].iter().map(|n| n.value.shape().to_vec()).collect()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.matrix_dims()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_derived(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        parents: &[Var],
    ) -> Result<Var> {
        let needs = parents.iter().any(|&p| self.needs(p));
        let value = Tensor::new(shape, data)?;
        self.push(op_name, value, op, needs)
    }

    /// Records an input. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        let needs = t.requires_grad();
        self.push("leaf", t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t.with_grad(false), Op::Leaf, false)
    }

    /// Records a named trainable parameter.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Result<Var> {
        let v = self.push("param", t.clone().with_grad(true), Op::Leaf, true)?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push_derived("matmul", vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push_derived("matmul_nt", vec![m, n], data, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push_derived("transpose", vec![n, m], data, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_derived(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-n row to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, &y) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x += y;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push_derived("add_row", shape, data, Op::AddRow(a, row), &[a, row])
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_derived(name, shape, data, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        self.map("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        self.map("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a), |x| x.exp())
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, Op::Gelu(a), |x| T::lit(gelu_parts(x.widen()).0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.map("clamp", a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push_derived("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Row-wise softmax over the trailing axis, with max subtraction.
    ///
    /// `mask`, when given, has one entry per element; `false` entries get
    /// probability exactly zero. A row with no allowed entry is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::Shape {
                    op: "softmax mask",
                    lhs: vec![m, n],
                    rhs: vec![mask.len()],
                });
            }
        }
        let src = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let allowed = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
            let row = &src[i * n..(i + 1) * n];
            let mut max = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::Contract(format!("softmax row {i} is fully masked")));
            }
            let out = &mut data[i * n..(i + 1) * n];
            let mut total = T::zero();
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (x - max).exp();
                    out[j] = e;
                    total += e;
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push_derived("softmax", shape, data, Op::Softmax(a), &[a])
    }

    /// Per-row normalization to zero mean and unit (population) variance,
    /// followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nf = T::lit(n as f64);
        let mut normalized = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + T::lit(eps)).sqrt();
            inv_std[i] = rstd;
            for j in 0..n {
                let xh = (row[j] - mean) * rstd;
                normalized[i * n + j] = xh;
                data[i * n + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        self.push_derived("layer_norm", shape, data, op, &[x, gain, bias])
    }

    /// Selects rows of a `[V×d]` table by id (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::Contract("gather of zero rows".into()));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push_derived(
            "gather_rows",
            vec![ids.len(), d],
            data,
            Op::Gather(table, ids.to_vec()),
            &[table],
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > n {
            return Err(Error::Index {
                what: "column slice",
                index: start + len,
                bound: n,
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push_derived("slice_cols", vec![m, len], data, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).0;
        for &p in parts {
            if self.dims(p).0 != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push_derived(
            "concat_cols",
            vec![m, total],
            data,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if len == 0 || start + len > m {
            return Err(Error::Index {
                what: "row slice",
                index: start + len,
                bound: m,
            });
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        self.push_derived("slice_rows", vec![len, n], data, Op::SliceRows(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        self.push_derived("concat_rows", vec![m, n], data, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        self.push_derived("reshape", t.shape().to_vec(), t.into_data(), Op::Reshape(a), &[a])
    }

    /// Masked token-level cross entropy in nats.
    ///
    /// Returns the scalar sum over unmasked positions together with the
    /// per-position losses (zero where masked).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<(Var, Vec<T>)> {
        let (t, v) = self.dims(logits);
        if targets.len() != t || mask.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyLoss);
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); t * v];
        let mut per_position = vec![T::zero(); t];
        let mut total = T::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let target = targets[i];
            if target >= v {
                return Err(Error::Index {
                    what: "cross-entropy target",
                    index: target,
                    bound: v,
                });
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p /= z;
            }
            let loss = z.ln() + max - row[target];
            per_position[i] = loss;
            total += loss;
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
        };
        let var = self.push_derived("cross_entropy", vec![1], vec![total], op, &[logits])?;
        Ok((var, per_position))
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, up: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, g: Vec<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.needs(*a) {
                    acc(*a, matmul_nt_raw(up, self.value(*b).data(), m, n, k));
                }
                if self.needs(*b) {
                    acc(*b, matmul_tn_raw(self.value(*a).data(), up, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.needs(*a) {
                    acc(*a, matmul_raw(up, self.value(*b).data(), m, n, k));
                }
                if self.needs(*b) {
                    acc(*b, matmul_tn_raw(up, self.value(*a).data(), m, n, k));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                let mut g = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] = up[j * m + i];
                    }
                }
                acc(*a, g);
            }
            Op::Add(a, b) => {
                acc(*a, up.to_vec());
                acc(*b, up.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, up.to_vec());
                acc(*b, up.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, up.iter().zip(vb).map(|(&u, &y)| u * y).collect());
                acc(*b, up.iter().zip(va).map(|(&u, &x)| u * x).collect());
            }
            Op::AddRow(a, row) => {
                let (m, n) = self.dims(*a);
                acc(*a, up.to_vec());
                let mut g = vec![T::zero(); n];
                for i in 0..m {
                    for (gj, &u) in g.iter_mut().zip(&up[i * n..(i + 1) * n]) {
                        *gj += u;
                    }
                }
                acc(*row, g);
            }
            Op::Scale(a, c) => acc(*a, up.iter().map(|&u| u * *c).collect()),
            Op::AddScalar(a) => acc(*a, up.to_vec()),
            Op::Exp(a) => {
                let out = node.value.data();
                acc(*a, up.iter().zip(out).map(|(&u, &y)| u * y).collect());
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    up.iter()
                        .zip(x)
                        .map(|(&u, &x)| u * T::lit(gelu_parts(x.widen()).1))
                        .collect(),
                );
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    up.iter()
                        .zip(x)
                        .map(|(&u, &x)| if x >= *lo && x <= *hi { u } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![up[0]; n]);
            }
            Op::Softmax(a) => {
                let (m, n) = node.value.matrix_dims();
                let y = node.value.data();
                let mut g = vec![T::zero(); m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let ur = &up[i * n..(i + 1) * n];
                    let dot: T = yr.iter().zip(ur).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        g[i * n + j] = yr[j] * (ur[j] - dot);
                    }
                }
                acc(*a, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (m, n) = self.dims(*x);
                let g = self.value(*gain).data();
                let nf = T::lit(n as f64);
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let urow = &up[i * n..(i + 1) * n];
                    let xh = &normalized[i * n..(i + 1) * n];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..n {
                        dgain[j] += urow[j] * xh[j];
                        dbias[j] += urow[j];
                        let d = urow[j] * g[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                    }
                    mean_d /= nf;
                    mean_dx /= nf;
                    for j in 0..n {
                        let d = urow[j] * g[j];
                        dx[i * n + j] = inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::Gather(table, ids) => {
                let (rows, d) = self.dims(*table);
                let mut g = vec![T::zero(); rows * d];
                for (r, &id) in ids.iter().enumerate() {
                    for (gj, &u) in g[id * d..(id + 1) * d].iter_mut().zip(&up[r * d..(r + 1) * d]) {
                        *gj += u;
                    }
                }
                acc(*table, g);
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims(*a);
                let len = up.len() / m;
                let mut g = vec![T::zero(); m * n];
                for i in 0..m {
                    g[i * n + start..i * n + start + len].copy_from_slice(&up[i * len..(i + 1) * len]);
                }
                acc(*a, g);
            }
            Op::ConcatCols(parts) => {
                let m = self.dims(parts[0]).0;
                let total = up.len() / m;
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    let mut g = Vec::with_capacity(m * w);
                    for i in 0..m {
                        g.extend_from_slice(&up[i * total + offset..i * total + offset + w]);
                    }
                    acc(p, g);
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let (m, n) = self.dims(*a);
                let mut g = vec![T::zero(); m * n];
                g[start * n..start * n + up.len()].copy_from_slice(up);
                acc(*a, g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, up[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Reshape(a) => acc(*a, up.to_vec()),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let (t, v) = self.dims(*logits);
                let mut g = vec![T::zero(); t * v];
                for i in 0..t {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..v {
                        g[i * v + j] = up[0] * probs[i * v + j];
                    }
                    g[i * v + targets[i]] -= up[0];
                }
                acc(*logits, g);
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or zeros if `v` is not connected to the loss.
    pub fn get(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        let shape = graph.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// One gradient per recorded parameter, keyed by name. Parameters bound
    /// more than once have their contributions summed.
    pub fn for_params(&self, graph: &Graph<T>) -> indexmap::IndexMap<String, Tensor<T>> {
        let mut out: indexmap::IndexMap<String, Tensor<T>> = indexmap::IndexMap::new();
        for (name, v) in graph.params() {
            let g = self.get(graph, *v);
            match out.get_mut(name) {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += *x;
                    }
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}
