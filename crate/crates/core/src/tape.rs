//! Reverse-mode differentiation over a closed set of dense tensor ops.
//!
//! A [`Tape`] records every op applied to its [`Var`]s in order. Calling
//! [`Tape::backward`] on a scalar node walks that record in exact reverse and
//! returns a [`Gradients`] map. A tape built with [`Tape::inference`] computes
//! the same forward values but keeps no backward state.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    SelectRows(Vec<bool>, Var, Var),
    SumAll(Var),
    SumRows(Var),
    SymmetricNll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape for training.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A forward-only tape: values are computed, nothing is kept for backward.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = self.recording;
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Non-trainable leaf (inputs, masks, frozen weights).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        let (op, needs_grad) = if self.recording && needs_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(id)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(self.shape_err("add", a, b));
        }
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `a[m × n] + bias[1 × n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let bias_vals = self.value(bias).data().to_vec();
        let mut out = self.value(a).clone();
        if out.dims2()?.1 != bias_vals.len() {
            return Err(self.shape_err("add_row", a, bias));
        }
        out.add_row_inplace(&bias_vals)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out, Op::AddRow(a, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(self.shape_err("mul", a, b));
        }
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::Offset(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= T::zero()) {
            return Err(Error::NonFinite(format!("log of non-positive value {bad:?}")));
        }
        let out = self.value(a).map(|x| x.ln());
        let ng = self.ng(a);
        Ok(self.push(out, Op::Log(a), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.value(a).dims2()?;
        let (mb, nb) = self.value(b).dims2()?;
        if ma != mb {
            return Err(self.shape_err("concat_cols", a, b));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            data.extend_from_slice(&da[i * na..(i + 1) * na]);
            data.extend_from_slice(&db[i * nb..(i + 1) * nb]);
        }
        let out = Tensor::new(vec![ma, na + nb], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatCols(a, b), ng))
    }

    /// Columns `start..end` of a 2-D value.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start >= end || end > n {
            return Err(contract(format!("slice_cols {start}..{end} of {n} columns")));
        }
        let src = self.value(a).data();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    /// Rows `start..end` of a 2-D value.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if start >= end || end > m {
            return Err(contract(format!("slice_rows {start}..{end} of {m} rows")));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let out = Tensor::new(vec![end - start, n], data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceRows(a, start), ng))
    }

    /// Stacks values with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(contract("concat_rows of nothing"));
        };
        let n = self.value(first).dims2()?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pn != n {
                return Err(self.shape_err("concat_rows", first, p));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let out = Tensor::new(vec![m, n], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Row lookup: output row `r` is row `indices[r]` of `table`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.value(table).dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(contract(format!("gather index {bad} out of {m} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![indices.len(), n], data)?;
        let ng = self.ng(table);
        Ok(self.push(out, Op::Gather(table, indices.to_vec()), ng))
    }

    /// Row-wise choice: row `i` comes from `a` where `take_a[i]`, else from `b`.
    pub fn select_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Result<Var> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(self.shape_err("select_rows", a, b));
        }
        let (m, n) = self.value(a).dims2()?;
        if take_a.len() != m {
            return Err(contract(format!("select_rows mask {} for {m} rows", take_a.len())));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * n);
        for (i, &t) in take_a.iter().enumerate() {
            let src = if t { da } else { db };
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![m, n], data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::SelectRows(take_a.to_vec(), a, b), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::of_f64(n as f64))
    }

    /// Per-row sum: `[m × n] → [m × 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let data: Vec<T> = (0..m)
            .map(|i| src[i * n..(i + 1) * n].iter().fold(T::zero(), |acc, &x| acc + x))
            .collect();
        let out = Tensor::new(vec![m, 1], data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SumRows(a), ng))
    }

    /// Mean over the batch of `-ln p(Θ_ii)` where the normalizer sums the
    /// exponentiated scores of row `i` and column `i` (diagonal counted once).
    pub fn symmetric_nll(&mut self, theta: Var) -> Result<Var> {
        let value = symmetric_nll_forward(self.value(theta))?;
        let ng = self.ng(theta);
        Ok(self.push(Tensor::scalar(value), Op::SymmetricNll(theta), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(contract("backward on a forward-only tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        if let Some(a) = unary_input(op) {
            if !self.ng(a) {
                return Ok(());
            }
        }
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2()?;
                let n = vb.dims2()?.1;
                if self.ng(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, vb.data(), 1, n as isize,
                        T::zero(), &mut da, k as isize, 1);
                    accumulate(grads, *a, va.shape(), da);
                }
                if self.ng(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), va.data(), 1, k as isize, g.data(), n as isize, 1,
                        T::zero(), &mut db, n as isize, 1);
                    accumulate(grads, *b, vb.shape(), db);
                }
            }
            Op::Transpose(a) => {
                if self.ng(*a) {
                    let gt = g.transpose()?;
                    accumulate(grads, *a, self.value(*a).shape(), gt.into_data());
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(*v) {
                        accumulate(grads, *v, g.shape(), g.data().to_vec());
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.shape(), g.data().to_vec());
                }
                if self.ng(*bias) {
                    let n = g.dims2()?.1;
                    let mut db = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    accumulate(grads, *bias, self.value(*bias).shape(), db);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = zip_map(g, self.value(*b), |x, y| x * y);
                    accumulate(grads, *a, g.shape(), d);
                }
                if self.ng(*b) {
                    let d = zip_map(g, self.value(*a), |x, y| x * y);
                    accumulate(grads, *b, g.shape(), d);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.shape(), g.data().iter().map(|&x| x * c).collect());
            }
            Op::Offset(a) => accumulate(grads, *a, g.shape(), g.data().to_vec()),
            Op::Tanh(a) => {
                let d = zip_map(g, out, |x, y| x * (T::one() - y * y));
                accumulate(grads, *a, g.shape(), d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(g, out, |x, y| x * y * (T::one() - y));
                accumulate(grads, *a, g.shape(), d);
            }
            Op::Exp(a) => {
                let d = zip_map(g, out, |x, y| x * y);
                accumulate(grads, *a, g.shape(), d);
            }
            Op::Log(a) => {
                let d = zip_map(g, self.value(*a), |x, y| x / y);
                accumulate(grads, *a, g.shape(), d);
            }
            Op::ConcatCols(a, b) => {
                let (m, n) = g.dims2()?;
                let na = self.value(*a).dims2()?.1;
                let nb = n - na;
                let gd = g.data();
                if self.ng(*a) {
                    let mut d = Vec::with_capacity(m * na);
                    for i in 0..m {
                        d.extend_from_slice(&gd[i * n..i * n + na]);
                    }
                    accumulate(grads, *a, self.value(*a).shape(), d);
                }
                if self.ng(*b) {
                    let mut d = Vec::with_capacity(m * nb);
                    for i in 0..m {
                        d.extend_from_slice(&gd[i * n + na..(i + 1) * n]);
                    }
                    accumulate(grads, *b, self.value(*b).shape(), d);
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2()?;
                let w = g.dims2()?.1;
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                accumulate(grads, *a, self.value(*a).shape(), d);
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let n = va.dims2()?.1;
                let mut d = vec![T::zero(); va.len()];
                d[start * n..start * n + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, va.shape(), d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        accumulate(grads, p, self.value(p).shape(), d);
                    }
                    offset += len;
                }
            }
            Op::Gather(table, indices) => {
                let shape = self.value(*table).shape();
                let n = self.value(*table).dims2()?.1;
                let slot = ensure_grad(grads, *table, shape);
                let dst = slot.data_mut();
                for (r, &i) in indices.iter().enumerate() {
                    for (d, &x) in dst[i * n..(i + 1) * n].iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                        *d += x;
                    }
                }
            }
            Op::SelectRows(take_a, a, b) => {
                let n = g.dims2()?.1;
                for (v, want) in [(a, true), (b, false)] {
                    if !self.ng(*v) {
                        continue;
                    }
                    let mut d = g.data().to_vec();
                    for (i, &t) in take_a.iter().enumerate() {
                        if t != want {
                            d[i * n..(i + 1) * n].iter_mut().for_each(|x| *x = T::zero());
                        }
                    }
                    accumulate(grads, *v, g.shape(), d);
                }
            }
            Op::SumAll(a) => {
                let s = g.data()[0];
                let shape = self.value(*a).shape();
                accumulate(grads, *a, shape, vec![s; self.value(*a).len()]);
            }
            Op::SumRows(a) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut d = Vec::with_capacity(m * n);
                for i in 0..m {
                    d.extend(core::iter::repeat_n(g.data()[i], n));
                }
                accumulate(grads, *a, self.value(*a).shape(), d);
            }
            Op::SymmetricNll(theta) => {
                let d = symmetric_nll_backward(self.value(*theta), g.data()[0])?;
                accumulate(grads, *theta, self.value(*theta).shape(), d);
            }
        }
        Ok(())
    }
}

/// Gradient map returned by [`Tape::backward`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, zero-filled when `v` does not reach the loss.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

fn unary_input<T>(op: &Op<T>) -> Option<Var> {
    match op {
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Offset(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::SliceCols(a, _)
        | Op::SliceRows(a, _)
        | Op::Gather(a, _)
        | Op::SumAll(a)
        | Op::SumRows(a)
        | Op::SymmetricNll(a) => Some(*a),
        _ => None,
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn ensure_grad<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape matches value"));
        }
    }
}

/// Per-row stabilizer and normalizer of the symmetric loss: for each `i`,
/// `(m_i, S_i)` with `m_i` the max over row `i` ∪ column `i` and
/// `S_i = Σ_j e^{Θ_ij − m_i} + Σ_j e^{Θ_ji − m_i} − e^{Θ_ii − m_i}`.
fn symmetric_normalizers<T: Scalar>(theta: &Tensor<T>) -> Result<(usize, Vec<(T, T)>)> {
    let (m, n) = theta.dims2()?;
    if m != n || m == 0 {
        return Err(contract(format!(
            "symmetric loss needs a non-empty square matrix, got {:?}",
            theta.shape()
        )));
    }
    let d = theta.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut mx = T::neg_infinity();
        for j in 0..n {
            mx = mx.max(d[i * n + j]).max(d[j * n + i]);
        }
        let mut s = T::zero();
        for j in 0..n {
            s += (d[i * n + j] - mx).exp();
            if j != i {
                s += (d[j * n + i] - mx).exp();
            }
        }
        out.push((mx, s));
    }
    Ok((n, out))
}

/// Forward value of the symmetric negative log-likelihood.
pub fn symmetric_nll_forward<T: Scalar>(theta: &Tensor<T>) -> Result<T> {
    let (n, norms) = symmetric_normalizers(theta)?;
    let d = theta.data();
    let mut total = T::zero();
    for (i, &(mx, s)) in norms.iter().enumerate() {
        total += mx - d[i * n + i] + s.ln();
    }
    let loss = total / T::of_f64(n as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("symmetric loss {loss:?}")));
    }
    Ok(loss)
}

fn symmetric_nll_backward<T: Scalar>(theta: &Tensor<T>, upstream: T) -> Result<Vec<T>> {
    let (n, norms) = symmetric_normalizers(theta)?;
    let d = theta.data();
    let scale = upstream / T::of_f64(n as f64);
    let mut grad = vec![T::zero(); n * n];
    for (i, &(mx, s)) in norms.iter().enumerate() {
        for j in 0..n {
            grad[i * n + j] += scale * (d[i * n + j] - mx).exp() / s;
            if j != i {
                grad[j * n + i] += scale * (d[j * n + i] - mx).exp() / s;
            }
        }
        grad[i * n + i] -= scale;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::row(&[1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn zero_activation_blocks_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let c = tape.param(Tensor::scalar(3.0));
        let t = tape.tanh(x);
        let prod = tape.mul(t, c).unwrap();
        let loss = tape.sum_all(prod);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, c).data(), &[0.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::row(&[1.0, 1.0]));
        let unused = tape.param(Tensor::row(&[5.0]));
        let loss = tape.sum_all(a);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(&tape, unused).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::row(&[1.0, 2.0]));
        let b = tape.tanh(a);
        assert!(matches!(tape.backward(b), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let mut tape = Tape::<f32>::inference();
        let a = tape.param(Tensor::scalar(1.0));
        let s = tape.sum_all(a);
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(a + a) → grad 2
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::row(&[0.5, -1.0]));
        let s = tape.add(a, a).unwrap();
        let loss = tape.sum_all(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&tape, a).data(), &[2.0, 2.0]);
    }

    #[test]
    fn symmetric_nll_batch_of_one_is_zero() {
        let theta = Tensor::<f32>::scalar(7.5);
        assert_eq!(symmetric_nll_forward(&theta).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_nll_rejects_non_square() {
        let theta = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(symmetric_nll_forward(&theta), Err(Error::Contract(_))));
    }

    #[test]
    fn symmetric_nll_survives_large_scores() {
        let theta = Tensor::<f32>::from_rows(&[&[500.0, 0.0], &[0.0, 500.0]]).unwrap();
        let v = symmetric_nll_forward(&theta).unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }
}
