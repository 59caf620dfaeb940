//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every differentiable operation in execution order.
//! [`Tape::backward`] walks that record in reverse and accumulates
//! gradients into the [`ParamStore`] that owns the trainable tensors.
//!
//! Each operation validates shapes up front and rejects non-finite
//! results, so a value on a tape is always finite.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Stable handle for a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { name, value, grad }
    }
}

/// Owner of all trainable tensors. Identity is the insertion index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name.into(), value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Global L2 norm over every gradient accumulator.
    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Dropout(Var, Vec<f64>),
    SqDistRows(Var, Var),
    PairwiseSqDist(Var, Var),
    FrobeniusNorm(Var),
    MeanRows(Var),
    MeanAll(Var),
    Sum(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    Transpose(Var),
    SegmentLog1pSumExp(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() == 2 {
        Ok(())
    } else {
        Err(Error::shape(op, t.shape(), &[]))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::contract("tape already consumed by backward"));
        }
        check_finite(op_name, &value)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input. Gradients reaching it are discarded unless read
    /// through [`Tape::gradients`].
    /// Hash of every discrete choice recorded on the tape: which side of
    /// zero each ReLU/hinge input lies on, zero inputs to `sqrt` and the
    /// Frobenius norm, and the indices of every gather. Evaluations with
    /// equal signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(a) => {
                    i.hash(&mut h);
                    for v in self.value(*a).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::Sqrt(a) | Op::FrobeniusNorm(a) => {
                    i.hash(&mut h);
                    for v in self.value(*a).data() {
                        (*v == 0.0).hash(&mut h);
                    }
                }
                Op::GatherRows(_, idx) => (i, idx).hash(&mut h),
                Op::GatherElems(_, coords) => (i, coords).hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push("param", store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() == y.shape() {
            Ok(())
        } else {
            Err(Error::shape(op, x.shape(), y.shape()))
        }
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Adds a length-`m` vector to every row of an `n x m` matrix.
    pub fn add_row(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(m), self.value(bias));
        if x.rank() != 2 || b.rank() != 1 || x.cols() != b.len() {
            return Err(Error::shape("add_row", x.shape(), b.shape()));
        }
        let mut out = x.clone();
        let cols = x.cols();
        for r in 0..x.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        debug_assert_eq!(cols, b.len());
        self.push("add_row", out, Op::AddRow(m, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + s);
        self.push("add_scalar", out, Op::AddScalar(a))
    }

    /// `max(0, x)`; doubles as the hinge clamp `[x]_+`.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a))
    }

    pub fn hinge(&mut self, a: Var) -> Result<Var> {
        self.relu(a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push("square", out, Op::Square(a))
    }

    /// Square root of non-negative entries. The derivative at zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(Error::contract("sqrt of a negative value"));
        }
        let out = self.value(a).map(f64::sqrt);
        self.push("sqrt", out, Op::Sqrt(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a))
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `rate` and survivors are scaled by `1 / (1 - rate)`. In eval mode the
    /// input handle is returned untouched.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("dropout", out, Op::Dropout(a, mask))
    }

    /// Squared Euclidean distance between corresponding rows: `[n x d], [n x d] -> [n]`.
    pub fn sq_dist_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_dist_rows", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out: Vec<f64> = (0..x.rows())
            .map(|r| x.row(r).iter().zip(y.row(r)).map(|(p, q)| (p - q) * (p - q)).sum())
            .collect();
        self.push("sq_dist_rows", Tensor::vector(out), Op::SqDistRows(a, b))
    }

    /// All-pairs squared Euclidean distances: `[n x d], [m x d] -> [n x m]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
            return Err(Error::shape("pairwise_sq_dist", x.shape(), y.shape()));
        }
        let (n, m) = (x.rows(), y.rows());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let xi = x.row(i);
            for j in 0..m {
                out.push(xi.iter().zip(y.row(j)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>());
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        self.push("pairwise_sq_dist", out, Op::PairwiseSqDist(a, b))
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sq_norm().sqrt());
        self.push("frobenius_norm", out, Op::FrobeniusNorm(a))
    }

    /// Mean over rows: `[n x m] -> [m]`. Uses a running mean so identical
    /// rows average back to themselves bit for bit.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::contract("mean over zero rows"));
        }
        let mut acc = x.row(0).to_vec();
        for r in 1..x.rows() {
            let w = (r + 1) as f64;
            for (m, v) in acc.iter_mut().zip(x.row(r)) {
                *m += (v - *m) / w;
            }
        }
        self.push("mean_rows", Tensor::vector(acc), Op::MeanRows(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let out = Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64);
        self.push("mean_all", out, Op::MeanAll(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", out, Op::Sum(a))
    }

    /// Per-row sums: `[n x m] -> [n]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out: Vec<f64> = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        self.push("sum_cols", Tensor::vector(out), Op::SumCols(a))
    }

    /// Concatenation along the last axis of matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        for &p in parts {
            let t = self.value(p);
            require_matrix("concat_cols", t)?;
            if t.rows() != rows {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), t.shape()));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks vectors (or `1 x m` matrices) into an `r x m` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let width = self.value(*first).len();
        let mut out = Vec::with_capacity(parts.len() * width);
        for &p in parts {
            let t = self.value(p);
            if t.len() != width || t.rows() != 1 {
                return Err(Error::shape("stack_rows", self.value(*first).shape(), t.shape()));
            }
            out.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![parts.len(), width], out)?;
        self.push("stack_rows", out, Op::StackRows(parts.to_vec()))
    }

    /// Vertical concatenation of matrices sharing a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            require_matrix("concat_rows", t)?;
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), t.shape()));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        require_matrix("gather_rows", x)?;
        let cols = x.cols();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= x.rows() {
                return Err(Error::contract(format!(
                    "row index {i} out of range for shape {:?}",
                    x.shape()
                )));
            }
            out.extend_from_slice(x.row(i));
        }
        let out = Tensor::new(vec![indices.len(), cols], out)?;
        self.push("gather_rows", out, Op::GatherRows(a, indices.to_vec()))
    }

    /// Picks `(row, col)` entries of a matrix into a vector.
    pub fn gather_elems(&mut self, a: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let x = self.value(a);
        require_matrix("gather_elems", x)?;
        let mut out = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= x.rows() || c >= x.cols() {
                return Err(Error::contract(format!(
                    "entry ({r}, {c}) out of range for shape {:?}",
                    x.shape()
                )));
            }
            out.push(x.at(r, c));
        }
        self.push("gather_elems", Tensor::vector(out), Op::GatherElems(a, coords.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        require_matrix("transpose", x)?;
        let out = x.transpose();
        self.push("transpose", out, Op::Transpose(a))
    }

    /// For a vector split into consecutive segments by `offsets`
    /// (`offsets[0] = 0`, last = length), returns `log(1 + sum(exp(x)))`
    /// per segment. Empty segments give 0.
    pub fn segment_log1p_sum_exp(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if offsets.first() != Some(&0) || offsets.last() != Some(&x.len()) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::contract("segment offsets do not partition the input"));
        }
        let out: Vec<f64> = offsets
            .windows(2)
            .map(|w| log1p_sum_exp(&x.data()[w[0]..w[1]]))
            .collect();
        self.push(
            "segment_log1p_sum_exp",
            Tensor::vector(out),
            Op::SegmentLog1pSumExp(a, offsets.to_vec()),
        )
    }

    /// Reverse pass from a scalar. Returns the gradient for every recorded
    /// value that the output depends on; other slots are `None`.
    pub fn gradients(&mut self, output: Var) -> Result<Vec<Option<Tensor>>> {
        if self.consumed {
            return Err(Error::contract("backward called twice on one tape"));
        }
        let shape = self.value(output).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {shape:?}"
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(&shape, 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Reverse pass that adds `d output / d parameter` into each reachable
    /// parameter's accumulator. Unreached parameters are left untouched,
    /// so after [`ParamStore::zero_grad`] they read as zero.
    pub fn backward(&mut self, output: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(output)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.add_assign(&g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.rows(), x.cols(), w.cols());
                // dA = dC @ B^T
                let ga = accum(grads, *a, x.shape());
                gemm(
                    m,
                    n,
                    k,
                    g.data(),
                    (n as isize, 1),
                    w.data(),
                    (1, n as isize),
                    ga.data_mut(),
                    1.0,
                );
                // dB = A^T @ dC
                let gb = accum(grads, *b, w.shape());
                gemm(
                    k,
                    m,
                    n,
                    x.data(),
                    (1, k as isize),
                    g.data(),
                    (n as isize, 1),
                    gb.data_mut(),
                    1.0,
                );
            }
            Op::Add(a, b) => {
                add_into(accum(grads, *a, g.shape()), g.data(), 1.0);
                add_into(accum(grads, *b, g.shape()), g.data(), 1.0);
            }
            Op::Sub(a, b) => {
                add_into(accum(grads, *a, g.shape()), g.data(), 1.0);
                add_into(accum(grads, *b, g.shape()), g.data(), -1.0);
            }
            Op::Mul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let ga = accum(grads, *a, x.shape());
                for ((o, gv), wv) in ga.data_mut().iter_mut().zip(g.data()).zip(w.data()) {
                    *o += gv * wv;
                }
                let gb = accum(grads, *b, w.shape());
                for ((o, gv), xv) in gb.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    *o += gv * xv;
                }
            }
            Op::AddRow(m, bias) => {
                add_into(accum(grads, *m, g.shape()), g.data(), 1.0);
                let gb = accum(grads, *bias, self.value(*bias).shape());
                for r in 0..g.rows() {
                    for (o, gv) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
            Op::Scale(a, s) => add_into(accum(grads, *a, g.shape()), g.data(), *s),
            Op::AddScalar(a) => add_into(accum(grads, *a, g.shape()), g.data(), 1.0),
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = accum(grads, *a, x.shape());
                for ((o, gv), xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    if *xv > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let ga = accum(grads, *a, x.shape());
                for ((o, gv), xv) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                    *o += 2.0 * xv * gv;
                }
            }
            Op::Sqrt(a) => {
                let ga = accum(grads, *a, y.shape());
                for ((o, gv), yv) in ga.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    if *yv > 0.0 {
                        *o += gv / (2.0 * yv);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let ga = accum(grads, *a, y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let ga = accum(grads, *a, y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += gv - yv.exp() * total;
                    }
                }
            }
            Op::Dropout(a, mask) => {
                let ga = accum(grads, *a, y.shape());
                for ((o, gv), m) in ga.data_mut().iter_mut().zip(g.data()).zip(mask) {
                    *o += gv * m;
                }
            }
            Op::SqDistRows(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let diff: Vec<f64> = (0..x.rows())
                    .flat_map(|r| {
                        let s = 2.0 * g.data()[r];
                        x.row(r).iter().zip(w.row(r)).map(move |(p, q)| s * (p - q))
                    })
                    .collect();
                add_into(accum(grads, *a, x.shape()), &diff, 1.0);
                add_into(accum(grads, *b, w.shape()), &diff, -1.0);
            }
            Op::PairwiseSqDist(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let (n, m, d) = (x.rows(), w.rows(), x.cols());
                let mut gx = vec![0.0; n * d];
                let mut gw = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let s = 2.0 * g.data()[i * m + j];
                        if s == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let diff = s * (x.data()[i * d + c] - w.data()[j * d + c]);
                            gx[i * d + c] += diff;
                            gw[j * d + c] -= diff;
                        }
                    }
                }
                add_into(accum(grads, *a, x.shape()), &gx, 1.0);
                add_into(accum(grads, *b, w.shape()), &gw, 1.0);
            }
            Op::FrobeniusNorm(a) => {
                let x = self.value(*a);
                let norm = y.data()[0];
                if norm > 0.0 {
                    add_into(accum(grads, *a, x.shape()), x.data(), g.data()[0] / norm);
                }
            }
            Op::MeanRows(a) => {
                let x = self.value(*a);
                let inv = 1.0 / x.rows() as f64;
                let ga = accum(grads, *a, x.shape());
                for r in 0..x.rows() {
                    for (o, gv) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o += gv * inv;
                    }
                }
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                let s = g.data()[0] / x.len() as f64;
                accum(grads, *a, x.shape()).data_mut().iter_mut().for_each(|o| *o += s);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                let shape = self.value(*a).shape().to_vec();
                accum(grads, *a, &shape).data_mut().iter_mut().for_each(|o| *o += s);
            }
            Op::SumCols(a) => {
                let x = self.value(*a);
                let ga = accum(grads, *a, x.shape());
                for r in 0..x.rows() {
                    let s = g.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|o| *o += s);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let w = shape[1];
                    let gp = accum(grads, p, &shape);
                    for r in 0..g.rows() {
                        for (o, gv) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                            *o += gv;
                        }
                    }
                    offset += w;
                }
            }
            Op::StackRows(parts) => {
                for (r, &p) in parts.iter().enumerate() {
                    let shape = self.value(p).shape().to_vec();
                    add_into(accum(grads, p, &shape), g.row(r), 1.0);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = shape.iter().product::<usize>();
                    add_into(accum(grads, p, &shape), &g.data()[offset..offset + len], 1.0);
                    offset += len;
                }
            }
            Op::GatherRows(a, indices) => {
                let shape = self.value(*a).shape().to_vec();
                let ga = accum(grads, *a, &shape);
                for (r, &i) in indices.iter().enumerate() {
                    for (o, gv) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
            Op::GatherElems(a, coords) => {
                let shape = self.value(*a).shape().to_vec();
                let cols = shape[1];
                let ga = accum(grads, *a, &shape);
                for (&(r, c), gv) in coords.iter().zip(g.data()) {
                    ga.data_mut()[r * cols + c] += gv;
                }
            }
            Op::Transpose(a) => {
                let shape = self.value(*a).shape().to_vec();
                let gt = g.transpose();
                add_into(accum(grads, *a, &shape), gt.data(), 1.0);
            }
            Op::SegmentLog1pSumExp(a, offsets) => {
                let x = self.value(*a);
                let ga = accum(grads, *a, x.shape());
                for (s, w) in offsets.windows(2).enumerate() {
                    let (out, gs) = (y.data()[s], g.data()[s]);
                    for j in w[0]..w[1] {
                        ga.data_mut()[j] += gs * (x.data()[j] - out).exp();
                    }
                }
            }
        }
    }
}

fn accum<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into(dst: &mut Tensor, src: &[f64], s: f64) {
    for (o, v) in dst.data_mut().iter_mut().zip(src) {
        *o += s * v;
    }
}

/// Max-subtracted softmax over a slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// `log(1 + sum(exp(x)))`, stable for large and small inputs.
pub fn log1p_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(0.0_f64, f64::max);
    m + ((-m).exp() + xs.iter().map(|v| (v - m).exp()).sum::<f64>()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 0.0, 0.0])).unwrap();
        let y = t.softmax_rows(x).unwrap();
        assert!(vec_close(t.value(y).data(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn frobenius_norm_of_three_four() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[[3.0, 4.0]]).unwrap()).unwrap();
        let y = t.frobenius_norm(x).unwrap();
        assert_eq!(t.value(y).item().unwrap(), 5.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        let c = t.leaf(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(t.add(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut t = Tape::new();
        assert!(matches!(
            t.leaf(Tensor::vector(vec![1.0, f64::NAN])),
            Err(Error::NonFinite { .. })
        ));
        let x = t.leaf(Tensor::vector(vec![1e300])).unwrap();
        assert!(matches!(t.square(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_rows(&[[1.0, -2.0], [0.5, 4.0]]).unwrap());
        let mut t = Tape::new();
        let v = t.param(&store, p).unwrap();
        let s = t.sum(v).unwrap();
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[1.0; 4]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_value() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.5, -2.0, 0.25]));
        let mut t = Tape::new();
        let v = t.param(&store, p).unwrap();
        let n = t.frobenius_norm(v).unwrap();
        let sq = t.square(n).unwrap();
        t.backward(sq, &mut store).unwrap();
        assert!(vec_close(store.grad(p).data(), &[3.0, -4.0, 0.5], 1e-12));
    }

    #[test]
    fn unreached_parameter_keeps_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::vector(vec![1.0]));
        let unused = store.add("unused", Tensor::vector(vec![3.0]));
        let mut t = Tape::new();
        let v = t.param(&store, used).unwrap();
        let _ = t.param(&store, unused).unwrap();
        let s = t.sum(v).unwrap();
        t.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(unused).data(), &[0.0]);
    }

    #[test]
    fn backward_contracts() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0, 2.0]));
        let mut t = Tape::new();
        let v = t.param(&store, p).unwrap();
        assert!(matches!(t.backward(v, &mut store), Err(Error::Contract(_))));
        let s = t.sum(v).unwrap();
        t.backward(s, &mut store).unwrap();
        assert!(matches!(t.backward(s, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn dropout_eval_is_identity_and_seeded_masks_repeat() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::filled(&[4, 8], 1.0)).unwrap();
        assert_eq!(t.dropout(x, 0.1, false, 3).unwrap(), x);
        let a = t.dropout(x, 0.5, true, 42).unwrap();
        let b = t.dropout(x, 0.5, true, 42).unwrap();
        assert_eq!(t.value(a), t.value(b));
        assert!(t.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn running_mean_of_identical_rows_is_exact() {
        let mut t = Tape::new();
        let row = [0.1, 1.0 / 3.0, -7.123456789];
        let x = t
            .leaf(Tensor::from_rows(&[row, row, row, row, row, row, row]).unwrap())
            .unwrap();
        let m = t.mean_rows(x).unwrap();
        assert_eq!(t.value(m).data(), &row);
    }

    #[test]
    fn log1p_sum_exp_matches_direct_formula() {
        let xs = [0.3, -1.2, 2.0];
        let direct = (1.0 + xs.iter().map(|v: &f64| v.exp()).sum::<f64>()).ln();
        assert!((log1p_sum_exp(&xs) - direct).abs() < 1e-14);
        assert_eq!(log1p_sum_exp(&[]), 0.0);
        assert!(log1p_sum_exp(&[800.0]).is_finite());
    }
}
