//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`GradTape`] records every op as it executes. [`GradTape::backward`]
//! walks the record in reverse and accumulates adjoints, so a leaf that feeds
//! several branches receives the sum of the branch gradients.
//!
//! ```
//! use dane::compute::{GradTape, Tensor2};
//!
//! let mut tape = GradTape::new();
//! let w = tape.leaf(Tensor2::from_vec(1, 2, vec![1.0, -2.0]).unwrap()).unwrap();
//! let sq = tape.square(w);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).data(), &[2.0, -4.0]);
//! ```

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::compute::tensor::{self, Tensor2};
use crate::compute::CsrMatrix;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    idx: usize,
}

#[derive(Debug)]
enum Op<'a> {
    Leaf,
    MatMul(usize, usize),
    SpMM(&'a CsrMatrix, usize),
    Relu(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    AddRowBias(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    PairDots(usize, Vec<(usize, usize)>),
    GatherRows(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node<'a> {
    value: Tensor2,
    op: Op<'a>,
}

/// Ordered record of executed ops. Borrowed sparse operators must outlive it.
#[derive(Debug)]
pub struct GradTape<'a> {
    id: usize,
    nodes: Vec<Node<'a>>,
}

impl Default for GradTape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> GradTape<'a> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2, op: Op<'a>) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable used on a foreign tape");
        v.idx
    }

    fn val(&self, v: Var) -> &Tensor2 {
        &self.nodes[self.idx(v)].value
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        self.val(v)
    }

    /// Records an input. Non-finite data is rejected.
    pub fn leaf(&mut self, value: Tensor2) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("tape leaf"));
        }
        Ok(self.push(value, Op::Leaf))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.push(out, Op::MatMul(a.idx, b.idx)))
    }

    pub fn spmm(&mut self, p: &'a CsrMatrix, h: Var) -> Result<Var> {
        let out = p.spmm(self.val(h))?;
        Ok(self.push(out, Op::SpMM(p, h.idx)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.val(x));
        self.push(out, Op::Relu(x.idx))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = tensor::sigmoid(self.val(x));
        self.push(out, Op::Sigmoid(x.idx))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = tensor::log_sigmoid(self.val(x));
        self.push(out, Op::LogSigmoid(x.idx))
    }

    /// Adds a `1 × cols` bias row to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.val(x), self.val(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBias(x.idx, bias.idx)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).add(self.val(b))?;
        Ok(self.push(out, Op::Add(a.idx, b.idx)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.val(x).scale(c);
        self.push(out, Op::Scale(x.idx, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.val(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x.idx))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.val(x).map(|v| v * v);
        self.push(out, Op::Square(x.idx))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor2::scalar(self.val(x).sum());
        self.push(out, Op::Sum(x.idx))
    }

    /// Mean over all entries. An empty tensor yields 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor2::scalar(self.val(x).mean());
        self.push(out, Op::Mean(x.idx))
    }

    /// Row dot products: output row `k` is `x[i_k] · x[j_k]` (a `k × 1` column).
    pub fn pair_dots(&mut self, x: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        let xv = self.val(x);
        let n = xv.rows();
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            let bad = if i >= n {
                Some(i)
            } else if j >= n {
                Some(j)
            } else {
                None
            };
            if let Some(index) = bad {
                return Err(Error::IndexOutOfRange { index, len: n });
            }
            out.push(tensor::dot(xv.row(i), xv.row(j)));
        }
        let out = Tensor2::from_fn(pairs.len(), 1, |r, _| out[r]);
        Ok(self.push(out, Op::PairDots(x.idx, pairs)))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let out = self.val(x).select_rows(&idx)?;
        Ok(self.push(out, Op::GatherRows(x.idx, idx)))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::DisconnectedLoss);
        }
        let shape = self.nodes[loss.idx].value.shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(Tensor2::scalar(1.0));

        for idx in (0..=loss.idx).rev() {
            let node = &self.nodes[idx];
            // leaves keep their adjoint for the caller
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(&self.nodes[*b].value)?;
                    let gb = self.nodes[*a].value.t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SpMM(p, h) => accumulate(&mut grads, *h, p.spmm_t(&g)?),
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (gv, &s) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= s * (1.0 - s);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LogSigmoid(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *gv *= tensor::sigmoid_scalar(-v);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::AddRowBias(x, b) => {
                    let mut gb = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g.scale(*c)),
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::Square(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *gv *= 2.0 * v;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let (r, c) = self.nodes[*x].value.shape();
                    accumulate(&mut grads, *x, Tensor2::filled(r, c, g.data()[0]));
                }
                Op::Mean(x) => {
                    let (r, c) = self.nodes[*x].value.shape();
                    let n = (r * c).max(1) as f64;
                    accumulate(&mut grads, *x, Tensor2::filled(r, c, g.data()[0] / n));
                }
                Op::PairDots(x, pairs) => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let gk = g.data()[k];
                        if gk == 0.0 {
                            continue;
                        }
                        for c in 0..xv.cols() {
                            let (vi, vj) = (xv.get(i, c), xv.get(j, c));
                            gx.row_mut(i)[c] += gk * vj;
                            gx.row_mut(j)[c] += gk * vi;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherRows(x, idx) => {
                    let xv = &self.nodes[*x].value;
                    let mut gx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], idx: usize, g: Tensor2) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Adjoints produced by [`GradTape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient for leaf `v`; zeros when `v` does not influence the loss.
    /// Intermediate adjoints are released during the sweep.
    pub fn get(&self, v: Var) -> Tensor2 {
        assert_eq!(v.tape, self.tape, "variable from a foreign tape");
        match self.grads.get(v.idx) {
            Some(Some(g)) => g.clone(),
            _ => {
                let (r, c) = self.shapes[v.idx];
                Tensor2::zeros(r, c)
            }
        }
    }
}
