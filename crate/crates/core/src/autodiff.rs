//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a tape, so tape
//! order is already a topological order. [`Graph::backward`] walks the tape in
//! reverse and visits each node once. Graphs are cheap and meant to be built
//! per training segment and then dropped.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise function paired with its derivative, both as plain fn pointers.
#[derive(Clone, Copy)]
pub struct ElementwiseFn {
    pub forward: fn(f64) -> f64,
    pub derivative: fn(f64) -> f64,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Map(Var, ElementwiseFn),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Block {
        src: Var,
        head: usize,
        row0: usize,
        col0: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Square(Var),
    Bce {
        logits: Var,
        targets: Vec<f64>,
        pos_weight: f64,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    id: u64,
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter, or `None` when the parameter was not used
    /// by the graph (or received no gradient).
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.param_vars
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some())
            .map(|(i, _)| ParamId(i))
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Some(params),
            param_vars: vec![None; params.len()],
        }
    }

    /// A graph with no parameter store, for parameter-free computations.
    pub fn standalone() -> Graph<'static> {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// All nodes in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// True for nodes created by [`Graph::param`].
    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Param)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Trainable leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Param, &[]);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Trainable leaf that is not backed by a store (for tests and probes).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Identity forward; the result is a fresh leaf so backward never reaches `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a [m,k] x b[n,k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (n, k2) = bv.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMulNT(a, b), &[a, b]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `row` (numel = last dim of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let n = *av.shape().last().unwrap_or(&0);
        if rv.numel() != n {
            return Err(Error::shape("add_row", av.shape(), rv.shape()));
        }
        let r = rv.data();
        let data = av
            .data()
            .chunks(n.max(1))
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Multiplies `a` by a one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::shape("scale_by", self.value(a).shape(), sv.shape()));
        }
        let c = sv.data()[0];
        let value = self.value(a).map(|x| x * c);
        Ok(self.push(value, Op::ScaleBy(a, s), &[a, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Applies a user-supplied elementwise function with its own derivative.
    pub fn map(&mut self, a: Var, f: ElementwiseFn) -> Var {
        let value = self.value(a).map(f.forward);
        self.push(value, Op::Map(a, f), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(
            a,
            ElementwiseFn {
                forward: sigmoid,
                derivative: |x| {
                    let s = sigmoid(x);
                    s * (1.0 - s)
                },
            },
        )
    }

    /// Softmax over the last dimension. `-inf` entries act as masks and map
    /// to exactly zero.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.value(a))?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = *xv.shape().last().unwrap_or(&0);
        if gv.numel() != n || bv.numel() != n {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = if n == 0 { 0 } else { xv.numel() / n };
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Concatenates 2-D tensors along rows (time).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = pv.dims2()?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), pv.shape()));
            }
            rows += r;
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::new(&[rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        if start > end || end > r {
            return Err(Error::Index {
                what: "slice_rows",
                index: end,
                len: r,
            });
        }
        let value = Tensor::new(&[end - start, c], av.data()[start * c..end * c].to_vec())?;
        Ok(self.push(value, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        if start > end || end > c {
            return Err(Error::Index {
                what: "slice_cols",
                index: end,
                len: c,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&av.data()[i * c + start..i * c + end]);
        }
        let value = Tensor::new(&[r, w], data)?;
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    /// Extracts `src[head, row0..row0+rows, col0..col0+cols]` from a 3-D tensor.
    pub fn block(&mut self, src: Var, head: usize, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let sv = self.value(src);
        let [h, r, c] = sv.shape()[..] else {
            return Err(Error::shape("block", sv.shape(), &[0, 0, 0]));
        };
        if head >= h || row0 + rows > r || col0 + cols > c {
            return Err(Error::shape("block", sv.shape(), &[head + 1, row0 + rows, col0 + cols]));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let base = head * r * c + (row0 + i) * c + col0;
            data.extend_from_slice(&sv.data()[base..base + cols]);
        }
        let value = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(value, Op::Block { src, head, row0, col0 }, &[src]))
    }

    /// Row lookup `table[ids[i], :]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, d) = tv.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.numel().max(1) as f64;
        let value = Tensor::scalar(av.data().iter().sum::<f64>() / n);
        self.push(value, Op::Mean(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    /// Mean binary cross-entropy on logits; positives weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], pos_weight: f64) -> Result<Var> {
        let lv = self.value(logits);
        if lv.numel() != targets.len() {
            return Err(Error::shape("bce_with_logits", lv.shape(), &[targets.len()]));
        }
        let n = targets.len().max(1) as f64;
        let total: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| pos_weight * y * softplus(-x) + (1.0 - y) * softplus(x))
            .sum();
        let value = Tensor::scalar(total / n);
        Ok(self.push(
            value,
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                pos_weight,
            },
            &[logits],
        ))
    }

    /// Inverted dropout with a mask drawn from `seed`. `p == 0` is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                if self.requires_grad(*a) {
                    let bt = transpose_last2(bv);
                    let ga = gt.matmul(&bt)?.sum_to_shape(av.shape());
                    self.accumulate(grads, *a, |s| add_into(s, ga.data()));
                }
                if self.requires_grad(*b) {
                    let at = transpose_last2(av);
                    let gb = at.matmul(&gt)?.sum_to_shape(bv.shape());
                    self.accumulate(grads, *b, |s| add_into(s, gb.data()));
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let n = bv.dims2()?.0;
                // C = A B^T: dA = dC B, dB = dC^T A
                self.accumulate(grads, *a, |s| gemm_nn(g, bv.data(), s, m, n, k));
                self.accumulate(grads, *b, |s| gemm_tn(g, av.data(), s, n, m, k));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    for ((x, gi), bi) in s.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                let n = self.value(*row).numel();
                self.accumulate(grads, *row, |s| {
                    for chunk in g.chunks(n.max(1)) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::ScaleBy(a, sv) => {
                let c = self.value(*sv).data()[0];
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
                let av = self.value(*a).data();
                let dot: f64 = av.iter().zip(g).map(|(x, y)| x * y).sum();
                self.accumulate(grads, *sv, |s| s[0] += dot);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        if *ai > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Map(a, f) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *x += gi * (f.derivative)(*ai);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                self.accumulate(grads, *a, |s| {
                    for ((sr, gr), yr) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                self.accumulate(grads, *x, |s| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            s[r * n + j] += is * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
                self.accumulate(grads, *gain, |s| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |s| {
                    for gr in g.chunks(n) {
                        add_into(s, gr);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    self.accumulate(grads, *p, |s| add_into(s, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for p in parts {
                    let (rows, w) = self.value(*p).dims2()?;
                    self.accumulate(grads, *p, |s| {
                        for r in 0..rows {
                            add_into(&mut s[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.value.shape()[1];
                self.accumulate(grads, *a, |s| add_into(&mut s[start * c..start * c + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let (rows, w) = node.value.dims2()?;
                let c = self.value(*a).shape()[1];
                self.accumulate(grads, *a, |s| {
                    for r in 0..rows {
                        add_into(&mut s[r * c + start..r * c + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Block {
                src,
                head,
                row0,
                col0,
            } => {
                let (rows, cols) = node.value.dims2()?;
                let sh = self.value(*src).shape();
                let (r, c) = (sh[1], sh[2]);
                self.accumulate(grads, *src, |s| {
                    for i in 0..rows {
                        let base = head * r * c + (row0 + i) * c + col0;
                        add_into(&mut s[base..base + cols], &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).shape()[1];
                self.accumulate(grads, *table, |s| {
                    for (k, &i) in ids.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1) as f64;
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *x += gi * ai.signum() * f64::from(*ai != 0.0);
                    }
                });
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *x += 2.0 * gi * ai;
                    }
                });
            }
            Op::Bce {
                logits,
                targets,
                pos_weight,
            } => {
                let lv = self.value(*logits).data();
                let n = targets.len().max(1) as f64;
                self.accumulate(grads, *logits, |s| {
                    for ((x, &l), &y) in s.iter_mut().zip(lv).zip(targets) {
                        let p = sigmoid(l);
                        *x += g[0] * (pos_weight * y * (p - 1.0) + (1.0 - y) * p) / n;
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |s| {
                    for ((a, gi), m) in s.iter_mut().zip(g).zip(mask) {
                        *a += gi * m;
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let r = t.rank();
    let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
    let nb = t.numel() / (m * n).max(1);
    let mut out = vec![0.0; t.numel()];
    for b in 0..nb {
        let src = &t.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(&shape, out).expect("same numel")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Max-subtracted softmax over the last dimension.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    let n = *t.shape().last().unwrap_or(&0);
    let mut out = vec![0.0; t.numel()];
    if n == 0 {
        return Tensor::new(t.shape(), out);
    }
    for (r, (src, dst)) in t.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
        // NaN propagates so a diverged forward surfaces as a non-finite loss.
        if src.iter().any(|x| x.is_nan()) {
            dst.fill(f64::NAN);
            continue;
        }
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMaskedRow { row: r });
        }
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Tensor::new(t.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::standalone();
        let x = g.constant(Tensor::new(&[3], vec![0.0; 3]).unwrap());
        let y = g.softmax_lastdim(x).unwrap();
        assert!(close(g.value(y).data(), &[1.0 / 3.0; 3], 1e-15));

        let x = g.constant(Tensor::new(&[2], vec![5.0, f64::NEG_INFINITY]).unwrap());
        let y = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);

        let x = g.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.softmax_lastdim(x).unwrap();
        // exp(k)/sum evaluated by hand to 5 places
        assert!(close(g.value(y).data(), &[0.09003, 0.24473, 0.66524], 5e-6));
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let mut g = Graph::standalone();
        let x = g.constant(Tensor::new(&[2, 2], vec![0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap());
        assert!(matches!(g.softmax_lastdim(x), Err(Error::AllMaskedRow { row: 1 })));
    }

    #[test]
    fn stop_gradient_blocks_input() {
        let mut g = Graph::standalone();
        let x = g.variable(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let w = g.variable(Tensor::new(&[3], vec![0.3, 0.1, 4.0]).unwrap());
        let sx = g.stop_gradient(x);
        assert_eq!(g.value(sx).data(), g.value(x).data());
        let p = g.mul(sx, w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(x).is_none());
        assert_eq!(grads.wrt(w).unwrap(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::standalone();
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, 2.0]]).unwrap());
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!(close(g.value(y).data(), &[-1.0, 1.0, 0.0, 0.0], 1e-9));
    }

    #[test]
    fn each_node_backpropagates_once_for_shared_inputs() {
        // y = x*x + x, dy/dx = 2x + 1
        let mut g = Graph::standalone();
        let x = g.variable(Tensor::scalar(3.0));
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[7.0]);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut g = Graph::standalone();
        let l = g.constant(Tensor::new(&[2], vec![0.3, -1.2]).unwrap());
        let loss = g.bce_with_logits(l, &[1.0, 0.0], 2.0).unwrap();
        let expect = (-(2.0 * sigmoid(0.3).ln()) - (1.0 - sigmoid(-1.2)).ln()) / 2.0;
        assert!((g.value(loss).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn dropout_zero_is_identity_and_seeded() {
        let mut g = Graph::standalone();
        let x = g.constant(Tensor::full(&[50], 1.0));
        assert_eq!(g.dropout(x, 0.0, 7), x);
        let a = g.dropout(x, 0.5, 7);
        let b = g.dropout(x, 0.5, 7);
        assert_eq!(g.value(a), g.value(b));
        assert!(g.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
