//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] walks it once from the loss towards the leaves.
//! Trainable weights live in a [`ParamStore`] outside the graph; parameter
//! leaves copy their value in and `backward` adds their gradients back.

use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters still receive gradients but the optimizer skips them.
    pub trainable: bool,
}

/// Named, ordered collection of model weights and their gradient buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add_with(name, value, true)
    }

    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add_with(name, value, false)
    }

    pub fn add_with(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x` is `R x c`, `b` is `r x c` with `r | R`; row `i` gets `b[i % r]`.
    AddTiled(Var, Var),
    /// Each row of `x` repeated `times` times consecutively.
    RepeatRows(Var, usize),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log1p(Var),
    Sum(Var),
    BandPass { x: Var, lo: f64, hi: f64 },
    /// Masked entries have zero probability, so they get zero gradient.
    Softmax { x: Var },
    BlockScores { q: Var, k: Var, block: usize },
    BlockApply { p: Var, v: Var, block: usize },
    Gather { table: Var, ids: Rc<[usize]> },
    MeanPool { x: Var, block: usize, mask: Rc<[bool]> },
    CrossEntropy { logits: Var, labels: Rc<[usize]> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Op-specific cache (softmax probabilities for cross-entropy).
    aux: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Accumulated gradients of tracked input leaves.
    input_grads: Vec<Option<Tensor>>,
}

/// How the two operands of a pointwise binary op line up.
#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if a.numel() == 1 {
        Ok(Broadcast::LeftScalar)
    } else if b.numel() == 1 {
        Ok(Broadcast::RightScalar)
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_aux(value, op, requires_grad, Vec::new())
    }

    fn push_aux(&mut self, value: Tensor, op: Op, requires_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        self.input_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Tracked leaf whose gradient is readable through [`Graph::grad`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Accumulated gradient of a tracked input leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.input_grads[v.0].as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (shape, data) = match broadcast(name, av, bv)? {
            Broadcast::Same => (
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::LeftScalar => {
                let x = av.item();
                (bv.shape().to_vec(), bv.data().iter().map(|&y| f(x, y)).collect())
            }
            Broadcast::RightScalar => {
                let y = bv.item();
                (av.shape().to_vec(), av.data().iter().map(|&x| f(x, y)).collect())
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `b` (`r x c`) to every block of `r` rows of `x` (`R x c`).
    /// With `r = 1` this is a bias add.
    pub fn add_tiled(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (rows, cols, r) = (xv.rows(), xv.cols(), bv.rows());
        if bv.cols() != cols || r == 0 || rows % r != 0 {
            return Err(Error::shape("add_tiled", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for (i, row) in out.chunks_mut(cols).enumerate() {
            for (o, bb) in row.iter_mut().zip(bv.row(i % r)) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::AddTiled(x, b), rg))
    }

    /// `x W + b` for a `d_in x d_out` weight and `1 x d_out` (or rank-1) bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_tiled(y, b)
    }

    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::InvalidArgument("repeat_rows: times must be positive".into()));
        }
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(xv.row(r));
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(rows * times, cols, out)?, Op::RepeatRows(x, times), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log1p(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln_1p, Op::Log1p(x))
    }

    /// Passes entries inside the closed interval `[lo, hi]` and zeroes the
    /// rest. Membership is a hard selector: the gradient is the indicator.
    pub fn band_pass(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| if v >= lo && v <= hi { v } else { 0.0 }, Op::BandPass { x, lo, hi })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax with max-shifting.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let block = self.value(x).rows().max(1);
        self.softmax_impl(x, block, None)
    }

    /// Row-wise softmax over `(B*block) x block` scores where column `j` of
    /// a row in block `b` is admitted only if `key_mask[b*block + j]`.
    /// Masked entries get exactly zero probability.
    pub fn masked_softmax(&mut self, x: Var, block: usize, key_mask: Rc<[bool]>) -> Result<Var> {
        self.softmax_impl(x, block, Some(key_mask))
    }

    fn softmax_impl(&mut self, x: Var, block: usize, key_mask: Option<Rc<[bool]>>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if let Some(mask) = &key_mask {
            if cols != block || block == 0 || rows % block != 0 || mask.len() != rows {
                return Err(Error::shape("masked_softmax", xv.shape(), &[mask.len(), block]));
            }
            if let Some(b) = mask.chunks(block).position(|c| !c.iter().any(|&m| m)) {
                return Err(Error::InvalidArgument(format!("masked_softmax: block {b} has no unmasked key")));
            }
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let src = xv.row(r);
            let keep = |j: usize| key_mask.as_ref().is_none_or(|m| m[(r / block) * block + j]);
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| src[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for j in 0..cols {
                if keep(j) {
                    dst[j] = (src[j] - max).exp();
                    total += dst[j];
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x }, rg))
    }

    /// Per-block `q k^T`: for `(B*block) x d` inputs, row `b*block + i` of
    /// the `(B*block) x block` output holds `q_i . k_j` within block `b`.
    pub fn block_scores(&mut self, q: Var, k: Var, block: usize) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.shape() != kv.shape() || block == 0 || qv.rows() % block != 0 {
            return Err(Error::shape("block_scores", qv.shape(), kv.shape()));
        }
        let (rows, d) = (qv.rows(), qv.cols());
        let mut out = vec![0.0; rows * block];
        for b in 0..rows / block {
            let span = b * block * d..(b + 1) * block * d;
            gemm(
                block,
                d,
                block,
                &qv.data()[span.clone()],
                false,
                &kv.data()[span],
                true,
                0.0,
                &mut out[b * block * block..(b + 1) * block * block],
            );
        }
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(Tensor::matrix(rows, block, out)?, Op::BlockScores { q, k, block }, rg))
    }

    /// Per-block `p v`: `(B*block) x block` weights applied to `(B*block) x d`
    /// values of the same block.
    pub fn block_apply(&mut self, p: Var, v: Var, block: usize) -> Result<Var> {
        let (pv, vv) = (self.value(p), self.value(v));
        if block == 0 || pv.cols() != block || pv.rows() != vv.rows() || vv.rows() % block != 0 {
            return Err(Error::shape("block_apply", pv.shape(), vv.shape()));
        }
        let (rows, d) = (vv.rows(), vv.cols());
        let mut out = vec![0.0; rows * d];
        for b in 0..rows / block {
            gemm(
                block,
                block,
                d,
                &pv.data()[b * block * block..(b + 1) * block * block],
                false,
                &vv.data()[b * block * d..(b + 1) * block * d],
                false,
                0.0,
                &mut out[b * block * d..(b + 1) * block * d],
            );
        }
        let rg = self.rg(p) || self.rg(v);
        Ok(self.push(Tensor::matrix(rows, d, out)?, Op::BlockApply { p, v, block }, rg))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather(&mut self, table: Var, ids: Rc<[usize]>) -> Result<Var> {
        let tv = self.value(table);
        let (n, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("gather: id {bad} out of range for {n} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids.iter() {
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::matrix(ids.len(), d, out)?, Op::Gather { table, ids }, rg))
    }

    /// Mean over the unmasked rows of each `block`-row group: `(B*block) x d`
    /// to `B x d`.
    pub fn mean_pool(&mut self, x: Var, block: usize, mask: Rc<[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if block == 0 || rows % block != 0 || mask.len() != rows {
            return Err(Error::shape("mean_pool", xv.shape(), &[mask.len(), block]));
        }
        let groups = rows / block;
        let mut out = vec![0.0; groups * d];
        for b in 0..groups {
            let count = mask[b * block..(b + 1) * block].iter().filter(|&&m| m).count();
            if count == 0 {
                return Err(Error::InvalidArgument(format!("mean_pool: block {b} is fully masked")));
            }
            let dst = &mut out[b * d..(b + 1) * d];
            for i in 0..block {
                if mask[b * block + i] {
                    for (o, v) in dst.iter_mut().zip(xv.row(b * block + i)) {
                        *o += v;
                    }
                }
            }
            let inv = 1.0 / count as f64;
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(groups, d, out)?, Op::MeanPool { x, block, mask }, rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits` (`B x k`).
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<[usize]>) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = (lv.rows(), lv.cols());
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for r in 0..b {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[r]];
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push_aux(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy { logits, labels },
            rg,
            probs,
        ))
    }

    /// Back-propagates from a scalar `loss`. Parameter gradients are added
    /// into `params`; tracked-input gradients accumulate in the graph. Each
    /// call starts from fresh adjoints, so calling twice doubles the
    /// accumulated gradients.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<()> {
        let root = self.value(loss);
        if root.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {
                    let slot = &mut self.input_grads[idx];
                    match slot {
                        Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                    }
                }
                Op::Param(id) => {
                    let p = params.get_mut(*id);
                    if p.grad.shape() != node.value.shape() {
                        return Err(Error::shape("backward", p.grad.shape(), node.value.shape()));
                    }
                    p.grad.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                op => self.propagate(op, &node.value, &node.aux, &g, &mut adj),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, aux: &[f64], g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.rg(v) {
                let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.node(v).value.numel()]);
                f(slot);
            }
        };
        match *op {
            Op::Input | Op::Param(_) => unreachable!("leaves are handled by backward"),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(a, &mut |da| gemm(m, n, k, g, false, bv.data(), true, 1.0, da));
                acc(b, &mut |db| gemm(k, m, n, av.data(), true, g, false, 1.0, db));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(a, 1.0), (b, sign)] {
                    acc(v, &mut |d| {
                        if d.len() == g.len() {
                            d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                        } else {
                            d[0] += s * g.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let at = |i: usize| if av.numel() == 1 { av.item() } else { av.data()[i] };
                let bt = |i: usize| if bv.numel() == 1 { bv.item() } else { bv.data()[i] };
                acc(a, &mut |d| {
                    if d.len() == g.len() {
                        d.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * bt(i));
                    } else {
                        d[0] += (0..g.len()).map(|i| g[i] * bt(i)).sum::<f64>();
                    }
                });
                acc(b, &mut |d| {
                    if d.len() == g.len() {
                        d.iter_mut().enumerate().for_each(|(i, x)| *x += g[i] * at(i));
                    } else {
                        d[0] += (0..g.len()).map(|i| g[i] * at(i)).sum::<f64>();
                    }
                });
            }
            Op::AddTiled(x, b) => {
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(a, y)| *a += y));
                let bv = self.value(b);
                let (r, c) = (bv.rows(), bv.cols());
                acc(b, &mut |d| {
                    for (i, row) in g.chunks(c).enumerate() {
                        let base = (i % r) * c;
                        for (j, y) in row.iter().enumerate() {
                            d[base + j] += y;
                        }
                    }
                });
            }
            Op::RepeatRows(x, times) => {
                let c = self.value(x).cols();
                acc(x, &mut |d| {
                    for (i, row) in g.chunks(c).enumerate() {
                        let base = (i / times) * c;
                        for (j, y) in row.iter().enumerate() {
                            d[base + j] += y;
                        }
                    }
                });
            }
            Op::Scale(x, c) => acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(a, y)| *a += c * y)),
            Op::Relu(x) => {
                let xv = self.value(x).data();
                acc(x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = out.data();
                acc(x, &mut |d| d.iter_mut().enumerate().for_each(|(i, a)| *a += g[i] * y[i]));
            }
            Op::Log1p(x) => {
                let xv = self.value(x).data();
                acc(x, &mut |d| d.iter_mut().enumerate().for_each(|(i, a)| *a += g[i] / (1.0 + xv[i])));
            }
            Op::Sum(x) => acc(x, &mut |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::BandPass { x, lo, hi } => {
                let xv = self.value(x).data();
                acc(x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] >= lo && xv[i] <= hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax { x, .. } => {
                let y = out.data();
                let cols = out.cols();
                acc(x, &mut |d| {
                    for r in 0..out.rows() {
                        let span = r * cols..(r + 1) * cols;
                        let dot: f64 = y[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                        for j in span {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::BlockScores { q, k, block } => {
                let (qv, kv) = (self.value(q), self.value(k));
                let d_model = qv.cols();
                let groups = qv.rows() / block;
                let (bb, bd) = (block * block, block * d_model);
                // dq = g k, dk = g^T q, blockwise
                acc(q, &mut |dq| {
                    for b in 0..groups {
                        gemm(block, block, d_model, &g[b * bb..(b + 1) * bb], false,
                            &kv.data()[b * bd..(b + 1) * bd], false, 1.0, &mut dq[b * bd..(b + 1) * bd]);
                    }
                });
                acc(k, &mut |dk| {
                    for b in 0..groups {
                        gemm(block, block, d_model, &g[b * bb..(b + 1) * bb], true,
                            &qv.data()[b * bd..(b + 1) * bd], false, 1.0, &mut dk[b * bd..(b + 1) * bd]);
                    }
                });
            }
            Op::BlockApply { p, v, block } => {
                let (pv, vv) = (self.value(p), self.value(v));
                let d_model = vv.cols();
                let groups = vv.rows() / block;
                let (bb, bd) = (block * block, block * d_model);
                // dp = g v^T, dv = p^T g, blockwise
                acc(p, &mut |dp| {
                    for b in 0..groups {
                        gemm(block, d_model, block, &g[b * bd..(b + 1) * bd], false,
                            &vv.data()[b * bd..(b + 1) * bd], true, 1.0, &mut dp[b * bb..(b + 1) * bb]);
                    }
                });
                acc(v, &mut |dv| {
                    for b in 0..groups {
                        gemm(block, block, d_model, &pv.data()[b * bb..(b + 1) * bb], true,
                            &g[b * bd..(b + 1) * bd], false, 1.0, &mut dv[b * bd..(b + 1) * bd]);
                    }
                });
            }
            Op::Gather { table, ref ids } => {
                let c = self.value(table).cols();
                acc(table, &mut |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            Op::MeanPool { x, block, ref mask } => {
                let c = self.value(x).cols();
                acc(x, &mut |d| {
                    for (b, chunk) in mask.chunks(block).enumerate() {
                        let inv = 1.0 / chunk.iter().filter(|&&m| m).count() as f64;
                        for (i, &m) in chunk.iter().enumerate() {
                            if m {
                                let row = b * block + i;
                                for j in 0..c {
                                    d[row * c + j] += g[b * c + j] * inv;
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, ref labels } => {
                let k = self.value(logits).cols();
                let scale = g[0] / labels.len() as f64;
                acc(logits, &mut |d| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            d[r * k + j] += scale * (aux[r * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_arithmetic() {
        let mut g = Graph::new();
        let id = g.constant(Tensor::identity(2));
        let x = g.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = g.matmul(id, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let a = g.constant(m(&[vec![1.0, 2.0]]));
        let b = g.constant(m(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn pointwise_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.0, -3.0, 3.0]).unwrap());
        let s = g.sigmoid(x);
        let r = g.relu(x);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
        let y = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(x, y).is_err());
        let two = g.constant(Tensor::scalar(2.0));
        let doubled = g.mul(x, two).unwrap();
        assert_eq!(g.value(doubled).data(), &[0.0, -6.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        g.backward(y, &mut ParamStore::new()).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 0.25);
    }

    #[test]
    fn softmax_stability() {
        let mut g = Graph::new();
        let x = g.constant(m(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zeroes_pad_keys() {
        let mut g = Graph::new();
        let x = g.constant(m(&[vec![1.0, 5.0, 2.0], vec![0.0, 0.0, 9.0], vec![3.0, 3.0, 3.0]]));
        let mask: Rc<[bool]> = vec![true, false, true].into();
        let y = g.masked_softmax(x, 3, mask).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(y).get(r, 1), 0.0);
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let all_pad: Rc<[bool]> = vec![false, false, false].into();
        assert!(g.masked_softmax(x, 3, all_pad).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_range() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(z, vec![0, 3].into()).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);
        assert!(g.cross_entropy(z, vec![0, 4].into()).is_err());
        let big = g.constant(m(&[vec![800.0, 0.0, 0.0]]));
        let l = g.cross_entropy(big, vec![0].into()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x, &mut ParamStore::new()).is_err());
    }

    #[test]
    fn sum_of_params_gives_unit_grads_and_unreached_zero() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let unused = store.add("unused", Tensor::zeros(&[2]));
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let s = g.sum(av);
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(a).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(store.grad(unused).data(), &[0.0, 0.0]);
        // repeated backward accumulates
        g.backward(s, &mut store).unwrap();
        assert_eq!(store.grad(a).data(), &[2.0, 2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.grad(a).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_subexpression_sums_contributions() {
        // f = (x*x) + (x*x) with the product node shared: df/dx = 4x
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let f = g.add(sq, sq).unwrap();
        g.backward(f, &mut ParamStore::new()).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
    }
}
