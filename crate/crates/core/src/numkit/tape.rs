use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{NumError, ParamId, ParamStore, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a tensor recorded on a [`Tape`].
///
/// Handles are only meaningful for the tape (and tape generation) that
/// produced them; a handle used after [`Tape::backward`] or on another tape
/// is rejected with [`NumError::Usage`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DiffTensor {
    tape: u64,
    node: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    SoftmaxRows(usize),
    Transpose(usize),
    SumAll(usize),
    MeanAll(usize),
    MeanRows(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Reverse-mode computation tape.
///
/// Forward operations append nodes; [`Tape::backward`] walks them in reverse,
/// accumulates parameter gradients into a [`ParamStore`], and frees the tape.
/// Every forward result is checked for finiteness.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Broadcast-compatible output dims for two rank-2 operands.
fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sum a gradient of shape `out` down to the (broadcast) operand shape `to`.
fn reduce_to(grad: &Tensor, to: (usize, usize)) -> Tensor {
    let (r, c) = grad.dims().expect("rank-2 gradient");
    if (r, c) == to {
        return grad.clone();
    }
    let mut out = Tensor::zeros(to.0, to.1);
    let data = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            let ti = if to.0 == 1 { 0 } else { i };
            let tj = if to.1 == 1 { 0 } else { j };
            data[ti * to.1 + tj] += grad.at(i, j);
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: fresh_tape_id(),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, t: DiffTensor) -> Result<usize, NumError> {
        if t.tape != self.id || t.node >= self.nodes.len() {
            return Err(NumError::Usage(
                "tensor handle does not belong to this tape (or the tape was freed)".into(),
            ));
        }
        Ok(t.node)
    }

    fn handle(&self, node: usize) -> DiffTensor {
        DiffTensor { tape: self.id, node }
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &str) -> Result<DiffTensor, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite(format!("{op_name} produced a non-finite value")));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            op => parents(op).iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(self.handle(self.nodes.len() - 1))
    }

    /// Record an input tensor. Leaves with `requires_grad` receive gradients
    /// that can be read back with [`Tape::backward_leaves`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<DiffTensor, NumError> {
        let h = self.push(value, Op::Leaf, "leaf")?;
        self.nodes[h.node].requires_grad = requires_grad;
        Ok(h)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<DiffTensor, NumError> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<DiffTensor, NumError> {
        self.constant(Tensor::scalar(value))
    }

    /// Record a trainable parameter. Repeated calls for the same id on one
    /// tape return the same node, so its gradient is accumulated once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<DiffTensor, NumError> {
        if let Some(&node) = self.param_nodes.get(&id) {
            return Ok(self.handle(node));
        }
        let value = store.get(id)?.value.clone();
        let h = self.push(value, Op::Leaf, "param")?;
        let node = &mut self.nodes[h.node];
        node.requires_grad = true;
        node.param = Some(id);
        self.param_nodes.insert(id, h.node);
        Ok(h)
    }

    pub fn value(&self, t: DiffTensor) -> Result<&Tensor, NumError> {
        Ok(&self.nodes[self.index(t)?].value)
    }

    pub fn item(&self, t: DiffTensor) -> Result<f64, NumError> {
        self.value(t)?.item()
    }

    pub fn matmul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor, NumError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        self.push(value, Op::MatMul(ia, ib), "matmul")
    }

    fn binary(
        &mut self,
        a: DiffTensor,
        b: DiffTensor,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, usize, usize), NumError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (da, db) = (va.dims()?, vb.dims()?);
        let (r, c) = broadcast_dims(da, db).ok_or_else(|| {
            NumError::Shape(format!(
                "{name}: shapes {:?} and {:?} do not broadcast",
                va.shape(),
                vb.shape()
            ))
        })?;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = va.at(if da.0 == 1 { 0 } else { i }, if da.1 == 1 { 0 } else { j });
                let y = vb.at(if db.0 == 1 { 0 } else { i }, if db.1 == 1 { 0 } else { j });
                out.push(f(x, y));
            }
        }
        Ok((Tensor::matrix(r, c, out)?, ia, ib))
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor, NumError> {
        let (v, ia, ib) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(ia, ib), "add")
    }

    pub fn sub(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor, NumError> {
        let (v, ia, ib) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(ia, ib), "sub")
    }

    pub fn mul(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor, NumError> {
        let (v, ia, ib) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(ia, ib), "mul")
    }

    pub fn div(&mut self, a: DiffTensor, b: DiffTensor) -> Result<DiffTensor, NumError> {
        let (v, ia, ib) = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(v, Op::Div(ia, ib), "div")
    }

    pub fn scale(&mut self, a: DiffTensor, factor: f64) -> Result<DiffTensor, NumError> {
        let ia = self.index(a)?;
        let src = &self.nodes[ia].value;
        let v = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * factor).collect())?;
        self.push(v, Op::Scale(ia, factor), "scale")
    }

    pub fn tanh(&mut self, a: DiffTensor) -> Result<DiffTensor, NumError> {
        let ia = self.index(a)?;
        let src = &self.nodes[ia].value;
        let v = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x.tanh()).collect())?;
        self.push(v, Op::Tanh(ia), "tanh")
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: DiffTensor) -> Result<DiffTensor, NumError> {
        let ia = self.index(a)?;
        let src = &self.nodes[ia].value;
        let (r, c) = src.dims()?;
        if !src.is_finite() {
            return Err(NumError::NonFinite("softmax input is not finite".into()));
        }
        let mut out = Vec::with_capacity(r * c);
        for row in src.data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.into_iter().map(|e| e / sum));
        }
        let v = Tensor::matrix(r, c, out)?;
        self.push(v, Op::SoftmaxRows(ia), "softmax_rows")
    }

    pub fn transpose(&mut self, a: DiffTensor) -> Result<DiffTensor, NumError> {
        let ia = self.index(a)?;
        let v = self.nodes[ia].value.transpose()?;
        self.push(v, Op::Transpose(ia), "transpose")
    }

    pub fn sum_all(&mut self, a: DiffTensor) -> Result<DiffTensor, NumError> {
        let ia = self.index(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(ia), "sum_all")
    }

    pub fn mean_all(&mut self, a: DiffTensor) -> Result<DiffTensor, NumError> {
        let ia = self.index(a)?;
        let src = self.nodes[ia].value.data();
        let s = src.iter().sum::<f64>() / src.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(ia), "mean_all")
    }

    /// Column means: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: DiffTensor) -> Result<DiffTensor, NumError> {
        let ia = self.index(a)?;
        let src = &self.nodes[ia].value;
        let (r, c) = src.dims()?;
        let mut out = vec![0.0; c];
        for row in src.data().chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(Tensor::row(out)?, Op::MeanRows(ia), "mean_rows")
    }

    pub fn concat_cols(&mut self, parts: &[DiffTensor]) -> Result<DiffTensor, NumError> {
        if parts.is_empty() {
            return Err(NumError::Shape("concat_cols of nothing".into()));
        }
        let idx = parts.iter().map(|&p| self.index(p)).collect::<Result<Vec<_>, _>>()?;
        let rows = self.nodes[idx[0]].value.dims()?.0;
        let mut total = 0;
        for &i in &idx {
            let (r, c) = self.nodes[i].value.dims()?;
            if r != rows {
                return Err(NumError::Shape(format!(
                    "concat_cols: row counts differ ({rows} vs {r})"
                )));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for row in 0..rows {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[row * c..(row + 1) * c]);
            }
        }
        let v = Tensor::matrix(rows, total, out)?;
        self.push(v, Op::ConcatCols(idx), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[DiffTensor]) -> Result<DiffTensor, NumError> {
        if parts.is_empty() {
            return Err(NumError::Shape("concat_rows of nothing".into()));
        }
        let idx = parts.iter().map(|&p| self.index(p)).collect::<Result<Vec<_>, _>>()?;
        let cols = self.nodes[idx[0]].value.dims()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &i in &idx {
            let (r, c) = self.nodes[i].value.dims()?;
            if c != cols {
                return Err(NumError::Shape(format!(
                    "concat_rows: column counts differ ({cols} vs {c})"
                )));
            }
            rows += r;
            out.extend_from_slice(self.nodes[i].value.data());
        }
        let v = Tensor::matrix(rows, cols, out)?;
        self.push(v, Op::ConcatRows(idx), "concat_rows")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: DiffTensor, start: usize, end: usize) -> Result<DiffTensor, NumError> {
        let ia = self.index(a)?;
        let src = &self.nodes[ia].value;
        let (r, c) = src.dims()?;
        if start >= end || end > c {
            return Err(NumError::Shape(format!("slice_cols {start}..{end} out of 0..{c}")));
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for row in src.data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let v = Tensor::matrix(r, end - start, out)?;
        self.push(v, Op::SliceCols(ia, start), "slice_cols")
    }

    /// Select rows of `table` by index (duplicates allowed): embedding lookup.
    pub fn gather_rows(&mut self, table: DiffTensor, rows: &[usize]) -> Result<DiffTensor, NumError> {
        let it = self.index(table)?;
        let src = &self.nodes[it].value;
        let (r, c) = src.dims()?;
        if rows.is_empty() {
            return Err(NumError::Shape("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            if row >= r {
                return Err(NumError::Shape(format!("gather_rows index {row} out of {r} rows")));
            }
            out.extend_from_slice(&src.data()[row * c..(row + 1) * c]);
        }
        let v = Tensor::matrix(rows.len(), c, out)?;
        self.push(v, Op::GatherRows(it, rows.to_vec()), "gather_rows")
    }

    fn run_backward(&mut self, loss: DiffTensor) -> Result<Vec<Option<Tensor>>, NumError> {
        let il = self.index(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(NumError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; il + 1];
        grads[il] = Some(Tensor::new(self.nodes[il].value.shape().to_vec(), vec![1.0])?);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.local_grads(i, &g)?;
            for (p, pg) in contributions {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    /// Back-propagate from a scalar `loss`, adding `dloss/dparam` into the
    /// gradient buffers of `store`. Gradients accumulate across calls until
    /// [`ParamStore::zero_grad`]. The tape is cleared afterwards and every
    /// existing handle becomes invalid.
    pub fn backward(&mut self, loss: DiffTensor, store: &mut ParamStore) -> Result<(), NumError> {
        let grads = self.run_backward(loss)?;
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(id), Some(g)) = (self.nodes[i].param, g) {
                store.accumulate_grad(id, &g)?;
            }
        }
        self.reset();
        Ok(())
    }

    /// Like [`Tape::backward`] but returns the gradients of the requested
    /// leaves instead of writing to a store. Leaves that do not influence the
    /// loss get a zero gradient.
    pub fn backward_leaves(
        &mut self,
        loss: DiffTensor,
        leaves: &[DiffTensor],
    ) -> Result<Vec<Tensor>, NumError> {
        let idx = leaves.iter().map(|&l| self.index(l)).collect::<Result<Vec<_>, _>>()?;
        let mut grads = self.run_backward(loss)?;
        let out = idx
            .iter()
            .map(|&i| match grads.get_mut(i).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros_like(&self.nodes[i].value),
            })
            .collect();
        self.reset();
        Ok(out)
    }

    fn reset(&mut self) {
        self.nodes.clear();
        self.param_nodes.clear();
        self.id = fresh_tape_id();
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>, NumError> {
        let out = &self.nodes[i].value;
        let val = |j: usize| &self.nodes[j].value;
        Ok(match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ga = g.matmul(&val(*b).transpose()?)?;
                let gb = val(*a).transpose()?.matmul(g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, val(*a).dims()?)),
                (*b, reduce_to(g, val(*b).dims()?)),
            ],
            Op::Sub(a, b) => {
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| -x).collect())?;
                vec![(*a, reduce_to(g, val(*a).dims()?)), (*b, reduce_to(&neg, val(*b).dims()?))]
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(self.nodes[i].op, Op::Div(..));
                let (va, vb) = (val(*a), val(*b));
                let (da, db) = (va.dims()?, vb.dims()?);
                let (r, c) = g.dims()?;
                let mut ga = Vec::with_capacity(r * c);
                let mut gb = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        let x = va.at(if da.0 == 1 { 0 } else { i }, if da.1 == 1 { 0 } else { j });
                        let y = vb.at(if db.0 == 1 { 0 } else { i }, if db.1 == 1 { 0 } else { j });
                        let gij = g.at(i, j);
                        if is_div {
                            ga.push(gij / y);
                            gb.push(-gij * x / (y * y));
                        } else {
                            ga.push(gij * y);
                            gb.push(gij * x);
                        }
                    }
                }
                vec![
                    (*a, reduce_to(&Tensor::matrix(r, c, ga)?, da)),
                    (*b, reduce_to(&Tensor::matrix(r, c, gb)?, db)),
                ]
            }
            Op::Scale(a, f) => {
                let d = g.data().iter().map(|x| x * f).collect();
                vec![(*a, Tensor::new(g.shape().to_vec(), d)?)]
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                vec![(*a, Tensor::new(g.shape().to_vec(), d)?)]
            }
            Op::SoftmaxRows(a) => {
                let (_, c) = out.dims()?;
                let mut d = Vec::with_capacity(out.len());
                for (yrow, grow) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gi)| y * gi).sum();
                    d.extend(yrow.iter().zip(grow).map(|(y, gi)| y * (gi - dot)));
                }
                vec![(*a, Tensor::new(out.shape().to_vec(), d)?)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::SumAll(a) => {
                let s = g.item()?;
                let src = val(*a);
                vec![(*a, Tensor::new(src.shape().to_vec(), vec![s; src.len()])?)]
            }
            Op::MeanAll(a) => {
                let src = val(*a);
                let s = g.item()? / src.len() as f64;
                vec![(*a, Tensor::new(src.shape().to_vec(), vec![s; src.len()])?)]
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).dims()?;
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend(g.data().iter().map(|x| x / r as f64));
                }
                vec![(*a, Tensor::matrix(r, c, d)?)]
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims()?;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let c = val(p).shape()[1];
                    let mut d = Vec::with_capacity(rows * c);
                    for row in 0..rows {
                        d.extend_from_slice(&g.data()[row * total + offset..row * total + offset + c]);
                    }
                    res.push((p, Tensor::matrix(rows, c, d)?));
                    offset += c;
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = val(p).len();
                    let d = g.data()[offset..offset + n].to_vec();
                    res.push((p, Tensor::new(val(p).shape().to_vec(), d)?));
                    offset += n;
                }
                res
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).dims()?;
                let w = g.shape()[1];
                let mut d = vec![0.0; r * c];
                for row in 0..r {
                    d[row * c + start..row * c + start + w]
                        .copy_from_slice(&g.data()[row * w..(row + 1) * w]);
                }
                vec![(*a, Tensor::matrix(r, c, d)?)]
            }
            Op::GatherRows(t, rows) => {
                let (r, c) = val(*t).dims()?;
                let mut d = vec![0.0; r * c];
                for (k, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[row * c + j] += g.data()[k * c + j];
                    }
                }
                vec![(*t, Tensor::matrix(r, c, d)?)]
            }
        })
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::Tanh(a)
        | Op::SoftmaxRows(a)
        | Op::Transpose(a)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::MeanRows(a)
        | Op::SliceCols(a, _)
        | Op::GatherRows(a, _) => vec![*a],
        Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
    }
}
