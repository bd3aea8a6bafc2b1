//! Reverse-mode gradient tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the operands it was computed from. [`Tape::backward`] walks the nodes in
//! reverse and applies each operation's vector-Jacobian product.
//!
//! Tensors are treated as matrices over their last axis where an operation is
//! row-oriented (`gather_rows`, segment reductions, `log_softmax_rows`, ...).

use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shared row-index array (edge endpoints, graph membership, permutations).
pub type Index = Arc<[usize]>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Powf(Var, f64),
    Concat(Vec<Var>),
    LeakyRelu(Var, f64),
    Elu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    SegmentSoftmax {
        x: Var,
        seg: Index,
        nseg: usize,
    },
    LogSoftmaxRows(Var),
    GatherRows {
        x: Var,
        idx: Index,
    },
    ScatterAddRows {
        x: Var,
        idx: Index,
    },
    SegmentMean {
        x: Var,
        seg: Index,
        counts: Vec<usize>,
    },
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    BlockRepeat {
        x: Var,
        times: usize,
    },
    BlockSum {
        x: Var,
        block: usize,
    },
    BlockMatMulLeft {
        w: Var,
        x: Var,
    },
    PickRows {
        x: Var,
        idx: Vec<usize>,
    },
    EdgeScores {
        xd: Var,
        xs: Var,
        a: Var,
        src: Index,
        dst: Index,
        slope: f64,
    },
    EdgeAggregate {
        alpha: Var,
        v: Var,
        src: Index,
        dst: Index,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target`'s buffer. Non-participating
    /// values contribute nothing.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None if target.requires_grad() => Ok(()),
            None => Err(Error::contract("accumulate_into: target does not require grad")),
        }
    }
}

fn check_segments(op: &'static str, seg: &[usize], rows: usize, nseg: usize) -> Result<()> {
    if seg.len() != rows {
        return Err(Error::shape(op, &[&[rows], &[seg.len()]]));
    }
    if let Some(&bad) = seg.iter().find(|&&s| s >= nseg) {
        return Err(Error::Contract(format!(
            "{op}: segment id {bad} out of range for {nseg} segments"
        )));
    }
    Ok(())
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g (n,m) · bᵀ` where `b` is `(k,m)`.
fn matmul_nt(g: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `(n,k)` and `g` is `(n,m)`.
fn matmul_tn(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a copy of `t`; it is differentiated iff `t` requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.detached(), Op::Leaf, rg)
    }

    /// Records a value that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_grad(false);
        self.push(t, Op::Leaf, false)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, &[s]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2("matmul", a)?;
        let (k2, m) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[self.value(a).shape(), self.value(b).shape()]));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, &[ta.shape(), tb.shape()]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, cols) = ta.as_matrix_dims();
        if tr.len() != cols {
            return Err(Error::shape(op, &[ta.shape(), tr.shape()]));
        }
        let r = tr.data();
        let data = ta
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    /// `a + row`, broadcasting `row` over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    /// `a * row`, broadcasting `row` over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, Op::MulRow(a, row), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + s)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a), |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::contract("log: non-positive input"));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    /// Concatenates along the last axis. All inputs must agree on the leading
    /// dimensions.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat: no inputs"));
        };
        let lead = self.value(first).shape()[..self.value(first).shape().len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                let shapes: Vec<&[usize]> = parts.iter().map(|&v| self.value(v).shape()).collect();
                return Err(Error::shape("concat", &shapes));
            }
            widths.push(s[lead.len()]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), rg))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, x: Var, seg: &Index, nseg: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.as_matrix_dims();
        check_segments("segment_softmax", seg, rows, nseg)?;
        let d = tx.data();
        let mut max = vec![f64::NEG_INFINITY; nseg * cols];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                let m = &mut max[s * cols + c];
                *m = m.max(d[r * cols + c]);
            }
        }
        let mut out = vec![0.0; rows * cols];
        let mut sum = vec![0.0; nseg * cols];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                let e = (d[r * cols + c] - max[s * cols + c]).exp();
                out[r * cols + c] = e;
                sum[s * cols + c] += e;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                out[r * cols + c] /= sum[s * cols + c];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::SegmentSoftmax {
                x,
                seg: seg.clone(),
                nseg,
            },
            rg,
        ))
    }

    /// Softmax over each row of the whole tensor viewed as one segment per
    /// column: convenience for plain 1-D softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, _) = self.value(x).as_matrix_dims();
        if self.value(x).shape().len() == 1 {
            let lsm = self.log_softmax_rows(x)?;
            return Ok(self.exp(lsm));
        }
        let seg: Index = vec![0; rows].into();
        self.segment_softmax(x, &seg, 1)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, cols) = tx.as_matrix_dims();
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmaxRows(x), rg))
    }

    /// Output row `r` is input row `idx[r]`.
    pub fn gather_rows(&mut self, x: Var, idx: &Index) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.as_matrix_dims();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        if idx.is_empty() {
            return Err(Error::contract("gather_rows: empty index"));
        }
        let d = tx.data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::from_parts(vec![idx.len(), cols], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.clone() }, rg))
    }

    /// Row `r` of the input is added into output row `idx[r]`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &Index, n: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.as_matrix_dims();
        check_segments("scatter_add_rows", idx, rows, n)?;
        let d = tx.data();
        let mut out = vec![0.0; n * cols];
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..cols {
                out[i * cols + c] += d[r * cols + c];
            }
        }
        let t = Tensor::from_parts(vec![n, cols], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::ScatterAddRows { x, idx: idx.clone() }, rg))
    }

    pub fn segment_sum(&mut self, x: Var, seg: &Index, nseg: usize) -> Result<Var> {
        self.scatter_add_rows(x, seg, nseg)
    }

    pub fn segment_mean(&mut self, x: Var, seg: &Index, nseg: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.as_matrix_dims();
        check_segments("segment_mean", seg, rows, nseg)?;
        let mut counts = vec![0usize; nseg];
        seg.iter().for_each(|&s| counts[s] += 1);
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Contract(format!("segment_mean: segment {empty} is empty")));
        }
        let d = tx.data();
        let mut out = vec![0.0; nseg * cols];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                out[s * cols + c] += d[r * cols + c];
            }
        }
        for s in 0..nseg {
            let n = counts[s] as f64;
            out[s * cols..(s + 1) * cols].iter_mut().for_each(|v| *v /= n);
        }
        let t = Tensor::from_parts(vec![nseg, cols], out);
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::SegmentMean {
                x,
                seg: seg.clone(),
                counts,
            },
            rg,
        ))
    }

    /// Per-column maximum over the rows of each segment. Ties resolve to the
    /// lowest row.
    pub fn segment_max(&mut self, x: Var, seg: &Index, nseg: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.as_matrix_dims();
        check_segments("segment_max", seg, rows, nseg)?;
        let d = tx.data();
        let mut argmax = vec![usize::MAX; nseg * cols];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..cols {
                let slot = &mut argmax[s * cols + c];
                if *slot == usize::MAX || d[r * cols + c] > d[*slot * cols + c] {
                    *slot = r;
                }
            }
        }
        if let Some(p) = argmax.iter().position(|&a| a == usize::MAX) {
            return Err(Error::Contract(format!("segment_max: segment {} is empty", p / cols)));
        }
        let out = argmax
            .iter()
            .enumerate()
            .map(|(i, &r)| d[r * cols + i % cols])
            .collect();
        let t = Tensor::from_parts(vec![nseg, cols], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SegmentMax { x, argmax }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums a matrix over `axis` (0 = rows, 1 = columns).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("sum_axis", x)?;
        let d = self.value(x).data();
        let t = match axis {
            0 => {
                let mut out = vec![0.0; cols];
                for row in d.chunks(cols) {
                    out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                Tensor::from_parts(vec![cols], out)
            }
            1 => Tensor::from_parts(vec![rows], d.chunks(cols).map(|r| r.iter().sum()).collect()),
            _ => return Err(Error::shape("sum_axis", &[self.value(x).shape(), &[axis]])),
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("mean_axis", x)?;
        let n = if axis == 0 { rows } else { cols } as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// `(n, h) -> (n, h*times)`, each column repeated `times` times in place.
    pub fn block_repeat(&mut self, x: Var, times: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("block_repeat", x)?;
        if times == 0 {
            return Err(Error::contract("block_repeat: zero repeat count"));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols * times);
        for &v in d {
            out.extend(std::iter::repeat_n(v, times));
        }
        let t = Tensor::from_parts(vec![rows, cols * times], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::BlockRepeat { x, times }, rg))
    }

    /// `(n, h*block) -> (n, h)`, summing each run of `block` columns.
    pub fn block_sum(&mut self, x: Var, block: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("block_sum", x)?;
        if block == 0 || cols % block != 0 {
            return Err(Error::shape("block_sum", &[&[rows, cols], &[block]]));
        }
        let d = self.value(x).data();
        let out = d.chunks(block).map(|c| c.iter().sum()).collect();
        let t = Tensor::from_parts(vec![rows, cols / block], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::BlockSum { x, block }, rg))
    }

    /// Left-multiplies every consecutive block of `M` rows of `x` by the
    /// `(M, M)` matrix `w`.
    pub fn block_matmul_left(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, m2) = self.dims2("block_matmul_left", w)?;
        let (rows, cols) = self.dims2("block_matmul_left", x)?;
        if m != m2 || rows % m != 0 {
            return Err(Error::shape(
                "block_matmul_left",
                &[self.value(w).shape(), self.value(x).shape()],
            ));
        }
        let (wd, xd) = (self.value(w).data(), self.value(x).data());
        let block = m * cols;
        let mut out = Vec::with_capacity(rows * cols);
        for xb in xd.chunks(block) {
            out.extend(matmul_raw(wd, xb, m, m, cols));
        }
        let t = Tensor::from_parts(vec![rows, cols], out);
        let rg = self.rg(&[w, x]);
        Ok(self.push(t, Op::BlockMatMulLeft { w, x }, rg))
    }

    /// Element `idx[r]` of each row `r`.
    pub fn pick_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2("pick_rows", x)?;
        if idx.len() != rows {
            return Err(Error::shape("pick_rows", &[&[rows, cols], &[idx.len()]]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::Contract(format!(
                "pick_rows: column {bad} out of range for {cols} columns"
            )));
        }
        let d = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, &c)| d[r * cols + c]).collect();
        let t = Tensor::from_parts(vec![rows], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::PickRows { x, idx: idx.to_vec() }, rg))
    }

    fn check_edges(&self, op: &'static str, src: &Index, dst: &Index, rows: usize) -> Result<()> {
        if src.len() != dst.len() || src.is_empty() {
            return Err(Error::shape(op, &[&[src.len()], &[dst.len()]]));
        }
        if let Some(&bad) = src.iter().chain(dst.iter()).find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "{op}: node {bad} out of range for {rows} rows"
            )));
        }
        Ok(())
    }

    /// GATv2 edge scores `(E, heads)`: for edge `e`,
    /// `s[e, h] = Σ_c a[h, c] · LeakyReLU(xd[dst_e, h, c] + xs[src_e, h, c])`.
    /// `xd` and `xs` are `(N, heads * C)` and `a` is `(heads * C)`. The
    /// per-edge pre-activations are recomputed in the backward pass instead
    /// of being stored.
    #[allow(clippy::too_many_arguments)]
    pub fn edge_scores(
        &mut self,
        xd: Var,
        xs: Var,
        a: Var,
        src: &Index,
        dst: &Index,
        heads: usize,
        slope: f64,
    ) -> Result<Var> {
        let (n, width) = self.dims2("edge_scores", xd)?;
        let shapes_ok =
            self.value(xs).shape() == [n, width] && self.value(a).len() == width && heads > 0 && width % heads == 0;
        if !shapes_ok {
            return Err(Error::shape(
                "edge_scores",
                &[self.value(xd).shape(), self.value(xs).shape(), self.value(a).shape()],
            ));
        }
        self.check_edges("edge_scores", src, dst, n)?;
        let c = width / heads;
        let (dd, sd, ad) = (self.value(xd).data(), self.value(xs).data(), self.value(a).data());
        let mut out = Vec::with_capacity(src.len() * heads);
        for (&j, &i) in src.iter().zip(dst.iter()) {
            let (zd, zs) = (&dd[i * width..(i + 1) * width], &sd[j * width..(j + 1) * width]);
            for h in 0..heads {
                let r = h * c..(h + 1) * c;
                let s: f64 = zd[r.clone()]
                    .iter()
                    .zip(&zs[r.clone()])
                    .zip(&ad[r])
                    .map(|((x, y), w)| {
                        let z = x + y;
                        w * if z > 0.0 { z } else { slope * z }
                    })
                    .sum();
                out.push(s);
            }
        }
        let t = Tensor::from_parts(vec![src.len(), heads], out);
        let rg = self.rg(&[xd, xs, a]);
        let op = Op::EdgeScores {
            xd,
            xs,
            a,
            src: src.clone(),
            dst: dst.clone(),
            slope,
        };
        Ok(self.push(t, op, rg))
    }

    /// Attention-weighted message sum `(N, heads * C)`:
    /// `out[dst_e, h, :] += alpha[e, h] · v[src_e, h, :]`.
    pub fn edge_aggregate(&mut self, alpha: Var, v: Var, src: &Index, dst: &Index) -> Result<Var> {
        let (n, width) = self.dims2("edge_aggregate", v)?;
        let (e, heads) = self.dims2("edge_aggregate", alpha)?;
        if e != src.len() || heads == 0 || width % heads != 0 {
            return Err(Error::shape(
                "edge_aggregate",
                &[self.value(alpha).shape(), self.value(v).shape()],
            ));
        }
        self.check_edges("edge_aggregate", src, dst, n)?;
        let c = width / heads;
        let (al, vd) = (self.value(alpha).data(), self.value(v).data());
        let mut out = vec![0.0; n * width];
        for (k, (&j, &i)) in src.iter().zip(dst.iter()).enumerate() {
            let vs = &vd[j * width..(j + 1) * width];
            let o = &mut out[i * width..(i + 1) * width];
            for h in 0..heads {
                let w = al[k * heads + h];
                let r = h * c..(h + 1) * c;
                o[r.clone()].iter_mut().zip(&vs[r]).for_each(|(o, x)| *o += w * x);
            }
        }
        let t = Tensor::from_parts(vec![n, width], out);
        let rg = self.rg(&[alpha, v]);
        let op = Op::EdgeAggregate {
            alpha,
            v,
            src: src.clone(),
            dst: dst.clone(),
        };
        Ok(self.push(t, op, rg))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    send(*a, matmul_nt(g, val(*b), n, k, m));
                }
                if self.requires_grad(*b) {
                    send(*b, matmul_tn(val(*a), g, n, k, m));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                send(*a, g.iter().zip(xb).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(xa).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(a, row) => {
                let cols = self.value(*row).len();
                send(*a, g.to_vec());
                let mut gr = vec![0.0; cols];
                for chunk in g.chunks(cols) {
                    gr.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
                }
                send(*row, gr);
            }
            Op::MulRow(a, row) => {
                let r = val(*row);
                let cols = r.len();
                let xa = val(*a);
                let ga = g
                    .chunks(cols)
                    .flat_map(|chunk| chunk.iter().zip(r).map(|(g, w)| g * w))
                    .collect();
                send(*a, ga);
                let mut gr = vec![0.0; cols];
                for (gc, xc) in g.chunks(cols).zip(xa.chunks(cols)) {
                    for c in 0..cols {
                        gr[c] += gc[c] * xc[c];
                    }
                }
                send(*row, gr);
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::Offset(a) => send(*a, g.to_vec()),
            Op::Powf(a, p) => {
                let x = val(*a);
                send(*a, g.iter().zip(x).map(|(g, x)| g * p * x.powf(p - 1.0)).collect());
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| *self.value(p).shape().last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    send(p, gp);
                    offset += w;
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                        .collect(),
                );
            }
            Op::Elu(a) => {
                let x = val(*a);
                send(
                    *a,
                    g.iter()
                        .zip(x.iter().zip(y))
                        .map(|(g, (&x, &y))| if x > 0.0 { *g } else { g * (y + 1.0) })
                        .collect(),
                );
            }
            Op::Relu(a) => {
                let x = val(*a);
                send(
                    *a,
                    g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                );
            }
            Op::Exp(a) => send(*a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Log(a) => {
                let x = val(*a);
                send(*a, g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Sigmoid(a) => send(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::SegmentSoftmax { x, seg, nseg } => {
                let cols = node.value.as_matrix_dims().1;
                let mut dot = vec![0.0; nseg * cols];
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..cols {
                        dot[s * cols + c] += g[r * cols + c] * y[r * cols + c];
                    }
                }
                let mut gx = vec![0.0; y.len()];
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..cols {
                        let k = r * cols + c;
                        gx[k] = y[k] * (g[k] - dot[s * cols + c]);
                    }
                }
                send(*x, gx);
            }
            Op::LogSoftmaxRows(x) => {
                let cols = node.value.as_matrix_dims().1;
                let mut gx = Vec::with_capacity(y.len());
                for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
                    let s: f64 = gr.iter().sum();
                    gx.extend(gr.iter().zip(yr).map(|(g, y)| g - y.exp() * s));
                }
                send(*x, gx);
            }
            Op::GatherRows { x, idx } => {
                let (rows, cols) = self.value(*x).as_matrix_dims();
                let mut gx = vec![0.0; rows * cols];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        gx[i * cols + c] += g[r * cols + c];
                    }
                }
                send(*x, gx);
            }
            Op::ScatterAddRows { x, idx } => {
                let cols = node.value.as_matrix_dims().1;
                let mut gx = Vec::with_capacity(idx.len() * cols);
                for &i in idx.iter() {
                    gx.extend_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                send(*x, gx);
            }
            Op::SegmentMean { x, seg, counts } => {
                let cols = node.value.as_matrix_dims().1;
                let mut gx = Vec::with_capacity(seg.len() * cols);
                for &s in seg.iter() {
                    let n = counts[s] as f64;
                    gx.extend(g[s * cols..(s + 1) * cols].iter().map(|v| v / n));
                }
                send(*x, gx);
            }
            Op::SegmentMax { x, argmax } => {
                let (rows, cols) = self.value(*x).as_matrix_dims();
                let mut gx = vec![0.0; rows * cols];
                for (k, &r) in argmax.iter().enumerate() {
                    gx[r * cols + k % cols] += g[k];
                }
                send(*x, gx);
            }
            Op::SumAll(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::SumAxis { x, axis } => {
                let (rows, cols) = self.value(*x).as_matrix_dims();
                let gx = if *axis == 0 {
                    (0..rows * cols).map(|k| g[k % cols]).collect()
                } else {
                    (0..rows * cols).map(|k| g[k / cols]).collect()
                };
                send(*x, gx);
            }
            Op::BlockRepeat { x, times } => {
                send(*x, g.chunks(*times).map(|c| c.iter().sum()).collect());
            }
            Op::BlockSum { x, block } => {
                send(*x, g.iter().flat_map(|&v| std::iter::repeat_n(v, *block)).collect());
            }
            Op::BlockMatMulLeft { w, x } => {
                let m = self.value(*w).shape()[0];
                let cols = node.value.as_matrix_dims().1;
                let (wd, xd) = (val(*w), val(*x));
                let block = m * cols;
                if self.requires_grad(*x) {
                    let mut gx = Vec::with_capacity(xd.len());
                    for gb in g.chunks(block) {
                        gx.extend(matmul_tn(wd, gb, m, m, cols));
                    }
                    send(*x, gx);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; m * m];
                    for (gb, xb) in g.chunks(block).zip(xd.chunks(block)) {
                        let part = matmul_nt(gb, xb, m, m, cols);
                        gw.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                    }
                    send(*w, gw);
                }
            }
            Op::PickRows { x, idx } => {
                let (rows, cols) = self.value(*x).as_matrix_dims();
                let mut gx = vec![0.0; rows * cols];
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * cols + c] = g[r];
                }
                send(*x, gx);
            }
            Op::EdgeScores {
                xd,
                xs,
                a,
                src,
                dst,
                slope,
            } => {
                let (n, width) = self.value(*xd).as_matrix_dims();
                let heads = node.value.as_matrix_dims().1;
                let c = width / heads;
                let (dd, sd, ad) = (val(*xd), val(*xs), val(*a));
                let mut gd = vec![0.0; n * width];
                let mut gs = vec![0.0; n * width];
                let mut ga = vec![0.0; width];
                for (k, (&j, &i)) in src.iter().zip(dst.iter()).enumerate() {
                    for p in 0..width {
                        let ge = g[k * heads + p / c];
                        let z = dd[i * width + p] + sd[j * width + p];
                        let (act, slope_here) = if z > 0.0 { (z, 1.0) } else { (slope * z, *slope) };
                        ga[p] += ge * act;
                        let dz = ge * ad[p] * slope_here;
                        gd[i * width + p] += dz;
                        gs[j * width + p] += dz;
                    }
                }
                send(*xd, gd);
                send(*xs, gs);
                send(*a, ga);
            }
            Op::EdgeAggregate { alpha, v, src, dst } => {
                let (n, width) = self.value(*v).as_matrix_dims();
                let heads = self.value(*alpha).as_matrix_dims().1;
                let c = width / heads;
                let (al, vd) = (val(*alpha), val(*v));
                let mut galpha = vec![0.0; src.len() * heads];
                let mut gv = vec![0.0; n * width];
                for (k, (&j, &i)) in src.iter().zip(dst.iter()).enumerate() {
                    for h in 0..heads {
                        let r = h * c..(h + 1) * c;
                        let go = &g[i * width..(i + 1) * width][r.clone()];
                        let vs = &vd[j * width..(j + 1) * width][r.clone()];
                        galpha[k * heads + h] = go.iter().zip(vs).map(|(x, y)| x * y).sum();
                        let w = al[k * heads + h];
                        gv[j * width..(j + 1) * width][r]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(o, x)| *o += w * x);
                    }
                }
                send(*alpha, galpha);
                send(*v, gv);
            }
        }
    }
}
