use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the second operand of a binary elementwise op lines up with the first.
#[derive(Debug)]
enum Bcast {
    Same,
    /// `b` repeats over the leading axes of `a`.
    SuffixB(usize),
    SuffixA(usize),
    /// `b` is `a` with the last axis collapsed to 1.
    RowB(usize),
    RowA(usize),
    General {
        ai: Vec<usize>,
        bi: Vec<usize>,
    },
}

impl Bcast {
    fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
        if a == b {
            return Ok((Bcast::Same, a.to_vec()));
        }
        if b.len() <= a.len() && a.ends_with(b) {
            return Ok((Bcast::SuffixB(b.iter().product()), a.to_vec()));
        }
        if a.len() < b.len() && b.ends_with(a) {
            return Ok((Bcast::SuffixA(a.iter().product()), b.to_vec()));
        }
        let r = a.len();
        if r > 0 && b.len() == r && a[..r - 1] == b[..r - 1] {
            if b[r - 1] == 1 {
                return Ok((Bcast::RowB(a[r - 1]), a.to_vec()));
            }
            if a[r - 1] == 1 {
                return Ok((Bcast::RowA(b[r - 1]), b.to_vec()));
            }
        }
        // numpy-style right-aligned broadcasting
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                out.push(x);
            } else if x == 1 {
                out.push(y);
            } else {
                return Err(Error::shape(op, a, b));
            }
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        let (sa, sb) = (strides(&pa), strides(&pb));
        let n: usize = out.iter().product();
        let mut ai = Vec::with_capacity(n);
        let mut bi = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            ai.push(idx.iter().zip(&sa).map(|(i, s)| i * s).sum());
            bi.push(idx.iter().zip(&sb).map(|(i, s)| i * s).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok((Bcast::General { ai, bi }, out))
    }

    #[inline]
    fn idx(&self, i: usize) -> (usize, usize) {
        match self {
            Bcast::Same => (i, i),
            Bcast::SuffixB(len) => (i, i % len),
            Bcast::SuffixA(len) => (i % len, i),
            Bcast::RowB(n) => (i, i / n),
            Bcast::RowA(n) => (i / n, i),
            Bcast::General { ai, bi } => (ai[i], bi[i]),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Transpose {
        x: Var,
        batch: usize,
        r: usize,
        c: usize,
    },
    Add {
        a: Var,
        b: Var,
        bc: Bcast,
    },
    Mul {
        a: Var,
        b: Var,
        bc: Bcast,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        blocks: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        src_block: usize,
        offset: usize,
        block: usize,
    },
    Reshape {
        x: Var,
    },
    Softmax {
        x: Var,
        n: usize,
    },
    LogSoftmax {
        x: Var,
        n: usize,
    },
    Gelu {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    LayerNorm {
        x: Var,
        n: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
        d: usize,
    },
    /// Entries with `keep == false` were overwritten by a constant.
    Keep {
        x: Var,
        keep: Vec<bool>,
    },
    Pick {
        x: Var,
        flat: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
        d: usize,
    },
    SumLast {
        x: Var,
        n: usize,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so the vector index is a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// `c[m,n] += a[m,k] * b[k,n]`
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `da[m,k] += dc[m,n] * b[k,n]^T`
fn mm_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += drow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `db[k,n] += a[m,k]^T * dc[m,n]`
fn mm_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (x, y) in dbrow.iter_mut().zip(drow) {
                *x += av * y;
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// `a @ b` over the last two axes of `a`. `b` is either a shared `[k, n]`
    /// matrix or carries the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let (batch, m, n, shared_b, out_shape);
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(Error::shape("matmul", &sa, &sb));
            }
            batch = 1;
            m = sa[..sa.len() - 1].iter().product();
            n = sb[1];
            shared_b = true;
            let mut s = sa[..sa.len() - 1].to_vec();
            s.push(n);
            out_shape = s;
        } else {
            let r = sa.len();
            if sb.len() != r || sa[..r - 2] != sb[..r - 2] || sb[r - 2] != k {
                return Err(Error::shape("matmul", &sa, &sb));
            }
            batch = sa[..r - 2].iter().product();
            m = sa[r - 2];
            n = sb[r - 1];
            shared_b = false;
            let mut s = sa[..r - 1].to_vec();
            s.push(n);
            out_shape = s;
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for bt in 0..batch {
                let boff = if shared_b { 0 } else { bt * k * n };
                mm_acc(
                    &av[bt * m * k..(bt + 1) * m * k],
                    &bv[boff..boff + k * n],
                    &mut out[bt * m * n..(bt + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::invalid("transpose", format!("rank {} < 2", s.len())));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product::<usize>();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for bt in 0..batch {
            let off = bt * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = xv[off + i * c + j];
                }
            }
        }
        let mut os = s.clone();
        let l = os.len();
        os.swap(l - 2, l - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(os, out)?, Op::Transpose { x, batch, r, c }, rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (bc, shape) = Bcast::plan(op, self.shape(a), self.shape(b))?;
        let n: usize = shape.iter().product();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let (ia, ib) = bc.idx(i);
                if mul {
                    av[ia] * bv[ib]
                } else {
                    av[ia] + bv[ib]
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let node = if mul {
            Op::Mul { a, b, bc }
        } else {
            Op::Add { a, b, bc }
        };
        Ok(self.push(Tensor::new(shape, out)?, node, rg))
    }

    /// Elementwise sum with broadcasting (typically a bias over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, false)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, true)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, Op::Scale { x, c }, rg)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut blocks = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", &base, s));
            }
            blocks.push(s[axis] * inner);
            total += s[axis];
        }
        let width: usize = blocks.iter().sum();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            for (&v, &blk) in inputs.iter().zip(&blocks) {
                out.extend_from_slice(&self.value(v).data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                blocks,
            },
            rg,
        ))
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let src_block = ext * inner;
        let block = len * inner;
        let offset = start * inner;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * block);
        for o in 0..outer {
            let base = o * src_block + offset;
            out.extend_from_slice(&xv[base..base + block]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Slice {
                x,
                outer,
                src_block,
                offset,
                block,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape { x }, rg))
    }

    /// Softmax over the last axis. A row that is entirely `-inf` yields zeros.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, Op::Softmax { x, n }, rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, Op::LogSoftmax { x, n }, rg)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, Op::Gelu { x }, rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| softplus(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, Op::Softplus { x }, rg)
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let rows = t.rows();
        let mut xhat = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in t.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor {
                shape,
                data: xhat.clone(),
            },
            Op::LayerNorm {
                x,
                n,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Gathers rows of a `[V, d]` table; output shape is `index_shape ++ [d]`.
    pub fn embedding(
        &mut self,
        table: Var,
        indices: &[usize],
        index_shape: &[usize],
    ) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::invalid(
                "embedding",
                format!("table must be 2-d, got {ts:?}"),
            ));
        }
        if index_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::invalid(
                "embedding",
                format!("{} indices for index shape {index_shape:?}", indices.len()),
            ));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(
                "embedding",
                format!("index {bad} >= table rows {v}"),
            ));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
                d,
            },
            rg,
        ))
    }

    /// Replaces entries where `mask` is true by `value`; those entries pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(Error::shape("masked_fill", t.shape(), &[mask.len()]));
        }
        let out: Vec<f64> = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let shape = t.shape().to_vec();
        let keep = mask.iter().map(|m| !m).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::Keep { x, keep }, rg))
    }

    /// Keeps the `k` largest entries of every last-axis row and sets the rest
    /// to `-inf`. Ties go to the lower index. Returns the selected column
    /// indices per row in descending value order.
    pub fn topk_mask(&mut self, x: Var, k: usize) -> Result<(Var, Vec<Vec<usize>>)> {
        let t = self.value(x);
        let n = t.last_dim();
        if k == 0 || k > n {
            return Err(Error::invalid(
                "topk_mask",
                format!("k = {k} outside 1..={n}"),
            ));
        }
        let mut keep = vec![false; t.numel()];
        let mut selected = Vec::with_capacity(t.rows());
        for (r, row) in t.data().chunks(n).enumerate() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
            order.truncate(k);
            for &c in &order {
                keep[r * n + c] = true;
            }
            selected.push(order);
        }
        let out: Vec<f64> = t
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &kp)| if kp { v } else { f64::NEG_INFINITY })
            .collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        let v = self.push(Tensor { shape, data: out }, Op::Keep { x, keep }, rg);
        Ok((v, selected))
    }

    /// Picks `(row, col)` entries of `x` viewed as `[rows, last_dim]`; returns a 1-d tensor.
    pub fn pick(&mut self, x: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(x);
        let (rows, n) = (t.rows(), t.last_dim());
        if entries.is_empty() {
            return Err(Error::invalid("pick", "no entries"));
        }
        let mut flat = Vec::with_capacity(entries.len());
        for &(r, c) in entries {
            if r >= rows || c >= n {
                return Err(Error::invalid(
                    "pick",
                    format!("({r}, {c}) outside [{rows}, {n}]"),
                ));
            }
            flat.push(r * n + c);
        }
        let out = flat.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![flat.len()], out)?,
            Op::Pick { x, flat },
            rg,
        ))
    }

    /// Index-add of the rows of a `[m, d]` tensor into a zero `[out_rows, d]` tensor.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], out_rows: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != rows.len() {
            return Err(Error::shape("scatter_rows", &s, &[rows.len()]));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= out_rows) {
            return Err(Error::invalid(
                "scatter_rows",
                format!("row {bad} >= {out_rows}"),
            ));
        }
        let d = s[1];
        let xv = self.value(x).data();
        let mut out = vec![0.0; out_rows * d];
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..d {
                out[r * d + j] += xv[i * d + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![out_rows, d], out)?,
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
                d,
            },
            rg,
        ))
    }

    /// Sum over the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let out: Vec<f64> = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        if let Some(l) = shape.last_mut() {
            *l = 1;
        }
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, Op::SumLast { x, n }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll { x }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Gradients add onto whatever earlier
    /// calls left behind; call [`Tape::zero_grad`] to start fresh.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut g: Vec<Option<Vec<f64>>> = Vec::new();
        g.resize_with(loss.0 + 1, || None);
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop(i, &gi, &mut g);
            match &mut self.grads[i] {
                Some(p) => p.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(gi),
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = g[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(a, &mut |da| {
                    for bt in 0..batch {
                        let boff = if shared_b { 0 } else { bt * k * n };
                        mm_grad_a(
                            &gout[bt * m * n..(bt + 1) * m * n],
                            &bv[boff..boff + k * n],
                            &mut da[bt * m * k..(bt + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                acc(b, &mut |db| {
                    for bt in 0..batch {
                        let boff = if shared_b { 0 } else { bt * k * n };
                        mm_grad_b(
                            &av[bt * m * k..(bt + 1) * m * k],
                            &gout[bt * m * n..(bt + 1) * m * n],
                            &mut db[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            &Op::Transpose { x, batch, r, c } => acc(x, &mut |dx| {
                for bt in 0..batch {
                    let off = bt * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            dx[off + i * c + j] += gout[off + j * r + i];
                        }
                    }
                }
            }),
            Op::Add { a, b, bc } => {
                acc(*a, &mut |da| {
                    for (i, gv) in gout.iter().enumerate() {
                        da[bc.idx(i).0] += gv;
                    }
                });
                acc(*b, &mut |db| {
                    for (i, gv) in gout.iter().enumerate() {
                        db[bc.idx(i).1] += gv;
                    }
                });
            }
            Op::Mul { a, b, bc } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |da| {
                    for (i, gv) in gout.iter().enumerate() {
                        let (ia, ib) = bc.idx(i);
                        da[ia] += gv * bv[ib];
                    }
                });
                acc(*b, &mut |db| {
                    for (i, gv) in gout.iter().enumerate() {
                        let (ia, ib) = bc.idx(i);
                        db[ib] += gv * av[ia];
                    }
                });
            }
            &Op::Scale { x, c } => acc(x, &mut |dx| {
                dx.iter_mut().zip(gout).for_each(|(d, gv)| *d += c * gv);
            }),
            Op::Concat {
                inputs,
                outer,
                blocks,
            } => {
                let width: usize = blocks.iter().sum();
                let mut off = 0;
                for (&v, &blk) in inputs.iter().zip(blocks) {
                    acc(v, &mut |dx| {
                        for o in 0..*outer {
                            let src = &gout[o * width + off..o * width + off + blk];
                            dx[o * blk..(o + 1) * blk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    });
                    off += blk;
                }
            }
            &Op::Slice {
                x,
                outer,
                src_block,
                offset,
                block,
            } => acc(x, &mut |dx| {
                for o in 0..outer {
                    let dst = &mut dx[o * src_block + offset..o * src_block + offset + block];
                    dst.iter_mut()
                        .zip(&gout[o * block..(o + 1) * block])
                        .for_each(|(d, s)| *d += s);
                }
            }),
            &Op::Reshape { x } => acc(x, &mut |dx| {
                dx.iter_mut().zip(gout).for_each(|(d, s)| *d += s);
            }),
            &Op::Softmax { x, n } => {
                let y = node.value.data();
                acc(x, &mut |dx| {
                    for ((yr, gr), dr) in y.chunks(n).zip(gout.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax { x, n } => {
                let y = node.value.data();
                acc(x, &mut |dx| {
                    for ((yr, gr), dr) in y.chunks(n).zip(gout.chunks(n)).zip(dx.chunks_mut(n)) {
                        let gs: f64 = gr.iter().sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += gv - yv.exp() * gs;
                        }
                    }
                });
            }
            &Op::Gelu { x } => {
                let xv = nodes[x.0].value.data();
                acc(x, &mut |dx| {
                    for ((d, &v), gv) in dx.iter_mut().zip(xv).zip(gout) {
                        *d += gv * gelu_grad(v);
                    }
                });
            }
            &Op::Softplus { x } => {
                let xv = nodes[x.0].value.data();
                acc(x, &mut |dx| {
                    for ((d, &v), gv) in dx.iter_mut().zip(xv).zip(gout) {
                        *d += gv * sigmoid(v);
                    }
                });
            }
            Op::LayerNorm {
                x,
                n,
                xhat,
                inv_std,
            } => {
                let n = *n;
                let nf = n as f64;
                acc(*x, &mut |dx| {
                    for (r, ((xr, gr), dr)) in xhat
                        .chunks(n)
                        .zip(gout.chunks(n))
                        .zip(dx.chunks_mut(n))
                        .enumerate()
                    {
                        let gs: f64 = gr.iter().sum();
                        let gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for ((d, xh), gv) in dr.iter_mut().zip(xr).zip(gr) {
                            *d += inv_std[r] / nf * (nf * gv - gs - xh * gx);
                        }
                    }
                });
            }
            Op::Embedding { table, indices, d } => {
                let d = *d;
                acc(*table, &mut |dt| {
                    for (p, &ix) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[ix * d + j] += gout[p * d + j];
                        }
                    }
                });
            }
            Op::Keep { x, keep } => acc(*x, &mut |dx| {
                for ((d, &k), gv) in dx.iter_mut().zip(keep).zip(gout) {
                    if k {
                        *d += gv;
                    }
                }
            }),
            Op::Pick { x, flat } => acc(*x, &mut |dx| {
                for (&ix, gv) in flat.iter().zip(gout) {
                    dx[ix] += gv;
                }
            }),
            Op::ScatterRows { x, rows, d } => {
                let d = *d;
                acc(*x, &mut |dx| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            dx[i * d + j] += gout[r * d + j];
                        }
                    }
                });
            }
            &Op::SumLast { x, n } => acc(x, &mut |dx| {
                for (dr, gv) in dx.chunks_mut(n).zip(gout) {
                    dr.iter_mut().for_each(|d| *d += gv);
                }
            }),
            &Op::SumAll { x } => acc(x, &mut |dx| dx.iter_mut().for_each(|d| *d += gout[0])),
            &Op::MeanAll { x } => {
                let c = gout[0] / nodes[x.0].value.numel() as f64;
                acc(x, &mut |dx| dx.iter_mut().for_each(|d| *d += c));
            }
        }
    }
}
