//! Recorded computation tape with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse and accumulates vector-Jacobian products into
//! the inputs that need them. Nodes built only from constants never receive
//! gradient buffers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use super::gemm::{gemm, MatRef};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gather/scatter plan for one sparse convolution: for each kernel tap, the
/// `(input_row, output_row)` pairs it connects.
#[derive(Debug, Clone)]
pub struct ConvMap {
    pub in_rows: usize,
    pub out_rows: usize,
    pub taps: Vec<Vec<(u32, u32)>>,
}

/// Row ranges of independent attention problems packed into one operand:
/// segment `b` covers query rows `q[b]..q[b+1]` and key rows `k[b]..k[b+1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    q: Vec<usize>,
    k: Vec<usize>,
}

impl Segments {
    pub fn single(lq: usize, lk: usize) -> Self {
        Self { q: vec![0, lq], k: vec![0, lk] }
    }

    /// Segments from per-sample query and key lengths.
    pub fn from_lengths(q_lens: &[usize], k_lens: &[usize]) -> Result<Self> {
        if q_lens.len() != k_lens.len() {
            return Err(shape_err!("{} query segments vs {} key segments", q_lens.len(), k_lens.len()));
        }
        let offs = |l: &[usize]| {
            std::iter::once(0)
                .chain(l.iter().scan(0, |a, &n| {
                    *a += n;
                    Some(*a)
                }))
                .collect()
        };
        Ok(Self { q: offs(q_lens), k: offs(k_lens) })
    }

    /// `n` segments of equal lengths.
    pub fn uniform(n: usize, lq: usize, lk: usize) -> Self {
        Self { q: (0..=n).map(|b| b * lq).collect(), k: (0..=n).map(|b| b * lk).collect() }
    }

    pub fn len(&self) -> usize {
        self.q.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (std::ops::Range<usize>, std::ops::Range<usize>)> + '_ {
        (0..self.len()).map(|b| (self.q[b]..self.q[b + 1], self.k[b]..self.k[b + 1]))
    }

    fn prob_len(&self) -> usize {
        self.iter().map(|(q, k)| q.len() * k.len()).sum()
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, r: Var },
    MulRow { x: Var, r: Var },
    Affine { x: Var, mul: f64 },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    Gather { x: Var, idx: Arc<[usize]> },
    GatherRows { x: Var, rows: Arc<[usize]> },
    SegMatMul { x: Var, w: Var, offs: Arc<[usize]>, k: usize, n: usize, trans: bool },
    LayerNorm { x: Var, gain: Option<Var>, shift: Option<Var>, xhat: Vec<f64>, rstd: Vec<f64> },
    Silu { x: Var },
    Gelu { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, segs: Arc<Segments>, probs: Vec<f64> },
    MeanRows { x: Var },
    Sum { x: Var },
    SqError { pred: Var, target: Vec<f64>, weight: Option<Arc<[f64]>> },
    SparseConv { x: Var, w: Var, b: Option<Var>, map: Arc<ConvMap> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single forward pass recorded for differentiation.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    frozen: BTreeSet<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), frozen: BTreeSet::new() }
    }

    /// Parameters whose names start with any of `prefixes` enter as constants.
    pub fn with_frozen(prefixes: impl IntoIterator<Item = String>) -> Self {
        Self { frozen: prefixes.into_iter().collect(), ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Loads a named parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let frozen = self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        self.nodes.push(Node { value: t.clone(), op: Op::Leaf, needs_grad: !frozen });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `x @ w + b` over the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.cols() != wv.shape()[0] {
            return Err(shape_err!("linear: input {:?} with weight {:?}", xv.shape(), wv.shape()));
        }
        let (rows, din, dout) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(shape_err!("linear: bias {:?} for width {dout}", bv.shape()));
            }
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(1.0, MatRef::new(xv.data(), 0, rows, din, din), MatRef::new(wv.data(), 0, din, dout, dout), beta, &mut out, 0, dout);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, &inputs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err!("matmul: {:?} @ {:?}", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = super::gemm::matmul(av.data(), bv.data(), m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b }, &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(av, bv, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    fn row_op(&mut self, x: Var, r: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (xv, rv) = (self.value(x), self.value(r));
        let c = xv.cols();
        if rv.len() != c {
            return Err(shape_err!("{what}: row {:?} against {:?}", rv.shape(), xv.shape()));
        }
        let rd = rv.data();
        let data = xv.data().iter().enumerate().map(|(i, &v)| f(v, rd[i % c])).collect();
        Tensor::new(xv.shape(), data)
    }

    /// Adds a length-`C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let t = self.row_op(x, r, "add_row", |a, b| a + b)?;
        Ok(self.push(t, Op::AddRow { x, r }, &[x, r]))
    }

    /// Multiplies every row of `x` elementwise by a length-`C` row.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let t = self.row_op(x, r, "mul_row", |a, b| a * b)?;
        Ok(self.push(t, Op::MulRow { x, r }, &[x, r]))
    }

    /// `mul * x + add`.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let t = self.value(x).map(|v| mul * v + add);
        self.push(t, Op::Affine { x, mul }, &[x])
    }

    pub fn scale(&mut self, x: Var, mul: f64) -> Var {
        self.affine(x, mul, 0.0)
    }

    /// Concatenates along the trailing axis; all parts share leading axes.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?);
        let rows = first.rows();
        let lead = first.shape()[..first.rank() - 1].to_vec();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows || v.shape()[..v.rank() - 1] != lead[..] {
                return Err(shape_err!("concat_cols: {:?} vs {:?}", v.shape(), first.shape()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Stacks `[R_i, C]` matrices along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?).cols();
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != c {
                return Err(shape_err!("concat_rows: {:?} with width {c}", v.shape()));
            }
            out.extend_from_slice(v.data());
        }
        let rows = out.len() / c.max(1);
        Ok(self.push(Tensor::new(&[rows, c], out)?, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c || len == 0 {
            return Err(shape_err!("slice_cols {start}+{len} of width {c}"));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::new(&shape, out)?, Op::SliceCols { x, start }, &[x]))
    }

    /// `out.flat[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(shape_err!("gather index {bad} out of {}", xv.len()));
        }
        let out: Vec<f64> = idx.iter().map(|&i| xv.data()[i]).collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Gather { x, idx }, &[x]))
    }

    /// Per-segment product with a per-segment matrix: rows `offs[b]..offs[b+1]`
    /// of `x: [R, k]` are multiplied by row `b` of `w: [B, k·n]`, read as a
    /// row-major `[k, n]` matrix, or as `[n, k]` transposed when `trans`.
    pub fn seg_matmul(&mut self, x: Var, w: Var, offs: Arc<[usize]>, n: usize, trans: bool) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 2 || wv.rank() != 2 {
            return Err(shape_err!("seg_matmul expects rank-2 operands"));
        }
        let (rows, k) = (xv.shape()[0], xv.shape()[1]);
        let b = wv.shape()[0];
        if wv.shape()[1] != k * n || offs.len() != b + 1 || offs[b] != rows || offs.windows(2).any(|p| p[0] > p[1]) {
            return Err(shape_err!("seg_matmul: x {:?}, w {:?}, {} offsets, n {n}", xv.shape(), wv.shape(), offs.len()));
        }
        let mut out = vec![0.0; rows * n];
        for s in 0..b {
            let (r0, r1) = (offs[s], offs[s + 1]);
            let wm = if trans { MatRef::new(wv.data(), s * k * n, n, k, k).t() } else { MatRef::new(wv.data(), s * k * n, k, n, n) };
            gemm(1.0, MatRef::new(xv.data(), r0 * k, r1 - r0, k, k), wm, 0.0, &mut out, r0 * n, n);
        }
        let t = Tensor::new(&[rows, n], out)?;
        Ok(self.push(t, Op::SegMatMul { x, w, offs, k, n, trans }, &[x, w]))
    }

    /// `out[r] = x[rows[r]]` for a `[R, C]` input; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: Arc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(shape_err!("gather_rows expects rank 2, got {:?}", xv.shape()));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err!("row {bad} out of {n}"));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows.iter() {
            out.extend_from_slice(&xv.data()[r * c..(r + 1) * c]);
        }
        let t = Tensor::new(&[rows.len(), c], out)?;
        Ok(self.push(t, Op::GatherRows { x, rows }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != n {
            return Err(shape_err!("reshape {:?} to {:?}", self.shape(x), shape));
        }
        let idx: Arc<[usize]> = (0..n).collect();
        self.gather(x, idx, shape)
    }

    /// Repeats a single row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let c = self.value(x).len();
        let idx: Arc<[usize]> = (0..n * c).map(|i| i % c).collect();
        self.gather(x, idx, &[n, c])
    }

    /// Row-wise layer normalization with optional elementwise gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, shift: Option<Var>, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        for p in [gain, shift].into_iter().flatten() {
            if self.value(p).len() != c {
                return Err(shape_err!("layer_norm affine {:?} for width {c}", self.shape(p)));
            }
        }
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for (o, &v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let gd = self.value(g).data();
            out.iter_mut().enumerate().for_each(|(i, v)| *v *= gd[i % c]);
        }
        if let Some(s) = shift {
            let sd = self.value(s).data();
            out.iter_mut().enumerate().for_each(|(i, v)| *v += sd[i % c]);
        }
        let t = Tensor::new(xv.shape(), out)?;
        let inputs: Vec<Var> = [Some(x), gain, shift].into_iter().flatten().collect();
        Ok(self.push(t, Op::LayerNorm { x, gain, shift, xhat, rstd }, &inputs))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu { x }, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        self.push(t, Op::Gelu { x }, &[x])
    }

    /// Scaled dot-product attention split over `heads`, without projections.
    /// `q: [Lq, D]`, `k, v: [Lk, D]` → `[Lq, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (lq, lk) = (self.value(q).shape()[0], self.value(k).shape()[0]);
        self.attention_segments(q, k, v, heads, Arc::new(Segments::single(lq, lk)))
    }

    /// Block-diagonal attention: query segment `b` attends only to key
    /// segment `b`. Rows of each segment are contiguous.
    pub fn attention_segments(&mut self, q: Var, k: Var, v: Var, heads: usize, segs: Arc<Segments>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2 {
            return Err(shape_err!("attention expects rank-2 operands"));
        }
        let (lq, d) = (qv.shape()[0], qv.shape()[1]);
        let lk = kv.shape()[0];
        if kv.shape()[1] != d || vv.shape() != kv.shape() {
            return Err(shape_err!("attention: q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()));
        }
        if segs.q.last() != Some(&lq) || segs.k.last() != Some(&lk) || segs.q.len() != segs.k.len() {
            return Err(shape_err!("attention segments do not cover {lq} queries and {lk} keys"));
        }
        if segs.iter().any(|(qs, ks)| !qs.is_empty() && ks.is_empty()) {
            return Err(Error::Empty("attention over zero keys".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * segs.prob_len()];
        let mut out = vec![0.0; lq * d];
        let mut off = 0;
        for (qs, ks) in segs.iter() {
            let (nq, nk) = (qs.len(), ks.len());
            if nq == 0 {
                continue;
            }
            for h in 0..heads {
                let (qo, ko) = (qs.start * d + h * dh, ks.start * d + h * dh);
                gemm(scale, MatRef::new(qv.data(), qo, nq, dh, d), MatRef::new(kv.data(), ko, nk, dh, d).t(), 0.0, &mut probs, off, nk);
                for row in probs[off..off + nq * nk].chunks_exact_mut(nk) {
                    softmax_in_place(row);
                }
                gemm(1.0, MatRef::new(&probs, off, nq, nk, nk), MatRef::new(vv.data(), ko, nk, dh, d), 0.0, &mut out, qo, d);
                off += nq * nk;
            }
        }
        let t = Tensor::new(&[lq, d], out)?;
        Ok(self.push(t, Op::Attention { q, k, v, heads, segs, probs }, &[q, k, v]))
    }

    /// Mean over the leading (token) axis of a `[L, C]` tensor → `[1, C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if rows == 0 || xv.is_empty() {
            return Err(Error::Empty("mean over zero rows".into()));
        }
        let mut out = vec![0.0; c];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&xv.data()[r * c..(r + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        Ok(self.push(Tensor::new(&[1, c], out)?, Op::MeanRows { x }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `mean_i (w_i · (pred_i − target_i))²`; `w` defaults to one.
    pub fn sq_error(&mut self, pred: Var, target: &Tensor, weight: Option<Arc<[f64]>>) -> Result<Var> {
        let pv = self.value(pred);
        check_same(pv, target, "sq_error")?;
        if let Some(w) = &weight {
            if w.len() != pv.len() {
                return Err(shape_err!("sq_error weight of {} for {} values", w.len(), pv.len()));
            }
        }
        let n = pv.len().max(1) as f64;
        let s: f64 = match &weight {
            Some(w) => pv.data().iter().zip(target.data()).zip(w.iter()).map(|((p, t), w)| (w * (p - t)).powi(2)).sum(),
            None => pv.data().iter().zip(target.data()).map(|(p, t)| (p - t).powi(2)).sum(),
        };
        let op = Op::SqError { pred, target: target.data().to_vec(), weight };
        Ok(self.push(Tensor::scalar(s / n), op, &[pred]))
    }

    /// Gather-scatter convolution: `out[o] = b + Σ_taps Σ_(i,o) x[i] @ w[tap]`.
    pub fn sparse_conv(&mut self, x: Var, w: Var, b: Option<Var>, map: Arc<ConvMap>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 3 || wv.shape()[0] != map.taps.len() || xv.rank() != 2 || xv.shape()[1] != wv.shape()[1] || xv.shape()[0] != map.in_rows {
            return Err(shape_err!("sparse_conv: input {:?}, kernel {:?}, {} taps", xv.shape(), wv.shape(), map.taps.len()));
        }
        let (cin, cout) = (wv.shape()[1], wv.shape()[2]);
        let mut out = vec![0.0; map.out_rows * cout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != cout {
                return Err(shape_err!("sparse_conv bias {} for {cout} channels", bd.len()));
            }
            for r in 0..map.out_rows {
                out[r * cout..(r + 1) * cout].copy_from_slice(bd);
            }
        }
        let mut gathered = Vec::new();
        let mut prod = Vec::new();
        for (tap, pairs) in map.taps.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let p = pairs.len();
            gathered.clear();
            for &(i, _) in pairs {
                gathered.extend_from_slice(&xv.data()[i as usize * cin..(i as usize + 1) * cin]);
            }
            if prod.len() < p * cout {
                prod.resize(p * cout, 0.0);
            }
            gemm(1.0, MatRef::new(&gathered, 0, p, cin, cin), MatRef::new(wv.data(), tap * cin * cout, cin, cout, cout), 0.0, &mut prod, 0, cout);
            for (k, &(_, o)) in pairs.iter().enumerate() {
                let dst = &mut out[o as usize * cout..(o as usize + 1) * cout];
                for (d, s) in dst.iter_mut().zip(&prod[k * cout..(k + 1) * cout]) {
                    *d += s;
                }
            }
        }
        let t = Tensor::new(&[map.out_rows, cout], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::SparseConv { x, w, b, map }, &inputs))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", lv.shape()));
        }
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (rows, din, dout) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                if ng(*x) {
                    let gx = acc(grads, *x, rows * din);
                    gemm(1.0, MatRef::new(g, 0, rows, dout, dout), MatRef::new(wv.data(), 0, din, dout, dout).t(), 1.0, gx, 0, din);
                }
                if ng(*w) {
                    let gw = acc(grads, *w, din * dout);
                    gemm(1.0, MatRef::new(xv.data(), 0, rows, din, din).t(), MatRef::new(g, 0, rows, dout, dout), 1.0, gw, 0, dout);
                }
                if let Some(b) = b.filter(|b| ng(*b)) {
                    let gb = acc(grads, b, dout);
                    for r in 0..rows {
                        for (o, v) in gb.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if ng(*a) {
                    let ga = acc(grads, *a, m * k);
                    gemm(1.0, MatRef::new(g, 0, m, n, n), MatRef::new(bv.data(), 0, k, n, n).t(), 1.0, ga, 0, k);
                }
                if ng(*b) {
                    let gb = acc(grads, *b, k * n);
                    gemm(1.0, MatRef::new(av.data(), 0, m, k, k).t(), MatRef::new(g, 0, m, n, n), 1.0, gb, 0, n);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if ng(*a) {
                    axpy(acc(grads, *a, g.len()), 1.0, g);
                }
                if ng(*b) {
                    axpy(acc(grads, *b, g.len()), sign, g);
                }
            }
            Op::Mul { a, b } => {
                if ng(*a) {
                    let bd = val(*b).data();
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).zip(bd).for_each(|((o, g), y)| *o += g * y);
                }
                if ng(*b) {
                    let ad = val(*a).data();
                    let gb = acc(grads, *b, g.len());
                    gb.iter_mut().zip(g).zip(ad).for_each(|((o, g), x)| *o += g * x);
                }
            }
            Op::AddRow { x, r } => {
                let c = val(*r).len();
                if ng(*x) {
                    axpy(acc(grads, *x, g.len()), 1.0, g);
                }
                if ng(*r) {
                    let gr = acc(grads, *r, c);
                    for chunk in g.chunks_exact(c) {
                        axpy(gr, 1.0, chunk);
                    }
                }
            }
            Op::MulRow { x, r } => {
                let (xd, rd) = (val(*x).data(), val(*r).data());
                let c = rd.len();
                if ng(*x) {
                    let gx = acc(grads, *x, g.len());
                    gx.iter_mut().enumerate().for_each(|(i, o)| *o += g[i] * rd[i % c]);
                }
                if ng(*r) {
                    let gr = acc(grads, *r, c);
                    for (i, (gv, xv)) in g.iter().zip(xd).enumerate() {
                        gr[i % c] += gv * xv;
                    }
                }
            }
            Op::Affine { x, mul } => {
                if ng(*x) {
                    axpy(acc(grads, *x, g.len()), *mul, g);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if ng(p) {
                        axpy(acc(grads, p, n), 1.0, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if ng(p) {
                        let gp = acc(grads, p, rows * w);
                        for r in 0..rows {
                            axpy(&mut gp[r * w..(r + 1) * w], 1.0, &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                if ng(*x) {
                    let xv = val(*x);
                    let (rows, c, len) = (xv.rows(), xv.cols(), node.value.cols());
                    let gx = acc(grads, *x, xv.len());
                    for r in 0..rows {
                        axpy(&mut gx[r * c + start..r * c + start + len], 1.0, &g[r * len..(r + 1) * len]);
                    }
                }
            }
            Op::Gather { x, idx } => {
                if ng(*x) {
                    let gx = acc(grads, *x, val(*x).len());
                    for (&i, &gv) in idx.iter().zip(g) {
                        gx[i] += gv;
                    }
                }
            }
            Op::SegMatMul { x, w, offs, k, n, trans } => {
                let (k, n, trans) = (*k, *n, *trans);
                let (xv, wv) = (val(*x), val(*w));
                for s in 0..offs.len() - 1 {
                    let (r0, r1) = (offs[s], offs[s + 1]);
                    let gs = MatRef::new(g, r0 * n, r1 - r0, n, n);
                    if ng(*x) {
                        let wm = if trans { MatRef::new(wv.data(), s * k * n, n, k, k).t() } else { MatRef::new(wv.data(), s * k * n, k, n, n) };
                        let gx = acc(grads, *x, xv.len());
                        gemm(1.0, gs, wm.t(), 1.0, gx, r0 * k, k);
                    }
                    if ng(*w) {
                        let xs = MatRef::new(xv.data(), r0 * k, r1 - r0, k, k);
                        let gw = acc(grads, *w, wv.len());
                        if trans {
                            gemm(1.0, gs.t(), xs, 1.0, gw, s * k * n, k);
                        } else {
                            gemm(1.0, xs.t(), gs, 1.0, gw, s * k * n, n);
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if ng(*x) {
                    let c = val(*x).cols();
                    let gx = acc(grads, *x, val(*x).len());
                    for (&r, gr) in rows.iter().zip(g.chunks_exact(c)) {
                        axpy(&mut gx[r * c..(r + 1) * c], 1.0, gr);
                    }
                }
            }
            Op::LayerNorm { x, gain, shift, xhat, rstd } => {
                let c = node.value.cols();
                if let Some(s) = shift.filter(|s| ng(*s)) {
                    let gs = acc(grads, s, c);
                    for chunk in g.chunks_exact(c) {
                        axpy(gs, 1.0, chunk);
                    }
                }
                if let Some(gn) = gain.filter(|gn| ng(*gn)) {
                    let gg = acc(grads, gn, c);
                    for (i, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                        gg[i % c] += gv * xh;
                    }
                }
                if ng(*x) {
                    let gain_d = gain.map(|gn| val(gn).data());
                    let gx = acc(grads, *x, g.len());
                    let mut dxhat = vec![0.0; c];
                    for (r, &s) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = gr[j] * gain_d.map_or(1.0, |gd| gd[j]);
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += s * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::Silu { x } => {
                if ng(*x) {
                    let xd = val(*x).data();
                    let gx = acc(grads, *x, g.len());
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xd) {
                        let s = sigmoid(v);
                        *o += gv * s * (1.0 + v * (1.0 - s));
                    }
                }
            }
            Op::Gelu { x } => {
                if ng(*x) {
                    let xd = val(*x).data();
                    let gx = acc(grads, *x, g.len());
                    for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gv * gelu_parts(v).1;
                    }
                }
            }
            Op::Attention { q, k, v, heads, segs, probs } => {
                self.attention_backward(*q, *k, *v, *heads, segs, probs, g, grads);
            }
            Op::MeanRows { x } => {
                if ng(*x) {
                    let xv = val(*x);
                    let (rows, c) = (xv.rows(), xv.cols());
                    let gx = acc(grads, *x, xv.len());
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        axpy(&mut gx[r * c..(r + 1) * c], inv, g);
                    }
                }
            }
            Op::Sum { x } => {
                if ng(*x) {
                    let gx = acc(grads, *x, val(*x).len());
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::SqError { pred, target, weight } => {
                if ng(*pred) {
                    let pd = val(*pred).data();
                    let n = pd.len().max(1) as f64;
                    let gp = acc(grads, *pred, pd.len());
                    let k = 2.0 * g[0] / n;
                    match weight {
                        Some(w) => gp.iter_mut().zip(pd).zip(target).zip(w.iter()).for_each(|(((o, p), t), w)| *o += k * w * w * (p - t)),
                        None => gp.iter_mut().zip(pd).zip(target).for_each(|((o, p), t)| *o += k * (p - t)),
                    }
                }
            }
            Op::SparseConv { x, w, b, map } => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, cout) = (wv.shape()[1], wv.shape()[2]);
                if let Some(b) = b.filter(|b| ng(*b)) {
                    let gb = acc(grads, b, cout);
                    for chunk in g.chunks_exact(cout) {
                        axpy(gb, 1.0, chunk);
                    }
                }
                let mut gathered = Vec::new();
                let mut gout = Vec::new();
                let mut gin = Vec::new();
                for (tap, pairs) in map.taps.iter().enumerate() {
                    if pairs.is_empty() {
                        continue;
                    }
                    let p = pairs.len();
                    gout.clear();
                    for &(_, o) in pairs {
                        gout.extend_from_slice(&g[o as usize * cout..(o as usize + 1) * cout]);
                    }
                    if ng(*w) {
                        gathered.clear();
                        for &(i, _) in pairs {
                            gathered.extend_from_slice(&xv.data()[i as usize * cin..(i as usize + 1) * cin]);
                        }
                        let gw = acc(grads, *w, wv.len());
                        gemm(1.0, MatRef::new(&gathered, 0, p, cin, cin).t(), MatRef::new(&gout, 0, p, cout, cout), 1.0, gw, tap * cin * cout, cout);
                    }
                    if ng(*x) {
                        if gin.len() < p * cin {
                            gin.resize(p * cin, 0.0);
                        }
                        gemm(1.0, MatRef::new(&gout, 0, p, cout, cout), MatRef::new(wv.data(), tap * cin * cout, cin, cout, cout).t(), 0.0, &mut gin, 0, cin);
                        let gx = acc(grads, *x, xv.len());
                        for (k, &(i, _)) in pairs.iter().enumerate() {
                            axpy(&mut gx[i as usize * cin..(i as usize + 1) * cin], 1.0, &gin[k * cin..(k + 1) * cin]);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, q: Var, k: Var, v: Var, heads: usize, segs: &Segments, probs: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = (qv.shape()[0], qv.shape()[1]);
        let lk = kv.shape()[0];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (nq, nk, nv) = (self.needs_grad(q), self.needs_grad(k), self.needs_grad(v));
        let mut dq = vec![0.0; if nq { lq * d } else { 0 }];
        let mut dk = vec![0.0; if nk { lk * d } else { 0 }];
        let mut dv = vec![0.0; if nv { lk * d } else { 0 }];
        let mut ds = Vec::new();
        let mut off = 0;
        for (qs, ks) in segs.iter() {
            let (sq, sk) = (qs.len(), ks.len());
            if sq == 0 {
                continue;
            }
            ds.resize(sq * sk, 0.0);
            for h in 0..heads {
                let (qo, ko) = (qs.start * d + h * dh, ks.start * d + h * dh);
                let p = MatRef::new(probs, off, sq, sk, sk);
                let go = MatRef::new(g, qo, sq, dh, d);
                if nv {
                    gemm(1.0, p.t(), go, 1.0, &mut dv, ko, d);
                }
                if nq || nk {
                    gemm(1.0, go, MatRef::new(vv.data(), ko, sk, dh, d).t(), 0.0, &mut ds, 0, sk);
                    for (drow, prow) in ds.chunks_exact_mut(sk).zip(probs[off..off + sq * sk].chunks_exact(sk)) {
                        let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        drow.iter_mut().zip(prow).for_each(|(dv, &pv)| *dv = pv * (*dv - dot));
                    }
                    if nq {
                        gemm(scale, MatRef::new(&ds, 0, sq, sk, sk), MatRef::new(kv.data(), ko, sk, dh, d), 1.0, &mut dq, qo, d);
                    }
                    if nk {
                        gemm(scale, MatRef::new(&ds, 0, sq, sk, sk).t(), MatRef::new(qv.data(), qo, sq, dh, d), 1.0, &mut dk, ko, d);
                    }
                }
                off += sq * sk;
            }
        }
        for (var, buf, on) in [(q, dq, nq), (k, dk, nk), (v, dv, nv)] {
            if on {
                axpy(acc(grads, var, buf.len()), 1.0, &buf);
            }
        }
    }

    /// Gradients of every non-frozen parameter loaded through [`Graph::param`].
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(name, &v)| {
                let shape = self.shape(v).to_vec();
                let data = grads.get(v).map_or_else(|| vec![0.0; shape.iter().product()], <[f64]>::to_vec);
                (name.clone(), Tensor::new(&shape, data).expect("gradient shape"))
            })
            .collect()
    }

    /// Names of parameters that entered this graph (frozen ones included).
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(gelu(x), gelu'(x))` for the tanh approximation.
fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044_715 * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    (y, 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = exp_nonpos(*v - m);
        s += *v;
    }
    let inv = 1.0 / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// `exp(x)` for `x <= 0`, branch-free so softmax rows vectorize.
/// Range reduction `x = n ln2 + r`, `|r| <= ln2/2`, then a degree-12 Taylor
/// polynomial; relative error stays within a few ulp.
#[inline]
fn exp_nonpos(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding and removing 1.5·2⁵² rounds to the nearest integer.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let x = x.max(-708.0);
    let n = (x * LOG2E + SHIFTER) - SHIFTER;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    for c in
        [1.0 / 39_916_800.0, 1.0 / 3_628_800.0, 1.0 / 362_880.0, 1.0 / 40_320.0, 1.0 / 5_040.0, 1.0 / 720.0, 1.0 / 120.0, 1.0 / 24.0, 1.0 / 6.0, 0.5, 1.0, 1.0]
    {
        p = p * r + c;
    }
    let bits = ((n as i64 + 1023) as u64) << 52;
    p * f64::from_bits(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_std() {
        let mut worst: f64 = 0.0;
        for i in 0..200_000 {
            let x = -(i as f64) * 0.0035;
            let (a, b) = (exp_nonpos(x), x.exp());
            if b > 1e-300 {
                worst = worst.max(((a - b) / b).abs());
            }
        }
        assert!(worst < 1e-15, "worst relative error {worst}");
        assert_eq!(exp_nonpos(0.0), 1.0);
    }

    #[test]
    fn linear_identity_and_formula() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let w = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);

        let x = g.constant(Tensor::new(&[1], vec![2.0]).unwrap());
        let w = g.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
        let b = g.constant(Tensor::new(&[1], vec![1.0]).unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
    }

    #[test]
    fn linear_rejects_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.linear(x, w, None), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 3], vec![2.0, 2.0, 2.0]).unwrap());
        let y = g.layer_norm(x, None, None, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let x = g.constant(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let y = g.layer_norm(x, None, None, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0]);

        let x = g.constant(Tensor::new(&[2, 2], vec![0.3, -4.0, 7.0, 1.0]).unwrap());
        let gain = g.constant(Tensor::zeros(&[2]));
        let shift = g.constant(Tensor::full(&[2], 2.5));
        let y = g.layer_norm(x, Some(gain), Some(shift), 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 2.5));
    }

    #[test]
    fn attention_single_key_and_ties() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(&[2, 2], vec![0.3, 1.0, -2.0, 0.5]).unwrap());
        let k = g.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        let v = g.constant(Tensor::new(&[1, 2], vec![4.0, -3.0]).unwrap());
        let o = g.attention(q, k, v, 1).unwrap();
        assert_eq!(g.value(o).data(), &[4.0, -3.0, 4.0, -3.0]);

        let k = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let v = g.constant(Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap());
        let o = g.attention(q, k, v, 2).unwrap();
        assert_eq!(g.value(o).data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn attention_softmax_blend() {
        // logits q·k/sqrt(2): q = [1, 1], keys [1,0] and [0,3] → 1/√2, 3/√2.
        let mut g = Graph::new();
        let q = g.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        let k = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap());
        let v = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let o = g.attention(q, k, v, 1).unwrap();
        let (l1, l2) = (1.0 / 2f64.sqrt(), 3.0 / 2f64.sqrt());
        let p1 = l1.exp() / (l1.exp() + l2.exp());
        let out = g.value(o).data();
        assert!((out[0] - p1).abs() < 1e-15 && (out[1] - (1.0 - p1)).abs() < 1e-15);
    }

    #[test]
    fn attention_head_divisibility() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.attention(q, q, q, 2), Err(Error::Config(_))));
    }

    #[test]
    fn segmented_attention_matches_separate_calls() {
        let mut g = Graph::new();
        let mk = |g: &mut Graph, r: usize, seed: usize| g.constant(Tensor::from_fn(&[r, 4], |i| (((i + seed) * 37) % 11) as f64 * 0.1 - 0.5));
        let (q, k, v) = (mk(&mut g, 5, 1), mk(&mut g, 7, 2), mk(&mut g, 7, 3));
        let segs = Arc::new(Segments::from_lengths(&[2, 0, 3], &[3, 1, 3]).unwrap());
        let y = g.attention_segments(q, k, v, 2, segs).unwrap();
        let rows = |g: &mut Graph, x: Var, a: usize, b: usize| {
            let c = g.value(x).cols();
            let idx: Arc<[usize]> = (a * c..b * c).collect();
            g.gather(x, idx, &[b - a, c]).unwrap()
        };
        let (q0, k0, v0) = (rows(&mut g, q, 0, 2), rows(&mut g, k, 0, 3), rows(&mut g, v, 0, 3));
        let (q2, k2, v2) = (rows(&mut g, q, 2, 5), rows(&mut g, k, 4, 7), rows(&mut g, v, 4, 7));
        let y0 = g.attention(q0, k0, v0, 2).unwrap();
        let y2 = g.attention(q2, k2, v2, 2).unwrap();
        let want: Vec<f64> = g.value(y0).data().iter().chain(g.value(y2).data()).copied().collect();
        assert_eq!(g.value(y).data(), &want[..]);
        let bad = Arc::new(Segments::from_lengths(&[5], &[0]).unwrap());
        let k0 = g.constant(Tensor::zeros(&[0, 4]));
        assert!(g.attention_segments(q, k0, k0, 2, bad).is_err());
    }

    #[test]
    fn mean_rows_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let m = g.mean_rows(x).unwrap();
        assert_eq!(g.value(m).data(), &[2.0]);
        let x = g.constant(Tensor::new(&[2, 2], vec![1.5, -2.0, -1.5, 2.0]).unwrap());
        let m = g.mean_rows(x).unwrap();
        assert_eq!(g.value(m).data(), &[0.0, 0.0]);
        let x = g.constant(Tensor::new(&[0, 2], vec![]).unwrap());
        assert!(matches!(g.mean_rows(x), Err(Error::Empty(_))));
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(t, t).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(t).unwrap(), &[6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(5.0));
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &[2.0]);
    }
}
