use std::collections::BTreeMap;

use super::{DiffError, ParamStore, Tensor};
use crate::rng::Rng;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Tanh,
    Relu,
    Sigmoid,
    Log,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Embedding { table: Var, ids: Vec<usize> },
    HConcat(Vec<Var>),
    VStack(Vec<Var>),
    Conv1d { x: Var, w: Var, b: Var, kernel: usize, bounds: Vec<(usize, usize)> },
    SegmentMaxPool { x: Var, argmax: Vec<Option<usize>> },
    Affine { x: Var, w: Var, b: Option<Var> },
    Unary(Unary, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Grl { x: Var, lambda: f64 },
    Dropout { x: Var, mask: Vec<f64> },
    Clamp { x: Var, lo: f64, hi: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Embedding { .. } => "embedding",
            Op::HConcat(_) => "hconcat",
            Op::VStack(_) => "vstack",
            Op::Conv1d { .. } => "conv1d",
            Op::SegmentMaxPool { .. } => "segment_max_pool",
            Op::Affine { .. } => "affine",
            Op::Unary(u, _) => match u {
                Unary::Tanh => "tanh",
                Unary::Relu => "relu",
                Unary::Sigmoid => "sigmoid",
                Unary::Log => "log",
                Unary::Exp => "exp",
            },
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Binary(b, _, _) => match b {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
            Op::Reshape(_) => "reshape",
            Op::Grl { .. } => "grl",
            Op::Dropout { .. } => "dropout",
            Op::Clamp { .. } => "clamp",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of a forward computation.
///
/// Every op evaluates eagerly, checks its output for NaN/Inf and appends a
/// node; [`Tape::backward`] then walks the nodes once in reverse. Parameters
/// are pulled from a [`ParamStore`] by name and their gradients are added
/// back into the store's gradient slots.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    frozen: Vec<String>,
    dropout: Option<Rng>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    if shape.len() == 1 {
        (1, shape[0])
    } else {
        (shape[0], shape[1..].iter().product())
    }
}

impl Tape {
    /// A tape with dropout disabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen: Vec::new(),
            dropout: None,
        }
    }

    /// A tape whose dropout ops draw masks from `rng`.
    pub fn with_dropout(rng: Rng) -> Self {
        Self {
            dropout: Some(rng),
            ..Self::new()
        }
    }

    /// Parameters under `prefix` are read as constants: no gradient flows to them.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen.push(format!("{prefix}."));
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, DiffError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.push(value, Op::Input, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.push(value, Op::Input, true)
    }

    /// Constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Result<Var, DiffError> {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, DiffError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let frozen = self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(value, Op::Param, !frozen)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(DiffError::Shape("embedding table must be 2-D".into()));
        }
        if ids.is_empty() {
            return Err(DiffError::Shape("embedding lookup of zero ids".into()));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(DiffError::IndexOutOfRange {
                    op: "embedding",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        self.push(value, Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    /// Concatenates along the last axis; all inputs share a row count.
    pub fn hconcat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts.first().ok_or_else(|| DiffError::Shape("hconcat of nothing".into()))?;
        let one_d = parts.iter().all(|&p| self.shape(p).len() == 1);
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(DiffError::Shape("hconcat row mismatch".into()));
            }
            cols += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if one_d { vec![cols] } else { vec![rows, cols] };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, out)?, Op::HConcat(parts.to_vec()), rg)
    }

    /// Stacks inputs along rows; 1-D inputs count as single rows.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = *parts.first().ok_or_else(|| DiffError::Shape("vstack of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(DiffError::Shape("vstack column mismatch".into()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![rows, cols], out)?, Op::VStack(parts.to_vec()), rg)
    }

    /// Same-padded 1-D convolution over the rows of `x` (`[N, D]`).
    ///
    /// `w` is `[C, kernel * D]` with window offset major, `b` is `[C]`.
    /// `bounds` splits the rows into independent sequences; padding is
    /// applied at every sequence edge, so windows never cross sequences.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        bounds: &[(usize, usize)],
    ) -> Result<Var, DiffError> {
        let (n, d) = as_matrix(self.shape(x));
        let ws = self.shape(w);
        if kernel % 2 == 0 || ws.len() != 2 || ws[1] != kernel * d {
            return Err(DiffError::Shape(format!(
                "conv1d weight {ws:?} for kernel {kernel} and width {d}"
            )));
        }
        let c = ws[0];
        if self.value(b).len() != c {
            return Err(DiffError::Shape("conv1d bias width".into()));
        }
        check_bounds(bounds, n)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * c];
        let mut window = vec![0.0; kernel * d];
        for &(s, e) in bounds {
            for i in s..e {
                fill_window(xv, d, kernel, s, e, i, &mut window);
                let row = &mut out[i * c..(i + 1) * c];
                for (ch, o) in row.iter_mut().enumerate() {
                    let wr = &wv[ch * kernel * d..(ch + 1) * kernel * d];
                    *o = bv[ch] + dot(wr, &window);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            Tensor::new(vec![n, c], out)?,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                bounds: bounds.to_vec(),
            },
            rg,
        )
    }

    /// Max over row ranges of `x` (`[N, C]`), per column.
    ///
    /// `groups[r]` lists the segments for output row `r`; every group must
    /// have the same number of segments `m`, and the output is
    /// `[groups.len(), m * C]` with segment-major columns. An empty segment
    /// pools to 0.
    pub fn segment_max_pool(
        &mut self,
        x: Var,
        groups: &[Vec<(usize, usize)>],
    ) -> Result<Var, DiffError> {
        let (n, c) = as_matrix(self.shape(x));
        let m = groups.first().map(Vec::len).unwrap_or(0);
        if m == 0 || groups.iter().any(|g| g.len() != m) {
            return Err(DiffError::Shape("segment groups must be uniform and nonempty".into()));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; groups.len() * m * c];
        let mut argmax = vec![None; groups.len() * m * c];
        for (r, segs) in groups.iter().enumerate() {
            for (si, &(s, e)) in segs.iter().enumerate() {
                if s > e || e > n {
                    return Err(DiffError::Shape(format!("segment ({s},{e}) outside {n} rows")));
                }
                for ch in 0..c {
                    let o = r * m * c + si * c + ch;
                    let mut best: Option<(usize, f64)> = None;
                    for i in s..e {
                        let v = xv[i * c + ch];
                        if best.is_none_or(|(_, bv)| v > bv) {
                            best = Some((i, v));
                        }
                    }
                    if let Some((i, v)) = best {
                        out[o] = v;
                        argmax[o] = Some(i);
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![groups.len(), m * c], out)?,
            Op::SegmentMaxPool { x, argmax },
            rg,
        )
    }

    /// `x · w + b` with `x` `[n, i]` (or `[i]`), `w` `[i, o]`, `b` `[o]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, DiffError> {
        let xs = self.shape(x).to_vec();
        let (n, i) = as_matrix(&xs);
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != i {
            return Err(DiffError::Shape(format!("affine: x {xs:?} w {ws:?}")));
        }
        let o = ws[1];
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(DiffError::Shape("affine bias width".into()));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let orow = &mut out[r * o..(r + 1) * o];
            if let Some(b) = b {
                orow.copy_from_slice(self.nodes[b.0].value.data());
            }
            for a in 0..i {
                let xa = xv[r * i + a];
                if xa == 0.0 {
                    continue;
                }
                let wr = &wv[a * o..(a + 1) * o];
                for (ov, wv) in orow.iter_mut().zip(wr) {
                    *ov += xa * wv;
                }
            }
        }
        let shape = if xs.len() == 1 { vec![o] } else { vec![n, o] };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(shape, out)?, Op::Affine { x, w, b }, rg)
    }

    fn unary(&mut self, u: Unary, x: Var) -> Result<Var, DiffError> {
        let f = |v: f64| match u {
            Unary::Tanh => v.tanh(),
            Unary::Relu => v.max(0.0),
            Unary::Sigmoid => sigmoid(v),
            Unary::Log => v.ln(),
            Unary::Exp => v.exp(),
        };
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, Op::Unary(u, x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(Unary::Exp, x)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let (n, k) = as_matrix(t.shape());
        let mut out = t.data().to_vec();
        for r in 0..n {
            softmax_in_place(&mut out[r * k..(r + 1) * k]);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Row-wise log-softmax (numerically stable softmax followed by log).
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let (n, k) = as_matrix(t.shape());
        let mut out = t.data().to_vec();
        for r in 0..n {
            let row = &mut out[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() || tb.len() == 1 {
            ta.shape().to_vec()
        } else if ta.len() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(DiffError::Shape(format!(
                "elementwise {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let at = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
        let bt = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
        let out: Vec<f64> = (0..n)
            .map(|i| match op {
                Binary::Add => at(i) + bt(i),
                Binary::Sub => at(i) - bt(i),
                Binary::Mul => at(i) * bt(i),
                Binary::Div => at(i) / bt(i),
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::Binary(op, a, b), rg)
    }

    /// Elementwise sum; a one-element operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var, DiffError> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Column means of a `[n, c]` matrix, as a `[c]` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let (n, c) = as_matrix(t.shape());
        let mut out = vec![0.0; c];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let rg = self.rg(x);
        self.push(Tensor::vector(out), Op::MeanRows(x), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(x);
        let (n, c) = as_matrix(t.shape());
        if idx.is_empty() {
            return Err(DiffError::Shape("gather of zero rows".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(DiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: n,
                });
            }
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        )
    }

    /// `out[r] = x[r, idx[r]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(x);
        let (n, k) = as_matrix(t.shape());
        if idx.len() != n {
            return Err(DiffError::Shape(format!("pick: {} indices for {n} rows", idx.len())));
        }
        let mut out = Vec::with_capacity(n);
        for (r, &i) in idx.iter().enumerate() {
            if i >= k {
                return Err(DiffError::IndexOutOfRange {
                    op: "pick",
                    index: i,
                    bound: k,
                });
            }
            out.push(t.data()[r * k + i]);
        }
        let rg = self.rg(x);
        self.push(Tensor::vector(out), Op::Pick { x, idx: idx.to_vec() }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Gradient reversal: identity forward, `-lambda * g` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var, DiffError> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(DiffError::Shape(format!("grl coefficient {lambda}")));
        }
        let value = self.value(x).clone();
        let rg = self.rg(x);
        self.push(value, Op::Grl { x, lambda }, rg)
    }

    /// Inverted dropout. A no-op when the tape was built without a dropout
    /// stream or `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var, DiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DiffError::Shape(format!("dropout rate {rate}")));
        }
        let Some(rng) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x.0].value.len();
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect();
        let t = &self.nodes[x.0].value;
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(value, Op::Dropout { x, mask }, rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    /// Reverse sweep from `out` seeded with `seed`. Parameter gradients are
    /// added into `store`; all node gradients are returned.
    pub fn backward(
        &self,
        out: Var,
        seed: &Tensor,
        store: &mut ParamStore,
    ) -> Result<Gradients, DiffError> {
        if out.0 >= self.nodes.len() {
            return Err(DiffError::BackwardBeforeForward);
        }
        if seed.shape() != self.value(out).shape() {
            return Err(DiffError::Shape(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed.clone());
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        for (name, &v) in &self.params {
            if let Some(Some(g)) = grads.get(v.0) {
                if self.nodes[v.0].requires_grad {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Backward from a scalar output with seed 1.
    pub fn backward_scalar(&self, out: Var, store: &mut ParamStore) -> Result<Gradients, DiffError> {
        if out.0 >= self.nodes.len() {
            return Err(DiffError::BackwardBeforeForward);
        }
        let seed = Tensor::filled(self.value(out).shape(), 1.0);
        self.backward(out, &seed, store)
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), DiffError> {
        let node = &self.nodes[id];
        let y = &node.value;
        let send = |grads: &mut [Option<Tensor>], v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut gt = Tensor::zeros(t.shape());
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[i * d..(i + 1) * d];
                    for (a, b) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
                send(grads, *table, gt);
            }
            Op::HConcat(parts) => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let pt = self.value(p);
                    let c = pt.cols();
                    let mut gp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    send(grads, p, Tensor::new(pt.shape().to_vec(), gp)?);
                }
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pt = self.value(p);
                    let n = pt.len();
                    let gp = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    send(grads, p, Tensor::new(pt.shape().to_vec(), gp)?);
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                bounds,
            } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (_, d) = as_matrix(xt.shape());
                let c = wt.shape()[0];
                let kd = kernel * d;
                let pad = kernel / 2;
                let (need_x, need_w, need_b) = (self.rg(*x), self.rg(*w), self.rg(*b));
                let mut gx = Tensor::zeros(xt.shape());
                let mut gw = Tensor::zeros(wt.shape());
                let mut gb = Tensor::zeros(&[c]);
                let mut window = vec![0.0; kd];
                let mut gwin = vec![0.0; kd];
                for &(s, e) in bounds {
                    for i in s..e {
                        let gi = &g.data()[i * c..(i + 1) * c];
                        if need_w {
                            fill_window(xt.data(), d, *kernel, s, e, i, &mut window);
                        }
                        gwin.iter_mut().for_each(|v| *v = 0.0);
                        for (ch, &gc) in gi.iter().enumerate() {
                            if gc == 0.0 {
                                continue;
                            }
                            if need_b {
                                gb.data_mut()[ch] += gc;
                            }
                            if need_w {
                                let gwr = &mut gw.data_mut()[ch * kd..(ch + 1) * kd];
                                for (a, wv) in gwr.iter_mut().zip(&window) {
                                    *a += gc * wv;
                                }
                            }
                            if need_x {
                                let wr = &wt.data()[ch * kd..(ch + 1) * kd];
                                for (a, wv) in gwin.iter_mut().zip(wr) {
                                    *a += gc * wv;
                                }
                            }
                        }
                        if need_x {
                            for j in 0..*kernel {
                                let src = i as isize + j as isize - pad as isize;
                                if src < s as isize || src >= e as isize {
                                    continue;
                                }
                                let src = src as usize;
                                let dst = &mut gx.data_mut()[src * d..(src + 1) * d];
                                for (a, v) in dst.iter_mut().zip(&gwin[j * d..(j + 1) * d]) {
                                    *a += v;
                                }
                            }
                        }
                    }
                }
                send(grads, *x, gx);
                send(grads, *w, gw);
                send(grads, *b, gb);
            }
            Op::SegmentMaxPool { x, argmax } => {
                let xt = self.value(*x);
                let c = xt.cols();
                let mut gx = Tensor::zeros(xt.shape());
                let cols = y.cols();
                for (o, am) in argmax.iter().enumerate() {
                    if let Some(i) = am {
                        let ch = (o % cols) % c;
                        gx.data_mut()[i * c + ch] += g.data()[o];
                    }
                }
                send(grads, *x, gx);
            }
            Op::Affine { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (n, i) = as_matrix(xt.shape());
                let o = wt.shape()[1];
                let gd = g.data();
                if self.rg(*x) {
                    let mut gx = vec![0.0; n * i];
                    for r in 0..n {
                        let grow = &gd[r * o..(r + 1) * o];
                        for a in 0..i {
                            gx[r * i + a] = dot(&wt.data()[a * o..(a + 1) * o], grow);
                        }
                    }
                    send(grads, *x, Tensor::new(xt.shape().to_vec(), gx)?);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; i * o];
                    for r in 0..n {
                        let grow = &gd[r * o..(r + 1) * o];
                        for a in 0..i {
                            let xa = xt.data()[r * i + a];
                            if xa == 0.0 {
                                continue;
                            }
                            for (dst, gv) in gw[a * o..(a + 1) * o].iter_mut().zip(grow) {
                                *dst += xa * gv;
                            }
                        }
                    }
                    send(grads, *w, Tensor::new(vec![i, o], gw)?);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; o];
                    for r in 0..n {
                        for (dst, gv) in gb.iter_mut().zip(&gd[r * o..(r + 1) * o]) {
                            *dst += gv;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    send(grads, *b, Tensor::new(shape, gb)?);
                }
            }
            Op::Unary(u, x) => {
                let xt = self.value(*x);
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xt.data())
                    .zip(y.data())
                    .map(|((&gv, &xv), &yv)| match u {
                        Unary::Tanh => gv * (1.0 - yv * yv),
                        Unary::Relu => {
                            if xv > 0.0 {
                                gv
                            } else {
                                0.0
                            }
                        }
                        Unary::Sigmoid => gv * yv * (1.0 - yv),
                        Unary::Log => gv / xv,
                        Unary::Exp => gv * yv,
                    })
                    .collect();
                send(grads, *x, Tensor::new(xt.shape().to_vec(), gx)?);
            }
            Op::Softmax(x) => {
                let (n, k) = as_matrix(y.shape());
                let mut gx = vec![0.0; n * k];
                for r in 0..n {
                    let yr = &y.data()[r * k..(r + 1) * k];
                    let gr = &g.data()[r * k..(r + 1) * k];
                    let s = dot(yr, gr);
                    for j in 0..k {
                        gx[r * k + j] = yr[j] * (gr[j] - s);
                    }
                }
                send(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::LogSoftmax(x) => {
                let (n, k) = as_matrix(y.shape());
                let mut gx = vec![0.0; n * k];
                for r in 0..n {
                    let yr = &y.data()[r * k..(r + 1) * k];
                    let gr = &g.data()[r * k..(r + 1) * k];
                    let s: f64 = gr.iter().sum();
                    for j in 0..k {
                        gx[r * k + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                send(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = (ta.data(), tb.data());
                let at = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
                let bt = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                for (i, &gv) in g.data().iter().enumerate() {
                    let (dya, dyb) = match op {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (bt(i), at(i)),
                        Binary::Div => (1.0 / bt(i), -at(i) / (bt(i) * bt(i))),
                    };
                    ga[if da.len() == 1 { 0 } else { i }] += gv * dya;
                    gb[if db.len() == 1 { 0 } else { i }] += gv * dyb;
                }
                let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
                send(grads, *a, Tensor::new(sa, ga)?);
                send(grads, *b, Tensor::new(sb, gb)?);
            }
            Op::Scale(x, c) => send(grads, *x, g.map(|v| v * c)),
            Op::AddScalar(x) => send(grads, *x, g.clone()),
            Op::Sum(x) => {
                let xt = self.value(*x);
                send(grads, *x, Tensor::filled(xt.shape(), g.item()));
            }
            Op::Mean(x) => {
                let xt = self.value(*x);
                send(grads, *x, Tensor::filled(xt.shape(), g.item() / xt.len() as f64));
            }
            Op::MeanRows(x) => {
                let xt = self.value(*x);
                let (n, c) = as_matrix(xt.shape());
                let mut gx = Vec::with_capacity(n * c);
                for _ in 0..n {
                    gx.extend(g.data().iter().map(|v| v / n as f64));
                }
                send(grads, *x, Tensor::new(xt.shape().to_vec(), gx)?);
            }
            Op::GatherRows { x, idx } => {
                let xt = self.value(*x);
                let c = xt.cols();
                let mut gx = Tensor::zeros(xt.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut gx.data_mut()[i * c..(i + 1) * c];
                    for (a, b) in dst.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *a += b;
                    }
                }
                send(grads, *x, gx);
            }
            Op::Pick { x, idx } => {
                let xt = self.value(*x);
                let k = xt.cols();
                let mut gx = Tensor::zeros(xt.shape());
                for (r, &i) in idx.iter().enumerate() {
                    gx.data_mut()[r * k + i] += g.data()[r];
                }
                send(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                send(grads, *x, g.clone().reshaped(shape)?);
            }
            Op::Grl { x, lambda } => send(grads, *x, g.map(|v| -lambda * v)),
            Op::Dropout { x, mask } => {
                let gx: Vec<f64> = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                send(grads, *x, Tensor::new(g.shape().to_vec(), gx)?);
            }
            Op::Clamp { x, lo, hi } => {
                let xt = self.value(*x);
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xt.data())
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                    .collect();
                send(grads, *x, Tensor::new(xt.shape().to_vec(), gx)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_bounds(bounds: &[(usize, usize)], n: usize) -> Result<(), DiffError> {
    let mut next = 0;
    for &(s, e) in bounds {
        if s != next || e <= s {
            return Err(DiffError::Shape(format!(
                "sequence bounds must tile the rows without gaps or empty sequences: ({s},{e})"
            )));
        }
        next = e;
    }
    if next != n {
        return Err(DiffError::Shape(format!("sequence bounds cover {next} of {n} rows")));
    }
    Ok(())
}

fn fill_window(x: &[f64], d: usize, kernel: usize, s: usize, e: usize, i: usize, out: &mut [f64]) {
    let pad = kernel / 2;
    for j in 0..kernel {
        let src = i as isize + j as isize - pad as isize;
        let dst = &mut out[j * d..(j + 1) * d];
        if src < s as isize || src >= e as isize {
            dst.iter_mut().for_each(|v| *v = 0.0);
        } else {
            let src = src as usize;
            dst.copy_from_slice(&x[src * d..(src + 1) * d]);
        }
    }
}
