//! Reverse-mode differentiation over a flat operation tape.
//!
//! A [`Tape`] borrows the [`ParamStore`] it reads from; parameter leaves do not
//! copy their values. Every forward op validates shapes and rejects non-finite
//! output, so a NaN surfaces at the op that produced it.

use rand::Rng;

use super::{Grads, NdError, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Tensor),
    Affine(Var, f64),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentMaxRows(Var, Vec<usize>),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Dropout(Var, Vec<f64>),
    LnClamped(Var, f64),
    Sum(Var),
    LogSoftmaxRows(Var),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> NdError {
    NdError::Shape { op, detail }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(1024) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, op: &'static str, value: Tensor, rec: Op) -> Result<Var, NdError> {
        if !value.is_finite() {
            return Err(NdError::NonFinite { op });
        }
        self.nodes.push(Node { value: Some(value), op: rec });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var, NdError> {
        self.push("constant", t, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NdError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NdError> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Adds a `1 x d` row to every row of an `n x d` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NdError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", format!("{:?} + {:?}", ta.shape(), tr.shape())));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row))
    }

    /// Scales row `i` of an `n x d` matrix by entry `i` of an `n x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, NdError> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("mul_col", format!("{:?} * {:?}", ta.shape(), tc.shape())));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let w = tc.data()[r];
            for o in out.row_mut(r) {
                *o *= w;
            }
        }
        self.push("mul_col", out, Op::MulCol(a, col))
    }

    /// Elementwise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Result<Var, NdError> {
        let ta = self.value(a);
        if ta.shape() != k.shape() {
            return Err(shape_err("mul_const", format!("{:?} vs {:?}", ta.shape(), k.shape())));
        }
        let data = ta.data().iter().zip(k.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        self.push("mul_const", out, Op::MulConst(a, k))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, NdError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| scale * x + shift).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        self.push("affine", out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NdError> {
        self.affine(a, c, 0.0)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NdError> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NdError> {
        let rows = parts.first().map(|&p| self.value(p).rows()).ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", format!("row mismatch {} vs {rows}", t.rows())));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NdError> {
        let cols = parts.first().map(|&p| self.value(p).cols()).ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", format!("col mismatch {} vs {cols}", t.cols())));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    /// Column-wise mean over rows: `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NdError> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(NdError::Contract("mean over zero rows".into()));
        }
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let n = t.rows() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        self.push("mean_rows", Tensor::row_vector(out), Op::MeanRows(a))
    }

    /// Column-wise max over rows. Ties resolve to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var, NdError> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(NdError::Contract("max over zero rows".into()));
        }
        let mut arg = vec![0usize; t.cols()];
        let mut out = t.row(0).to_vec();
        for r in 1..t.rows() {
            for (c, v) in t.row(r).iter().enumerate() {
                if *v > out[c] {
                    out[c] = *v;
                    arg[c] = r;
                }
            }
        }
        self.push("max_rows", Tensor::row_vector(out), Op::MaxRows(a, arg))
    }

    /// Selects rows by index (embedding lookup when `a` is a parameter table).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NdError> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            if i >= t.rows() {
                return Err(shape_err("gather_rows", format!("row {i} of {}", t.rows())));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_vec(idx.len(), t.cols(), data)?;
        self.push("gather_rows", out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Sums row `k` of `a` into output row `dst[k]`; output has `n` rows.
    pub fn scatter_add_rows(&mut self, a: Var, dst: &[usize], n: usize) -> Result<Var, NdError> {
        let t = self.value(a);
        if dst.len() != t.rows() {
            return Err(shape_err("scatter_add_rows", format!("{} targets for {} rows", dst.len(), t.rows())));
        }
        let mut out = Tensor::zeros(n, t.cols());
        for (k, &d) in dst.iter().enumerate() {
            if d >= n {
                return Err(shape_err("scatter_add_rows", format!("target {d} of {n}")));
            }
            for (o, v) in out.row_mut(d).iter_mut().zip(t.row(k)) {
                *o += v;
            }
        }
        self.push("scatter_add_rows", out, Op::ScatterAddRows(a, dst.to_vec()))
    }

    /// Softmax of an `m x 1` column within groups given by `segment[k] in 0..n_segments`.
    ///
    /// This is the masked softmax in edge-list form: each segment is one row of a
    /// mask over its members. An empty segment (a fully masked row) is an error.
    pub fn segment_softmax(&mut self, a: Var, segment: &[usize], n_segments: usize) -> Result<Var, NdError> {
        let t = self.value(a);
        if t.cols() != 1 || segment.len() != t.rows() {
            return Err(shape_err("segment_softmax", format!("{:?} with {} segment ids", t.shape(), segment.len())));
        }
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (k, &s) in segment.iter().enumerate() {
            if s >= n_segments {
                return Err(shape_err("segment_softmax", format!("segment {s} of {n_segments}")));
            }
            max[s] = max[s].max(t.data()[k]);
        }
        if let Some(empty) = max.iter().position(|m| *m == f64::NEG_INFINITY) {
            return Err(NdError::Contract(format!("softmax segment {empty} has no unmasked entries")));
        }
        let mut denom = vec![0.0; n_segments];
        let mut out: Vec<f64> = segment
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let e = (t.data()[k] - max[s]).exp();
                denom[s] += e;
                e
            })
            .collect();
        for (o, &s) in out.iter_mut().zip(segment) {
            *o /= denom[s];
        }
        let out = Tensor::column_vector(out);
        self.push("segment_softmax", out, Op::SegmentSoftmax(a, segment.to_vec()))
    }

    /// Column-wise max of the rows in each segment; output row `s` is segment `s`.
    pub fn segment_max_rows(&mut self, a: Var, segment: &[usize], n_segments: usize) -> Result<Var, NdError> {
        let t = self.value(a);
        if segment.len() != t.rows() {
            return Err(shape_err("segment_max_rows", format!("{} ids for {} rows", segment.len(), t.rows())));
        }
        let d = t.cols();
        let mut out = Tensor::filled(n_segments, d, f64::NEG_INFINITY);
        let mut arg = vec![usize::MAX; n_segments * d];
        for (k, &s) in segment.iter().enumerate() {
            if s >= n_segments {
                return Err(shape_err("segment_max_rows", format!("segment {s} of {n_segments}")));
            }
            for c in 0..d {
                let v = t.get(k, c);
                if arg[s * d + c] == usize::MAX || v > out.get(s, c) {
                    out.set(s, c, v);
                    arg[s * d + c] = k;
                }
            }
        }
        if arg.contains(&usize::MAX) && d > 0 {
            return Err(NdError::Contract("max over an empty segment".into()));
        }
        self.push("segment_max_rows", out, Op::SegmentMaxRows(a, arg))
    }

    fn map(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, rec: Op) -> Result<Var, NdError> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_vec(t.rows(), t.cols(), data)?;
        self.push(op, out, rec)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NdError> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NdError> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, a: Var) -> Result<Var, NdError> {
        self.map("elu", a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, NdError> {
        self.map("leaky_relu", a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    /// Inverted dropout. A zero rate returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var, NdError> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(NdError::Contract(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(t.rows(), t.cols(), data)?;
        self.push("dropout", out, Op::Dropout(a, mask))
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, a: Var, eps: f64) -> Result<Var, NdError> {
        self.map("ln_clamped", a, |x| x.max(eps).ln(), Op::LnClamped(a, eps))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NdError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::row_vector(vec![s]), Op::Sum(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, NdError> {
        let t = self.value(a);
        let mut out = t.clone();
        for r in 0..t.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a))
    }

    /// `x W + b` for `x: n x i`, `W: i x o`, `b: 1 x o`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var, NdError> {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Runs reverse-mode differentiation from a `1 x 1` output and returns
    /// parameter gradients.
    pub fn backward(&self, out: Var) -> Result<Grads, NdError> {
        if self.value(out).shape() != (1, 1) {
            return Err(shape_err("backward", format!("non-scalar output {:?}", self.value(out).shape())));
        }
        let mut grads = Grads::new(self.params.len());
        let mut adj: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        adj[out.0] = Some(Tensor::filled(1, 1, 1.0));

        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let shape = self.params.get(*id).shape();
                    grads.slot_mut(*id, shape).add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = g.matmul(&tb.transpose())?;
                    let gb = ta.transpose().matmul(&g)?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    neg.scale_in_place(-1.0);
                    acc(&mut adj, *b, neg);
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = hadamard(&g, self.value(*b));
                    let gb = hadamard(&g, self.value(*a));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddRow(a, r) => {
                    let mut gr = vec![0.0; g.cols()];
                    for row in 0..g.rows() {
                        for (o, v) in gr.iter_mut().zip(g.row(row)) {
                            *o += v;
                        }
                    }
                    acc(&mut adj, *r, Tensor::row_vector(gr));
                    acc(&mut adj, *a, g);
                }
                Op::MulCol(a, c) => {
                    let (ta, tc) = (self.value(*a), self.value(*c));
                    let mut ga = g.clone();
                    let mut gc = vec![0.0; tc.rows()];
                    for r in 0..g.rows() {
                        let w = tc.data()[r];
                        gc[r] = g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum();
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= w);
                    }
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *c, Tensor::column_vector(gc));
                }
                Op::MulConst(a, k) => acc(&mut adj, *a, hadamard(&g, k)),
                Op::Affine(a, scale) => {
                    let mut ga = g;
                    ga.scale_in_place(*scale);
                    acc(&mut adj, *a, ga);
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut gp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        acc(&mut adj, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let gp = Tensor::from_vec(rows, cols, g.data()[offset * cols..(offset + rows) * cols].to_vec())?;
                        offset += rows;
                        acc(&mut adj, p, gp);
                    }
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    let n = rows as f64;
                    for r in 0..rows {
                        for (o, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *o = v / n;
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::MaxRows(a, arg) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for (c, &r) in arg.iter().enumerate() {
                        ga.set(r, c, g.data()[c]);
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (rows, cols) = self.value(*a).shape();
                    if let Op::Param(id) = self.nodes[a.0].op {
                        // Scatter straight into the parameter gradient.
                        let slot = grads.slot_mut(id, (rows, cols));
                        for (k, &i) in idx.iter().enumerate() {
                            for (o, v) in slot.row_mut(i).iter_mut().zip(g.row(k)) {
                                *o += v;
                            }
                        }
                    } else {
                        let mut ga = Tensor::zeros(rows, cols);
                        for (k, &i) in idx.iter().enumerate() {
                            for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                                *o += v;
                            }
                        }
                        acc(&mut adj, *a, ga);
                    }
                }
                Op::ScatterAddRows(a, dst) => {
                    let cols = g.cols();
                    let mut ga = Tensor::zeros(dst.len(), cols);
                    for (k, &d) in dst.iter().enumerate() {
                        ga.row_mut(k).copy_from_slice(g.row(d));
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::SegmentSoftmax(a, seg) => {
                    let y = node.value.as_ref().expect("value");
                    let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; n_seg];
                    for (k, &s) in seg.iter().enumerate() {
                        dot[s] += g.data()[k] * y.data()[k];
                    }
                    let ga = seg
                        .iter()
                        .enumerate()
                        .map(|(k, &s)| y.data()[k] * (g.data()[k] - dot[s]))
                        .collect();
                    acc(&mut adj, *a, Tensor::column_vector(ga));
                }
                Op::SegmentMaxRows(a, arg) => {
                    let (rows, cols) = self.value(*a).shape();
                    let mut ga = Tensor::zeros(rows, cols);
                    for (flat, &k) in arg.iter().enumerate() {
                        let c = flat % cols;
                        let v = ga.get(k, c) + g.data()[flat];
                        ga.set(k, c, v);
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("value");
                    acc(&mut adj, *a, zip_map(&g, y, |gv, yv| gv * yv * (1.0 - yv)));
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("value");
                    acc(&mut adj, *a, zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv)));
                }
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let y = node.value.as_ref().expect("value");
                    let ga = zip3_map(&g, x, y, |gv, xv, yv| if xv > 0.0 { gv } else { gv * (yv + 1.0) });
                    acc(&mut adj, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, zip_map(&g, x, |gv, xv| if xv > 0.0 { gv } else { gv * slope }));
                }
                Op::Dropout(a, mask) => {
                    let data = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                    acc(&mut adj, *a, Tensor::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::LnClamped(a, eps) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, zip_map(&g, x, |gv, xv| if xv > *eps { gv / xv } else { 0.0 }));
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    acc(&mut adj, *a, Tensor::filled(rows, cols, g.data()[0]));
                }
                Op::LogSoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("value");
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let gsum: f64 = g.row(r).iter().sum();
                        for (o, yv) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o -= yv.exp() * gsum;
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
            }
        }
        Ok(grads)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn zip3_map(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((x, y), z)| f(*x, *y, *z))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}
