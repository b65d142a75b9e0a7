//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] then walks
//! the record in reverse and accumulates adjoints. Values are `f64` matrices;
//! scalars are 1x1 and per-row quantities are column vectors (n x 1).
//!
//! Index-based ops (`gather_rows`, `scatter_add_rows`, `segment_softmax`) are
//! what message passing is built from. Their reduction order is the index
//! order, so a caller that emits edges grouped by destination node gets the
//! same floating point sums as a per-node loop.

use std::rc::Rc;

use crate::linalg::{dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    /// x · wᵀ
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// x + broadcast row b
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
    /// softmax of a column within segments given per row
    SegmentSoftmax(Var, Rc<[usize]>),
    /// multiply row i of x by s[i]
    ScaleRows(Var, Var),
    /// x · v for a row vector v (1 x cols) giving a column
    RowDot(Var, Var),
    SliceCols(Var, usize),
    RowNorm(Var, u8),
    RowSum(Var),
    Mean(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar");
        m.data()[0]
    }

    /// Registers an input. Constants and parameters are both leaves; the
    /// caller decides which leaf gradients it reads.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let out = self.value(x).matmul_t(self.value(w));
        self.push(out, Op::Linear(x, w))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.rows(), 1);
        assert_eq!(bv.cols(), xv.cols());
        let mut out = xv.clone();
        let cols = out.cols();
        for i in 0..out.rows() {
            for (o, bb) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        debug_assert_eq!(cols, bv.cols());
        self.push(out, Op::AddRow(x, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(crate::linalg::relu);
        self.push(out, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| leaky(v, slope));
        self.push(out, Op::LeakyRelu(x, slope))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Rc<[usize]>) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(idx.len(), xv.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(xv.row(i));
        }
        self.push(out, Op::Gather(x, idx))
    }

    /// Sums row `k` of `x` into output row `idx[k]`; output has `n_out` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Rc<[usize]>, n_out: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), idx.len());
        let mut out = Matrix::zeros(n_out, xv.cols());
        for (k, &i) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(xv.row(k)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterAdd(x, idx))
    }

    /// Softmax of column `x` restricted to rows sharing a segment id.
    pub fn segment_softmax(&mut self, x: Var, segments: Rc<[usize]>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.cols(), 1);
        assert_eq!(xv.rows(), segments.len());
        let out = Matrix::from_vec(xv.rows(), 1, segment_softmax_values(xv.data(), &segments))
            .expect("shape");
        self.push(out, Op::SegmentSoftmax(x, segments))
    }

    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert_eq!(sv.shape(), (xv.rows(), 1));
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let c = sv.data()[i];
            for o in out.row_mut(i) {
                *o *= c;
            }
        }
        self.push(out, Op::ScaleRows(x, s))
    }

    pub fn row_dot(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        assert_eq!(vv.rows(), 1);
        let col: Vec<f64> = xv.iter_rows().map(|r| dot(r, vv.data())).collect();
        let out = Matrix::from_vec(xv.rows(), 1, col).expect("shape");
        self.push(out, Op::RowDot(x, v))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols());
        let mut out = Matrix::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols(x, start))
    }

    /// Per-row p-norm, p in {1, 2}.
    pub fn row_norm(&mut self, x: Var, p: u8) -> Var {
        assert!(p == 1 || p == 2);
        let xv = self.value(x);
        let col: Vec<f64> = xv.iter_rows().map(|r| p_norm(r, p)).collect();
        let out = Matrix::from_vec(xv.rows(), 1, col).expect("shape");
        self.push(out, Op::RowNorm(x, p))
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let col: Vec<f64> = xv
            .iter_rows()
            .map(|r| r.iter().fold(0.0, |acc, v| acc + v))
            .collect();
        let out = Matrix::from_vec(xv.rows(), 1, col).expect("shape");
        self.push(out, Op::RowSum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.data().len().max(1) as f64;
        let m = xv.data().iter().fold(0.0, |acc, v| acc + v) / n;
        self.push(Matrix::filled(1, 1, m), Op::Mean(x))
    }

    /// Smallest distance of any recorded input to a point where an op is not
    /// differentiable (ReLU/LeakyReLU at 0, |x| at 0, the 2-norm at the
    /// origin). Finite-difference checks use it to skip kink-adjacent points.
    pub fn kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    for v in self.value(x).data() {
                        best = best.min(v.abs());
                    }
                }
                Op::RowNorm(x, 1) => {
                    for v in self.value(x).data() {
                        best = best.min(v.abs());
                    }
                }
                Op::RowNorm(_, _) => {
                    for v in node.value.data() {
                        best = best.min(v.abs());
                    }
                }
                _ => {}
            }
        }
        best
    }

    /// Hash of which side of every kink each recorded value sits on. Two
    /// tapes of the same computation with equal signatures lie in the same
    /// smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut sides = Vec::new();
        let mut feed = |v: &f64| sides.push((*v > 0.0) as u8 | ((*v < 0.0) as u8) << 1);
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) | Op::RowNorm(x, 1) => self.value(x).data().iter().for_each(&mut feed),
                Op::RowNorm(_, _) => node.value.data().iter().for_each(&mut feed),
                _ => {}
            }
        }
        crate::text::fnv1a(0, &sides)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Linear(x, w) => {
                    // out = x wᵀ: dx = g w, dw = gᵀ x
                    let dx = g.matmul(self.value(*w));
                    let dw = g.t_matmul(self.value(*x));
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&g, self.value(*b), |x, y| x * y);
                    let db = zip_map(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(x, b) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.map(|v| v * c));
                }
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::Relu(x) => {
                    let dx = zip_map(&g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    accumulate(&mut grads, *x, dx);
                }
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    let dx = zip_map(&g, self.value(*x), |gv, xv| if xv > 0.0 { gv } else { gv * s });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather(x, idx) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ScatterAdd(x, idx) => {
                    let mut dx = Matrix::zeros(idx.len(), g.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        dx.row_mut(k).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SegmentSoftmax(x, seg) => {
                    let alpha = node.value.data();
                    let gd = g.data();
                    let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                    let mut weighted = vec![0.0; n_seg];
                    for (k, &s) in seg.iter().enumerate() {
                        weighted[s] += alpha[k] * gd[k];
                    }
                    let dx: Vec<f64> = seg
                        .iter()
                        .enumerate()
                        .map(|(k, &s)| alpha[k] * (gd[k] - weighted[s]))
                        .collect();
                    accumulate(&mut grads, *x, Matrix::from_vec(dx.len(), 1, dx).expect("shape"));
                }
                Op::ScaleRows(x, s) => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let mut dx = g.clone();
                    let mut ds = Matrix::zeros(sv.rows(), 1);
                    for i in 0..xv.rows() {
                        let c = sv.data()[i];
                        ds.data_mut()[i] = dot(g.row(i), xv.row(i));
                        for d in dx.row_mut(i) {
                            *d *= c;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *s, ds);
                }
                Op::RowDot(x, v) => {
                    let (xv, vv) = (self.value(*x), self.value(*v));
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut dv = Matrix::zeros(1, vv.cols());
                    for i in 0..xv.rows() {
                        let gi = g.data()[i];
                        for (d, a) in dx.row_mut(i).iter_mut().zip(vv.data()) {
                            *d = gi * a;
                        }
                        for (d, a) in dv.data_mut().iter_mut().zip(xv.row(i)) {
                            *d += gi * a;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *v, dv);
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let len = g.cols();
                    for i in 0..xv.rows() {
                        dx.row_mut(i)[*start..*start + len].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::RowNorm(x, p) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        let gi = g.data()[i];
                        let norm = node.value.data()[i];
                        for (d, &a) in dx.row_mut(i).iter_mut().zip(xv.row(i)) {
                            *d = match p {
                                1 => gi * sign(a),
                                _ if norm > 0.0 => gi * a / norm,
                                _ => 0.0,
                            };
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::RowSum(x) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        let gi = g.data()[i];
                        dx.row_mut(i).fill(gi);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Mean(x) => {
                    let xv = self.value(*x);
                    let n = xv.data().len().max(1) as f64;
                    let gi = g.data()[0] / n;
                    accumulate(&mut grads, *x, Matrix::filled(xv.rows(), xv.cols(), gi));
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shape")
}

#[inline]
pub(crate) fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v * slope
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn p_norm(v: &[f64], p: u8) -> f64 {
    match p {
        1 => v.iter().fold(0.0, |acc, x| acc + x.abs()),
        _ => v.iter().fold(0.0, |acc, x| acc + x * x).sqrt(),
    }
}

/// Max-shifted softmax within segments. Sums run in row order.
pub(crate) fn segment_softmax_values(x: &[f64], segments: &[usize]) -> Vec<f64> {
    let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
    let mut max = vec![f64::NEG_INFINITY; n_seg];
    for (&v, &s) in x.iter().zip(segments) {
        if v > max[s] {
            max[s] = v;
        }
    }
    let exps: Vec<f64> = x
        .iter()
        .zip(segments)
        .map(|(&v, &s)| (v - max[s]).exp())
        .collect();
    let mut sums = vec![0.0; n_seg];
    for (&e, &s) in exps.iter().zip(segments) {
        sums[s] += e;
    }
    exps.iter().zip(segments).map(|(&e, &s)| e / sums[s]).collect()
}
