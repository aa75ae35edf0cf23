//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s; calling
//! [`Tape::backward`] on a `1 × 1` output returns the gradient of that output
//! with respect to every recorded node. Operations work on whole matrices so
//! the per-node overhead is negligible next to the arithmetic.

use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulTb(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    Tanh(usize),
    Gelu(usize),
    Exp(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    /// Cached per-row inverse standard deviations.
    LayerNormRows(usize, Vec<T>),
    /// Cached per-row norms.
    L2NormalizeRows(usize, Vec<T>),
    FeatureMapRows(usize),
    RowSums(usize),
    /// Numerator, denominator column, effective denominators, guard mask.
    DivByCol(usize, usize, Vec<T>, Vec<bool>),
    Transpose(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    MeanRows(usize),
    Pick(usize, Vec<(usize, usize)>),
    MeanAll(usize),
    SumAll(usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Gradients returned by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero-filled when `v` is disconnected.
    pub fn get_or_zero(&self, v: Var, shape: (usize, usize)) -> Matrix<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    guard_hits: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            guard_hits: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of denominator guards triggered by [`Tape::div_by_col`].
    pub fn guard_hits(&self) -> usize {
        self.guard_hits
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).as_slice()[0]
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value)
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul shape mismatch");
        let out = va.matmul_unchecked(vb);
        self.push(out, Op::MatMul(a.0, b.0))
    }

    /// `a · bᵀ`.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "matmul_tb shape mismatch");
        let out = va.matmul_tb_unchecked(vb);
        self.push(out, Op::MatMulTb(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .add(self.value(b))
            .expect("add shape mismatch");
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .sub(self.value(b))
            .expect("sub shape mismatch");
        self.push(out, Op::Sub(a.0, b.0))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .hadamard(self.value(b))
            .expect("hadamard shape mismatch");
        self.push(out, Op::Hadamard(a.0, b.0))
    }

    /// `a + 1·row` where `row` is `1 × cols`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "add_row shape mismatch");
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, &r) in out.row_mut(i).iter_mut().zip(vr.as_slice()) {
                *o += r;
            }
        }
        self.push(out, Op::AddRow(a.0, row.0))
    }

    /// Each row of `a` multiplied elementwise by the `1 × cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "mul_row shape mismatch");
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, &r) in out.row_mut(i).iter_mut().zip(vr.as_slice()) {
                *o *= r;
            }
        }
        self.push(out, Op::MulRow(a.0, row.0))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a.0, s))
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a.0))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::SoftmaxRows(a.0))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(out, Op::LogSoftmaxRows(a.0))
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let mut out = self.value(a).clone();
        let n = T::from_count(out.cols());
        let mut inv = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * s);
            inv.push(s);
        }
        self.push(out, Op::LayerNormRows(a.0, inv))
    }

    /// Rows scaled to unit Euclidean norm; rows with norm below `eps` pass through.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = dot(row, row).sqrt();
            if n > eps {
                row.iter_mut().for_each(|x| *x /= n);
                norms.push(n);
            } else {
                norms.push(T::zero());
            }
        }
        self.push(out, Op::L2NormalizeRows(a.0, norms))
    }

    /// Row-wise `φ(x) = exp(-‖x‖²/2)·x`.
    pub fn feature_map_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            feature_map_in_place(out.row_mut(i));
        }
        self.push(out, Op::FeatureMapRows(a.0))
    }

    /// `n × c → n × 1` row sums.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let sums: Vec<T> = va.row_iter().map(|r| r.iter().copied().sum()).collect();
        self.push(Matrix::column_vector(&sums), Op::RowSums(a.0))
    }

    /// Divides row `i` of `a` by `d[i]`; entries with `|d[i]| < eps` are replaced by
    /// `eps` and counted in [`Tape::guard_hits`].
    pub fn div_by_col(&mut self, a: Var, d: Var, eps: T) -> Var {
        let (va, vd) = (self.value(a), self.value(d));
        assert_eq!((va.rows(), 1), vd.shape(), "div_by_col shape mismatch");
        let mut out = va.clone();
        let mut guarded = Vec::with_capacity(va.rows());
        let mut effective = Vec::with_capacity(va.rows());
        let mut hits = 0;
        for i in 0..out.rows() {
            let den = vd.as_slice()[i];
            let g = den.abs() < eps;
            let den = if g { eps } else { den };
            hits += usize::from(g);
            out.row_mut(i).iter_mut().for_each(|x| *x /= den);
            guarded.push(g);
            effective.push(den);
        }
        self.guard_hits += hits;
        self.push(out, Op::DivByCol(a.0, d.0, effective, guarded))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a.0))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        self.push(out, Op::SliceCols(a.0, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_cols(&mats).expect("concat_cols shape mismatch");
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_rows(&mats).expect("concat_rows shape mismatch");
        self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).gather_rows(idx);
        self.push(out, Op::GatherRows(a.0, idx.to_vec()))
    }

    /// Column means, `n × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_rows();
        self.push(out, Op::MeanRows(a.0))
    }

    /// Entries at `(row, col)` positions stacked as a `k × 1` column.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Var {
        let va = self.value(a);
        let vals: Vec<T> = at.iter().map(|&(i, j)| va[(i, j)]).collect();
        self.push(Matrix::column_vector(&vals), Op::Pick(a.0, at.to_vec()))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.sum() / T::from_count(va.len().max(1));
        self.push(Matrix::filled(1, 1, m), Op::MeanAll(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::SumAll(a.0))
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_tb_unchecked(val(*b));
                let gb = val(*a).matmul_ta_unchecked(g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MatMulTb(a, b) => {
                let ga = g.matmul_unchecked(val(*b));
                let gb = g.matmul_ta_unchecked(val(*a));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Hadamard(a, b) => {
                accumulate(grads, *a, g.hadamard(val(*b)).expect("shape"));
                accumulate(grads, *b, g.hadamard(val(*a)).expect("shape"));
            }
            Op::AddRow(a, r) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *r, column_sums(g));
            }
            Op::MulRow(a, r) => {
                let row = val(*r);
                let mut ga = g.clone();
                for i in 0..ga.rows() {
                    for (x, &s) in ga.row_mut(i).iter_mut().zip(row.as_slice()) {
                        *x *= s;
                    }
                }
                let gr = column_sums(&g.hadamard(val(*a)).expect("shape"));
                accumulate(grads, *a, ga);
                accumulate(grads, *r, gr);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Tanh(a) => {
                let ga = g.zip_map(y, |d, t| d * (T::one() - t * t)).expect("shape");
                accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(val(*a), |d, x| d * gelu_grad(x)).expect("shape");
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => accumulate(grads, *a, g.hadamard(y).expect("shape")),
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = dot(yr, gr);
                    for ((o, &p), &d) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = p * (d - s);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s: T = gr.iter().copied().sum();
                    for ((o, &ly), &d) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = d - ly.exp() * s;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNormRows(a, inv) => {
                let n = T::from_count(y.cols());
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = dot(gr, yr) / n;
                    for ((o, &yy), &d) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = inv[i] * (d - mg - yy * mgy);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::L2NormalizeRows(a, norms) => {
                let mut ga = g.clone();
                for i in 0..y.rows() {
                    let n = norms[i];
                    if n == T::zero() {
                        continue;
                    }
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = dot(yr, gr);
                    for ((o, &yy), &d) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = (d - yy * s) / n;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::FeatureMapRows(a) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let (xr, gr) = (x.row(i), g.row(i));
                    let e = (-dot(xr, xr) / T::lit(2.0)).exp();
                    let s = dot(xr, gr);
                    for ((o, &xx), &d) in ga.row_mut(i).iter_mut().zip(xr).zip(gr) {
                        *o = e * (d - s * xx);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::RowSums(a) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let gi = g.as_slice()[i];
                    ga.row_mut(i).iter_mut().for_each(|o| *o = gi);
                }
                accumulate(grads, *a, ga);
            }
            Op::DivByCol(a, d, effective, guarded) => {
                let den = val(*d);
                let mut ga = g.clone();
                let mut gd = Matrix::zeros(den.rows(), 1);
                for i in 0..y.rows() {
                    let e = effective[i];
                    ga.row_mut(i).iter_mut().for_each(|x| *x /= e);
                    // Guarded rows were divided by a constant.
                    if !guarded[i] {
                        gd.as_mut_slice()[i] = -dot(g.row(i), y.row(i)) / e;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *d, gd);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    accumulate(grads, p, g.slice_cols(off, w));
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = val(p).rows();
                    let idx: Vec<usize> = (off..off + h).collect();
                    accumulate(grads, p, g.gather_rows(&idx));
                    off += h;
                }
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &d) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += d;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let x = val(*a);
                let n = T::from_count(x.rows().max(1));
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    for (o, &d) in ga.row_mut(i).iter_mut().zip(g.as_slice()) {
                        *o = d / n;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Pick(a, at) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for (k, &(i, j)) in at.iter().enumerate() {
                    ga[(i, j)] += g.as_slice()[k];
                }
                accumulate(grads, *a, ga);
            }
            Op::MeanAll(a) => {
                let x = val(*a);
                let v = g.as_slice()[0] / T::from_count(x.len().max(1));
                accumulate(grads, *a, Matrix::filled(x.rows(), x.cols(), v));
            }
            Op::SumAll(a) => {
                let x = val(*a);
                accumulate(
                    grads,
                    *a,
                    Matrix::filled(x.rows(), x.cols(), g.as_slice()[0]),
                );
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], i: usize, g: Matrix<T>) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign_unchecked(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for r in g.row_iter() {
        for (o, &x) in out.as_mut_slice().iter_mut().zip(r) {
            *o += x;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

/// `φ(x) = exp(-‖x‖²/2)·x` applied in place.
pub fn feature_map_in_place<T: Scalar>(row: &mut [T]) {
    let e = (-dot(row, row) / T::lit(2.0)).exp();
    row.iter_mut().for_each(|x| *x *= e);
}
