//! Attention kernels: exact softmax attention and the factored linear
//! attention with the `φ(x) = exp(-‖x‖²/2)·x` feature map.
//!
//! Each kernel has a plain-matrix form, instrumented with an [`OpCounter`],
//! and a tape form used during training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{feature_map_in_place, softmax_in_place, Tape, Var};
use crate::error::{arg_err, Result};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

/// Tally of arithmetic work. One multiply-add counts as one `mac`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub macs: u64,
    /// Additions, divisions and comparisons outside multiply-adds.
    pub elementwise: u64,
    pub exps: u64,
}

impl OpCounter {
    /// Total operations with a multiply-add counted as two.
    pub fn total_ops(&self) -> u64 {
        2 * self.macs + self.elementwise + self.exps
    }

    fn matmul(&mut self, m: usize, k: usize, n: usize) {
        self.macs += (m * k * n) as u64;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    Softmax,
    Linear,
}

/// Denominator handling of linear attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LinearNorm {
    /// Rows divided by `φ(q)·Σφ(k)`.
    #[default]
    Normalized,
    /// The bare product `φ(Q)(φ(K)ᵀV)`.
    Unnormalized,
}

/// Denominator guard used by normalized linear attention.
pub const LINEAR_DENOM_EPS: f64 = 1e-6;

fn check_shapes<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
    if q.cols() != k.cols() {
        return arg_err(format!(
            "query width {} differs from key width {}",
            q.cols(),
            k.cols()
        ));
    }
    if k.rows() != v.rows() {
        return arg_err(format!("{} keys but {} values", k.rows(), v.rows()));
    }
    if q.rows() == 0 || k.rows() == 0 {
        return arg_err("attention needs at least one query and one key");
    }
    Ok(())
}

/// Row-stochastic weights `softmax(QKᵀ·scale)`.
pub fn softmax_weights<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    scale: T,
    counter: Option<&mut OpCounter>,
) -> Result<Matrix<T>> {
    if q.cols() != k.cols() {
        return arg_err(format!(
            "query width {} differs from key width {}",
            q.cols(),
            k.cols()
        ));
    }
    let mut s = q.matmul_tb(k)?.scale(scale);
    for i in 0..s.rows() {
        softmax_in_place(s.row_mut(i));
    }
    if let Some(c) = counter {
        let (n, m) = (q.rows(), k.rows());
        c.matmul(n, q.cols(), m);
        c.elementwise += (3 * n * m) as u64;
        c.exps += (n * m) as u64;
    }
    Ok(s)
}

/// `softmax(QKᵀ/√d_k)V` with `d_k` the query width.
pub fn softmax_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<Matrix<T>> {
    let scale = T::one() / T::from_count(q.cols()).sqrt();
    softmax_attention_scaled(q, k, v, scale, None)
}

pub fn softmax_attention_scaled<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    scale: T,
    mut counter: Option<&mut OpCounter>,
) -> Result<Matrix<T>> {
    check_shapes(q, k, v)?;
    let w = softmax_weights(q, k, scale, counter.as_deref_mut())?;
    if let Some(c) = counter {
        c.matmul(w.rows(), w.cols(), v.cols());
    }
    w.matmul(v)
}

#[derive(Debug, Clone)]
pub struct LinearAttentionOutput<T> {
    pub output: Matrix<T>,
    /// Rows whose denominator fell below the guard.
    pub guard_hits: usize,
}

/// Normalized linear attention with the default guard.
pub fn linear_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<Matrix<T>> {
    Ok(linear_attention_with(
        q,
        k,
        v,
        LinearNorm::Normalized,
        T::lit(LINEAR_DENOM_EPS),
        None,
    )?
    .output)
}

/// `φ(Q)(φ(K)ᵀV)`, optionally divided row-wise by `φ(Q)(φ(K)ᵀ1)`. Never forms
/// the `N × N` attention matrix.
pub fn linear_attention_with<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    norm: LinearNorm,
    eps: T,
    counter: Option<&mut OpCounter>,
) -> Result<LinearAttentionOutput<T>> {
    check_shapes(q, k, v)?;
    let (n, d, m, dv) = (q.rows(), q.cols(), k.rows(), v.cols());
    let mut fq = q.clone();
    let mut fk = k.clone();
    for i in 0..n {
        feature_map_in_place(fq.row_mut(i));
    }
    for i in 0..m {
        feature_map_in_place(fk.row_mut(i));
    }
    let kv = fk.matmul_ta(v)?;
    let mut out = fq.matmul(&kv)?;
    let mut guard_hits = 0;
    let mut c = OpCounter::default();
    c.macs += ((n + m) * d) as u64;
    c.elementwise += ((n + m) * d) as u64;
    c.exps += (n + m) as u64;
    c.matmul(d, m, dv);
    c.matmul(n, d, dv);
    if norm == LinearNorm::Normalized {
        let mut ksum = vec![T::zero(); d];
        for row in fk.row_iter() {
            ksum.iter_mut().zip(row).for_each(|(s, &x)| *s += x);
        }
        c.elementwise += (m * d) as u64;
        for i in 0..n {
            let mut den = dot(fq.row(i), &ksum);
            if den.abs() < eps {
                den = eps;
                guard_hits += 1;
            }
            out.row_mut(i).iter_mut().for_each(|x| *x /= den);
        }
        c.macs += (n * d) as u64;
        c.elementwise += (n * dv) as u64;
    }
    if let Some(counter) = counter {
        counter.macs += c.macs;
        counter.elementwise += c.elementwise;
        counter.exps += c.exps;
    }
    Ok(LinearAttentionOutput {
        output: out,
        guard_hits,
    })
}

/// Tape form of [`softmax_attention_scaled`].
pub fn tape_softmax_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    scale: T,
) -> Var {
    let s = tape.matmul_tb(q, k);
    let s = tape.scale(s, scale);
    let w = tape.softmax_rows(s);
    tape.matmul(w, v)
}

/// Tape form of [`linear_attention_with`]; guard hits accumulate on the tape.
pub fn tape_linear_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    norm: LinearNorm,
    eps: T,
) -> Var {
    let fq = tape.feature_map_rows(q);
    let fk = tape.feature_map_rows(k);
    let fk_t = tape.transpose(fk);
    let kv = tape.matmul(fk_t, v);
    let num = tape.matmul(fq, kv);
    match norm {
        LinearNorm::Unnormalized => num,
        LinearNorm::Normalized => {
            // φ(Q)·Σ_j φ(k_j) as an N × 1 column
            let ksum = tape.mean_rows(fk);
            let m = tape.value(k).rows();
            let ksum = tape.scale(ksum, T::from_count(m));
            let den = tape.matmul_tb(fq, ksum);
            tape.div_by_col(num, den, eps)
        }
    }
}

/// Sinusoidal positional table, `rows × dim`, even columns sine and odd columns cosine.
pub fn positional_encoding<T: Scalar>(rows: usize, dim: usize) -> Matrix<T> {
    let mut pe = Matrix::zeros(rows, dim);
    for t in 0..rows {
        for i in 0..dim {
            let e = (i - i % 2) as f64 / dim as f64;
            let arg = t as f64 / 10000f64.powf(e);
            pe[(t, i)] = T::lit(if i % 2 == 0 { arg.sin() } else { arg.cos() });
        }
    }
    pe
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        Matrix::randn(rows, cols, 1.0, &mut stream(seed, "attn"))
    }

    #[test]
    fn single_row_softmax_returns_value() {
        let (q, k, v) = (rand(1, 8, 1), rand(1, 8, 2), rand(1, 5, 3));
        assert_eq!(softmax_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let q = rand(3, 4, 4);
        let k = Matrix::from_rows(&vec![vec![0.3, -1.0, 2.0, 0.5]; 6]).unwrap();
        let v = rand(6, 2, 5);
        let out = softmax_attention(&q, &k, &v).unwrap();
        let mean = v.mean_rows();
        for i in 0..3 {
            for j in 0..2 {
                assert!((out[(i, j)] - mean[(0, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let (q, k) = (rand(4, 8, 6), rand(4, 8, 7));
        let w = softmax_weights(&q, &k, 1.0 / 8f64.sqrt(), None).unwrap();
        for r in w.row_iter() {
            let s: f64 = r.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(r.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn softmax_is_permutation_equivariant_over_keys() {
        let (q, k, v) = (rand(3, 4, 8), rand(5, 4, 9), rand(5, 3, 10));
        let perm = [3, 0, 4, 1, 2];
        let a = softmax_attention(&q, &k, &v).unwrap();
        let b = softmax_attention(&q, &k.gather_rows(&perm), &v.gather_rows(&perm)).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_argument_error() {
        assert!(softmax_attention(&rand(2, 4, 1), &rand(2, 3, 2), &rand(2, 3, 3)).is_err());
        assert!(linear_attention(&rand(2, 4, 1), &rand(3, 4, 2), &rand(2, 3, 3)).is_err());
    }

    #[test]
    fn linear_attention_zero_query_gives_zero_row() {
        let mut q = rand(3, 4, 11);
        q.row_mut(1).fill(0.0);
        let (k, v) = (rand(5, 4, 12), rand(5, 3, 13));
        let out = linear_attention_with(&q, &k, &v, LinearNorm::Unnormalized, 1e-6, None).unwrap();
        assert!(out.output.row(1).iter().all(|&x| x == 0.0));
        // the normalized form guards the zero denominator instead of dividing by it
        let out = linear_attention_with(&q, &k, &v, LinearNorm::Normalized, 1e-6, None).unwrap();
        assert_eq!(out.guard_hits, 1);
        assert!(out.output.is_finite());
    }

    #[test]
    fn linear_attention_single_token() {
        let (q, k, v) = (
            rand(1, 4, 14).scale(0.5),
            rand(1, 4, 15).scale(0.5),
            rand(1, 3, 16),
        );
        let mut fq = q.clone();
        let mut fk = k.clone();
        feature_map_in_place(fq.row_mut(0));
        feature_map_in_place(fk.row_mut(0));
        let w = dot(fq.row(0), fk.row(0));
        let raw = linear_attention_with(&q, &k, &v, LinearNorm::Unnormalized, 1e-9, None).unwrap();
        for j in 0..3 {
            assert!((raw.output[(0, j)] - w * v[(0, j)]).abs() < 1e-12);
        }
        let norm = linear_attention(&q, &k, &v).unwrap();
        assert!(norm.sub(&v).unwrap().max_abs() < 1e-12);
        assert!(
            norm.sub(&softmax_attention(&q, &k, &v).unwrap())
                .unwrap()
                .max_abs()
                < 1e-12
        );
    }

    #[test]
    fn linear_attention_matches_explicit_quadratic_form() {
        let (q, k, v) = (
            rand(6, 4, 17).scale(0.4),
            rand(7, 4, 18).scale(0.4),
            rand(7, 3, 19),
        );
        let out = linear_attention(&q, &k, &v).unwrap();
        let mut fq = q.clone();
        let mut fk = k.clone();
        (0..6).for_each(|i| feature_map_in_place(fq.row_mut(i)));
        (0..7).for_each(|i| feature_map_in_place(fk.row_mut(i)));
        for i in 0..6 {
            let w: Vec<f64> = (0..7).map(|j| dot(fq.row(i), fk.row(j))).collect();
            let s: f64 = w.iter().sum();
            for c in 0..3 {
                let expect = (0..7).map(|j| w[j] * v[(j, c)]).sum::<f64>() / s;
                assert!((out[(i, c)] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn linear_ops_scale_linearly_and_softmax_quadratically() {
        let d = 16;
        let count = |n: usize, kind: AttentionKind| {
            let (q, k, v) = (rand(n, d, 20), rand(n, d, 21), rand(n, d, 22));
            let mut c = OpCounter::default();
            match kind {
                AttentionKind::Linear => {
                    linear_attention_with(&q, &k, &v, LinearNorm::Normalized, 1e-6, Some(&mut c))
                        .unwrap();
                }
                AttentionKind::Softmax => {
                    softmax_attention_scaled(&q, &k, &v, 0.25, Some(&mut c)).unwrap();
                }
            }
            c.total_ops() as f64
        };
        let ns = [32usize, 64, 128, 256];
        for w in ns.windows(2) {
            let ratio = count(w[1], AttentionKind::Linear) / count(w[0], AttentionKind::Linear);
            let expect = w[1] as f64 / w[0] as f64;
            assert!((ratio / expect - 1.0).abs() < 0.05, "ratio {ratio}");
        }
        let r = count(256, AttentionKind::Softmax) / count(128, AttentionKind::Softmax);
        assert!(r > 3.0);
    }

    fn fd_grad(
        x: &Matrix<f64>,
        f: &dyn Fn(&mut Tape<f64>, Var) -> Var,
    ) -> (Matrix<f64>, Matrix<f64>) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = f(&mut tape, v);
        let g = tape.backward(y).get_or_zero(v, x.shape());
        let mut num = Matrix::zeros(x.rows(), x.cols());
        let h = 1e-6;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.as_mut_slice()[i] += delta;
                let mut t = Tape::new();
                let vp = t.leaf(xp);
                let out = f(&mut t, vp);
                t.scalar(out)
            };
            num.as_mut_slice()[i] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        (g, num)
    }

    #[test]
    fn tape_kernels_match_plain_kernels_and_gradients() {
        let (q, k, v) = (
            rand(5, 4, 30).scale(0.5),
            rand(6, 4, 31).scale(0.5),
            rand(6, 3, 32),
        );
        for norm in [LinearNorm::Normalized, LinearNorm::Unnormalized] {
            let mut t = Tape::new();
            let (qv, kv, vv) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
            let out = tape_linear_attention(&mut t, qv, kv, vv, norm, 1e-6);
            let plain = linear_attention_with(&q, &k, &v, norm, 1e-6, None)
                .unwrap()
                .output;
            assert!(t.value(out).sub(&plain).unwrap().max_abs() < 1e-12);
        }
        let mut t = Tape::new();
        let (qv, kv, vv) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
        let out = tape_softmax_attention(&mut t, qv, kv, vv, 0.5);
        let plain = softmax_attention_scaled(&q, &k, &v, 0.5, None).unwrap();
        assert!(t.value(out).sub(&plain).unwrap().max_abs() < 1e-12);

        // queries and keys share the input so both gradient paths are exercised
        let w = rand(6, 3, 33);
        let x = rand(6, 4, 34).scale(0.5);
        for kind in [AttentionKind::Softmax, AttentionKind::Linear] {
            let f = |t: &mut Tape<f64>, x: Var| {
                let kc = t.constant(k.clone());
                let vc = t.constant(v.clone());
                let wc = t.constant(w.clone());
                let kk = t.add(kc, x);
                let o = match kind {
                    AttentionKind::Softmax => tape_softmax_attention(t, x, kk, vc, 0.5),
                    AttentionKind::Linear => {
                        tape_linear_attention(t, x, kk, vc, LinearNorm::Normalized, 1e-6)
                    }
                };
                let o = t.hadamard(o, wc);
                t.sum_all(o)
            };
            let (g, num) = fd_grad(&x, &f);
            let err = g.sub(&num).unwrap().max_abs() / num.max_abs().max(1e-12);
            assert!(err < 1e-6, "{kind:?} rel err {err}");
        }
    }

    #[test]
    fn positional_encoding_layout() {
        let pe = positional_encoding::<f64>(3, 8);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe[(1, 0)] - 1f64.sin()).abs() < 1e-15);
    }
}
