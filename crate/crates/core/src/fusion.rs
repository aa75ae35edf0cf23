//! Shared embedding space for the three modalities: per-modality encoders,
//! the contrastive alignment objective and temporal alignment by dynamic
//! time warping or cross-modal attention.

use std::io::Write;

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::attention::{softmax_attention_scaled, tape_softmax_attention};
use crate::autodiff::{log_sum_exp, Tape, Var};
use crate::error::{arg_err, Result};
use crate::matrix::{dot, Matrix};
use crate::params::{Bound, ParamKind, ParamSet};
use crate::rng;
use crate::scalar::Scalar;

/// Embedding width used by the full-size model.
pub const EMBED_DIM: usize = 128;
/// Contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.1;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Gaze,
    Bio,
    Context,
    Fused,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Gaze => "gaze",
            Modality::Bio => "bio",
            Modality::Context => "context",
            Modality::Fused => "fused",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Modality::Gaze => "enc.gaze",
            Modality::Bio => "enc.bio",
            Modality::Context => "enc.context",
            Modality::Fused => "enc.fused",
        }
    }
}

/// One embedding per master-clock tick.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence<T> {
    vectors: Matrix<T>,
    modality: Modality,
    timestamps: Vec<usize>,
}

impl<T: Scalar> EmbeddingSequence<T> {
    pub fn new(vectors: Matrix<T>, modality: Modality, timestamps: Vec<usize>) -> Result<Self> {
        if vectors.rows() != timestamps.len() {
            return arg_err(format!(
                "{} embedding vectors but {} timestamps",
                vectors.rows(),
                timestamps.len()
            ));
        }
        if vectors.cols() == 0 {
            return arg_err("embedding dimension must be positive");
        }
        Ok(Self {
            vectors,
            modality,
            timestamps,
        })
    }

    pub fn vectors(&self) -> &Matrix<T> {
        &self.vectors
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn timestamps(&self) -> &[usize] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Input widths of the three encoders plus hidden and output widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderShape {
    pub gaze_in: usize,
    pub bio_in: usize,
    pub context_in: usize,
    pub hidden: usize,
    pub dim: usize,
}

impl EncoderShape {
    fn input(&self, m: Modality) -> Result<usize> {
        match m {
            Modality::Gaze => Ok(self.gaze_in),
            Modality::Bio => Ok(self.bio_in),
            Modality::Context => Ok(self.context_in),
            Modality::Fused => arg_err("no encoder for the fused modality"),
        }
    }
}

/// Two-layer encoders `tanh(x W1 + b1) W2 + b2` per modality, plus the
/// query/key/value projections of attention alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T: Scalar> {
    pub shape: EncoderShape,
    pub params: ParamSet<T>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Scaled Gaussian initialisation, `std = 1/√fan_in`, zero biases.
    pub fn init(shape: EncoderShape, seed: u64) -> Result<Self> {
        Self::build(shape, |name, rows, cols| {
            let mut r = rng::stream(seed, name);
            Matrix::randn(rows, cols, T::one() / T::from_count(rows).sqrt(), &mut r)
        })
    }

    /// All-zero parameters.
    pub fn zeros(shape: EncoderShape) -> Result<Self> {
        Self::build(shape, |_, rows, cols| Matrix::zeros(rows, cols))
    }

    fn build(
        shape: EncoderShape,
        mut weight: impl FnMut(&str, usize, usize) -> Matrix<T>,
    ) -> Result<Self> {
        if [
            shape.gaze_in,
            shape.bio_in,
            shape.context_in,
            shape.hidden,
            shape.dim,
        ]
        .contains(&0)
        {
            return arg_err("encoder widths must be positive");
        }
        let mut params = ParamSet::new();
        for m in [Modality::Gaze, Modality::Bio, Modality::Context] {
            let p = m.prefix();
            let input = shape.input(m)?;
            params.insert(
                format!("{p}.w1"),
                ParamKind::Weight,
                weight(&format!("{p}.w1"), input, shape.hidden),
            )?;
            params.insert(
                format!("{p}.b1"),
                ParamKind::Bias,
                Matrix::zeros(1, shape.hidden),
            )?;
            params.insert(
                format!("{p}.w2"),
                ParamKind::Weight,
                weight(&format!("{p}.w2"), shape.hidden, shape.dim),
            )?;
            params.insert(
                format!("{p}.b2"),
                ParamKind::Bias,
                Matrix::zeros(1, shape.dim),
            )?;
        }
        for n in ["align.wq", "align.wk", "align.wv"] {
            params.insert(n, ParamKind::Weight, weight(n, shape.dim, shape.dim))?;
        }
        Ok(Self { shape, params })
    }
}

/// Stacks sliding windows of `samples` (`n × f`) into rows of width `window·f`,
/// oldest sample first.
pub fn sliding_windows<T: Scalar>(
    samples: &Matrix<T>,
    window: usize,
    stride: usize,
) -> Result<Matrix<T>> {
    if window == 0 || stride == 0 {
        return arg_err("window and stride must be positive");
    }
    if samples.rows() < window {
        return arg_err(format!(
            "{} samples cannot fill a window of {window}",
            samples.rows()
        ));
    }
    let count = (samples.rows() - window) / stride + 1;
    let f = samples.cols();
    let mut data = Vec::with_capacity(count * window * f);
    for w in 0..count {
        for r in w * stride..w * stride + window {
            data.extend_from_slice(samples.row(r));
        }
    }
    Matrix::from_vec(count, window * f, data)
}

/// Encodes pre-windowed rows of one modality.
pub fn encode_modality<T: Scalar>(
    windows: &Matrix<T>,
    timestamps: Vec<usize>,
    params: &EncoderParams<T>,
    modality: Modality,
) -> Result<EmbeddingSequence<T>> {
    let input = params.shape.input(modality)?;
    if windows.rows() == 0 {
        return arg_err("encode_modality needs at least one window");
    }
    if windows.cols() != input {
        return arg_err(format!(
            "{} encoder expects width {input}, got {}",
            modality.as_str(),
            windows.cols()
        ));
    }
    let p = modality.prefix();
    let ps = &params.params;
    let mut h = windows.matmul(ps.get(&format!("{p}.w1"))?)?;
    add_row_in_place(&mut h, ps.get(&format!("{p}.b1"))?);
    let h = h.map(|x| x.tanh());
    let mut z = h.matmul(ps.get(&format!("{p}.w2"))?)?;
    add_row_in_place(&mut z, ps.get(&format!("{p}.b2"))?);
    EmbeddingSequence::new(z, modality, timestamps)
}

fn add_row_in_place<T: Scalar>(m: &mut Matrix<T>, row: &Matrix<T>) {
    for i in 0..m.rows() {
        m.row_mut(i)
            .iter_mut()
            .zip(row.as_slice())
            .for_each(|(x, &b)| *x += b);
    }
}

/// Tape form of [`encode_modality`] on a bound [`EncoderParams`] set.
pub fn tape_encode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    x: Var,
    modality: Modality,
) -> Var {
    let p = modality.prefix();
    let h = tape.affine(
        x,
        bound.var(&format!("{p}.w1")),
        bound.var(&format!("{p}.b1")),
    );
    let h = tape.tanh(h);
    tape.affine(
        h,
        bound.var(&format!("{p}.w2")),
        bound.var(&format!("{p}.b2")),
    )
}

/// Loss and gradients with respect to the raw (unnormalised) embeddings.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput<T> {
    pub loss: T,
    pub grad_anchors: Matrix<T>,
    pub grad_candidates: Matrix<T>,
}

fn normalize_rows<T: Scalar>(m: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let n = dot(row, row).sqrt();
        if n > T::lit(NORM_EPS) {
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        } else {
            norms.push(T::zero());
        }
    }
    (out, norms)
}

fn check_pairs<T: Scalar>(
    anchors: &Matrix<T>,
    candidates: &Matrix<T>,
    pairs: &[(usize, usize)],
    tau: T,
) -> Result<()> {
    if !(tau > T::zero()) {
        return arg_err(format!("temperature must be positive, got {tau}"));
    }
    if pairs.is_empty() {
        return arg_err("contrastive loss needs at least one positive pair");
    }
    if anchors.cols() != candidates.cols() {
        return arg_err("anchor and candidate dimensions differ");
    }
    if pairs
        .iter()
        .any(|&(i, j)| i >= anchors.rows() || j >= candidates.rows())
    {
        return arg_err("positive pair index out of range");
    }
    Ok(())
}

/// Mean over positive pairs `(i, j)` of `−log softmax_j(⟨ẑ_i, ĉ_k⟩/τ)`, with
/// the softmax taken over every candidate and embeddings L2-normalised.
pub fn contrastive_loss<T: Scalar>(
    anchors: &EmbeddingSequence<T>,
    candidates: &EmbeddingSequence<T>,
    pairs: &[(usize, usize)],
    tau: T,
) -> Result<T> {
    Ok(contrastive_loss_grad(anchors.vectors(), candidates.vectors(), pairs, tau)?.loss)
}

/// [`contrastive_loss`] on raw matrices with its analytic gradient.
pub fn contrastive_loss_grad<T: Scalar>(
    anchors: &Matrix<T>,
    candidates: &Matrix<T>,
    pairs: &[(usize, usize)],
    tau: T,
) -> Result<ContrastiveOutput<T>> {
    check_pairs(anchors, candidates, pairs, tau)?;
    let (a, na) = normalize_rows(anchors);
    let (c, nc) = normalize_rows(candidates);
    let logits = a.matmul_tb(&c)?.scale(T::one() / tau);
    let m = T::from_count(pairs.len());
    let mut loss = T::zero();
    let mut ga = Matrix::zeros(a.rows(), a.cols());
    let mut gc = Matrix::zeros(c.rows(), c.cols());
    for &(i, j) in pairs {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        loss += lse - row[j];
        for k in 0..c.rows() {
            let coef =
                ((row[k] - lse).exp() - if k == j { T::one() } else { T::zero() }) / (tau * m);
            let (ai, ck) = (a.row(i).to_vec(), c.row(k).to_vec());
            ga.row_mut(i)
                .iter_mut()
                .zip(&ck)
                .for_each(|(g, &x)| *g += coef * x);
            gc.row_mut(k)
                .iter_mut()
                .zip(&ai)
                .for_each(|(g, &x)| *g += coef * x);
        }
    }
    // back through the normalisation: dv = (g − u⟨u, g⟩)/‖v‖
    let unnormalize = |g: &mut Matrix<T>, u: &Matrix<T>, norms: &[T]| {
        for i in 0..g.rows() {
            if norms[i] == T::zero() {
                continue;
            }
            let proj = dot(u.row(i), g.row(i));
            let n = norms[i];
            let ui = u.row(i).to_vec();
            g.row_mut(i)
                .iter_mut()
                .zip(&ui)
                .for_each(|(x, &uu)| *x = (*x - uu * proj) / n);
        }
    };
    unnormalize(&mut ga, &a, &na);
    unnormalize(&mut gc, &c, &nc);
    Ok(ContrastiveOutput {
        loss: loss / m,
        grad_anchors: ga,
        grad_candidates: gc,
    })
}

/// Same-tick contrastive loss on the tape: anchor row `t` is positive with
/// candidate row `t`, every other candidate row is a negative.
pub fn tape_contrastive<T: Scalar>(
    tape: &mut Tape<T>,
    anchors: Var,
    candidates: Var,
    tau: T,
) -> Var {
    let eps = T::lit(NORM_EPS);
    let a = tape.l2_normalize_rows(anchors, eps);
    let c = tape.l2_normalize_rows(candidates, eps);
    let s = tape.matmul_tb(a, c);
    let s = tape.scale(s, T::one() / tau);
    let ls = tape.log_softmax_rows(s);
    let n = tape.value(anchors).rows();
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let picked = tape.pick(ls, &diag);
    let mean = tape.mean_all(picked);
    tape.scale(mean, -T::one())
}

/// Mean of the three cross-modality same-tick losses.
pub fn tape_multimodal_contrastive<T: Scalar>(
    tape: &mut Tape<T>,
    zg: Var,
    zb: Var,
    zc: Var,
    tau: T,
) -> Var {
    let l1 = tape_contrastive(tape, zg, zb, tau);
    let l2 = tape_contrastive(tape, zg, zc, tau);
    let l3 = tape_contrastive(tape, zb, zc, tau);
    let s = tape.add(l1, l2);
    let s = tape.add(s, l3);
    tape.scale(s, T::lit(1.0 / 3.0))
}

/// Warping path (0-based indices) and accumulated cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentResult<N> {
    pub cost: N,
    pub path: Vec<(usize, usize)>,
}

fn sq_dist<N: Num + Copy + PartialOrd>(a: &[N], b: &[N]) -> N {
    a.iter().zip(b).fold(N::zero(), |acc, (&x, &y)| {
        let d = if x > y { x - y } else { y - x };
        acc + d * d
    })
}

/// Dynamic time warping with squared-Euclidean local cost. `band` restricts
/// cells to `|i − j| ≤ max(band, |N − M|)`.
pub fn dtw_align<N, V>(a: &[V], b: &[V], band: Option<usize>) -> Result<AlignmentResult<N>>
where
    N: Num + Copy + PartialOrd,
    V: AsRef<[N]>,
{
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return arg_err("dtw_align needs two non-empty sequences");
    }
    let width = a[0].as_ref().len();
    if a.iter().chain(b).any(|v| v.as_ref().len() != width) {
        return arg_err("dtw_align elements have inconsistent dimensions");
    }
    let reach = band.map(|w| w.max(n.abs_diff(m)));
    let inside = |i: usize, j: usize| reach.map_or(true, |r| i.abs_diff(j) <= r);
    // None plays the role of +∞ on the borders and outside the band
    let mut d: Vec<Option<N>> = vec![None; n * m];
    let at = |d: &Vec<Option<N>>, i: usize, j: usize| d[i * m + j];
    for i in 0..n {
        for j in 0..m {
            if !inside(i, j) {
                continue;
            }
            let local = sq_dist(a[i].as_ref(), b[j].as_ref());
            let best = if i == 0 && j == 0 {
                Some(N::zero())
            } else {
                let cands = [
                    (i > 0 && j > 0).then(|| at(&d, i - 1, j - 1)).flatten(),
                    (i > 0).then(|| at(&d, i - 1, j)).flatten(),
                    (j > 0).then(|| at(&d, i, j - 1)).flatten(),
                ];
                min_opt(&cands)
            };
            d[i * m + j] = best.map(|b| b + local);
        }
    }
    let Some(cost) = at(&d, n - 1, m - 1) else {
        return arg_err("no warping path fits inside the band");
    };
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let steps = [
            (i > 0 && j > 0).then(|| (i - 1, j - 1)),
            i.checked_sub(1).map(|p| (p, j)),
            j.checked_sub(1).map(|p| (i, p)),
        ];
        let mut next: Option<((usize, usize), N)> = None;
        for (pi, pj) in steps.into_iter().flatten() {
            if let Some(v) = at(&d, pi, pj) {
                if next.map_or(true, |(_, bv)| v < bv) {
                    next = Some(((pi, pj), v));
                }
            }
        }
        let ((pi, pj), _) = next.expect("a finite predecessor exists for every reachable cell");
        i = pi;
        j = pj;
        path.push((i, j));
    }
    path.reverse();
    Ok(AlignmentResult { cost, path })
}

fn min_opt<N: Copy + PartialOrd>(xs: &[Option<N>]) -> Option<N> {
    xs.iter().flatten().copied().fold(None, |acc, x| match acc {
        Some(a) if a <= x => Some(a),
        _ => Some(x),
    })
}

/// [`dtw_align`] over two embedding sequences.
pub fn dtw_align_embeddings<T: Scalar>(
    a: &EmbeddingSequence<T>,
    b: &EmbeddingSequence<T>,
    band: Option<usize>,
) -> Result<AlignmentResult<T>> {
    let ra: Vec<&[T]> = a.vectors().row_iter().collect();
    let rb: Vec<&[T]> = b.vectors().row_iter().collect();
    dtw_align(&ra, &rb, band)
}

/// Row-averaging matrix `P` (`n × m`) such that `P·B` holds, for each row of
/// the reference, the mean of the `B` rows the path matches to it.
pub fn path_averaging<T: Scalar>(path: &[(usize, usize)], n: usize, m: usize) -> Matrix<T> {
    let mut p = Matrix::zeros(n, m);
    let mut counts = vec![0usize; n];
    for &(i, j) in path {
        p[(i, j)] += T::one();
        counts[i] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 {
            let inv = T::one() / T::from_count(c);
            p.row_mut(i).iter_mut().for_each(|x| *x *= inv);
        }
    }
    p
}

/// DTW fusion: bio and context aligned onto the gaze timeline and averaged
/// with it, one fused vector per gaze tick.
pub fn dtw_fuse<T: Scalar>(
    zg: &EmbeddingSequence<T>,
    zb: &EmbeddingSequence<T>,
    zc: &EmbeddingSequence<T>,
    band: Option<usize>,
) -> Result<EmbeddingSequence<T>> {
    let (pb, pc) = dtw_projections(zg.vectors(), zb.vectors(), zc.vectors(), band)?;
    let fused = zg
        .vectors()
        .add(&pb.matmul(zb.vectors())?)?
        .add(&pc.matmul(zc.vectors())?)?
        .scale(T::lit(1.0 / 3.0));
    EmbeddingSequence::new(fused, Modality::Fused, zg.timestamps().to_vec())
}

/// Averaging matrices mapping bio and context rows onto gaze rows.
pub fn dtw_projections<T: Scalar>(
    zg: &Matrix<T>,
    zb: &Matrix<T>,
    zc: &Matrix<T>,
    band: Option<usize>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let rg: Vec<&[T]> = zg.row_iter().collect();
    let rb: Vec<&[T]> = zb.row_iter().collect();
    let rc: Vec<&[T]> = zc.row_iter().collect();
    let ab = dtw_align(&rg, &rb, band)?;
    let ac = dtw_align(&rg, &rc, band)?;
    Ok((
        path_averaging(&ab.path, zg.rows(), zb.rows()),
        path_averaging(&ac.path, zg.rows(), zc.rows()),
    ))
}

/// Tape form of [`dtw_fuse`]; the warping paths are treated as constants.
pub fn tape_dtw_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    zg: Var,
    zb: Var,
    zc: Var,
    band: Option<usize>,
) -> Result<Var> {
    let (pb, pc) = dtw_projections(tape.value(zg), tape.value(zb), tape.value(zc), band)?;
    let pb = tape.constant(pb);
    let pc = tape.constant(pc);
    let b = tape.matmul(pb, zb);
    let c = tape.matmul(pc, zc);
    let s = tape.add(zg, b);
    let s = tape.add(s, c);
    Ok(tape.scale(s, T::lit(1.0 / 3.0)))
}

fn check_aligned<T: Scalar>(zg: &Matrix<T>, zb: &Matrix<T>, zc: &Matrix<T>) -> Result<()> {
    if zg.rows() == 0 {
        return arg_err("attention_align needs non-empty sequences");
    }
    if zg.shape() != zb.shape() || zg.shape() != zc.shape() {
        return arg_err(format!(
            "modality shapes differ: {:?}, {:?}, {:?}",
            zg.shape(),
            zb.shape(),
            zc.shape()
        ));
    }
    Ok(())
}

/// Cross-modal attention over the concatenated `3N`-token timeline. The query
/// at tick `t` is `(z_g + z_b + z_c)_t W_q`; keys and values are every token
/// of every modality. Output: one fused vector per tick.
pub fn attention_align<T: Scalar>(
    zg: &EmbeddingSequence<T>,
    zb: &EmbeddingSequence<T>,
    zc: &EmbeddingSequence<T>,
    params: &EncoderParams<T>,
) -> Result<EmbeddingSequence<T>> {
    let (g, b, c) = (zg.vectors(), zb.vectors(), zc.vectors());
    check_aligned(g, b, c)?;
    let ps = &params.params;
    let q = g.add(b)?.add(c)?.matmul(ps.get("align.wq")?)?;
    let tokens = Matrix::concat_rows(&[g, b, c])?;
    let k = tokens.matmul(ps.get("align.wk")?)?;
    let v = tokens.matmul(ps.get("align.wv")?)?;
    let scale = T::one() / T::from_count(g.cols()).sqrt();
    let fused = softmax_attention_scaled(&q, &k, &v, scale, None)?;
    EmbeddingSequence::new(fused, Modality::Fused, zg.timestamps().to_vec())
}

/// Tape form of [`attention_align`].
pub fn tape_attention_align<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    zg: Var,
    zb: Var,
    zc: Var,
) -> Var {
    let d = tape.value(zg).cols();
    let s = tape.add(zg, zb);
    let s = tape.add(s, zc);
    let q = tape.matmul(s, bound.var("align.wq"));
    let tokens = tape.concat_rows(&[zg, zb, zc]);
    let k = tape.matmul(tokens, bound.var("align.wk"));
    let v = tape.matmul(tokens, bound.var("align.wv"));
    tape_softmax_attention(tape, q, k, v, T::one() / T::from_count(d).sqrt())
}

/// Writes `tick, modality, e0..e{d-1}` rows for each sequence.
pub fn write_embeddings_csv<T: Scalar, W: Write>(
    out: W,
    seqs: &[&EmbeddingSequence<T>],
) -> Result<()> {
    let dim = seqs.first().map_or(0, |s| s.dim());
    if seqs.iter().any(|s| s.dim() != dim) {
        return arg_err("embedding sequences have different widths");
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["tick".to_string(), "modality".to_string()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for s in seqs {
        for (row, &t) in s.vectors().row_iter().zip(s.timestamps()) {
            let mut rec = vec![t.to_string(), s.modality().as_str().to_string()];
            rec.extend(row.iter().map(|v| format!("{:.9}", v.as_f64())));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Rational64;

    fn shape(dim: usize) -> EncoderShape {
        EncoderShape {
            gaze_in: 2,
            bio_in: 3,
            context_in: 4,
            hidden: 8,
            dim,
        }
    }

    fn seq(m: Matrix<f64>) -> EmbeddingSequence<f64> {
        let n = m.rows();
        EmbeddingSequence::new(m, Modality::Gaze, (0..n).collect()).unwrap()
    }

    #[test]
    fn encoder_shape_and_zero_contracts() {
        let zero = EncoderParams::<f64>::zeros(shape(EMBED_DIM)).unwrap();
        let z = encode_modality(
            &Matrix::zeros(5, 2),
            (0..5).collect(),
            &zero,
            Modality::Gaze,
        )
        .unwrap();
        assert!(z.vectors().as_slice().iter().all(|&x| x == 0.0));

        let p = EncoderParams::<f64>::init(shape(EMBED_DIM), 3).unwrap();
        let samples = Matrix::randn(30, 2, 1.0, &mut rng::stream(1, "g"));
        let win = sliding_windows(&samples, 1, 1).unwrap();
        let a = encode_modality(&win, (0..30).collect(), &p, Modality::Gaze).unwrap();
        let b = encode_modality(&win, (0..30).collect(), &p, Modality::Gaze).unwrap();
        assert_eq!((a.len(), a.dim()), (30, 128));
        assert_eq!(a, b);
        assert!(encode_modality(&win, (0..30).collect(), &p, Modality::Bio).is_err());
        assert!(encode_modality(&win, (0..29).collect(), &p, Modality::Gaze).is_err());
    }

    #[test]
    fn sliding_window_layout() {
        let s = Matrix::from_rows(&[[1.0, 10.0], [2.0, 20.0], [3.0, 30.0], [4.0, 40.0]]).unwrap();
        let w = sliding_windows(&s, 2, 2).unwrap();
        assert_eq!(w.shape(), (2, 4));
        assert_eq!(w.row(1), &[3.0, 30.0, 4.0, 40.0]);
        assert!(sliding_windows(&s, 5, 1).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let a = seq(Matrix::from_rows(&[[1.0, 0.0]]).unwrap());
        let c = seq(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let l = contrastive_loss(&a, &c, &[(0, 0)], 0.1).unwrap();
        let expect = (1.0 + (-10.0f64).exp()).ln();
        assert!((l - expect).abs() < 1e-15);
        assert!((l - 4.54e-5).abs() < 1e-7);

        let same = seq(Matrix::from_rows(&[[0.6, 0.8], [0.6, 0.8]]).unwrap());
        let l = contrastive_loss(
            &seq(Matrix::from_rows(&[[0.6, 0.8]]).unwrap()),
            &same,
            &[(0, 0)],
            0.1,
        )
        .unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        assert!(contrastive_loss(&a, &c, &[], 0.1).is_err());
        assert!(contrastive_loss(&a, &c, &[(0, 2)], 0.1).is_err());
        assert!(contrastive_loss(&a, &c, &[(0, 0)], 0.0).is_err());
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut r = rng::stream(9, "cl");
        let a = Matrix::<f64>::randn(4, 5, 1.0, &mut r);
        let c = Matrix::<f64>::randn(6, 5, 1.0, &mut r);
        let pairs = [(0, 1), (1, 1), (2, 4), (3, 0)];
        let out = contrastive_loss_grad(&a, &c, &pairs, 0.1).unwrap();
        let h = 1e-6;
        let check = |m: &Matrix<f64>, g: &Matrix<f64>, is_anchor: bool| {
            for i in 0..m.len() {
                let eval = |d: f64| {
                    let mut mp = m.clone();
                    mp.as_mut_slice()[i] += d;
                    let (aa, cc) = if is_anchor { (&mp, &c) } else { (&a, &mp) };
                    contrastive_loss_grad(aa, cc, &pairs, 0.1).unwrap().loss
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.as_slice()[i];
                let rel = (num - an).abs() / num.abs().max(an.abs()).max(1e-3);
                assert!(rel < 1e-4, "entry {i}: {an} vs {num}");
            }
        };
        check(&a, &out.grad_anchors, true);
        check(&c, &out.grad_candidates, false);

        // tape form agrees on same-tick pairs
        let c4 = c.gather_rows(&[0, 1, 2, 3]);
        let diag = [(0, 0), (1, 1), (2, 2), (3, 3)];
        let plain = contrastive_loss_grad(&a, &c4, &diag, 0.1).unwrap();
        let mut t = Tape::new();
        let (va, vc) = (t.leaf(a.clone()), t.leaf(c4.clone()));
        let l = tape_contrastive(&mut t, va, vc, 0.1);
        assert!((t.scalar(l) - plain.loss).abs() < 1e-12);
        let g = t.backward(l);
        assert!(
            g.get(va)
                .unwrap()
                .sub(&plain.grad_anchors)
                .unwrap()
                .max_abs()
                < 1e-10
        );
        assert!(
            g.get(vc)
                .unwrap()
                .sub(&plain.grad_candidates)
                .unwrap()
                .max_abs()
                < 1e-10
        );
    }

    #[test]
    fn lower_temperature_sharpens_a_dominant_positive() {
        let a = seq(Matrix::from_rows(&[[1.0, 0.0]]).unwrap());
        let c = seq(Matrix::from_rows(&[[0.9, 0.1], [0.2, 0.9], [-0.5, 0.5]]).unwrap());
        let taus = [0.1, 0.07, 0.05, 0.02];
        let losses: Vec<f64> = taus
            .iter()
            .map(|&t| contrastive_loss(&a, &c, &[(0, 0)], t).unwrap())
            .collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn dtw_examples() {
        let a = [[1.0f64], [2.0], [3.0]];
        let r = dtw_align(&a, &a, None).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.path, vec![(0, 0), (1, 1), (2, 2)]);
        let r = dtw_align(&[[0.0f64], [0.0]], &[[1.0]], None).unwrap();
        assert_eq!(r.cost, 2.0);
        assert_eq!(r.path, vec![(0, 0), (1, 0)]);
        assert!(dtw_align::<f64, [f64; 1]>(&[], &a, None).is_err());
    }

    /// Minimum over every monotone path from (0,0) to (n-1,m-1).
    fn brute_force(a: &[[i64; 1]], b: &[[i64; 1]]) -> i64 {
        fn go(a: &[[i64; 1]], b: &[[i64; 1]], i: usize, j: usize) -> i64 {
            let local = (a[i][0] - b[j][0]).pow(2);
            if i + 1 == a.len() && j + 1 == b.len() {
                return local;
            }
            let mut best = i64::MAX;
            if i + 1 < a.len() {
                best = best.min(go(a, b, i + 1, j));
            }
            if j + 1 < b.len() {
                best = best.min(go(a, b, i, j + 1));
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                best = best.min(go(a, b, i + 1, j + 1));
            }
            local + best
        }
        go(a, b, 0, 0)
    }

    fn all_sequences(len: usize) -> Vec<Vec<[i64; 1]>> {
        (0..3usize.pow(len as u32))
            .map(|mut code| {
                (0..len)
                    .map(|_| {
                        let v = (code % 3) as i64;
                        code /= 3;
                        [v]
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn dtw_matches_exhaustive_path_enumeration() {
        // all pairs up to length 3, plus a sparse sweep of longer ones
        for n in 1..=5usize {
            for m in 1..=5usize {
                let (sa, sb) = (all_sequences(n), all_sequences(m));
                let step_a = if n > 3 { 7 } else { 1 };
                let step_b = if m > 3 { 11 } else { 1 };
                for a in sa.iter().step_by(step_a) {
                    for b in sb.iter().step_by(step_b) {
                        let r = dtw_align(a, b, None).unwrap();
                        assert_eq!(r.cost, brute_force(a, b), "{a:?} {b:?}");
                        assert_eq!(r.path.first(), Some(&(0, 0)));
                        assert_eq!(r.path.last(), Some(&(n - 1, m - 1)));
                        for w in r.path.windows(2) {
                            let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                            assert!([(1, 0), (0, 1), (1, 1)].contains(&step));
                        }
                        let path_cost: i64 = r
                            .path
                            .iter()
                            .map(|&(i, j)| (a[i][0] - b[j][0]).pow(2))
                            .sum();
                        assert_eq!(path_cost, r.cost);
                    }
                }
            }
        }
    }

    #[test]
    fn dtw_is_generic_over_exact_rationals() {
        let half = Rational64::new(1, 2);
        let a = [[Rational64::from_integer(0)], [half]];
        let b = [[Rational64::from_integer(1)]];
        let r = dtw_align(&a, &b, None).unwrap();
        assert_eq!(r.cost, Rational64::new(5, 4));
    }

    #[test]
    fn dtw_band_limits_the_path() {
        let a: Vec<[f64; 1]> = (0..8).map(|i| [i as f64]).collect();
        let b: Vec<[f64; 1]> = (0..8).map(|i| [(i as f64 - 2.0).max(0.0)]).collect();
        let free = dtw_align(&a, &b, None).unwrap();
        let banded = dtw_align(&a, &b, Some(0)).unwrap();
        assert!(banded.cost >= free.cost);
        assert!(banded.path.iter().all(|&(i, j)| i == j));
    }

    #[test]
    fn attention_align_contracts() {
        let p = EncoderParams::<f64>::init(shape(16), 5).unwrap();
        let mut r = rng::stream(4, "aa");
        let mk = |r: &mut rng::Rng, n: usize, m: Modality| {
            EmbeddingSequence::new(Matrix::randn(n, 16, 1.0, r), m, (0..n).collect()).unwrap()
        };
        let (g, b, c) = (
            mk(&mut r, 100, Modality::Gaze),
            mk(&mut r, 100, Modality::Bio),
            mk(&mut r, 100, Modality::Context),
        );
        let f = attention_align(&g, &b, &c, &p).unwrap();
        assert_eq!((f.len(), f.dim(), f.modality()), (100, 16, Modality::Fused));

        // swapping two modalities leaves the fused output unchanged
        let f2 = attention_align(&b, &g, &c, &p).unwrap();
        assert!(f.vectors().sub(f2.vectors()).unwrap().max_abs() < 1e-12);

        // single tick: output lies in the convex hull of the value projections
        let (g1, b1, c1) = (
            mk(&mut r, 1, Modality::Gaze),
            mk(&mut r, 1, Modality::Bio),
            mk(&mut r, 1, Modality::Context),
        );
        let f1 = attention_align(&g1, &b1, &c1, &p).unwrap();
        let tokens = Matrix::concat_rows(&[g1.vectors(), b1.vectors(), c1.vectors()]).unwrap();
        let v = tokens.matmul(p.params.get("align.wv").unwrap()).unwrap();
        let q = g1
            .vectors()
            .add(b1.vectors())
            .unwrap()
            .add(c1.vectors())
            .unwrap();
        let q = q.matmul(p.params.get("align.wq").unwrap()).unwrap();
        let k = tokens.matmul(p.params.get("align.wk").unwrap()).unwrap();
        let w = crate::attention::softmax_weights(&q, &k, 0.25, None).unwrap();
        assert!((w.sum() - 1.0).abs() < 1e-12);
        let expect = w.matmul(&v).unwrap();
        assert!(f1.vectors().sub(&expect).unwrap().max_abs() < 1e-12);

        assert!(attention_align(&g, &b1, &c, &p).is_err());

        let mut t = Tape::new();
        let bound = p.params.bind(&mut t);
        let (vg, vb, vc) = (
            t.leaf(g.vectors().clone()),
            t.leaf(b.vectors().clone()),
            t.leaf(c.vectors().clone()),
        );
        let tf = tape_attention_align(&mut t, &bound, vg, vb, vc);
        assert!(t.value(tf).sub(f.vectors()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn dtw_fuse_of_identical_streams_is_identity() {
        let m = Matrix::randn(6, 4, 1.0, &mut rng::stream(2, "df"));
        let g = seq(m.clone());
        let f = dtw_fuse(&g, &g, &g, None).unwrap();
        assert!(f.vectors().sub(&m).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn embeddings_csv_has_header_and_rows() {
        let g = seq(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let mut buf = Vec::new();
        write_embeddings_csv(&mut buf, &[&g]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "tick,modality,e0,e1");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,gaze,3.0"));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn seqs() -> impl Strategy<Value = Vec<[f64; 2]>> {
            prop::collection::vec(prop::array::uniform2(-3.0f64..3.0), 1..8)
        }

        proptest! {
            #[test]
            fn dtw_cost_is_symmetric(a in seqs(), b in seqs()) {
                let ab = dtw_align(&a, &b, None).unwrap().cost;
                let ba = dtw_align(&b, &a, None).unwrap().cost;
                prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab.abs()));
            }

            #[test]
            fn dtw_cost_zero_iff_equal(a in seqs(), b in seqs()) {
                prop_assert_eq!(dtw_align(&a, &a, None).unwrap().cost, 0.0);
                let cost = dtw_align(&a, &b, None).unwrap().cost;
                if a != b && a.len() == b.len() {
                    prop_assert!(cost > 0.0);
                }
            }

            #[test]
            fn contrastive_loss_is_non_negative(v in prop::collection::vec(-5.0f64..5.0, 12),
                                                tau in 0.01f64..2.0) {
                let a = Matrix::from_vec(2, 3, v[..6].to_vec()).unwrap();
                let c = Matrix::from_vec(2, 3, v[6..].to_vec()).unwrap();
                let l = contrastive_loss_grad(&a, &c, &[(0, 0), (1, 1)], tau).unwrap().loss;
                prop_assert!(l >= 0.0);
            }
        }
    }
}
