//! Intent predictor: a pre-norm transformer over fused embeddings with a
//! choice of attention kernel and a variational Gaussian output layer.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attention::{
    tape_linear_attention, tape_softmax_attention, AttentionKind, LinearNorm, LINEAR_DENOM_EPS,
};
use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::error::{arg_err, config_err, Result, ZiaError};
use crate::fusion::EmbeddingSequence;
use crate::matrix::Matrix;
use crate::params::{Bound, ParamKind, ParamSet};
use crate::rng;
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;
/// Initial posterior standard deviation of the output layer.
pub const INIT_SIGMA: f64 = 0.01;

/// Divisor applied to attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `√(model_dim / heads)`.
    #[default]
    PerHead,
    /// `√model_dim` for every head.
    FullModel,
}

/// How the final sequence representation is reduced to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Representation of the most recent tick.
    #[default]
    Last,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub sequence_len: usize,
    pub attention_kind: AttentionKind,
    pub intent_count: usize,
    pub linear_norm: LinearNorm,
    pub attention_scale: AttentionScale,
    pub pooling: Pooling,
    pub positional_encoding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TransformerConfig {
    /// 6 layers, width 128, 8 heads, 100 tokens, 10 intents.
    pub fn paper() -> Self {
        Self {
            layers: 6,
            model_dim: 128,
            heads: 8,
            ffn_dim: 512,
            sequence_len: 100,
            attention_kind: AttentionKind::Softmax,
            intent_count: 10,
            linear_norm: LinearNorm::Normalized,
            attention_scale: AttentionScale::PerHead,
            pooling: Pooling::Last,
            positional_encoding: true,
        }
    }

    /// Small model trained in tests and the desk-scale experiments.
    pub fn reduced() -> Self {
        Self {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 128,
            sequence_len: 8,
            ..Self::paper()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return config_err("transformer needs at least one layer");
        }
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return config_err(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.ffn_dim == 0 || self.sequence_len == 0 {
            return config_err("ffn_dim and sequence_len must be positive");
        }
        if !(2..=100).contains(&self.intent_count) {
            return config_err(format!(
                "intent_count must lie in 2..=100, got {}",
                self.intent_count
            ));
        }
        Ok(())
    }

    fn score_scale<T: Scalar>(&self) -> T {
        let d = match self.attention_scale {
            AttentionScale::PerHead => self.head_dim(),
            AttentionScale::FullModel => self.model_dim,
        };
        T::one() / T::from_count(d).sqrt()
    }
}

fn layer_name(l: usize, part: &str) -> String {
    format!("layer{l}.{part}")
}

/// Scaled Gaussian initialisation; layer-norm gains one, biases zero,
/// output-layer log-σ at `ln INIT_SIGMA`.
pub fn init_weights<T: Scalar>(config: &TransformerConfig, seed: u64) -> Result<ParamSet<T>> {
    config.validate()?;
    let (d, f, k) = (config.model_dim, config.ffn_dim, config.intent_count);
    let mut ps = ParamSet::new();
    let gauss = |name: &str, rows: usize, cols: usize| {
        let mut r = rng::stream(seed, name);
        Matrix::randn(rows, cols, T::one() / T::from_count(rows).sqrt(), &mut r)
    };
    for l in 0..config.layers {
        for ln in ["ln1", "ln2"] {
            ps.insert(
                layer_name(l, &format!("{ln}.g")),
                ParamKind::Norm,
                Matrix::filled(1, d, T::one()),
            )?;
            ps.insert(
                layer_name(l, &format!("{ln}.b")),
                ParamKind::Bias,
                Matrix::zeros(1, d),
            )?;
        }
        for w in ["wq", "wk", "wv", "wo"] {
            let n = layer_name(l, w);
            let m = gauss(&n, d, d);
            ps.insert(n, ParamKind::Weight, m)?;
        }
        let n = layer_name(l, "ffn.w1");
        let m = gauss(&n, d, f);
        ps.insert(n, ParamKind::Weight, m)?;
        ps.insert(
            layer_name(l, "ffn.b1"),
            ParamKind::Bias,
            Matrix::zeros(1, f),
        )?;
        let n = layer_name(l, "ffn.w2");
        let m = gauss(&n, f, d);
        ps.insert(n, ParamKind::Weight, m)?;
        ps.insert(
            layer_name(l, "ffn.b2"),
            ParamKind::Bias,
            Matrix::zeros(1, d),
        )?;
    }
    ps.insert(
        "final_ln.g",
        ParamKind::Norm,
        Matrix::filled(1, d, T::one()),
    )?;
    ps.insert("final_ln.b", ParamKind::Bias, Matrix::zeros(1, d))?;
    ps.insert("head.mu", ParamKind::Weight, gauss("head.mu", d, k))?;
    ps.insert(
        "head.logsigma",
        ParamKind::LogSigma,
        Matrix::filled(d, k, T::lit(INIT_SIGMA.ln())),
    )?;
    ps.insert("head.b", ParamKind::Bias, Matrix::zeros(1, k))?;
    Ok(ps)
}

/// Every tensor zero except the log-σ, kept at `ln INIT_SIGMA`.
pub fn zero_weights<T: Scalar>(config: &TransformerConfig) -> Result<ParamSet<T>> {
    let mut ps = init_weights(config, 0)?;
    for p in ps.iter_mut() {
        if p.kind != ParamKind::LogSigma {
            p.value = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }
    Ok(ps)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, x: Var, prefix: &str) -> Var {
    let n = tape.layer_norm_rows(x, T::lit(LN_EPS));
    let n = tape.mul_row(n, bound.var(&format!("{prefix}.g")));
    tape.add_row(n, bound.var(&format!("{prefix}.b")))
}

/// Trunk on the tape: positional encoding, pre-norm blocks, final norm and
/// pooling. Returns the `1 × d` pooled representation.
pub fn tape_trunk<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    config: &TransformerConfig,
    z: Var,
) -> Var {
    let (n, d) = tape.value(z).shape();
    let mut x = z;
    if config.positional_encoding {
        let pe = tape.constant(crate::attention::positional_encoding(n, d));
        x = tape.add(x, pe);
    }
    let dh = config.head_dim();
    let scale = config.score_scale::<T>();
    for l in 0..config.layers {
        let h = norm(tape, bound, x, &layer_name(l, "ln1"));
        let q = tape.matmul(h, bound.var(&layer_name(l, "wq")));
        let k = tape.matmul(h, bound.var(&layer_name(l, "wk")));
        let v = tape.matmul(h, bound.var(&layer_name(l, "wv")));
        let mut heads = Vec::with_capacity(config.heads);
        for i in 0..config.heads {
            let qi = tape.slice_cols(q, i * dh, dh);
            let ki = tape.slice_cols(k, i * dh, dh);
            let vi = tape.slice_cols(v, i * dh, dh);
            heads.push(match config.attention_kind {
                AttentionKind::Softmax => tape_softmax_attention(tape, qi, ki, vi, scale),
                AttentionKind::Linear => tape_linear_attention(
                    tape,
                    qi,
                    ki,
                    vi,
                    config.linear_norm,
                    T::lit(LINEAR_DENOM_EPS),
                ),
            });
        }
        let a = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let a = tape.matmul(a, bound.var(&layer_name(l, "wo")));
        x = tape.add(x, a);
        let h = norm(tape, bound, x, &layer_name(l, "ln2"));
        let f = tape.affine(
            h,
            bound.var(&layer_name(l, "ffn.w1")),
            bound.var(&layer_name(l, "ffn.b1")),
        );
        let f = tape.gelu(f);
        let f = tape.affine(
            f,
            bound.var(&layer_name(l, "ffn.w2")),
            bound.var(&layer_name(l, "ffn.b2")),
        );
        x = tape.add(x, f);
    }
    let x = norm(tape, bound, x, "final_ln");
    match config.pooling {
        Pooling::Last => tape.gather_rows(x, &[n - 1]),
        Pooling::Mean => tape.mean_rows(x),
    }
}

/// Output-layer weight `μ + σ ⊙ ε` on the tape; `eps = None` uses `μ`.
pub fn tape_head_weight<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    eps: Option<Matrix<T>>,
) -> Var {
    let mu = bound.var("head.mu");
    match eps {
        None => mu,
        Some(e) => {
            let sigma = tape.exp(bound.var("head.logsigma"));
            let e = tape.constant(e);
            let noise = tape.hadamard(sigma, e);
            tape.add(mu, noise)
        }
    }
}

/// Closed-form KL of the output-layer posterior against N(0, 1), on the tape.
pub fn tape_head_kl<T: Scalar>(tape: &mut Tape<T>, bound: &Bound) -> Var {
    let mu = bound.var("head.mu");
    let ls = bound.var("head.logsigma");
    let count = tape.value(mu).len();
    let mu2 = tape.hadamard(mu, mu);
    let two_ls = tape.scale(ls, T::lit(2.0));
    let s2 = tape.exp(two_ls);
    let a = tape.sum_all(mu2);
    let b = tape.sum_all(s2);
    let c = tape.sum_all(ls);
    let ab = tape.add(a, b);
    let half = tape.scale(ab, T::lit(0.5));
    let kl = tape.sub(half, c);
    let offset = tape.constant(Matrix::filled(1, 1, T::lit(0.5) * T::from_count(count)));
    tape.sub(kl, offset)
}

fn check_input<T: Scalar>(z: &EmbeddingSequence<T>, config: &TransformerConfig) -> Result<()> {
    config.validate()?;
    if z.is_empty() {
        return arg_err("transformer input is empty");
    }
    if z.len() > config.sequence_len {
        return arg_err(format!(
            "input length {} exceeds sequence_len {}",
            z.len(),
            config.sequence_len
        ));
    }
    if z.dim() != config.model_dim {
        return arg_err(format!(
            "input width {} differs from model_dim {}",
            z.dim(),
            config.model_dim
        ));
    }
    Ok(())
}

/// Pooled representation and the number of guarded linear-attention denominators.
pub fn pooled_features<T: Scalar>(
    z: &EmbeddingSequence<T>,
    config: &TransformerConfig,
    weights: &ParamSet<T>,
) -> Result<(Matrix<T>, usize)> {
    check_input(z, config)?;
    let mut tape = Tape::new();
    let bound = weights.bind(&mut tape);
    let zv = tape.constant(z.vectors().clone());
    let pooled = tape_trunk(&mut tape, &bound, config, zv);
    let out = tape.value(pooled).clone();
    if !out.is_finite() {
        return Err(ZiaError::Numerical(
            "non-finite transformer activations".into(),
        ));
    }
    Ok((out, tape.guard_hits()))
}

/// Deterministic logits with the output layer at its posterior mean.
pub fn transformer_forward<T: Scalar>(
    z: &EmbeddingSequence<T>,
    config: &TransformerConfig,
    weights: &ParamSet<T>,
) -> Result<Vec<T>> {
    let (pooled, _) = pooled_features(z, config, weights)?;
    head_logits(&pooled, weights.get("head.mu")?, weights.get("head.b")?)
}

fn head_logits<T: Scalar>(pooled: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Vec<T>> {
    let l = pooled.matmul(w)?;
    Ok(l.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| x + y)
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Diagonal Gaussian posterior over the output-layer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior<T> {
    pub mu: Matrix<T>,
    pub sigma: Matrix<T>,
}

impl<T: Scalar> VariationalPosterior<T> {
    pub fn new(mu: Matrix<T>, sigma: Matrix<T>) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return arg_err("posterior mean and sigma shapes differ");
        }
        if sigma.as_slice().iter().any(|&s| !(s > T::zero())) {
            return Err(ZiaError::Invariant(
                "posterior sigma must be positive".into(),
            ));
        }
        Ok(Self { mu, sigma })
    }

    pub fn from_params(ps: &ParamSet<T>) -> Result<Self> {
        Self::new(
            ps.get("head.mu")?.clone(),
            ps.get("head.logsigma")?.map(|x| x.exp()),
        )
    }

    pub fn kl(&self) -> Result<T> {
        kl_gaussian(self.mu.as_slice(), self.sigma.as_slice())
    }
}

/// `Σ (μ² + σ² − 1)/2 − ln σ`, the KL of N(μ, σ²) from N(0, 1) in nats.
pub fn kl_gaussian<T: Scalar>(mu: &[T], sigma: &[T]) -> Result<T> {
    if mu.len() != sigma.len() {
        return arg_err("kl_gaussian needs equally long mu and sigma");
    }
    let mut kl = T::zero();
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > T::zero()) {
            return Err(ZiaError::Invariant(format!(
                "sigma must be positive, got {s}"
            )));
        }
        kl += (m * m + s * s - T::one()) / T::lit(2.0) - s.ln();
    }
    Ok(kl)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntentDistribution<T> {
    pub probs: Vec<T>,
    pub entropy_bits: T,
    pub sample_count: usize,
}

impl<T: Scalar> IntentDistribution<T> {
    pub fn from_probs(probs: Vec<T>, sample_count: usize) -> Result<Self> {
        let total: T = probs.iter().copied().sum();
        if probs.is_empty()
            || (total - T::one()).abs() > T::lit(1e-6)
            || probs.iter().any(|&p| p < T::zero())
        {
            return Err(ZiaError::Invariant(format!(
                "probabilities do not form a distribution (sum {total})"
            )));
        }
        let entropy_bits = -probs
            .iter()
            .filter(|&&p| p > T::zero())
            .map(|&p| p * p.log2())
            .sum::<T>();
        Ok(Self {
            probs,
            entropy_bits: entropy_bits.max(T::zero()),
            sample_count,
        })
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationalPrediction<T> {
    pub distribution: IntentDistribution<T>,
    /// Mean log-likelihood of the label minus `β·KL`; present when a label is given.
    pub elbo: Option<T>,
    pub kl: T,
}

/// Monte Carlo prediction: the trunk runs once, the output layer is sampled
/// `samples` times from the posterior and the softmaxed outputs averaged.
#[allow(clippy::too_many_arguments)]
pub fn variational_predict<T: Scalar>(
    z: &EmbeddingSequence<T>,
    weights: &ParamSet<T>,
    posterior: &VariationalPosterior<T>,
    config: &TransformerConfig,
    samples: usize,
    beta: T,
    label: Option<usize>,
    seed: u64,
) -> Result<VariationalPrediction<T>> {
    if samples == 0 {
        return arg_err("variational_predict needs at least one sample");
    }
    if beta < T::zero() {
        return arg_err("beta must be non-negative");
    }
    if let Some(y) = label {
        if y >= config.intent_count {
            return arg_err(format!("label {y} outside {} intents", config.intent_count));
        }
    }
    let (pooled, _) = pooled_features(z, config, weights)?;
    predict_from_pooled(
        &pooled,
        weights.get("head.b")?,
        posterior,
        samples,
        beta,
        label,
        seed,
    )
}

/// Sampling part of [`variational_predict`] on a precomputed representation.
pub fn predict_from_pooled<T: Scalar>(
    pooled: &Matrix<T>,
    bias: &Matrix<T>,
    posterior: &VariationalPosterior<T>,
    samples: usize,
    beta: T,
    label: Option<usize>,
    seed: u64,
) -> Result<VariationalPrediction<T>> {
    let (d, k) = posterior.mu.shape();
    let mut r = rng::stream(seed, "monte_carlo");
    let mut acc = vec![T::zero(); k];
    let mut loglik = T::zero();
    for _ in 0..samples {
        let eps = Matrix::<T>::randn(d, k, T::one(), &mut r);
        let mut sampled = posterior.mu.clone();
        for ((x, &s), &e) in sampled
            .as_mut_slice()
            .iter_mut()
            .zip(posterior.sigma.as_slice())
            .zip(eps.as_slice())
        {
            *x += s * e;
        }
        let mut logits = head_logits(pooled, &sampled, bias)?;
        softmax_in_place(&mut logits);
        if let Some(y) = label {
            loglik += logits[y].max(T::min_positive_value()).ln();
        }
        acc.iter_mut().zip(&logits).for_each(|(a, &p)| *a += p);
    }
    let n = T::from_count(samples);
    let probs: Vec<T> = acc.into_iter().map(|a| a / n).collect();
    // renormalise away accumulated rounding
    let total: T = probs.iter().copied().sum();
    let probs = probs.into_iter().map(|p| p / total).collect();
    let kl = posterior.kl()?;
    let elbo = label.map(|_| loglik / n - beta * kl);
    Ok(VariationalPrediction {
        distribution: IntentDistribution::from_probs(probs, samples)?,
        elbo,
        kl,
    })
}

/// Spread of the Monte Carlo estimate of one class probability across
/// independent seeds, for each sample count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McVariance {
    pub samples: usize,
    pub variance: f64,
}

/// Variance of `p̂[class]` over `repeats` seeds for every count in `counts`,
/// with the least-squares slope of `ln variance` against `ln samples`.
pub fn mc_variance_profile<T: Scalar>(
    pooled: &Matrix<T>,
    bias: &Matrix<T>,
    posterior: &VariationalPosterior<T>,
    counts: &[usize],
    repeats: usize,
    class: usize,
    seed: u64,
) -> Result<(Vec<McVariance>, f64)> {
    if counts.len() < 2 || repeats < 2 {
        return arg_err("variance profile needs two sample counts and two repeats");
    }
    if class >= posterior.mu.cols() {
        return arg_err(format!(
            "class {class} outside {} intents",
            posterior.mu.cols()
        ));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for (ci, &n) in counts.iter().enumerate() {
        let draws = (0..repeats)
            .map(|r| {
                let s = rng::derive_indexed(seed, "mc_variance", (ci * repeats + r) as u64);
                predict_from_pooled(pooled, bias, posterior, n, T::zero(), None, s)
                    .map(|p| p.distribution.probs[class].as_f64())
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean = draws.iter().sum::<f64>() / repeats as f64;
        let variance = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
        rows.push(McVariance {
            samples: n,
            variance,
        });
    }
    if rows.iter().any(|r| !(r.variance > 0.0)) {
        return Err(ZiaError::Numerical(
            "Monte Carlo variance collapsed to zero".into(),
        ));
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.samples as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.variance.ln()).collect();
    let (mx, my) = (
        xs.iter().sum::<f64>() / xs.len() as f64,
        ys.iter().sum::<f64>() / ys.len() as f64,
    );
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok((rows, sxy / sxx))
}

/// Checkpoint magic bytes.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZIAW";
pub const CHECKPOINT_VERSION: u32 = 1;

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::Norm => 2,
        ParamKind::LogSigma => 3,
    }
}

fn kind_from_code(c: u8) -> Result<ParamKind> {
    Ok(match c {
        0 => ParamKind::Weight,
        1 => ParamKind::Bias,
        2 => ParamKind::Norm,
        3 => ParamKind::LogSigma,
        _ => return arg_err(format!("unknown tensor kind code {c}")),
    })
}

/// Binary layout, little endian: magic `ZIAW`, `u32` version, `u32` tensor
/// count, then per tensor `u32` name length, UTF-8 name, `u8` kind, `u32`
/// rows, `u32` cols; then every tensor's values as `f32` in header order.
pub fn write_checkpoint<T: Scalar, W: Write>(mut out: W, params: &ParamSet<T>) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&[kind_code(p.kind)])?;
        out.write_all(&(p.value.rows() as u32).to_le_bytes())?;
        out.write_all(&(p.value.cols() as u32).to_le_bytes())?;
    }
    for p in params.iter() {
        for &v in p.value.as_slice() {
            out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<ParamSet<T>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return arg_err("not a weight checkpoint (bad magic)");
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return arg_err(format!("unsupported checkpoint version {version}"));
    }
    let count = read_u32(&mut input)? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|e| ZiaError::Argument(format!("tensor name: {e}")))?;
        let mut kind = [0u8; 1];
        input.read_exact(&mut kind)?;
        let rows = read_u32(&mut input)? as usize;
        let cols = read_u32(&mut input)? as usize;
        headers.push((name, kind_from_code(kind[0])?, rows, cols));
    }
    let mut ps = ParamSet::new();
    for (name, kind, rows, cols) in headers {
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 4];
        for _ in 0..rows * cols {
            input.read_exact(&mut b)?;
            data.push(T::lit(f32::from_le_bytes(b) as f64));
        }
        ps.insert(name, kind, Matrix::from_vec(rows, cols, data)?)?;
    }
    Ok(ps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
}

/// JSON sidecar describing a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: TransformerConfig,
    pub tensors: Vec<TensorInfo>,
    pub total_values: usize,
}

impl CheckpointMeta {
    pub fn describe<T: Scalar>(config: &TransformerConfig, params: &ParamSet<T>) -> Self {
        let tensors = params
            .iter()
            .map(|p| TensorInfo {
                name: p.name.clone(),
                kind: p.kind,
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect();
        Self {
            format_version: CHECKPOINT_VERSION,
            config: config.clone(),
            tensors,
            total_values: params.numel(),
        }
    }
}

/// One evaluated example.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow<T> {
    pub tick: usize,
    pub true_intent: usize,
    pub distribution: IntentDistribution<T>,
}

/// `tick, true_intent, argmax_intent, p0..p{k-1}`.
pub fn write_predictions_csv<T: Scalar, W: Write>(out: W, rows: &[PredictionRow<T>]) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.distribution.probs.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "tick".to_string(),
        "true_intent".into(),
        "argmax_intent".into(),
    ];
    header.extend((0..k).map(|i| format!("p{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.tick.to_string(),
            r.true_intent.to_string(),
            r.distribution.argmax().to_string(),
        ];
        rec.extend(
            r.distribution
                .probs
                .iter()
                .map(|p| format!("{:.9}", p.as_f64())),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
