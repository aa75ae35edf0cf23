//! Per-modality preprocessing: smoothing, outlier clipping, band-pass
//! filtering, ICA artifact removal and sinusoidal context encoding.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex_lite::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::signals::ContextObs;

/// Exponential moving average `y[t] = α x[t] + (1-α) y[t-1]`, `y[0] = x[0]`.
pub fn ema_smooth<T: Scalar>(x: &[T], alpha: T) -> Result<Vec<T>> {
    if x.is_empty() {
        return arg_err("ema_smooth needs a non-empty sequence");
    }
    if !(alpha > T::zero() && alpha <= T::one()) {
        return arg_err(format!("ema alpha must lie in (0, 1], got {alpha}"));
    }
    let mut out = Vec::with_capacity(x.len());
    let mut prev = x[0];
    out.push(prev);
    for &v in &x[1..] {
        prev = alpha * v + (T::one() - alpha) * prev;
        out.push(prev);
    }
    Ok(out)
}

/// Smoothing factor of the running baseline used by [`clip_outliers`].
pub const CLIP_BASELINE_ALPHA: f64 = 0.9;

/// Clamps deviations from a running EMA baseline to `±k·scale`.
pub fn clip_outliers<T: Scalar>(x: &[T], scale: T, k: T) -> Result<Vec<T>> {
    clip_outliers_with(x, scale, k, T::lit(CLIP_BASELINE_ALPHA))
}

/// [`clip_outliers`] with an explicit baseline smoothing factor. The baseline
/// at step `t` is the EMA of the already clipped samples up to `t - 1`.
pub fn clip_outliers_with<T: Scalar>(x: &[T], scale: T, k: T, alpha: T) -> Result<Vec<T>> {
    if !(scale > T::zero()) {
        return arg_err(format!("clip scale must be positive, got {scale}"));
    }
    let Some(&first) = x.first() else {
        return Ok(Vec::new());
    };
    let limit = k * scale;
    let mut out = Vec::with_capacity(x.len());
    out.push(first);
    let mut baseline = first;
    for &v in &x[1..] {
        let dev = v - baseline;
        let y = if dev > limit {
            baseline + limit
        } else if dev < -limit {
            baseline - limit
        } else {
            v
        };
        out.push(y);
        baseline = alpha * y + (T::one() - alpha) * baseline;
    }
    Ok(out)
}

/// Band-pass design parameters. `low_hz`/`high_hz` are the −3 dB corners of
/// a single pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub sample_rate_hz: f64,
    /// Order of the Butterworth low-pass prototype.
    pub order: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            low_hz: 8.0,
            high_hz: 30.0,
            sample_rate_hz: 256.0,
            order: 10,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        let nyq = self.sample_rate_hz / 2.0;
        if !(self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyq) {
            return config_err(format!(
                "band edges must satisfy 0 < low < high < fs/2, got [{}, {}] at {} Hz",
                self.low_hz, self.high_hz, self.sample_rate_hz
            ));
        }
        if self.order == 0 {
            return config_err("filter order must be at least 1");
        }
        Ok(())
    }
}

/// One second-order section `b0 + b1 z⁻¹ + b2 z⁻²` over `1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

/// Digital Butterworth band-pass as a cascade of biquads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandpassFilter {
    pub spec: FilterSpec,
    pub sections: Vec<Biquad>,
    /// Samples for the impulse response to decay below 1e-6 of its peak envelope.
    pub warmup: usize,
}

mod num_complex_lite {
    //! Minimal complex arithmetic for pole placement.
    use std::ops::{Add, Div, Mul, Neg, Sub};

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Complex {
        pub re: f64,
        pub im: f64,
    }

    impl Complex {
        pub fn new(re: f64, im: f64) -> Self {
            Self { re, im }
        }
        pub fn norm(self) -> f64 {
            self.re.hypot(self.im)
        }
        pub fn sqrt(self) -> Self {
            let r = self.norm();
            let re = ((r + self.re) / 2.0).max(0.0).sqrt();
            let im = ((r - self.re) / 2.0).max(0.0).sqrt().copysign(self.im);
            Self { re, im }
        }
        pub fn scale(self, s: f64) -> Self {
            Self {
                re: self.re * s,
                im: self.im * s,
            }
        }
        pub fn from_polar(r: f64, th: f64) -> Self {
            Self {
                re: r * th.cos(),
                im: r * th.sin(),
            }
        }
    }
    impl Add for Complex {
        type Output = Self;
        fn add(self, o: Self) -> Self {
            Self::new(self.re + o.re, self.im + o.im)
        }
    }
    impl Sub for Complex {
        type Output = Self;
        fn sub(self, o: Self) -> Self {
            Self::new(self.re - o.re, self.im - o.im)
        }
    }
    impl Mul for Complex {
        type Output = Self;
        fn mul(self, o: Self) -> Self {
            Self::new(
                self.re * o.re - self.im * o.im,
                self.re * o.im + self.im * o.re,
            )
        }
    }
    impl Div for Complex {
        type Output = Self;
        fn div(self, o: Self) -> Self {
            let d = o.re * o.re + o.im * o.im;
            Self::new(
                (self.re * o.re + self.im * o.im) / d,
                (self.im * o.re - self.re * o.im) / d,
            )
        }
    }
    impl Neg for Complex {
        type Output = Self;
        fn neg(self) -> Self {
            Self::new(-self.re, -self.im)
        }
    }
}

impl BandpassFilter {
    /// Bilinear-transform Butterworth design with pre-warped corners.
    pub fn design(spec: FilterSpec) -> Result<Self> {
        spec.validate()?;
        let fs = spec.sample_rate_hz;
        let warp = |f: f64| 2.0 * fs * (std::f64::consts::PI * f / fs).tan();
        let (w1, w2) = (warp(spec.low_hz), warp(spec.high_hz));
        let w0 = (w1 * w2).sqrt();
        let bw = w2 - w1;
        let n = spec.order;

        // Analog prototype poles on the left half of the unit circle.
        let mut analog = Vec::with_capacity(2 * n);
        for k in 1..=n {
            let th = std::f64::consts::PI * (2 * k + n - 1) as f64 / (2 * n) as f64;
            let p = Complex::from_polar(1.0, th).scale(bw);
            let disc = (p * p - Complex::new(4.0 * w0 * w0, 0.0)).sqrt();
            analog.push((p + disc).scale(0.5));
            analog.push((p - disc).scale(0.5));
        }
        let two_fs = Complex::new(2.0 * fs, 0.0);
        let digital: Vec<Complex> = analog
            .iter()
            .map(|&s| (two_fs + s) / (two_fs - s))
            .collect();

        let mut upper: Vec<Complex> = digital.iter().copied().filter(|z| z.im > 1e-12).collect();
        let mut reals: Vec<f64> = digital
            .iter()
            .filter(|z| z.im.abs() <= 1e-12)
            .map(|z| z.re)
            .collect();
        upper.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        reals.sort_by(f64::total_cmp);

        let mut sections: Vec<Biquad> = upper
            .iter()
            .map(|p| Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -2.0 * p.re, p.re * p.re + p.im * p.im],
            })
            .collect();
        for pair in reals.chunks(2) {
            let (r1, r2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -(r1 + r2), r1 * r2],
            });
        }

        // Unit gain at the digital image of the geometric centre frequency.
        let centre = 2.0 * (w0 / (2.0 * fs)).atan();
        let mut filt = Self {
            spec,
            sections,
            warmup: 0,
        };
        let g = filt.response_at(centre / (2.0 * std::f64::consts::PI) * fs);
        if let Some(first) = filt.sections.first_mut() {
            first.b.iter_mut().for_each(|b| *b /= g);
        }
        let r_max = digital.iter().map(|z| z.norm()).fold(0.0, f64::max);
        filt.warmup = ((1e-6f64).ln() / r_max.ln()).ceil() as usize;
        Ok(filt)
    }

    /// Single-pass magnitude response at `f_hz`.
    pub fn response_at(&self, f_hz: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f_hz / self.spec.sample_rate_hz;
        let z1 = Complex::from_polar(1.0, -w);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|s| {
                let num = Complex::new(s.b[0], 0.0) + z1.scale(s.b[1]) + z2.scale(s.b[2]);
                let den = Complex::new(s.a[0], 0.0) + z1.scale(s.a[1]) + z2.scale(s.a[2]);
                (num / den).norm()
            })
            .product()
    }

    /// Causal single pass (transposed direct form II, zero initial state).
    pub fn filter<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut y: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
        self.filter_f64(&mut y);
        y.into_iter().map(T::lit).collect()
    }

    fn filter_f64(&self, y: &mut [f64]) {
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in y.iter_mut() {
                let xin = *v;
                let out = s.b[0] * xin + z1;
                z1 = s.b[1] * xin - s.a[1] * out + z2;
                z2 = s.b[2] * xin - s.a[2] * out;
                *v = out;
            }
        }
    }

    /// Zero-phase forward-backward filtering with odd-reflection padding of
    /// `min(warmup, len - 1)` samples at each end.
    pub fn filtfilt<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() < 2 {
            return arg_err("filtfilt needs at least two samples");
        }
        let pad = self.warmup.min(x.len() - 1);
        let xs: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
        let (first, last) = (xs[0], xs[xs.len() - 1]);
        let mut ext = Vec::with_capacity(xs.len() + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - xs[i]));
        ext.extend_from_slice(&xs);
        ext.extend((1..=pad).map(|i| 2.0 * last - xs[xs.len() - 1 - i]));
        self.filter_f64(&mut ext);
        ext.reverse();
        self.filter_f64(&mut ext);
        ext.reverse();
        Ok(ext[pad..pad + xs.len()]
            .iter()
            .map(|&v| T::lit(v))
            .collect())
    }
}

/// Zero-phase band-pass of `x`. Requires at least `warmup` samples of the designed filter.
pub fn bandpass<T: Scalar>(x: &[T], spec: &FilterSpec) -> Result<Vec<T>> {
    let filt = BandpassFilter::design(*spec)?;
    if x.len() < filt.warmup {
        return arg_err(format!(
            "bandpass needs at least {} samples (filter warm-up), got {}",
            filt.warmup,
            x.len()
        ));
    }
    filt.filtfilt(x)
}

/// ICA options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcaConfig {
    /// Proximal weight pulling each fixed-point update toward the previous estimate.
    pub lambda: f64,
    /// Components whose excess kurtosis exceeds this are treated as artifacts
    /// when no reference signals are given.
    pub kurtosis_threshold: f64,
    /// With references, components correlating at least this much with any reference are removed.
    pub reference_correlation: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            kurtosis_threshold: 5.0,
            reference_correlation: 0.7,
            max_iter: 500,
            tol: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcaResult<T> {
    /// Reconstruction with artifact components removed (`k × T`).
    pub cleaned: Vec<Vec<T>>,
    /// Estimated unit-variance sources (`k × T`); empty when decomposition failed.
    pub sources: Vec<Vec<T>>,
    /// Indices of the zeroed components.
    pub removed: Vec<usize>,
    /// Excess kurtosis of each component.
    pub kurtosis: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the decomposition was skipped and the input returned unchanged.
    pub warning: Option<String>,
}

/// Whitening + symmetric kurtosis-maximising fixed-point ICA on a `k × T`
/// array, removing artifact components and reconstructing the channels.
pub fn ica_clean<T: Scalar>(
    x: &[Vec<T>],
    artifact_refs: Option<&[Vec<T>]>,
    config: &IcaConfig,
) -> Result<IcaResult<T>> {
    let k = x.len();
    if k < 2 {
        return arg_err("ica_clean needs at least two channels");
    }
    let t = x[0].len();
    if x.iter().any(|r| r.len() != t) {
        return arg_err("ica_clean channels have different lengths");
    }
    if t < 10 * k {
        return arg_err(format!(
            "ica_clean needs at least {} samples, got {t}",
            10 * k
        ));
    }
    let unchanged = |msg: String| IcaResult {
        cleaned: x.to_vec(),
        sources: Vec::new(),
        removed: Vec::new(),
        kurtosis: Vec::new(),
        iterations: 0,
        converged: false,
        warning: Some(msg),
    };

    let tf = t as f64;
    let mut xc = DMatrix::<f64>::from_fn(k, t, |i, j| x[i][j].as_f64());
    let means: Vec<f64> = (0..k).map(|i| xc.row(i).sum() / tf).collect();
    for i in 0..k {
        for j in 0..t {
            xc[(i, j)] -= means[i];
        }
    }
    let cov = (&xc * xc.transpose()) / tf;
    let eig = SymmetricEigen::new(cov);
    let max_ev = eig.eigenvalues.max();
    let min_ev = eig.eigenvalues.min();
    if !(max_ev > 0.0) || min_ev <= max_ev * 1e-12 || !min_ev.is_finite() {
        log::warn!("ica_clean: covariance is rank deficient; returning input unchanged");
        return Ok(unchanged(format!(
            "rank-deficient covariance (eigenvalues {min_ev:.3e}..{max_ev:.3e})"
        )));
    }
    let d_inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.sqrt()));
    let d_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let whiten = &d_inv_sqrt * eig.eigenvectors.transpose();
    let dewhiten = &eig.eigenvectors * &d_sqrt;
    let z = &whiten * &xc;

    let mut init_rng = rng::stream(config.seed, "ica.init");
    let init = crate::matrix::Matrix::<f64>::randn(k, k, 1.0, &mut init_rng);
    let mut w = symmetric_decorrelate(&DMatrix::from_row_slice(k, k, init.as_slice()))?;
    let lam = config.lambda;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..config.max_iter {
        iterations = it + 1;
        let y = &w * &z;
        let y3 = y.map(|v| v * v * v);
        let fp = (&y3 * z.transpose()) / tf - &w * 3.0;
        let blended = (fp.normalize() + &w * lam) / (1.0 + lam);
        let w_new = symmetric_decorrelate(&blended)?;
        let change = (&w_new * w.transpose())
            .diagonal()
            .iter()
            .map(|d| (1.0 - d.abs()).abs())
            .fold(0.0, f64::max);
        w = w_new;
        if change < config.tol {
            converged = true;
            break;
        }
    }

    let s = &w * &z;
    let kurtosis: Vec<f64> = (0..k)
        .map(|i| {
            let r = s.row(i);
            let m2 = r.iter().map(|v| v * v).sum::<f64>() / tf;
            let m4 = r.iter().map(|v| v.powi(4)).sum::<f64>() / tf;
            m4 / (m2 * m2) - 3.0
        })
        .collect();

    let mut removed: Vec<usize> = match artifact_refs {
        Some(refs) => {
            let mut out = Vec::new();
            for r in refs {
                if r.len() != t {
                    return arg_err("artifact reference length differs from the signal");
                }
                let rf: Vec<f64> = r.iter().map(|v| v.as_f64()).collect();
                let corrs: Vec<f64> = (0..k)
                    .map(|i| pearson(s.row(i).iter().copied(), &rf).abs())
                    .collect();
                let best = (0..k)
                    .max_by(|&a, &b| corrs[a].total_cmp(&corrs[b]))
                    .unwrap_or(0);
                out.push(best);
                out.extend((0..k).filter(|&i| corrs[i] >= config.reference_correlation));
            }
            out
        }
        None => (0..k)
            .filter(|&i| kurtosis[i] > config.kurtosis_threshold)
            .collect(),
    };
    removed.sort_unstable();
    removed.dedup();

    let mut s_kept = s.clone();
    for &i in &removed {
        s_kept.row_mut(i).fill(0.0);
    }
    let mixing = &dewhiten * w.transpose();
    let rec = &mixing * &s_kept;
    let cleaned = (0..k)
        .map(|i| (0..t).map(|j| T::lit(rec[(i, j)] + means[i])).collect())
        .collect();
    let sources = (0..k)
        .map(|i| (0..t).map(|j| T::lit(s[(i, j)])).collect())
        .collect();
    Ok(IcaResult {
        cleaned,
        sources,
        removed,
        kurtosis,
        iterations,
        converged,
        warning: None,
    })
}

fn symmetric_decorrelate(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(w * w.transpose());
    if eig.eigenvalues.min() <= 0.0 {
        return Err(crate::error::ZiaError::Numerical(
            "ICA unmixing estimate became singular".into(),
        ));
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.sqrt()));
    Ok(&eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * w)
}

/// Pearson correlation of two equally long sequences.
pub fn pearson(a: impl Iterator<Item = f64> + Clone, b: &[f64]) -> f64 {
    let n = b.len() as f64;
    let ma = a.clone().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, &y) in a.zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Sinusoidal encoding: index `i` even → `sin(t / 10000^(i/dim))`, odd →
/// `cos(t / 10000^((i-1)/dim))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEncoding<T> {
    pub values: Vec<T>,
}

pub fn encode_time<T: Scalar>(t: usize, dim: usize) -> Result<ContextEncoding<T>> {
    if dim == 0 || dim % 2 != 0 {
        return arg_err(format!(
            "time encoding dimension must be even and positive, got {dim}"
        ));
    }
    let tf = t as f64;
    let values = (0..dim)
        .map(|i| {
            let e = (i - i % 2) as f64 / dim as f64;
            let arg = tf / 10000f64.powf(e);
            T::lit(if i % 2 == 0 { arg.sin() } else { arg.cos() })
        })
        .collect();
    Ok(ContextEncoding { values })
}

/// Full context vector: time encoding of `dim - location_vocab - usage_vocab`
/// components followed by one-hot location and usage ids.
pub fn encode_context<T: Scalar>(
    obs: &ContextObs,
    location_vocab: usize,
    usage_vocab: usize,
    dim: usize,
) -> Result<ContextEncoding<T>> {
    let Some(time_dim) = dim.checked_sub(location_vocab + usage_vocab) else {
        return arg_err("context dimension smaller than the categorical vocabularies");
    };
    if obs.location_id >= location_vocab || obs.usage_id >= usage_vocab {
        return arg_err("context id outside its vocabulary");
    }
    let mut values = encode_time::<T>(obs.time_index, time_dim)?.values;
    let mut loc = vec![T::zero(); location_vocab];
    loc[obs.location_id] = T::one();
    let mut usage = vec![T::zero(); usage_vocab];
    usage[obs.usage_id] = T::one();
    values.extend(loc);
    values.extend(usage);
    Ok(ContextEncoding { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{sample_laplacian, LaplacianNoiseSpec};
    use rustfft::{num_complex::Complex as FftComplex, FftPlanner};

    #[test]
    fn ema_examples() {
        assert_eq!(
            ema_smooth(&[2.5f64, 2.5, 2.5], 0.9).unwrap(),
            vec![2.5, 2.5, 2.5]
        );
        let y = ema_smooth(&[0.0f64, 10.0], 0.9).unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 9.0).abs() < 1e-12);
        let x = [1.0f64, -3.0, 7.5, 0.25];
        assert_eq!(ema_smooth(&x, 1.0).unwrap(), x.to_vec());
        assert!(ema_smooth::<f64>(&[], 0.5).is_err());
        assert!(ema_smooth(&[1.0f64], 0.0).is_err());
    }

    #[test]
    fn heart_rate_recurrence_is_ema_with_point_nine() {
        let h = [70.0f64, 72.0, 71.0, 90.0, 69.0];
        let ema = ema_smooth(&h, 0.9).unwrap();
        let mut prev = h[0];
        for (t, &v) in h.iter().enumerate().skip(1) {
            prev = 0.9 * v + 0.1 * prev;
            assert_eq!(ema[t], prev);
        }
    }

    #[test]
    fn clip_examples() {
        let x = [1.0f64, 1.1, 0.9, 1.05, 1.0];
        assert_eq!(clip_outliers(&x, 0.12, 3.0).unwrap(), x.to_vec());
        let spike = [1.0f64, 1.0, 1.0, 1.0 + 10.0 * 0.12, 1.0];
        let y = clip_outliers(&spike, 0.12, 3.0).unwrap();
        assert!((y[3] - 1.36).abs() < 1e-12);
        let wild = [0.0f64, 100.0, -50.0];
        assert_eq!(
            clip_outliers(&wild, 0.12, f64::INFINITY).unwrap(),
            wild.to_vec()
        );
        assert!(clip_outliers(&wild, 0.0, 3.0).is_err());
    }

    /// Amplitude of the `f` Hz component of `x` sampled at `fs`, via FFT.
    fn fft_amplitude(x: &[f64], fs: f64, f: f64) -> f64 {
        let n = x.len();
        let mut buf: Vec<FftComplex<f64>> = x.iter().map(|&v| FftComplex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let bin = (f * n as f64 / fs).round() as usize;
        2.0 * buf[bin].norm() / n as f64
    }

    fn sine(f: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin())
            .collect()
    }

    fn measured_gain(filt: &BandpassFilter, f: f64) -> f64 {
        // Integer number of cycles after discarding warm-up at both ends.
        let fs = 256.0;
        let core = 4096;
        let w = filt.warmup;
        let x = sine(f, fs, core + 2 * w);
        let y = filt.filtfilt(&x).unwrap();
        fft_amplitude(&y[w..w + core], fs, f) / fft_amplitude(&x[w..w + core], fs, f)
    }

    #[test]
    fn bandpass_gain_by_fft_oracle() {
        let filt = BandpassFilter::design(FilterSpec::default()).unwrap();
        for f in [10.0, 12.0, 16.0, 20.0, 24.0, 28.0] {
            let g = measured_gain(&filt, f);
            assert!((0.9..=1.1).contains(&g), "gain {g} at {f} Hz");
        }
        for f in [0.5, 1.0, 2.0, 60.0, 80.0, 100.0] {
            let g = measured_gain(&filt, f);
            assert!(20.0 * g.log10() <= -20.0, "gain {g} at {f} Hz");
        }
    }

    #[test]
    fn bandpass_examples() {
        let spec = FilterSpec::default();
        let filt = BandpassFilter::design(spec).unwrap();
        let n = 2048;
        let w = filt.warmup;
        let x = sine(20.0, 256.0, n + 2 * w);
        let y = bandpass(&x, &spec).unwrap();
        let peak = y[w..w + n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((0.9..=1.1).contains(&peak), "20 Hz amplitude {peak}");
        let x1 = sine(1.0, 256.0, n + 2 * w);
        let y1 = bandpass(&x1, &spec).unwrap();
        let peak1 = y1[w..w + n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(20.0 * peak1.log10() <= -20.0, "1 Hz amplitude {peak1}");
        assert!(bandpass(&vec![0.0f64; 4096], &spec)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn bandpass_design_errors() {
        let bad = FilterSpec {
            low_hz: 30.0,
            high_hz: 8.0,
            ..FilterSpec::default()
        };
        assert!(BandpassFilter::design(bad).is_err());
        let bad = FilterSpec {
            high_hz: 200.0,
            ..FilterSpec::default()
        };
        assert!(bandpass(&[0.0f64; 10_000], &bad).is_err());
        assert!(bandpass(&[0.0f64; 10], &FilterSpec::default()).is_err());
    }

    #[test]
    fn design_response_is_unit_at_centre_and_monotone_outside() {
        let filt = BandpassFilter::design(FilterSpec::default()).unwrap();
        let corner_lo = filt.response_at(8.0);
        let corner_hi = filt.response_at(30.0);
        assert!((corner_lo - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!((corner_hi - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        let json = serde_json::to_string(&filt).unwrap();
        assert!(json.contains("sections"));
    }

    fn laplace_rows(k: usize, t: usize, seed: u64) -> Vec<Vec<f64>> {
        let spec = LaplacianNoiseSpec::new(1.0).unwrap();
        (0..k)
            .map(|i| sample_laplacian(&spec, t, seed + i as u64).unwrap())
            .collect()
    }

    #[test]
    fn ica_identity_mixing_without_artifacts_is_lossless() {
        let x = laplace_rows(3, 4000, 40);
        let r = ica_clean(&x, None, &IcaConfig::default()).unwrap();
        assert!(r.removed.is_empty());
        for (a, b) in x.iter().zip(&r.cleaned) {
            for (u, v) in a.iter().zip(b) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ica_separates_two_laplacian_sources() {
        let s = laplace_rows(2, 5000, 50);
        let mix = [[0.8, 0.6], [0.3, -0.9]];
        let x: Vec<Vec<f64>> = (0..2)
            .map(|i| {
                (0..5000)
                    .map(|j| mix[i][0] * s[0][j] + mix[i][1] * s[1][j])
                    .collect()
            })
            .collect();
        let r = ica_clean(&x, None, &IcaConfig::default()).unwrap();
        assert!(r.converged);
        for src in &s {
            let best = r
                .sources
                .iter()
                .map(|c| pearson(c.iter().copied(), src).abs())
                .fold(0.0, f64::max);
            assert!(best >= 0.9, "best correlation {best}");
        }
    }

    fn blink(t: usize) -> Vec<f64> {
        (0..t)
            .map(|j| {
                let phase = j % 500;
                if phase < 40 {
                    let u = phase as f64 / 40.0;
                    60.0 * (std::f64::consts::PI * u).sin().powi(2)
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn ica_removes_blink_artifact() {
        let t = 6000;
        let mut src = laplace_rows(3, t, 60);
        let art = blink(t);
        src.push(art.clone());
        let mix = [
            [1.0, 0.2, 0.1, 0.9],
            [0.3, 1.0, 0.2, 0.6],
            [0.1, 0.4, 1.0, 0.3],
            [0.2, 0.1, 0.3, 1.0],
        ];
        let x: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                (0..t)
                    .map(|j| (0..4).map(|c| mix[i][c] * src[c][j]).sum())
                    .collect()
            })
            .collect();
        for refs in [None, Some(vec![art.clone()])] {
            let r = ica_clean(&x, refs.as_deref(), &IcaConfig::default()).unwrap();
            assert!(!r.removed.is_empty());
            for i in 0..4 {
                let before = pearson(x[i].iter().copied(), &art).abs();
                let after = pearson(r.cleaned[i].iter().copied(), &art).abs();
                assert!(after <= 0.2 * before, "channel {i}: {before} -> {after}");
            }
        }
    }

    #[test]
    fn ica_never_increases_power_and_keeps_shape() {
        let t = 3000;
        let mut src = laplace_rows(2, t, 70);
        src.push(blink(t));
        let x: Vec<Vec<f64>> = (0..3)
            .map(|i| {
                (0..t)
                    .map(|j| src[0][j] * (1.0 + i as f64) + src[1][j] - src[2][j] * 0.5 * i as f64)
                    .collect()
            })
            .collect();
        let r = ica_clean(&x, None, &IcaConfig::default()).unwrap();
        assert_eq!(r.cleaned.len(), 3);
        assert!(r.cleaned.iter().all(|c| c.len() == t));
        let power = |m: &[Vec<f64>]| m.iter().flatten().map(|v| v * v).sum::<f64>();
        assert!(power(&r.cleaned) <= power(&x) * (1.0 + 1e-9));
    }

    #[test]
    fn ica_rank_deficient_input_is_returned_with_warning() {
        let a = laplace_rows(1, 500, 80).remove(0);
        let x = vec![a.clone(), a.iter().map(|v| 2.0 * v).collect()];
        let r = ica_clean(&x, None, &IcaConfig::default()).unwrap();
        assert!(r.warning.is_some());
        assert_eq!(r.cleaned, x);
        assert!(ica_clean(&[a.clone()], None, &IcaConfig::default()).is_err());
        assert!(ica_clean(
            &[a[..15].to_vec(), a[..15].to_vec()],
            None,
            &IcaConfig::default()
        )
        .is_err());
    }

    #[test]
    fn time_encoding_examples() {
        let e = encode_time::<f64>(0, 32).unwrap();
        for (i, v) in e.values.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        let e = encode_time::<f64>(1, 32).unwrap();
        assert!((e.values[0] - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!((e.values[1] - 1f64.cos()).abs() < 1e-15);
        // index 2 uses exponent 2/32
        assert!((e.values[2] - (1.0 / 10000f64.powf(2.0 / 32.0)).sin()).abs() < 1e-15);
        assert!(encode_time::<f64>(3, 31).is_err());
        for t in [0, 1, 17, 12345, 10_000_000] {
            let e = encode_time::<f32>(t, 32).unwrap();
            assert!(e.values.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(e, encode_time::<f32>(t, 32).unwrap());
        }
    }

    #[test]
    fn context_encoding_layout() {
        let obs = ContextObs {
            time_index: 5,
            location_id: 2,
            usage_id: 7,
        };
        let e = encode_context::<f64>(&obs, 8, 8, 32).unwrap();
        assert_eq!(e.values.len(), 32);
        assert_eq!(
            &e.values[..16],
            &encode_time::<f64>(5, 16).unwrap().values[..]
        );
        assert_eq!(e.values[16 + 2], 1.0);
        assert_eq!(e.values[24 + 7], 1.0);
        assert_eq!(e.values[16..].iter().sum::<f64>(), 2.0);
        assert!(encode_context::<f64>(&obs, 8, 4, 32).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ema_is_shift_equivariant(x in prop::collection::vec(-100.0f64..100.0, 1..50),
                                        c in -50.0f64..50.0, alpha in 0.01f64..1.0) {
                let a = ema_smooth(&x, alpha).unwrap();
                let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
                let b = ema_smooth(&shifted, alpha).unwrap();
                for (u, v) in a.iter().zip(&b) {
                    prop_assert!((u + c - v).abs() < 1e-9);
                }
            }

            #[test]
            fn ema_stays_within_input_range(x in prop::collection::vec(-100.0f64..100.0, 1..50),
                                            alpha in 0.01f64..1.0) {
                let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for v in ema_smooth(&x, alpha).unwrap() {
                    prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
                }
            }
        }
    }
}
