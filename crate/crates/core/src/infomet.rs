//! Information-theoretic diagnostics: exact entropy and mutual information
//! on discrete joints, plug-in estimates on simulated episodes and the
//! projected-accuracy ratio.
//!
//! All quantities are in bits.

use std::collections::BTreeMap;
use std::io::Write;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::edgecost::Band;
use crate::error::{arg_err, Result};
use crate::scalar::Scalar;
use crate::signals::EpisodeTrace;

const NORM_TOL: f64 = 1e-9;
/// Accuracy band quoted for conditional entropies of roughly 1.3–1.8 bits.
pub const PAPER_ACCURACY_BAND: Band = Band::new(70.0, 75.0);
/// Minimum mean samples per occupied joint cell before a warning is raised.
pub const MIN_SAMPLES_PER_CELL: f64 = 5.0;

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.log2()
    } else {
        0.0
    }
}

/// `−Σ p log₂ p` with `0·log 0 = 0`.
pub fn entropy<T: Scalar>(p: &[T]) -> Result<T> {
    let total: f64 = p.iter().map(|v| v.as_f64()).sum();
    if p.is_empty() || (total - 1.0).abs() > NORM_TOL || p.iter().any(|v| v.as_f64() < 0.0) {
        return arg_err(format!(
            "entropy needs a normalized distribution (sum {total})"
        ));
    }
    Ok(T::lit(-p.iter().map(|v| plogp(v.as_f64())).sum::<f64>()))
}

/// Probability table over `(X, Y₁, …, Yₖ)` stored row-major; axis 0 is the
/// intent, the remaining axes the signal variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    shape: Vec<usize>,
    table: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(shape: Vec<usize>, table: Vec<f64>) -> Result<Self> {
        if shape.len() < 2 || shape.contains(&0) {
            return arg_err("a joint needs at least two non-empty axes");
        }
        if shape.iter().product::<usize>() != table.len() {
            return arg_err("table length does not match the shape");
        }
        if table.iter().any(|&p| !(p >= 0.0)) {
            return arg_err("joint entries must be non-negative");
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            return arg_err(format!("joint entries sum to {total}, not 1"));
        }
        Ok(Self { shape, table })
    }

    /// Normalises non-negative weights.
    pub fn from_weights(shape: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return arg_err("weights must have a positive sum");
        }
        Self::new(shape, weights.into_iter().map(|w| w / total).collect())
    }

    /// Two-axis joint from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return arg_err("ragged joint table");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Marginal over the kept axes, in their original order.
    pub fn marginal(&self, keep: &[usize]) -> Result<DiscreteJoint> {
        if keep.is_empty() || keep.iter().any(|&a| a >= self.shape.len()) {
            return arg_err("marginal axes out of range");
        }
        let mut keep = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let out_shape: Vec<usize> = keep.iter().map(|&a| self.shape[a]).collect();
        let mut out = vec![0.0; out_shape.iter().product()];
        let mut idx = vec![0usize; self.shape.len()];
        for &p in &self.table {
            let mut flat = 0;
            for &a in &keep {
                flat = flat * self.shape[a] + idx[a];
            }
            out[flat] += p;
            for a in (0..idx.len()).rev() {
                idx[a] += 1;
                if idx[a] < self.shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        if out_shape.len() == 1 {
            // single-axis marginals keep a trailing unit axis
            return Ok(DiscreteJoint {
                shape: vec![out_shape[0], 1],
                table: out,
            });
        }
        Ok(DiscreteJoint {
            shape: out_shape,
            table: out,
        })
    }

    fn entropy_raw(&self) -> f64 {
        -self.table.iter().map(|&p| plogp(p)).sum::<f64>()
    }

    /// Entropy of the intent axis.
    pub fn intent_entropy(&self) -> f64 {
        let mut px = vec![0.0; self.shape[0]];
        let stride = self.table.len() / self.shape[0];
        for (i, chunk) in self.table.chunks(stride).enumerate() {
            px[i] = chunk.iter().sum();
        }
        -px.iter().map(|&p| plogp(p)).sum::<f64>()
    }

    /// Entropy of the signal axes taken jointly.
    pub fn signal_entropy(&self) -> f64 {
        let stride = self.table.len() / self.shape[0];
        let mut py = vec![0.0; stride];
        for chunk in self.table.chunks(stride) {
            py.iter_mut().zip(chunk).for_each(|(a, &p)| *a += p);
        }
        -py.iter().map(|&p| plogp(p)).sum::<f64>()
    }
}

/// `I(X; Y) = H(X) + H(Y) − H(X, Y)` with `X` the intent axis and `Y` the
/// remaining axes jointly.
pub fn mutual_information(joint: &DiscreteJoint) -> f64 {
    (joint.intent_entropy() + joint.signal_entropy() - joint.entropy_raw()).max(0.0)
}

/// `H(X | Y) = H(X, Y) − H(Y)`.
pub fn conditional_entropy(joint: &DiscreteJoint) -> f64 {
    (joint.entropy_raw() - joint.signal_entropy()).max(0.0)
}

/// The stated bound on expected error: the conditional entropy itself, in bits.
pub fn error_bound(h_cond_bits: f64) -> Result<f64> {
    if !(h_cond_bits >= 0.0) {
        return arg_err(format!(
            "conditional entropy must be non-negative, got {h_cond_bits}"
        ));
    }
    Ok(h_cond_bits)
}

/// `(H − H_cond) / H · 100`.
pub fn projected_accuracy(h_bits: f64, h_cond_bits: f64) -> Result<f64> {
    if !(h_bits > 0.0 && (0.0..=h_bits).contains(&h_cond_bits)) {
        return arg_err(format!(
            "need 0 ≤ h_cond ≤ h and h > 0, got h={h_bits}, h_cond={h_cond_bits}"
        ));
    }
    Ok((h_bits - h_cond_bits) / h_bits * 100.0)
}

/// Signal summaries available for plug-in estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    /// Mean gaze position over the segment (two binned axes).
    Gaze,
    /// Mean heart rate over the segment (binned).
    Heart,
    /// Location and usage ids at the segment end (categorical).
    Context,
    /// Dominant EEG frequency over the segment (binned).
    Eeg,
}

impl Feature {
    pub fn as_str(self) -> &'static str {
        match self {
            Feature::Gaze => "gaze",
            Feature::Heart => "heart",
            Feature::Context => "context",
            Feature::Eeg => "eeg",
        }
    }

    pub fn ladder() -> [Feature; 4] {
        [
            Feature::Gaze,
            Feature::Heart,
            Feature::Context,
            Feature::Eeg,
        ]
    }
}

/// `gaze+heart+…` label of a subset.
pub fn subset_label(subset: &[Feature]) -> String {
    subset
        .iter()
        .map(|f| f.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

/// Per-segment summaries of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeatures {
    pub intents: Vec<usize>,
    pub gaze: Vec<[f64; 2]>,
    pub heart: Vec<f64>,
    pub context: Vec<[usize; 2]>,
    pub eeg_peak_hz: Vec<f64>,
}

/// Dominant frequency of `channels` (summed power), searched over 4–40 Hz.
pub fn spectral_peak(channels: &[Vec<f64>], rate_hz: f64) -> Option<f64> {
    let n = channels.first()?.len();
    if n < 8 {
        return None;
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut power = vec![0.0; n / 2 + 1];
    for ch in channels {
        let mean = ch.iter().sum::<f64>() / n as f64;
        let mut buf: Vec<Complex<f64>> = ch.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
        fft.process(&mut buf);
        power
            .iter_mut()
            .zip(&buf)
            .for_each(|(p, c)| *p += c.norm_sqr());
    }
    let res = rate_hz / n as f64;
    (0..power.len())
        .filter(|&b| (4.0..=40.0).contains(&(b as f64 * res)))
        .max_by(|&a, &b| power[a].total_cmp(&power[b]).then(b.cmp(&a)))
        .map(|b| b as f64 * res)
}

/// Summaries of every complete segment of `trace`.
pub fn segment_features<T: Scalar>(trace: &EpisodeTrace<T>) -> SegmentFeatures {
    let k = trace.ticks_per_intent.max(1);
    let ends = trace.segment_ends();
    let intents: Vec<usize> = trace
        .segment_intents()
        .into_iter()
        .take(ends.len())
        .collect();
    let gaze_s = trace.gaze_samples();
    let heart_s = trace.heart_samples();
    let (eeg_ticks, eeg) = trace.eeg_samples();
    let mut out = SegmentFeatures {
        intents,
        gaze: Vec::with_capacity(ends.len()),
        heart: Vec::with_capacity(ends.len()),
        context: Vec::with_capacity(ends.len()),
        eeg_peak_hz: Vec::with_capacity(ends.len()),
    };
    let in_seg = |t: usize, end: usize| t + k > end && t <= end;
    let (mut gi, mut hi, mut ei) = (0, 0, 0);
    for &end in &ends {
        let frame = &trace.frames[end];
        let mut acc = [0.0; 2];
        let mut cnt = 0usize;
        while gi < gaze_s.len() && gaze_s[gi].0 <= end {
            if in_seg(gaze_s[gi].0, end) {
                acc[0] += gaze_s[gi].1[0].as_f64();
                acc[1] += gaze_s[gi].1[1].as_f64();
                cnt += 1;
            }
            gi += 1;
        }
        out.gaze.push(if cnt > 0 {
            [acc[0] / cnt as f64, acc[1] / cnt as f64]
        } else {
            [frame.gaze[0].as_f64(), frame.gaze[1].as_f64()]
        });
        let (mut hs, mut hc) = (0.0, 0usize);
        while hi < heart_s.len() && heart_s[hi].0 <= end {
            if in_seg(heart_s[hi].0, end) {
                hs += heart_s[hi].1.as_f64();
                hc += 1;
            }
            hi += 1;
        }
        out.heart.push(if hc > 0 {
            hs / hc as f64
        } else {
            frame.heart.as_f64()
        });
        out.context
            .push([frame.context.location_id, frame.context.usage_id]);
        let start = ei;
        while ei < eeg_ticks.len() && eeg_ticks[ei] <= end {
            ei += 1;
        }
        let first = (start..ei)
            .find(|&i| in_seg(eeg_ticks[i], end))
            .unwrap_or(ei);
        let window: Vec<Vec<f64>> = eeg
            .iter()
            .map(|c| c[first..ei].iter().map(|v| v.as_f64()).collect())
            .collect();
        out.eeg_peak_hz
            .push(spectral_peak(&window, trace.rates.eeg_hz).unwrap_or(0.0));
    }
    out
}

/// Equal-frequency bin edges over `values`. Equal values always share a bin.
pub fn equal_frequency_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..bins)
        .map(|b| sorted[(b * n / bins).min(n - 1)])
        .collect();
    edges.dedup();
    // an edge equal to the minimum would leave the first bin empty
    edges.retain(|&e| e > sorted[0]);
    edges
}

/// Index of the bin holding `v`: the number of edges `≤ v`.
pub fn bin_index(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|&e| e <= v)
}

/// Plug-in estimate with jackknife bias.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiEstimate {
    pub subset: String,
    pub window_len: usize,
    pub samples: usize,
    pub bins: usize,
    pub mi_bits: f64,
    pub h_intent_bits: f64,
    pub h_cond_bits: f64,
    pub jackknife_bias: f64,
    pub bias_corrected_bits: f64,
    pub occupied_cells: usize,
    pub warning: Option<String>,
}

/// Plug-in MI between intent labels and discrete symbols, with the
/// leave-one-out jackknife bias computed from cell counts.
pub fn plugin_mi(labels: &[usize], symbols: &[u64]) -> Result<(f64, f64, f64, usize)> {
    if labels.len() != symbols.len() || labels.is_empty() {
        return arg_err("plug-in MI needs equally many labels and symbols");
    }
    let n = labels.len() as f64;
    let mut cx: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cy: BTreeMap<u64, f64> = BTreeMap::new();
    let mut cxy: BTreeMap<(usize, u64), f64> = BTreeMap::new();
    for (&x, &y) in labels.iter().zip(symbols) {
        *cx.entry(x).or_default() += 1.0;
        *cy.entry(y).or_default() += 1.0;
        *cxy.entry((x, y)).or_default() += 1.0;
    }
    let clogc = |c: f64| if c > 0.0 { c * c.log2() } else { 0.0 };
    let sx: f64 = cx.values().map(|&c| clogc(c)).sum();
    let sy: f64 = cy.values().map(|&c| clogc(c)).sum();
    let sxy: f64 = cxy.values().map(|&c| clogc(c)).sum();
    // H = log₂ m − S/m for m samples with Σ c log₂ c = S
    let mi_from = |m: f64, sx: f64, sy: f64, sxy: f64| {
        if m <= 0.0 {
            return 0.0;
        }
        let h = |s: f64| m.log2() - s / m;
        h(sx) + h(sy) - h(sxy)
    };
    let mi = mi_from(n, sx, sy, sxy).max(0.0);
    let hx = n.log2() - sx / n;
    let mut loo_sum = 0.0;
    for (&(x, y), &c) in &cxy {
        let delta = |cnt: f64| clogc(cnt - 1.0) - clogc(cnt);
        let v = mi_from(
            n - 1.0,
            sx + delta(cx[&x]),
            sy + delta(cy[&y]),
            sxy + delta(c),
        );
        loo_sum += c * v;
    }
    let bias = (n - 1.0) * (loo_sum / n - mi);
    Ok((mi, hx, bias, cxy.len()))
}

/// Plug-in MI between the segment intent and the binned summaries of the
/// chosen features over the last `window` segments.
pub fn estimate_modalities_mi<T: Scalar>(
    episodes: &[EpisodeTrace<T>],
    subset: &[Feature],
    bins: usize,
    window: usize,
) -> Result<MiEstimate> {
    if episodes.is_empty() {
        return arg_err("estimate_modalities_mi needs at least one episode");
    }
    if bins < 2 {
        return arg_err("at least two bins are required");
    }
    if subset.is_empty() || window == 0 {
        return arg_err("modality subset and window must be non-empty");
    }
    let feats: Vec<SegmentFeatures> = episodes.iter().map(segment_features).collect();
    estimate_from_features(&feats, subset, bins, window)
}

/// [`estimate_modalities_mi`] on precomputed segment summaries.
pub fn estimate_from_features(
    feats: &[SegmentFeatures],
    subset: &[Feature],
    bins: usize,
    window: usize,
) -> Result<MiEstimate> {
    let mut subset = subset.to_vec();
    subset.sort_unstable();
    subset.dedup();
    let pooled =
        |f: &dyn Fn(&SegmentFeatures) -> Vec<f64>| feats.iter().flat_map(f).collect::<Vec<f64>>();
    let gx = equal_frequency_edges(&pooled(&|s| s.gaze.iter().map(|g| g[0]).collect()), bins);
    let gy = equal_frequency_edges(&pooled(&|s| s.gaze.iter().map(|g| g[1]).collect()), bins);
    let he = equal_frequency_edges(&pooled(&|s| s.heart.clone()), bins);
    let ee = equal_frequency_edges(&pooled(&|s| s.eeg_peak_hz.clone()), bins);

    let mut labels = Vec::new();
    let mut symbols = Vec::new();
    for f in feats {
        for s in window - 1..f.intents.len() {
            let mut code: Vec<u64> = Vec::new();
            for w in s + 1 - window..=s {
                for feat in &subset {
                    match feat {
                        Feature::Gaze => {
                            code.push(bin_index(&gx, f.gaze[w][0]) as u64);
                            code.push(bin_index(&gy, f.gaze[w][1]) as u64);
                        }
                        Feature::Heart => code.push(bin_index(&he, f.heart[w]) as u64),
                        Feature::Context => {
                            code.push(f.context[w][0] as u64);
                            code.push(f.context[w][1] as u64);
                        }
                        Feature::Eeg => code.push(bin_index(&ee, f.eeg_peak_hz[w]) as u64),
                    }
                }
            }
            labels.push(f.intents[s]);
            symbols.push(hash_code(&code));
        }
    }
    if labels.is_empty() {
        return arg_err("episodes are shorter than the requested window");
    }
    let (mi, hx, bias, cells) = plugin_mi(&labels, &symbols)?;
    let per_cell = labels.len() as f64 / cells as f64;
    let warning = (per_cell < MIN_SAMPLES_PER_CELL).then(|| {
        format!("only {per_cell:.1} samples per occupied cell; plug-in estimate biased upward, widen the interval")
    });
    Ok(MiEstimate {
        subset: subset_label(&subset),
        window_len: window,
        samples: labels.len(),
        bins,
        mi_bits: mi,
        h_intent_bits: hx,
        h_cond_bits: (hx - mi).max(0.0),
        jackknife_bias: bias,
        bias_corrected_bits: mi - bias,
        occupied_cells: cells,
        warning,
    })
}

/// Cell key for a vector of small bin indices.
fn hash_code(code: &[u64]) -> u64 {
    // FNV-1a over the index bytes; collisions are astronomically unlikely at
    // the cell counts involved and only merge cells, never split them
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &c in code {
        for b in (c as u16).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary(transition: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = transition.len();
    if n == 0 || transition.iter().any(|r| r.len() != n) {
        return arg_err("transition matrix must be square and non-empty");
    }
    let mut p = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += p[i] * transition[i][j];
            }
        }
        let diff: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
        p = next;
        if diff < 1e-15 {
            break;
        }
    }
    Ok(p)
}

/// Exact `I(I_t; O_{t−w+1..t})` for a stationary hidden Markov chain with
/// per-step discrete emissions `emission[i][o]`, by enumerating every
/// observation window with the forward recursion.
pub fn markov_window_mi(
    transition: &[Vec<f64>],
    emission: &[Vec<f64>],
    window: usize,
) -> Result<f64> {
    let n = transition.len();
    if emission.len() != n || window == 0 {
        return arg_err("emission rows must match the intents and window must be positive");
    }
    let m = emission[0].len();
    if m == 0 || emission.iter().any(|r| r.len() != m) {
        return arg_err("ragged emission table");
    }
    let combos = m.checked_pow(window as u32).filter(|&c| c * n <= 1 << 24);
    let Some(combos) = combos else {
        return arg_err("observation window too large to enumerate");
    };
    let pi = stationary(transition)?;
    let mut table = vec![0.0; n * combos];
    for code in 0..combos {
        let mut rest = code;
        let mut obs = vec![0usize; window];
        for o in obs.iter_mut().rev() {
            *o = rest % m;
            rest /= m;
        }
        let mut alpha: Vec<f64> = (0..n).map(|i| pi[i] * emission[i][obs[0]]).collect();
        for &o in &obs[1..] {
            let mut next = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    next[j] += alpha[i] * transition[i][j];
                }
            }
            for (j, a) in next.iter_mut().enumerate() {
                *a *= emission[j][o];
            }
            alpha = next;
        }
        for i in 0..n {
            table[i * combos + code] = alpha[i];
        }
    }
    let joint = DiscreteJoint::from_weights(vec![n, combos], table)?;
    Ok(mutual_information(&joint))
}

/// One MI report row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiRow {
    pub modality_subset: String,
    pub window_len: usize,
    pub samples: usize,
    pub bins: usize,
    pub mi_bits: f64,
    pub h_cond_bits: f64,
    pub projected_accuracy_pct: f64,
    pub measured_accuracy_pct: Option<f64>,
}

impl MiRow {
    pub fn from_estimate(e: &MiEstimate, measured_accuracy_pct: Option<f64>) -> Result<Self> {
        Ok(Self {
            modality_subset: e.subset.clone(),
            window_len: e.window_len,
            samples: e.samples,
            bins: e.bins,
            mi_bits: e.mi_bits,
            h_cond_bits: e.h_cond_bits,
            projected_accuracy_pct: projected_accuracy(e.h_intent_bits, e.h_cond_bits)?,
            measured_accuracy_pct,
        })
    }
}

pub const MI_CSV_HEADER: [&str; 8] = [
    "modality_subset",
    "window_len",
    "samples",
    "bins",
    "mi_bits",
    "h_cond_bits",
    "projected_accuracy_pct",
    "measured_accuracy_pct",
];

pub fn write_mi_csv<W: Write>(out: W, rows: &[MiRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MI_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.modality_subset.clone(),
            r.window_len.to_string(),
            r.samples.to_string(),
            r.bins.to_string(),
            format!("{:.6}", r.mi_bits),
            format!("{:.6}", r.h_cond_bits),
            format!("{:.4}", r.projected_accuracy_pct),
            r.measured_accuracy_pct
                .map_or_else(String::new, |a| format!("{a:.4}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        let u10 = vec![0.1f64; 10];
        assert!((entropy(&u10).unwrap() - 10f64.log2()).abs() < 1e-12);
        assert!((entropy(&u10).unwrap() - 3.3219).abs() < 1e-4);
        assert_eq!(entropy(&[1.0f64, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(entropy(&[0.5f64, 0.5]).unwrap(), 1.0);
        assert!(entropy(&[0.5f64, 0.6]).is_err());
    }

    #[test]
    fn mutual_information_examples() {
        let indep = DiscreteJoint::from_rows(&[vec![0.06, 0.14], vec![0.24, 0.56]]).unwrap();
        assert!(mutual_information(&indep).abs() < 1e-12);
        let diag = DiscreteJoint::from_rows(
            &(0..4)
                .map(|i| {
                    let mut r = vec![0.0; 4];
                    r[i] = 0.25;
                    r
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((mutual_information(&diag) - 2.0).abs() < 1e-12);
        assert!(conditional_entropy(&diag).abs() < 1e-12);

        let t = DiscreteJoint::from_rows(&[vec![0.4, 0.1], vec![0.1, 0.4]]).unwrap();
        // oracle: H(X)=H(Y)=1, H(X,Y) = −2(0.4 log 0.4 + 0.1 log 0.1)
        let hxy = -2.0 * (0.4 * 0.4f64.log2() + 0.1 * 0.1f64.log2());
        assert!((mutual_information(&t) - (2.0 - hxy)).abs() < 1e-12);
        assert!((mutual_information(&t) - 0.2781).abs() < 1e-4);
        assert!((conditional_entropy(&t) - 0.7219).abs() < 1e-4);

        let u = DiscreteJoint::from_weights(vec![10, 3], vec![1.0; 30]).unwrap();
        assert!((conditional_entropy(&u) - 10f64.log2()).abs() < 1e-12);

        assert!(DiscreteJoint::from_rows(&[vec![0.5, 0.6]]).is_err());
        assert!(DiscreteJoint::from_rows(&[vec![-0.5, 1.5]]).is_err());
    }

    #[test]
    fn marginals_sum_out_axes() {
        let j =
            DiscreteJoint::from_weights(vec![2, 3, 2], (1..=12).map(f64::from).collect()).unwrap();
        let m = j.marginal(&[0, 1]).unwrap();
        assert_eq!(m.shape(), &[2, 3]);
        assert!((m.table()[0] - 3.0 / 78.0).abs() < 1e-15);
        let x = j.marginal(&[0]).unwrap();
        assert!((x.table().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bound_and_projection_examples() {
        assert_eq!(error_bound(0.0).unwrap(), 0.0);
        assert_eq!(error_bound(0.72).unwrap(), 0.72);
        assert_eq!(error_bound(3.32).unwrap(), 3.32);
        assert!(error_bound(-0.1).is_err());
        let p = projected_accuracy(3.32, 1.82).unwrap();
        assert!((p - 1.5 / 3.32 * 100.0).abs() < 1e-12);
        assert!((p - 45.2).abs() < 0.05);
        assert!(!PAPER_ACCURACY_BAND.contains(p));
        assert_eq!(projected_accuracy(3.32, 0.0).unwrap(), 100.0);
        assert_eq!(projected_accuracy(3.32, 3.32).unwrap(), 0.0);
        assert!(projected_accuracy(3.32, 4.0).is_err());
    }

    #[test]
    fn binning_keeps_ties_together() {
        let v = [1.0, 1.0, 1.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let e = equal_frequency_edges(&v, 4);
        let b: Vec<usize> = v.iter().map(|&x| bin_index(&e, x)).collect();
        assert!(b[..4].iter().all(|&x| x == b[0]));
        assert!(b.windows(2).all(|w| w[0] <= w[1]));
        let e = equal_frequency_edges(&[0.0, 1.0, 2.0, 3.0], 2);
        assert_eq!(e, vec![2.0]);
    }

    #[test]
    fn plugin_mi_and_jackknife() {
        let labels: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let same: Vec<u64> = labels.iter().map(|&l| l as u64 * 7).collect();
        let (mi, hx, bias, _) = plugin_mi(&labels, &same).unwrap();
        assert!((mi - 2.0).abs() < 1e-12 && (hx - 2.0).abs() < 1e-12);
        assert!(bias.abs() < 1e-2);

        // jackknife oracle: explicit leave-one-out on a tiny sample
        let l = [0usize, 0, 1, 1, 1, 0];
        let s = [0u64, 1, 1, 1, 0, 0];
        let (mi, _, bias, _) = plugin_mi(&l, &s).unwrap();
        let loo: f64 = (0..6)
            .map(|k| {
                let (lk, sk): (Vec<usize>, Vec<u64>) =
                    (0..6).filter(|&i| i != k).map(|i| (l[i], s[i])).unzip();
                plugin_mi(&lk, &sk).unwrap().0
            })
            .sum::<f64>()
            / 6.0;
        assert!((bias - 5.0 * (loo - mi)).abs() < 1e-12);
    }

    #[test]
    fn spectral_peak_finds_a_tone() {
        let ch: Vec<f64> = (0..256)
            .map(|i| (2.0 * std::f64::consts::PI * 13.0 * i as f64 / 256.0).sin())
            .collect();
        assert_eq!(spectral_peak(&[ch], 256.0), Some(13.0));
    }

    #[test]
    fn markov_window_mi_grows_with_window() {
        let t = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.1, 0.1, 0.8],
        ];
        let e = vec![
            vec![0.6, 0.2, 0.2],
            vec![0.2, 0.6, 0.2],
            vec![0.2, 0.2, 0.6],
        ];
        let mis: Vec<f64> = (1..=5)
            .map(|w| markov_window_mi(&t, &e, w).unwrap())
            .collect();
        assert!(mis.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{mis:?}");
        assert!(mis[4] > mis[0]);
        // perfect emissions: one observation already reveals the intent
        let eye = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        assert!((markov_window_mi(&t, &eye, 1).unwrap() - 3f64.log2()).abs() < 1e-9);
    }

    #[test]
    fn mi_csv_layout() {
        let e = MiEstimate {
            subset: "gaze".into(),
            window_len: 1,
            samples: 10,
            bins: 8,
            mi_bits: 1.0,
            h_intent_bits: 2.0,
            h_cond_bits: 1.0,
            jackknife_bias: 0.0,
            bias_corrected_bits: 1.0,
            occupied_cells: 4,
            warning: None,
        };
        let row = MiRow::from_estimate(&e, Some(80.0)).unwrap();
        assert_eq!(row.projected_accuracy_pct, 50.0);
        let mut buf = Vec::new();
        write_mi_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), MI_CSV_HEADER.join(","));
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "gaze,1,10,8,1.000000,1.000000,50.0000,80.0000"
        );
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn joint(nx: usize, ny: usize) -> impl Strategy<Value = DiscreteJoint> {
            prop::collection::vec(0.0f64..1.0, nx * ny)
                .prop_filter("positive mass", |w| w.iter().sum::<f64>() > 1e-6)
                .prop_map(move |w| DiscreteJoint::from_weights(vec![nx, ny], w).unwrap())
        }

        proptest! {
            #[test]
            fn mi_is_bounded_by_marginal_entropies(j in joint(4, 5)) {
                let mi = mutual_information(&j);
                prop_assert!(mi >= 0.0);
                prop_assert!(mi <= j.intent_entropy().min(j.signal_entropy()) + 1e-9);
            }

            #[test]
            fn chain_identity_holds(j in joint(5, 3)) {
                let total = conditional_entropy(&j) + mutual_information(&j);
                prop_assert!((total - j.intent_entropy()).abs() < 1e-9);
            }
        }
    }
}
