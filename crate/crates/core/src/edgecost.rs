//! Edge deployment cost model: fixed-point weight quantization, magnitude
//! pruning, analytic operation counts and latency/power projections.
//!
//! Operation convention: one multiply-accumulate is two operations.
//! Embedding lookups and layer normalisation are not counted.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{arg_err, config_err, Result};
use crate::matrix::Matrix;
use crate::params::{ParamKind, ParamSet};
use crate::predictor::TransformerConfig;
use crate::scalar::Scalar;

/// Quantization step `2⁻⁷`.
pub const QUANT_SCALE: f64 = 1.0 / 128.0;
pub const QUANT_CLAMP: i8 = 127;

/// Hardware tuple driving the latency and power projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostProfile {
    pub name: String,
    pub freq_hz: f64,
    pub cycles_per_op: f64,
    pub t_io_s: f64,
    pub energy_per_op_j: f64,
}

/// The shipped cpu/tpu/npu profiles.
pub const HARDWARE_PROFILES_JSON: &str = include_str!("../presets/hardware.json");

impl CostProfile {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("freq_hz", self.freq_hz),
            ("cycles_per_op", self.cycles_per_op),
            ("t_io_s", self.t_io_s),
            ("energy_per_op_j", self.energy_per_op_j),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return config_err(format!(
                    "profile {}: {name} must be positive, got {v}",
                    self.name
                ));
            }
        }
        if self.name.is_empty() {
            return config_err("profile name must not be empty");
        }
        Ok(())
    }

    pub fn builtin() -> Vec<CostProfile> {
        serde_json::from_str(HARDWARE_PROFILES_JSON).expect("shipped hardware profiles parse")
    }

    pub fn named(name: &str) -> Option<CostProfile> {
        Self::builtin().into_iter().find(|p| p.name == name)
    }

    pub fn load_all(json: &str) -> Result<Vec<CostProfile>> {
        let profiles: Vec<CostProfile> = serde_json::from_str(json)?;
        for p in &profiles {
            p.validate()?;
        }
        Ok(profiles)
    }
}

/// `T = N_ops · C / f + T_io`, in seconds.
pub fn latency(n_ops: u64, profile: &CostProfile) -> f64 {
    n_ops as f64 * profile.cycles_per_op / profile.freq_hz + profile.t_io_s
}

/// `P = N_ops · E_op / T`, in watts.
pub fn power(n_ops: u64, energy_per_op_j: f64, t_inf_s: f64) -> Result<f64> {
    if !(t_inf_s > 0.0) {
        return arg_err(format!("inference time must be positive, got {t_inf_s}"));
    }
    Ok(n_ops as f64 * energy_per_op_j / t_inf_s)
}

/// Signed 8-bit codes at scale `2⁻⁷`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<i8>,
    /// Inputs whose code hit the ±127 clamp.
    pub saturated: usize,
}

impl QuantizedTensor {
    pub fn scale() -> f64 {
        QUANT_SCALE
    }

    pub fn dequantize<T: Scalar>(&self) -> Matrix<T> {
        let data = self
            .codes
            .iter()
            .map(|&c| T::lit(c as f64 * QUANT_SCALE))
            .collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("codes match the recorded shape")
    }
}

/// Fixed-point encoding of one value, with a saturation flag.
pub fn quantize_value(w: f64) -> (i8, bool) {
    let raw = (w / QUANT_SCALE).round();
    let lim = QUANT_CLAMP as f64;
    if raw > lim {
        (QUANT_CLAMP, true)
    } else if raw < -lim {
        (-QUANT_CLAMP, true)
    } else if raw.is_nan() {
        (0, true)
    } else {
        (raw as i8, false)
    }
}

/// `codes = round(w / 2⁻⁷)` clamped to ±127.
pub fn quantize<T: Scalar>(w: &Matrix<T>) -> QuantizedTensor {
    let mut saturated = 0;
    let codes = w
        .as_slice()
        .iter()
        .map(|v| {
            let (c, sat) = quantize_value(v.as_f64());
            saturated += usize::from(sat);
            c
        })
        .collect();
    QuantizedTensor {
        rows: w.rows(),
        cols: w.cols(),
        codes,
        saturated,
    }
}

/// Keep-mask after magnitude pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub mask: Vec<bool>,
    pub rho: f64,
}

impl PruneMask {
    pub fn pruned(&self) -> usize {
        self.mask.iter().filter(|&&k| !k).count()
    }

    pub fn apply<T: Scalar>(&self, w: &mut [T]) -> Result<()> {
        if w.len() != self.mask.len() {
            return arg_err("mask length differs from the tensor");
        }
        w.iter_mut()
            .zip(&self.mask)
            .filter(|(_, &k)| !k)
            .for_each(|(x, _)| *x = T::zero());
        Ok(())
    }
}

/// Zeroes exactly `⌊ρ·n⌋` smallest-magnitude entries; ties go to the lower index first.
pub fn prune<T: Scalar>(w: &[T], rho: f64) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&rho) {
        return arg_err(format!("rho must lie in [0, 1), got {rho}"));
    }
    let count = (rho * w.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| {
        w[a].abs()
            .as_f64()
            .total_cmp(&w[b].abs().as_f64())
            .then(a.cmp(&b))
    });
    let mut mask = vec![true; w.len()];
    for &i in &order[..count] {
        mask[i] = false;
    }
    Ok(PruneMask { mask, rho })
}

/// Per-layer and total operation counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpBreakdown {
    /// Q, K, V and output projections, all layers.
    pub projections: u64,
    /// Score and mixing terms (or their factored form), all layers.
    pub attention: u64,
    pub ffn: u64,
    pub head: u64,
    pub total: u64,
}

/// Attention-term operations of one layer, summed over heads. Matches the
/// tallies of the instrumented kernels in [`crate::attention`].
pub fn attention_layer_ops(kind: AttentionKind, n: u64, d: u64, heads: u64) -> u64 {
    let dh = d / heads;
    match kind {
        // scores and mixing: 2 matmuls of n·n·dh MACs; softmax: 4 ops per score
        AttentionKind::Softmax => heads * (4 * n * n * dh + 4 * n * n),
        // φ on q and k, φ(K)ᵀV and φ(Q)(·): 4n·dh²; normalisation: 4n·dh
        AttentionKind::Linear => heads * (4 * n * dh * dh + 10 * n * dh + 2 * n),
    }
}

pub fn count_breakdown(config: &TransformerConfig) -> Result<OpBreakdown> {
    config.validate()?;
    let (l, n, d, f, h, k) = (
        config.layers as u64,
        config.sequence_len as u64,
        config.model_dim as u64,
        config.ffn_dim as u64,
        config.heads as u64,
        config.intent_count as u64,
    );
    let projections = l * 8 * n * d * d;
    let attention = l * attention_layer_ops(config.attention_kind, n, d, h);
    let ffn = l * 4 * n * d * f;
    let head = 2 * d * k;
    Ok(OpBreakdown {
        projections,
        attention,
        ffn,
        head,
        total: projections + attention + ffn + head,
    })
}

pub fn count_ops(config: &TransformerConfig) -> Result<u64> {
    Ok(count_breakdown(config)?.total)
}

/// Statistics of [`apply_compression`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub rho: f64,
    pub quantized: bool,
    /// Entries in `Weight` tensors, the only ones compressed.
    pub weights_total: usize,
    pub pruned: usize,
    pub sparsity: f64,
    pub saturated: usize,
    /// Largest `|w − dequant(quant(w))|` over surviving weights.
    pub max_quant_error: f64,
    /// Mean absolute change over all compressed entries.
    pub mean_abs_delta: f64,
}

/// Per-tensor magnitude pruning then quantize/dequantize of every `Weight` tensor.
pub fn apply_compression<T: Scalar>(
    weights: &ParamSet<T>,
    rho: f64,
    quantize_flag: bool,
) -> Result<(ParamSet<T>, CompressionReport)> {
    let mut out = weights.clone();
    let (mut total, mut pruned, mut saturated) = (0usize, 0usize, 0usize);
    let (mut max_err, mut abs_delta) = (0.0f64, 0.0f64);
    for p in out.iter_mut() {
        if p.kind != ParamKind::Weight {
            continue;
        }
        let original = p.value.clone();
        let mask = prune(p.value.as_slice(), rho)?;
        mask.apply(p.value.as_mut_slice())?;
        pruned += mask.pruned();
        if quantize_flag {
            let q = quantize(&p.value);
            saturated += q.saturated;
            let deq: Matrix<T> = q.dequantize();
            for (a, b) in p.value.as_slice().iter().zip(deq.as_slice()) {
                max_err = max_err.max((a.as_f64() - b.as_f64()).abs());
            }
            p.value = deq;
        }
        total += original.len();
        abs_delta += original
            .as_slice()
            .iter()
            .zip(p.value.as_slice())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .sum::<f64>();
    }
    let report = CompressionReport {
        rho,
        quantized: quantize_flag,
        weights_total: total,
        pruned,
        sparsity: if total == 0 {
            0.0
        } else {
            pruned as f64 / total as f64
        },
        saturated,
        max_quant_error: max_err,
        mean_abs_delta: if total == 0 {
            0.0
        } else {
            abs_delta / total as f64
        },
    };
    Ok((out, report))
}

/// A closed interval quoted for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    /// `lo-hi` with the given unit suffix.
    pub fn label(&self, unit: &str) -> String {
        format!("{}-{} {unit}", fmt_num(self.lo), fmt_num(self.hi))
    }
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

/// Operation count quoted for each attention kind.
pub fn paper_ops(kind: AttentionKind) -> u64 {
    match kind {
        AttentionKind::Softmax => 100_000_000,
        AttentionKind::Linear => 50_000_000,
    }
}

/// Quoted latency band in milliseconds for a profile and attention kind.
pub fn paper_latency_band(profile: &str, kind: AttentionKind) -> Option<Band> {
    match (profile, kind) {
        ("cpu", AttentionKind::Softmax) => Some(Band::new(80.0, 90.0)),
        ("tpu", AttentionKind::Softmax) => Some(Band::new(60.0, 70.0)),
        ("npu", AttentionKind::Softmax) => Some(Band::new(70.0, 80.0)),
        ("cpu", AttentionKind::Linear) => Some(Band::new(45.0, 55.0)),
        ("tpu", AttentionKind::Linear) => Some(Band::new(35.0, 45.0)),
        ("npu", AttentionKind::Linear) => Some(Band::new(40.0, 50.0)),
        _ => None,
    }
}

/// Quoted power figure: the `(N_ops, T_inf)` it was derived from and the band in milliwatts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaperPower {
    pub n_ops: u64,
    pub t_inf_s: f64,
    pub band_mw: Band,
}

pub fn paper_power(profile: &str, kind: AttentionKind) -> Option<PaperPower> {
    match (profile, kind) {
        ("cpu", AttentionKind::Softmax) => Some(PaperPower {
            n_ops: 100_000_000,
            t_inf_s: 0.090,
            band_mw: Band::new(110.0, 130.0),
        }),
        ("tpu", AttentionKind::Linear) => Some(PaperPower {
            n_ops: 50_000_000,
            t_inf_s: 0.045,
            band_mw: Band::new(80.0, 90.0),
        }),
        ("npu", AttentionKind::Linear) => Some(PaperPower {
            n_ops: 50_000_000,
            t_inf_s: 0.050,
            band_mw: Band::new(85.0, 95.0),
        }),
        _ => None,
    }
}

/// Where a row's operation count comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpsSource {
    /// The round figure quoted for the full-size model.
    PaperAnchor,
    /// [`count_ops`] on the configured model.
    Counted,
    /// [`count_ops`] with weight-bearing terms scaled by `1 − ρ`.
    CountedPruned,
}

impl OpsSource {
    pub fn as_str(self) -> &'static str {
        match self {
            OpsSource::PaperAnchor => "paper_anchor",
            OpsSource::Counted => "counted",
            OpsSource::CountedPruned => "counted_pruned",
        }
    }
}

/// One row of the cost table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub profile: String,
    pub attention_kind: AttentionKind,
    pub ops_source: OpsSource,
    pub n_ops: u64,
    pub latency_ms: f64,
    pub power_w: f64,
    pub paper_band: Option<Band>,
    /// Set when a quoted latency band exists and the value falls outside it.
    pub discrepancy_flag: bool,
    /// Quoted power band (mW) for the quoted `(N_ops, T_inf)` pair.
    pub power_paper_band: Option<Band>,
    /// Formula power at the quoted `(N_ops, E_op, T_inf)` outside the quoted band.
    pub power_discrepancy_flag: bool,
}

/// Operation count with projections, feed-forward and head scaled by the kept fraction.
pub fn pruned_ops(config: &TransformerConfig, rho: f64) -> Result<u64> {
    let b = count_breakdown(config)?;
    let keep = 1.0 - rho;
    let weighted = ((b.projections + b.ffn + b.head) as f64 * keep).round() as u64;
    Ok(weighted + b.attention)
}

/// Builds one row, attaching quoted bands and flags.
pub fn cost_row(
    profile: &CostProfile,
    kind: AttentionKind,
    source: OpsSource,
    n_ops: u64,
) -> Result<CostRow> {
    let t = latency(n_ops, profile);
    let latency_ms = t * 1e3;
    let power_w = power(n_ops, profile.energy_per_op_j, t)?;
    let paper_band = paper_latency_band(&profile.name, kind);
    let discrepancy_flag = paper_band.is_some_and(|b| !b.contains(latency_ms));
    let quoted = paper_power(&profile.name, kind);
    let power_discrepancy_flag = match quoted {
        Some(q) => !q
            .band_mw
            .contains(power(q.n_ops, profile.energy_per_op_j, q.t_inf_s)? * 1e3),
        None => false,
    };
    Ok(CostRow {
        profile: profile.name.clone(),
        attention_kind: kind,
        ops_source: source,
        n_ops,
        latency_ms,
        power_w,
        paper_band,
        discrepancy_flag,
        power_paper_band: quoted.map(|q| q.band_mw),
        power_discrepancy_flag,
    })
}

/// Rows for every profile × kind × source.
pub fn cost_table(
    profiles: &[CostProfile],
    config: &TransformerConfig,
    rho: Option<f64>,
) -> Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    for p in profiles {
        p.validate()?;
        for kind in [AttentionKind::Softmax, AttentionKind::Linear] {
            let cfg = TransformerConfig {
                attention_kind: kind,
                ..config.clone()
            };
            rows.push(cost_row(p, kind, OpsSource::PaperAnchor, paper_ops(kind))?);
            rows.push(cost_row(p, kind, OpsSource::Counted, count_ops(&cfg)?)?);
            if let Some(r) = rho {
                rows.push(cost_row(
                    p,
                    kind,
                    OpsSource::CountedPruned,
                    pruned_ops(&cfg, r)?,
                )?);
            }
        }
    }
    Ok(rows)
}

pub const COST_CSV_HEADER: [&str; 10] = [
    "profile",
    "attention_kind",
    "ops_source",
    "n_ops",
    "latency_ms",
    "power_w",
    "paper_band",
    "discrepancy_flag",
    "power_paper_band",
    "power_discrepancy_flag",
];

pub fn write_cost_csv<W: Write>(out: W, rows: &[CostRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COST_CSV_HEADER)?;
    for r in rows {
        let kind = match r.attention_kind {
            AttentionKind::Softmax => "softmax",
            AttentionKind::Linear => "linear",
        };
        w.write_record([
            r.profile.clone(),
            kind.to_string(),
            r.ops_source.as_str().to_string(),
            r.n_ops.to_string(),
            format!("{:.6}", r.latency_ms),
            format!("{:.6}", r.power_w),
            r.paper_band.map_or_else(String::new, |b| b.label("ms")),
            r.discrepancy_flag.to_string(),
            r.power_paper_band
                .map_or_else(String::new, |b| b.label("mW")),
            r.power_discrepancy_flag.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cpu() -> CostProfile {
        CostProfile::named("cpu").unwrap()
    }

    #[test]
    fn shipped_profiles_are_valid() {
        let all = CostProfile::load_all(HARDWARE_PROFILES_JSON).unwrap();
        assert_eq!(
            all.iter().map(|p| p.name.as_str()).collect::<Vec<_>>(),
            ["cpu", "tpu", "npu"]
        );
        let bad =
            r#"[{"name":"x","freq_hz":0,"cycles_per_op":1,"t_io_s":0.01,"energy_per_op_j":1e-9}]"#;
        assert!(CostProfile::load_all(bad).is_err());
    }

    #[test]
    fn latency_examples() {
        let p = cpu();
        let t = latency(100_000_000, &p) * 1e3;
        let expect = 1e8 * 2.0 / 2.84e9 * 1e3 + 10.0;
        assert!((t - expect).abs() / expect < 1e-12);
        assert!((t - 80.42).abs() < 0.005);
        assert!(Band::new(80.0, 90.0).contains(t));
        let t2 = latency(50_000_000, &p) * 1e3;
        assert!((t2 - 45.21).abs() < 0.005);
        assert!(Band::new(45.0, 55.0).contains(t2));
        assert_eq!(latency(0, &p), p.t_io_s);
    }

    #[test]
    fn power_examples() {
        let w = power(100_000_000, 1.5e-9, 0.090).unwrap();
        assert!((w - 1.5 / 0.9).abs() / w < 1e-12);
        assert!(!Band::new(110.0, 130.0).contains(w * 1e3));
        assert_eq!(power(0, 1e-9, 0.05).unwrap(), 0.0);
        let w = power(50_000_000, 1e-9, 0.045).unwrap();
        assert!((w - 1.111).abs() < 1e-3);
        assert!(power(1, 1e-9, 0.0).is_err());
    }

    #[test]
    fn quantize_examples() {
        let q = quantize(&Matrix::row_vector(&[0.0f64, 0.5, 0.503, 2.0, -3.0]));
        assert_eq!(q.codes, vec![0, 64, 64, 127, -127]);
        assert_eq!(q.saturated, 2);
        let d: Matrix<f64> = q.dequantize();
        assert_eq!(d.as_slice()[1], 0.5);
        assert!((d.as_slice()[2] - 0.503).abs() < 1.0 / 256.0);
        assert!((0.503f64 - 0.5 - 0.003).abs() < 1e-12);
    }

    #[test]
    fn prune_examples() {
        assert!(prune(&[1.0f64, 2.0], 0.0).unwrap().mask.iter().all(|&k| k));
        let m = prune(&[0.1f64, -0.5, 0.2, 0.9], 0.5).unwrap();
        assert_eq!(m.mask, vec![false, true, false, true]);
        let w: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 - 50.0).collect();
        assert_eq!(prune(&w, 0.45).unwrap().pruned(), 45);
        let ties = prune(&[1.0f64, 1.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(ties.mask, vec![false, false, true, true]);
        assert!(prune(&[1.0f64], 1.0).is_err());
    }

    #[test]
    fn op_counts_for_the_full_size_model() {
        let soft = TransformerConfig::paper();
        let lin = TransformerConfig {
            attention_kind: AttentionKind::Linear,
            ..soft.clone()
        };
        let (s, l) = (count_ops(&soft).unwrap(), count_ops(&lin).unwrap());
        // oracle: per layer 8Nd² + 4N²d + 4hN² + 4Ndf, plus 2dk for the head
        let (n, d, f, h) = (100u64, 128u64, 512u64, 8u64);
        let expect =
            6 * (8 * n * d * d + 4 * n * n * d + 4 * h * n * n + 4 * n * d * f) + 2 * d * 10;
        assert_eq!(s, expect);
        assert!((5e7..=3e8).contains(&(s as f64)));
        assert!(l < s);
    }

    #[test]
    fn attention_term_scaling() {
        let base = TransformerConfig::paper();
        for kind in [AttentionKind::Softmax, AttentionKind::Linear] {
            let a = count_breakdown(&TransformerConfig {
                attention_kind: kind,
                ..base.clone()
            })
            .unwrap();
            let b = count_breakdown(&TransformerConfig {
                attention_kind: kind,
                sequence_len: 200,
                ..base.clone()
            })
            .unwrap();
            let ratio = b.attention as f64 / a.attention as f64;
            let expect = if kind == AttentionKind::Softmax {
                4.0
            } else {
                2.0
            };
            assert!((ratio / expect - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn counted_attention_matches_instrumented_kernels() {
        use crate::attention::{
            linear_attention_with, softmax_attention_scaled, LinearNorm, OpCounter,
        };
        use crate::rng::stream;
        let (n, d, h) = (12usize, 8usize, 2usize);
        let dh = d / h;
        let m = |s| Matrix::<f64>::randn(n, dh, 1.0, &mut stream(s, "q"));
        let (q, k, v) = (m(1), m(2), m(3));
        let mut cs = OpCounter::default();
        let mut cl = OpCounter::default();
        for _ in 0..h {
            softmax_attention_scaled(&q, &k, &v, 0.5, Some(&mut cs)).unwrap();
            linear_attention_with(&q, &k, &v, LinearNorm::Normalized, 1e-6, Some(&mut cl)).unwrap();
        }
        let (nn, dd, hh) = (n as u64, d as u64, h as u64);
        assert_eq!(
            cs.total_ops(),
            attention_layer_ops(AttentionKind::Softmax, nn, dd, hh)
        );
        assert_eq!(
            cl.total_ops(),
            attention_layer_ops(AttentionKind::Linear, nn, dd, hh)
        );
    }

    #[test]
    fn compression_identity_and_bounds() {
        let cfg = TransformerConfig {
            layers: 1,
            model_dim: 16,
            heads: 2,
            ffn_dim: 16,
            sequence_len: 4,
            ..TransformerConfig::paper()
        };
        let w = crate::predictor::init_weights::<f64>(&cfg, 1).unwrap();
        let (same, rep) = apply_compression(&w, 0.0, false).unwrap();
        assert_eq!(same, w);
        assert_eq!((rep.pruned, rep.saturated, rep.mean_abs_delta), (0, 0, 0.0));
        let (c, rep) = apply_compression(&w, 0.45, true).unwrap();
        assert!(rep.sparsity > 0.44 && rep.sparsity <= 0.45);
        assert!(rep.max_quant_error <= 1.0 / 256.0 || rep.saturated > 0);
        // non-weight tensors untouched
        assert_eq!(
            c.get("head.logsigma").unwrap(),
            w.get("head.logsigma").unwrap()
        );
    }

    #[test]
    fn cost_rows_flag_discrepancies() {
        let rows = cost_table(
            &CostProfile::builtin(),
            &TransformerConfig::paper(),
            Some(0.45),
        )
        .unwrap();
        assert_eq!(rows.len(), 3 * 2 * 3);
        let find = |p: &str, k: AttentionKind| {
            rows.iter()
                .find(|r| {
                    r.profile == p
                        && r.attention_kind == k
                        && r.ops_source == OpsSource::PaperAnchor
                })
                .unwrap()
        };
        let c = find("cpu", AttentionKind::Softmax);
        assert!(!c.discrepancy_flag && c.power_discrepancy_flag);
        assert!(!find("cpu", AttentionKind::Linear).discrepancy_flag);
        assert!(find("tpu", AttentionKind::Softmax).discrepancy_flag);
        assert!(!find("npu", AttentionKind::Softmax).discrepancy_flag);
        let mut buf = Vec::new();
        write_cost_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(&COST_CSV_HEADER.join(",")));
        assert!(text.contains("cpu,softmax,paper_anchor,100000000,80.422535"));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn prune_is_idempotent(w in prop::collection::vec(-1.0f64..1.0, 1..60), rho in 0.0f64..0.99) {
                let m = prune(&w, rho).unwrap();
                let mut pruned = w.clone();
                m.apply(&mut pruned).unwrap();
                let m2 = prune(&pruned, rho).unwrap();
                prop_assert_eq!(m.mask, m2.mask);
            }

            #[test]
            fn latency_is_affine_in_ops(n in 0u64..1_000_000_000, c in 1u64..8) {
                let p = CostProfile::named("npu").unwrap();
                let a = latency(n, &p) - p.t_io_s;
                let b = latency(n * c, &p) - p.t_io_s;
                prop_assert!((b - c as f64 * a).abs() <= 1e-12 * b.abs().max(1e-12));
            }

            #[test]
            fn linear_to_softmax_ratio_falls_with_length(n in 2usize..400) {
                let ratio = |n: usize| {
                    let s = TransformerConfig { sequence_len: n, ..TransformerConfig::paper() };
                    let l = TransformerConfig { attention_kind: AttentionKind::Linear, ..s.clone() };
                    count_ops(&l).unwrap() as f64 / count_ops(&s).unwrap() as f64
                };
                prop_assert!(ratio(n + 1) < ratio(n));
            }
        }
    }
}
