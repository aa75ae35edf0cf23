//! The `bench-attention` command: counted ops and wall time of both kernels.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use zia_core::attention::{linear_attention, softmax_attention, AttentionKind};
use zia_core::edgecost::{attention_layer_ops, count_ops};
use zia_core::matrix::Matrix;
use zia_core::predictor::TransformerConfig;
use zia_core::rng;

use crate::error::{CliError, Result};
use crate::report::write_atomically;

pub const DEFAULT_NS: [usize; 4] = [32, 64, 128, 256];
pub const BENCH_FILE: &str = "bench_attention.csv";
pub const BENCH_SUMMARY_FILE: &str = "bench_summary.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    /// Attention-term ops of one layer.
    pub softmax_attention_ops: u64,
    pub linear_attention_ops: u64,
    /// Whole-model counts at sequence length `n`.
    pub softmax_ops: u64,
    pub linear_ops: u64,
    /// `linear_ops / softmax_ops`.
    pub ops_ratio: f64,
    pub softmax_wall_ms: f64,
    pub linear_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Quadratic-in-N fit of the softmax attention ops.
    pub softmax_quadratic_r2: f64,
    /// Linear-in-N fit of the linear attention ops.
    pub linear_linear_r2: f64,
    /// Linear-in-N fit of the softmax attention ops, for contrast.
    pub softmax_linear_r2: f64,
}

pub const BENCH_CSV_HEADER: [&str; 8] = [
    "n",
    "softmax_attention_ops",
    "linear_attention_ops",
    "softmax_ops",
    "linear_ops",
    "ops_ratio",
    "softmax_wall_ms",
    "linear_wall_ms",
];

/// Coefficient of determination of a least-squares polynomial fit.
pub fn poly_fit_r2(xs: &[f64], ys: &[f64], degree: usize) -> f64 {
    let scale = xs
        .iter()
        .copied()
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let x = DMatrix::from_fn(xs.len(), degree + 1, |i, j| (xs[i] / scale).powi(j as i32));
    let y = DVector::from_column_slice(ys);
    let coef = match x.clone().svd(true, true).solve(&y, 1e-14) {
        Ok(c) => c,
        Err(_) => return f64::NAN,
    };
    let resid = &y - &x * coef;
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return 1.0;
    }
    1.0 - resid.norm_squared() / ss_tot
}

fn time_kernel(f: impl Fn() -> zia_core::Result<Matrix<f64>>, reps: usize) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f()?);
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / reps as f64)
}

/// Counted ops and mean wall time per layer for every `n`.
pub fn bench_attention(
    ns: &[usize],
    config: &TransformerConfig,
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    if ns.is_empty() {
        return Err(CliError::Config(
            "bench-attention needs at least one N".into(),
        ));
    }
    config.validate()?;
    let (d, h) = (config.model_dim, config.heads);
    let dh = config.head_dim();
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        if n == 0 {
            return Err(CliError::Config("N must be positive".into()));
        }
        let at = |kind| TransformerConfig {
            attention_kind: kind,
            sequence_len: n,
            ..config.clone()
        };
        let softmax_ops = count_ops(&at(AttentionKind::Softmax))?;
        let linear_ops = count_ops(&at(AttentionKind::Linear))?;
        let mut r = rng::indexed_stream(seed, "bench", n as u64);
        let q = Matrix::randn(n, dh, 1.0, &mut r);
        let k = Matrix::randn(n, dh, 1.0, &mut r);
        let v = Matrix::randn(n, dh, 1.0, &mut r);
        let reps = reps.max(1);
        // one layer runs `h` heads of width `dh`
        let softmax_wall_ms = h as f64 * time_kernel(|| softmax_attention(&q, &k, &v), reps)?;
        let linear_wall_ms = h as f64 * time_kernel(|| linear_attention(&q, &k, &v), reps)?;
        rows.push(BenchRow {
            n,
            softmax_attention_ops: attention_layer_ops(
                AttentionKind::Softmax,
                n as u64,
                d as u64,
                h as u64,
            ),
            linear_attention_ops: attention_layer_ops(
                AttentionKind::Linear,
                n as u64,
                d as u64,
                h as u64,
            ),
            softmax_ops,
            linear_ops,
            ops_ratio: linear_ops as f64 / softmax_ops as f64,
            softmax_wall_ms,
            linear_wall_ms,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let soft: Vec<f64> = rows
        .iter()
        .map(|r| r.softmax_attention_ops as f64)
        .collect();
    let lin: Vec<f64> = rows.iter().map(|r| r.linear_attention_ops as f64).collect();
    Ok(BenchReport {
        softmax_quadratic_r2: poly_fit_r2(&xs, &soft, 2),
        linear_linear_r2: poly_fit_r2(&xs, &lin, 1),
        softmax_linear_r2: poly_fit_r2(&xs, &soft, 1),
        rows,
    })
}

pub fn write_bench_csv<W: std::io::Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BENCH_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.softmax_attention_ops.to_string(),
            r.linear_attention_ops.to_string(),
            r.softmax_ops.to_string(),
            r.linear_ops.to_string(),
            r.ops_ratio.to_string(),
            format!("{:.6}", r.softmax_wall_ms),
            format!("{:.6}", r.linear_wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

impl BenchReport {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let mut csv_body = Vec::new();
        write_bench_csv(&mut csv_body, &self.rows)?;
        let mut json = serde_json::to_vec_pretty(self).map_err(zia_core::ZiaError::from)?;
        json.push(b'\n');
        write_atomically(dir, |stage| {
            std::fs::write(stage.join(BENCH_FILE), &csv_body)?;
            std::fs::write(stage.join(BENCH_SUMMARY_FILE), &json)?;
            Ok(())
        })
    }
}
