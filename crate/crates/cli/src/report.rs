//! Report tables, the discrepancy log and atomic bundle output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use zia_core::adapt::{write_curve_csv, EpochStats};
use zia_core::edgecost::{write_cost_csv, Band, CompressionReport, CostRow};
use zia_core::infomet::{write_mi_csv, MiRow};
use zia_core::pipeline::AccuracyRow;

use crate::error::Result;

/// Version of the bundle layout, recorded in every summary.
pub const ARTIFACT_VERSION: &str = "1";

pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const MI_FILE: &str = "mi.csv";
pub const COST_FILE: &str = "cost.csv";
pub const CURVE_FILE: &str = "learning_curve.csv";
pub const DISCREPANCY_FILE: &str = "discrepancies.csv";
pub const SENSITIVITY_FILE: &str = "sensitivity.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// A computed value next to a quoted band.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Discrepancy {
    pub id: String,
    pub quantity: String,
    pub computed: f64,
    pub unit: String,
    pub paper_band: Band,
    /// Set when `computed` lies outside `paper_band`.
    pub discrepancy_flag: bool,
    pub note: String,
}

impl Discrepancy {
    pub fn new(
        id: &str,
        quantity: &str,
        computed: f64,
        unit: &str,
        band: Band,
        note: &str,
    ) -> Self {
        Self {
            id: id.into(),
            quantity: quantity.into(),
            computed,
            unit: unit.into(),
            paper_band: band,
            discrepancy_flag: !band.contains(computed),
            note: note.into(),
        }
    }
}

pub const DISCREPANCY_CSV_HEADER: [&str; 7] = [
    "id",
    "quantity",
    "computed",
    "unit",
    "paper_band",
    "discrepancy_flag",
    "note",
];

/// Accuracy under a perturbed noise model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub noise_kind: String,
    pub noise_scale: f64,
    pub modality_subset: String,
    pub mi_bits: Option<f64>,
    pub accuracy_pct: Option<f64>,
}

pub const SENSITIVITY_CSV_HEADER: [&str; 5] = [
    "noise_kind",
    "noise_scale",
    "modality_subset",
    "mi_bits",
    "accuracy_pct",
];

/// Compression applied to the full-modality model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionOutcome {
    pub report: CompressionReport,
    pub accuracy_before_pct: f64,
    pub accuracy_after_pct: f64,
}

/// Everything one `run` produces.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReportBundle {
    pub name: String,
    pub seed: u64,
    pub config_sha256: String,
    pub accuracy: Vec<AccuracyRow>,
    pub mi: Vec<MiRow>,
    pub cost: Vec<CostRow>,
    pub curve: Vec<EpochStats>,
    pub discrepancies: Vec<Discrepancy>,
    pub sensitivity: Vec<SensitivityRow>,
    pub compression: Option<CompressionOutcome>,
    pub warnings: Vec<String>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_discrepancy_csv<W: Write>(out: W, rows: &[Discrepancy]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DISCREPANCY_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.id.clone(),
            r.quantity.clone(),
            r.computed.to_string(),
            r.unit.clone(),
            r.paper_band.label(&r.unit),
            r.discrepancy_flag.to_string(),
            r.note.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sensitivity_csv<W: Write>(out: W, rows: &[SensitivityRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SENSITIVITY_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.noise_kind.clone(),
            r.noise_scale.to_string(),
            r.modality_subset.clone(),
            opt(r.mi_bits),
            opt(r.accuracy_pct),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Serialize)]
struct TableInfo {
    rows: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Summary<'a> {
    artifact_version: &'a str,
    name: &'a str,
    seed: u64,
    config_sha256: &'a str,
    tables: BTreeMap<&'a str, TableInfo>,
    discrepancies_flagged: usize,
    compression: &'a Option<CompressionOutcome>,
    warnings: &'a [String],
}

impl ReportBundle {
    /// File name and body of every table, then the summary.
    pub fn render(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        let mut files: Vec<(&'static str, Vec<u8>, usize)> = Vec::new();
        let mut buf = Vec::new();
        zia_core::pipeline::write_accuracy_csv(&mut buf, &self.accuracy)?;
        files.push((ACCURACY_FILE, std::mem::take(&mut buf), self.accuracy.len()));
        write_mi_csv(&mut buf, &self.mi)?;
        files.push((MI_FILE, std::mem::take(&mut buf), self.mi.len()));
        write_cost_csv(&mut buf, &self.cost)?;
        files.push((COST_FILE, std::mem::take(&mut buf), self.cost.len()));
        write_curve_csv(&mut buf, &self.curve)?;
        files.push((CURVE_FILE, std::mem::take(&mut buf), self.curve.len()));
        write_discrepancy_csv(&mut buf, &self.discrepancies)?;
        files.push((
            DISCREPANCY_FILE,
            std::mem::take(&mut buf),
            self.discrepancies.len(),
        ));
        if !self.sensitivity.is_empty() {
            write_sensitivity_csv(&mut buf, &self.sensitivity)?;
            files.push((
                SENSITIVITY_FILE,
                std::mem::take(&mut buf),
                self.sensitivity.len(),
            ));
        }
        let tables = files
            .iter()
            .map(|(name, body, rows)| {
                (
                    *name,
                    TableInfo {
                        rows: *rows,
                        sha256: sha256_hex(body),
                    },
                )
            })
            .collect();
        let summary = Summary {
            artifact_version: ARTIFACT_VERSION,
            name: &self.name,
            seed: self.seed,
            config_sha256: &self.config_sha256,
            tables,
            discrepancies_flagged: self
                .discrepancies
                .iter()
                .filter(|d| d.discrepancy_flag)
                .count(),
            compression: &self.compression,
            warnings: &self.warnings,
        };
        let mut json = serde_json::to_vec_pretty(&summary).map_err(zia_core::ZiaError::from)?;
        json.push(b'\n');
        let mut out: Vec<(&'static str, Vec<u8>)> =
            files.into_iter().map(|(n, b, _)| (n, b)).collect();
        out.push((SUMMARY_FILE, json));
        Ok(out)
    }

    /// Writes the bundle to `dir` atomically.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let files = self.render()?;
        write_atomically(dir, |stage| {
            for (name, body) in &files {
                fs::write(stage.join(name), body)?;
            }
            Ok(())
        })
    }
}

/// Fills a staging directory next to `dir`, then renames it into place.
/// The staging directory is removed when `fill` fails.
pub fn write_atomically(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let leaf = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    let stage = parent.join(format!(".{leaf}.partial-{}", std::process::id()));
    if stage.exists() {
        fs::remove_dir_all(&stage)?;
    }
    fs::create_dir(&stage)?;
    if let Err(e) = fill(&stage) {
        let _ = fs::remove_dir_all(&stage);
        return Err(e);
    }
    let backup = parent.join(format!(".{leaf}.old-{}", std::process::id()));
    let had_old = dir.exists();
    if had_old {
        fs::rename(dir, &backup)?;
    }
    if let Err(e) = fs::rename(&stage, dir) {
        if had_old {
            let _ = fs::rename(&backup, dir);
        }
        let _ = fs::remove_dir_all(&stage);
        return Err(e.into());
    }
    if had_old {
        fs::remove_dir_all(&backup)?;
    }
    Ok(())
}
