//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{bench_attention, DEFAULT_NS};
use crate::config::{validate_config, validate_config_str, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::run::run_experiment;
use crate::simulate::simulate;

/// Environment variable overriding the output directory.
pub const OUTPUT_DIR_ENV: &str = "ZIA_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "zia",
    version,
    about = "Zero-input intent prediction experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Source {
    /// Experiment config file (JSON).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Shipped preset name.
    #[arg(long)]
    pub preset: Option<String>,
    /// Replaces the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment and write its report bundle.
    Run {
        #[command(flatten)]
        source: Source,
        /// Output directory; overrides ZIA_OUTPUT_DIR and the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Count ops and time both attention kernels over sequence lengths.
    BenchAttention {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Sequence lengths.
        #[arg(long = "n", value_delimiter = ',')]
        ns: Vec<usize>,
        /// Timed repetitions per kernel.
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Check a config without running it.
    Validate {
        #[command(flatten)]
        source: Source,
    },
    /// Write simulated episodes as CSV.
    Simulate {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
    },
}

impl Source {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::from_path(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => return Err(CliError::Config("pass --config or --preset".into())),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

/// Output directory: the flag, then `ZIA_OUTPUT_DIR`, then the config, then
/// `reports/<name><suffix>`.
pub fn resolve_output_dir(flag: Option<&Path>, cfg: &ExperimentConfig, suffix: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    match &cfg.output_dir {
        Some(p) => p.clone(),
        None => PathBuf::from("reports").join(format!("{}{suffix}", cfg.name)),
    }
}

/// Runs one command, returning what it printed.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Run { source, out, jobs } => {
            let cfg = source.load()?;
            let dir = resolve_output_dir(out.as_deref(), &cfg, "");
            let bundle = run_experiment(&cfg, *jobs)?;
            bundle.write_to(&dir)?;
            let flagged = bundle
                .discrepancies
                .iter()
                .filter(|d| d.discrepancy_flag)
                .count();
            Ok(format!(
                "{}: wrote {} ({} accuracy, {} mi, {} cost rows; {flagged} discrepancies flagged)",
                cfg.name,
                dir.display(),
                bundle.accuracy.len(),
                bundle.mi.len(),
                bundle.cost.len()
            ))
        }
        Command::BenchAttention {
            source,
            out,
            ns,
            reps,
        } => {
            let cfg = source.load()?;
            let dir = resolve_output_dir(out.as_deref(), &cfg, "-bench");
            let ns = if ns.is_empty() {
                DEFAULT_NS.to_vec()
            } else {
                ns.clone()
            };
            let report = bench_attention(&ns, &cfg.model, *reps, cfg.seed)?;
            report.write_to(&dir)?;
            Ok(format!(
                "wrote {}; R² softmax quadratic {:.6}, linear linear {:.6}",
                dir.display(),
                report.softmax_quadratic_r2,
                report.linear_linear_r2
            ))
        }
        Command::Validate { source } => {
            let mut diags = match (&source.config, &source.preset) {
                (Some(path), _) => validate_config(path)?,
                (None, Some(name)) => match crate::config::preset_source(name) {
                    Some(src) => validate_config_str(src),
                    None => vec![format!("unknown preset {name:?}")],
                },
                (None, None) => return Err(CliError::Config("pass --config or --preset".into())),
            };
            diags.sort();
            if diags.is_empty() {
                Ok("config is valid".into())
            } else {
                Err(CliError::Diagnostics(diags))
            }
        }
        Command::Simulate {
            source,
            out,
            episodes,
        } => {
            let cfg = source.load()?;
            let diags = cfg.diagnostics();
            if !diags.is_empty() {
                return Err(CliError::Diagnostics(diags));
            }
            let dir = resolve_output_dir(out.as_deref(), &cfg, "-episodes");
            simulate(&cfg.scenario_config(), *episodes, cfg.seed, &dir)?;
            Ok(format!("wrote {episodes} episodes to {}", dir.display()))
        }
    }
}
