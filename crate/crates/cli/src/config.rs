//! Experiment configuration: JSON schema, presets and validation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zia_core::adapt::{bandit_scenario, AdaptationConfig};
use zia_core::edgecost::CostProfile;
use zia_core::pipeline::{ladder_scenario, PreprocessConfig, TrainConfig};
use zia_core::predictor::TransformerConfig;
use zia_core::signals::{NoiseConfig, ScenarioConfig};

use crate::error::{CliError, Result};

/// Shipped presets, by name.
pub const PRESETS: [(&str, &str); 4] = [
    (
        "paper-projection",
        include_str!("../presets/paper-projection.json"),
    ),
    (
        "modality-ladder",
        include_str!("../presets/modality-ladder.json"),
    ),
    (
        "adaptation-bandit",
        include_str!("../presets/adaptation-bandit.json"),
    ),
    (
        "noise-sensitivity",
        include_str!("../presets/noise-sensitivity.json"),
    ),
];

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    DtwVsAttention,
    LinearVsSoftmax,
    LaplacianVsGaussian,
    ModalitySubsets,
}

/// Starting point for a scenario given by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioBase {
    /// Sticky transitions, faithful gaze and context.
    Calibrated,
    /// Gaze fidelity 0.8 and context strength 0.5 over ten intents.
    ModalityLadder,
    /// Three intents with uniform transitions.
    Bandit,
}

/// A named base scenario with optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioPreset {
    pub preset: ScenarioBase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaze_fidelity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_strength: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eeg_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ticks_per_intent: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<usize>,
}

/// Either a named base with overrides or a complete scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, try_from = "serde_json::Value")]
pub enum ScenarioSpec {
    Preset(ScenarioPreset),
    Explicit(ScenarioConfig),
}

impl TryFrom<serde_json::Value> for ScenarioSpec {
    type Error = serde_json::Error;

    // dispatch on the `preset` key so field errors name the right schema
    fn try_from(v: serde_json::Value) -> std::result::Result<Self, Self::Error> {
        if v.get("preset").is_some() {
            serde_json::from_value(v).map(ScenarioSpec::Preset)
        } else {
            serde_json::from_value(v).map(ScenarioSpec::Explicit)
        }
    }
}

impl ScenarioSpec {
    /// Concrete scenario; the experiment seed replaces any seed it carries.
    pub fn resolve(&self, seed: u64) -> ScenarioConfig {
        match self {
            ScenarioSpec::Explicit(sc) => ScenarioConfig { seed, ..sc.clone() },
            ScenarioSpec::Preset(p) => {
                let mut sc = match (p.preset, p.intent_count) {
                    (ScenarioBase::Calibrated, n) => {
                        ScenarioConfig::calibrated(n.unwrap_or(10), seed)
                    }
                    (ScenarioBase::ModalityLadder, None) => ladder_scenario(seed),
                    (ScenarioBase::ModalityLadder, Some(n)) => ladder_with(n, seed),
                    (ScenarioBase::Bandit, None) => bandit_scenario(seed),
                    (ScenarioBase::Bandit, Some(n)) => {
                        let mut sc = ScenarioConfig::calibrated(n, seed);
                        sc.transition_matrix = vec![vec![1.0 / n as f64; n]; n];
                        sc
                    }
                };
                if let Some(t) = &p.transition_matrix {
                    sc.transition_matrix = t.clone();
                }
                if let Some(v) = p.gaze_fidelity {
                    sc.gaze_fidelity = v;
                }
                if let Some(v) = p.context_strength {
                    sc.context_strength = v;
                }
                if let Some(v) = p.noise {
                    sc.noise = v;
                }
                if let Some(v) = p.eeg_channels {
                    sc.eeg_channels = v;
                }
                if let Some(v) = p.ticks_per_intent {
                    sc.ticks_per_intent = v;
                }
                if let Some(v) = p.duration {
                    sc.duration = v;
                }
                sc
            }
        }
    }
}

fn ladder_with(n: usize, seed: u64) -> ScenarioConfig {
    let base = ladder_scenario(seed);
    ScenarioConfig {
        gaze_fidelity: base.gaze_fidelity,
        context_strength: base.context_strength,
        ..ScenarioConfig::calibrated(n, seed)
    }
}

/// Plug-in MI estimation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiConfig {
    pub episodes: usize,
    pub bins: usize,
    pub window: usize,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self {
            episodes: 16,
            bins: 8,
            window: 1,
        }
    }
}

/// Online adaptation switch plus its schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub schedule: AdaptationConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Compression {
    /// Fraction of each weight tensor pruned by magnitude.
    pub rho: f64,
    pub quantize: bool,
}

impl Compression {
    pub fn active(&self) -> bool {
        self.rho > 0.0 || self.quantize
    }
}

/// One experiment: what to simulate, which model to train and which tables to emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub scenario: ScenarioSpec,
    #[serde(default = "TransformerConfig::reduced")]
    pub model: TransformerConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    /// Present when the accuracy table should be produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainConfig>,
    /// Present when the MI table should be produced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mi: Option<MiConfig>,
    #[serde(default)]
    pub adaptation: AdaptationSection,
    #[serde(default)]
    pub compression: Compression,
    #[serde(default = "default_profiles")]
    pub profiles: Vec<String>,
    /// Profiles beyond the shipped cpu/tpu/npu, usable by name in `profiles`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub custom_profiles: Vec<CostProfile>,
    #[serde(default)]
    pub ablations: BTreeSet<Ablation>,
    /// Noise multipliers for the sensitivity sweep; 1 is the nominal scenario.
    #[serde(default = "default_noise_scales")]
    pub noise_scales: Vec<f64>,
}

fn default_profiles() -> Vec<String> {
    vec!["cpu".into(), "tpu".into(), "npu".into()]
}

fn default_noise_scales() -> Vec<f64> {
    vec![1.0]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match preset_source(name) {
            Some(src) => Self::from_json(src),
            None => {
                let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Err(CliError::Config(format!(
                    "unknown preset {name:?}; known: {}",
                    known.join(", ")
                )))
            }
        }
    }

    pub fn scenario_config(&self) -> ScenarioConfig {
        self.scenario.resolve(self.seed)
    }

    /// Profiles named in `profiles`, shipped ones first, then custom ones.
    pub fn resolve_profiles(&self) -> Result<Vec<CostProfile>> {
        let pool: Vec<CostProfile> = CostProfile::builtin()
            .into_iter()
            .chain(self.custom_profiles.clone())
            .collect();
        self.profiles
            .iter()
            .map(|name| {
                pool.iter()
                    .rev()
                    .find(|p| &p.name == name)
                    .cloned()
                    .ok_or_else(|| CliError::Config(format!("unknown profile {name:?}")))
            })
            .collect()
    }

    /// Every schema-level and invariant violation; empty means valid.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.name.trim().is_empty() {
            out.push("name must not be empty".into());
        }
        let sc = self.scenario_config();
        out.extend(
            sc.diagnostics()
                .into_iter()
                .map(|d| format!("scenario: {d}")),
        );
        if let Err(e) = self.model.validate() {
            out.push(format!("model: {e}"));
        }
        if self.model.intent_count != sc.intent_count {
            out.push(format!(
                "model.intent_count {} differs from scenario intent_count {}",
                self.model.intent_count, sc.intent_count
            ));
        }
        if let Err(e) = self.preprocess.bandpass.validate() {
            out.push(format!("preprocess.bandpass: {e}"));
        }
        if let Some(t) = &self.training {
            if let Err(e) = t.validate() {
                out.push(format!("training: {e}"));
            }
        }
        if let Some(mi) = &self.mi {
            if mi.bins < 2 {
                out.push(format!("mi.bins {} must be at least 2", mi.bins));
            }
            if mi.episodes == 0 || mi.window == 0 {
                out.push("mi.episodes and mi.window must be positive".into());
            }
        }
        if self.adaptation.enabled {
            let s = &self.adaptation.schedule;
            if let Err(e) = s.ppo.validate() {
                out.push(format!("adaptation.ppo: {e}"));
            }
            if let Err(e) = s.user.validate() {
                out.push(format!("adaptation.user: {e}"));
            }
            if s.epochs == 0 || s.steps_per_epoch == 0 {
                out.push(
                    "adaptation.epochs and adaptation.steps_per_epoch must be positive".into(),
                );
            }
        }
        if !(0.0..1.0).contains(&self.compression.rho) {
            out.push(format!(
                "compression.rho {} outside [0, 1)",
                self.compression.rho
            ));
        }
        for p in &self.custom_profiles {
            if let Err(e) = p.validate() {
                out.push(format!("custom_profiles: {e}"));
            }
        }
        let builtin = CostProfile::builtin();
        for name in &self.profiles {
            let known = builtin
                .iter()
                .chain(&self.custom_profiles)
                .any(|p| &p.name == name);
            if !known {
                out.push(format!("unknown profile {name:?}"));
            }
        }
        if self.noise_scales.is_empty()
            || self
                .noise_scales
                .iter()
                .any(|&s| !(s.is_finite() && s >= 0.0))
        {
            out.push("noise_scales must be a non-empty list of non-negative numbers".into());
        }
        if let Some(dir) = &self.output_dir {
            if dir.is_file() {
                out.push(format!("output_dir {} is an existing file", dir.display()));
            }
        }
        out
    }
}

/// Parses `text` and returns its diagnostics; a parse failure is the single diagnostic.
pub fn validate_config_str(text: &str) -> Vec<String> {
    match ExperimentConfig::from_json(text) {
        Ok(cfg) => cfg.diagnostics(),
        Err(e) => vec![e.to_string()],
    }
}

/// Diagnostics for the config file at `path`.
pub fn validate_config(path: &Path) -> Result<Vec<String>> {
    Ok(validate_config_str(&std::fs::read_to_string(path)?))
}
