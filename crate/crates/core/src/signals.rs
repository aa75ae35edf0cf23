//! Synthetic intent-conditioned multi-modal signal episodes.
//!
//! Every modality is generated on a common master clock and held between its
//! own sample instants. A latent intent follows a Markov chain that steps once
//! every `ticks_per_intent` master ticks; each observed signal is the intent's
//! clean template plus additive Laplacian (or Gaussian) noise. Context fields
//! are categorical and noise-free.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result, ZiaError};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

/// Zero-mean Laplace distribution with scale `b` (variance `2b²`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplacianNoiseSpec<T> {
    scale: T,
}

impl<T: Scalar> LaplacianNoiseSpec<T> {
    pub fn new(scale: T) -> Result<Self> {
        if !(scale > T::zero()) || !scale.is_finite() {
            return config_err(format!("laplacian scale must be positive, got {scale}"));
        }
        Ok(Self { scale })
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn variance(&self) -> T {
        T::lit(2.0) * self.scale * self.scale
    }

    /// One inverse-CDF draw.
    pub fn draw(&self, rng: &mut Rng) -> T {
        draw_laplace(rng, self.scale.as_f64()).map_or(T::zero(), T::lit)
    }
}

fn draw_laplace(rng: &mut Rng, b: f64) -> Option<f64> {
    loop {
        let r: f64 = rng.gen();
        if r == 0.0 {
            continue;
        }
        let u = r - 0.5;
        let x = -b * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        return Some(if u == 0.0 { 0.0 } else { x });
    }
}

/// `count` Laplace(0, scale) draws, reproducible from `seed`.
pub fn sample_laplacian<T: Scalar>(
    spec: &LaplacianNoiseSpec<T>,
    count: usize,
    seed: u64,
) -> Result<Vec<T>> {
    if count == 0 {
        return Err(ZiaError::Argument("sample count must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, "laplacian");
    Ok((0..count).map(|_| spec.draw(&mut rng)).collect())
}

/// Power spectral density `2b² / (b² + (2πf)²)` of the Laplacian noise model.
pub fn spectral_density<T: Scalar>(scale: T, f: T) -> T {
    let two_pi_f = T::lit(2.0 * PI) * f;
    let b2 = scale * scale;
    T::lit(2.0) * b2 / (b2 + two_pi_f * two_pi_f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Laplacian,
    Gaussian,
}

/// Per-modality noise scale: Laplace `b` or Gaussian `σ` depending on `kind`.
/// A scale of zero disables noise for that modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub kind: NoiseKind,
    pub gaze: f64,
    pub heart: f64,
    pub eeg: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Laplacian,
            gaze: 0.12,
            heart: 2.0,
            eeg: 5.0,
        }
    }
}

impl NoiseConfig {
    /// Gaussian baseline with σ_g = 0.1 px, σ_h = 2 bpm, σ_e = 3 µV.
    pub fn gaussian_baseline() -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            gaze: 0.1,
            heart: 2.0,
            eeg: 3.0,
        }
    }

    pub fn silent() -> Self {
        Self {
            kind: NoiseKind::Laplacian,
            gaze: 0.0,
            heart: 0.0,
            eeg: 0.0,
        }
    }

    fn draw(&self, scale: f64, rng: &mut Rng) -> f64 {
        if scale == 0.0 {
            return 0.0;
        }
        match self.kind {
            NoiseKind::Laplacian => draw_laplace(rng, scale).unwrap_or(0.0),
            NoiseKind::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            }
        }
    }
}

/// Native sample rates in Hz; the master clock drives generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rates {
    pub master_hz: f64,
    pub gaze_hz: f64,
    pub heart_hz: f64,
    pub eeg_hz: f64,
    pub context_hz: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Self {
            master_hz: 256.0,
            gaze_hz: 30.0,
            heart_hz: 1.0,
            eeg_hz: 256.0,
            context_hz: 1.0,
        }
    }
}

impl Rates {
    /// Whether master tick `t` is a sample instant of a stream running at `rate_hz`.
    pub fn is_instant(&self, t: usize, rate_hz: f64) -> bool {
        t == 0 || self.sample_index(t, rate_hz) != self.sample_index(t - 1, rate_hz)
    }

    /// Index of the most recent native sample at master tick `t`.
    pub fn sample_index(&self, t: usize, rate_hz: f64) -> usize {
        (t as f64 * rate_hz / self.master_hz).floor() as usize
    }
}

/// Clean per-modality signal template of one intent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentTemplate {
    pub intent: usize,
    /// Fixation point in pixels.
    pub fixation: [f64; 2],
    pub heart_bpm: f64,
    pub eeg_freq_hz: f64,
    pub eeg_amplitude_uv: f64,
    pub location_id: usize,
    pub usage_id: usize,
}

/// Everything needed to generate an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub intent_count: usize,
    /// Row-stochastic `intent_count × intent_count` matrix.
    pub transition_matrix: Vec<Vec<f64>>,
    /// Fixed first intent; `None` draws it uniformly.
    #[serde(default)]
    pub initial_intent: Option<usize>,
    pub eeg_channels: usize,
    #[serde(default)]
    pub rates: Rates,
    /// Master ticks per Markov step.
    pub ticks_per_intent: usize,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub template_map: Vec<IntentTemplate>,
    /// Probability that a segment's fixation lands on its own intent's target.
    #[serde(default = "one")]
    pub gaze_fidelity: f64,
    /// Probability that each context id follows its intent's template.
    #[serde(default = "one")]
    pub context_strength: f64,
    #[serde(default = "eight")]
    pub location_vocab: usize,
    #[serde(default = "eight")]
    pub usage_vocab: usize,
    /// Episode length in master ticks.
    pub duration: usize,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn eight() -> usize {
    8
}

/// Template layout knobs used by [`ScenarioConfig::calibrated`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateLayout {
    pub gaze_spacing_px: f64,
    pub heart_base_bpm: f64,
    pub heart_step_bpm: f64,
    pub eeg_amplitude_uv: f64,
}

impl Default for TemplateLayout {
    fn default() -> Self {
        Self {
            gaze_spacing_px: 0.5,
            heart_base_bpm: 70.0,
            heart_step_bpm: 1.0,
            eeg_amplitude_uv: 4.0,
        }
    }
}

/// Transition matrix that stays with probability `stay` and otherwise moves uniformly.
pub fn sticky_transitions(n: usize, stay: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if n == 1 {
                        1.0
                    } else if i == j {
                        stay
                    } else {
                        (1.0 - stay) / (n - 1) as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// Distinct per-intent templates: fixations on a grid with at most eight
/// distinct coordinates per axis, heart baselines on a ladder, EEG tones spread
/// over 8–30 Hz, context ids enumerating `(location, usage)` pairs.
pub fn grid_templates(
    n: usize,
    layout: &TemplateLayout,
    location_vocab: usize,
    usage_vocab: usize,
) -> Vec<IntentTemplate> {
    let grid_rows = n.div_ceil(8).max(1);
    let grid_cols = n.div_ceil(grid_rows);
    (0..n)
        .map(|i| {
            let (r, c) = (i / grid_cols, i % grid_cols);
            IntentTemplate {
                intent: i,
                fixation: [
                    c as f64 * layout.gaze_spacing_px,
                    r as f64 * layout.gaze_spacing_px,
                ],
                heart_bpm: layout.heart_base_bpm + layout.heart_step_bpm * i as f64,
                eeg_freq_hz: 8.0 + 22.0 * (i as f64 + 0.5) / n as f64,
                eeg_amplitude_uv: layout.eeg_amplitude_uv,
                location_id: i % location_vocab.max(1),
                usage_id: (i / location_vocab.max(1)) % usage_vocab.max(1),
            }
        })
        .collect()
}

impl ScenarioConfig {
    /// A fully populated scenario with sticky Markov dynamics and grid templates.
    pub fn calibrated(intent_count: usize, seed: u64) -> Self {
        let layout = TemplateLayout::default();
        Self {
            intent_count,
            transition_matrix: sticky_transitions(intent_count, 0.5),
            initial_intent: None,
            eeg_channels: 4,
            rates: Rates::default(),
            ticks_per_intent: 256,
            noise: NoiseConfig::default(),
            template_map: grid_templates(intent_count, &layout, 8, 8),
            gaze_fidelity: 1.0,
            context_strength: 1.0,
            location_vocab: 8,
            usage_vocab: 8,
            duration: 256 * 64,
            seed,
        }
    }

    /// Every invariant violation, as human-readable diagnostics.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.intent_count;
        if n == 0 {
            out.push("intent_count must be at least 1".into());
        }
        if self.transition_matrix.len() != n {
            out.push(format!(
                "transition_matrix has {} rows, expected {n}",
                self.transition_matrix.len()
            ));
        }
        for (i, row) in self.transition_matrix.iter().enumerate() {
            if row.len() != n {
                out.push(format!(
                    "transition_matrix row {i} has {} entries, expected {n}",
                    row.len()
                ));
                continue;
            }
            if row
                .iter()
                .any(|&p| !(0.0..=1.0).contains(&p) || !p.is_finite())
            {
                out.push(format!(
                    "transition_matrix row {i} has an entry outside [0, 1]"
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                out.push(format!(
                    "transition_matrix row {i} sums to {s} (expected 1)"
                ));
            }
        }
        if let Some(i0) = self.initial_intent {
            if i0 >= n {
                out.push(format!("initial_intent {i0} out of range"));
            }
        }
        if !(4..=16).contains(&self.eeg_channels) {
            out.push(format!(
                "eeg_channels {} outside [4, 16]",
                self.eeg_channels
            ));
        }
        let r = &self.rates;
        for (name, v) in [
            ("master_hz", r.master_hz),
            ("gaze_hz", r.gaze_hz),
            ("heart_hz", r.heart_hz),
            ("eeg_hz", r.eeg_hz),
            ("context_hz", r.context_hz),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                out.push(format!("rate {name} must be positive"));
            } else if v > r.master_hz {
                out.push(format!("rate {name} exceeds the master clock"));
            }
        }
        if self.ticks_per_intent == 0 {
            out.push("ticks_per_intent must be at least 1".into());
        }
        for (name, v) in [
            ("gaze", self.noise.gaze),
            ("heart", self.noise.heart),
            ("eeg", self.noise.eeg),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                out.push(format!("noise scale {name} must be non-negative"));
            }
        }
        for i in 0..n {
            match self.template_map.iter().filter(|t| t.intent == i).count() {
                0 => out.push(format!("template_map is missing intent {i}")),
                1 => {}
                c => out.push(format!("template_map lists intent {i} {c} times")),
            }
        }
        for t in &self.template_map {
            if t.intent >= n {
                out.push(format!("template_map names unknown intent {}", t.intent));
            }
            if t.location_id >= self.location_vocab || t.usage_id >= self.usage_vocab {
                out.push(format!(
                    "template for intent {} uses a context id outside the vocabulary",
                    t.intent
                ));
            }
        }
        for (name, p) in [
            ("gaze_fidelity", self.gaze_fidelity),
            ("context_strength", self.context_strength),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.location_vocab == 0 || self.usage_vocab == 0 {
            out.push("context vocabularies must be non-empty".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.diagnostics();
        if d.is_empty() {
            Ok(())
        } else {
            config_err(d.join("; "))
        }
    }

    pub fn template(&self, intent: usize) -> &IntentTemplate {
        self.template_map
            .iter()
            .find(|t| t.intent == intent)
            .expect("validated template map")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextObs {
    /// Whole seconds since episode start.
    pub time_index: usize,
    pub location_id: usize,
    pub usage_id: usize,
}

/// One master-clock tick of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalFrame<T> {
    pub t: usize,
    /// Gaze position in pixels.
    pub gaze: [T; 2],
    /// Heart rate in bpm.
    pub heart: T,
    /// EEG channels in µV.
    pub eeg: Vec<T>,
    pub context: ContextObs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace<T> {
    pub frames: Vec<SignalFrame<T>>,
    /// Ground-truth intent per tick.
    pub intents: Vec<usize>,
    /// Noise-free frames, when kept.
    pub clean: Option<Vec<SignalFrame<T>>>,
    pub rates: Rates,
    pub ticks_per_intent: usize,
    pub intent_count: usize,
}

impl<T: Scalar> EpisodeTrace<T> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn eeg_channels(&self) -> usize {
        self.frames.first().map_or(0, |f| f.eeg.len())
    }

    /// Intent at each Markov step (one entry per segment).
    pub fn segment_intents(&self) -> Vec<usize> {
        self.intents
            .iter()
            .step_by(self.ticks_per_intent.max(1))
            .copied()
            .collect()
    }

    /// Last tick of each complete segment.
    pub fn segment_ends(&self) -> Vec<usize> {
        let k = self.ticks_per_intent.max(1);
        (1..=self.frames.len() / k).map(|s| s * k - 1).collect()
    }

    /// Native-rate gaze samples `(tick, [x, y])`.
    pub fn gaze_samples(&self) -> Vec<(usize, [T; 2])> {
        self.frames
            .iter()
            .filter(|f| self.rates.is_instant(f.t, self.rates.gaze_hz))
            .map(|f| (f.t, f.gaze))
            .collect()
    }

    pub fn heart_samples(&self) -> Vec<(usize, T)> {
        self.frames
            .iter()
            .filter(|f| self.rates.is_instant(f.t, self.rates.heart_hz))
            .map(|f| (f.t, f.heart))
            .collect()
    }

    /// EEG as a `channels × samples` array at the native EEG rate.
    pub fn eeg_samples(&self) -> (Vec<usize>, Vec<Vec<T>>) {
        let k = self.eeg_channels();
        let mut ticks = Vec::new();
        let mut chans = vec![Vec::new(); k];
        for f in &self.frames {
            if self.rates.is_instant(f.t, self.rates.eeg_hz) {
                ticks.push(f.t);
                for (c, &v) in f.eeg.iter().enumerate() {
                    chans[c].push(v);
                }
            }
        }
        (ticks, chans)
    }

    /// Achieved signal-to-noise ratio in dB per modality `(gaze, heart, eeg)`,
    /// using the variance of the clean signal as signal power. `None` when
    /// clean frames were not kept.
    pub fn achieved_snr_db(&self) -> Option<[f64; 3]> {
        let clean = self.clean.as_ref()?;
        let snr = |sig: Vec<f64>, noise: Vec<f64>| {
            let var = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
                v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len().max(1) as f64
            };
            10.0 * (var(&sig) / var(&noise)).log10()
        };
        let pairs = || self.frames.iter().zip(clean.iter());
        let gaze_sig = pairs()
            .flat_map(|(_, c)| c.gaze.map(|v| v.as_f64()))
            .collect();
        let gaze_noise = pairs()
            .flat_map(|(f, c)| {
                [
                    (f.gaze[0] - c.gaze[0]).as_f64(),
                    (f.gaze[1] - c.gaze[1]).as_f64(),
                ]
            })
            .collect();
        let heart_sig = pairs().map(|(_, c)| c.heart.as_f64()).collect();
        let heart_noise = pairs().map(|(f, c)| (f.heart - c.heart).as_f64()).collect();
        let eeg_sig = pairs()
            .flat_map(|(_, c)| c.eeg.iter().map(|v| v.as_f64()).collect::<Vec<_>>())
            .collect();
        let eeg_noise = pairs()
            .flat_map(|(f, c)| {
                f.eeg
                    .iter()
                    .zip(&c.eeg)
                    .map(|(a, b)| (*a - *b).as_f64())
                    .collect::<Vec<_>>()
            })
            .collect();
        Some([
            snr(gaze_sig, gaze_noise),
            snr(heart_sig, heart_noise),
            snr(eeg_sig, eeg_noise),
        ])
    }
}

fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Generates an episode, keeping the clean frames.
pub fn gen_episode<T: Scalar>(config: &ScenarioConfig) -> Result<EpisodeTrace<T>> {
    gen_episode_with(config, true)
}

/// Generates an episode; `keep_clean = false` halves memory for long runs.
pub fn gen_episode_with<T: Scalar>(
    config: &ScenarioConfig,
    keep_clean: bool,
) -> Result<EpisodeTrace<T>> {
    config.validate()?;
    let n = config.intent_count;
    let k = config.eeg_channels;
    let rates = config.rates;
    let seed = config.seed;
    let mut chain_rng = rng::stream(seed, "simulation.chain");
    let mut seg_rng = rng::stream(seed, "simulation.segment");
    let mut gaze_rng = rng::stream(seed, "simulation.noise.gaze");
    let mut heart_rng = rng::stream(seed, "simulation.noise.heart");
    let mut eeg_rng = rng::stream(seed, "simulation.noise.eeg");
    let uniform = vec![1.0 / n as f64; n];
    let phases: Vec<f64> = (0..k).map(|c| 2.0 * PI * c as f64 / k as f64).collect();

    let mut frames = Vec::with_capacity(config.duration);
    let mut clean_frames = Vec::with_capacity(if keep_clean { config.duration } else { 0 });
    let mut intents = Vec::with_capacity(config.duration);

    let mut intent = 0usize;
    let mut target = [0.0f64; 2];
    let mut seg_ctx = (0usize, 0usize);
    let mut ctx = ContextObs {
        time_index: 0,
        location_id: 0,
        usage_id: 0,
    };
    let mut gaze = ([T::zero(); 2], [T::zero(); 2]);
    let mut heart = (T::zero(), T::zero());
    let mut eeg = (vec![T::zero(); k], vec![T::zero(); k]);

    for t in 0..config.duration {
        if t % config.ticks_per_intent == 0 {
            intent = if t == 0 {
                match config.initial_intent {
                    Some(i0) => i0,
                    None => sample_categorical(&uniform, &mut chain_rng),
                }
            } else {
                sample_categorical(&config.transition_matrix[intent], &mut chain_rng)
            };
            let tpl = config.template(intent);
            let looked_at = if n > 1 && seg_rng.gen::<f64>() >= config.gaze_fidelity {
                let other = seg_rng.gen_range(0..n - 1);
                if other >= intent {
                    other + 1
                } else {
                    other
                }
            } else {
                intent
            };
            target = config.template(looked_at).fixation;
            let loc = if seg_rng.gen::<f64>() < config.context_strength {
                tpl.location_id
            } else {
                seg_rng.gen_range(0..config.location_vocab)
            };
            let usage = if seg_rng.gen::<f64>() < config.context_strength {
                tpl.usage_id
            } else {
                seg_rng.gen_range(0..config.usage_vocab)
            };
            seg_ctx = (loc, usage);
        }
        let tpl = config.template(intent);

        if rates.is_instant(t, rates.gaze_hz) {
            for a in 0..2 {
                let c = target[a];
                gaze.0[a] = T::lit(c);
                gaze.1[a] = T::lit(c + config.noise.draw(config.noise.gaze, &mut gaze_rng));
            }
        }
        if rates.is_instant(t, rates.heart_hz) {
            let c = tpl.heart_bpm;
            heart = (
                T::lit(c),
                T::lit(c + config.noise.draw(config.noise.heart, &mut heart_rng)),
            );
        }
        if rates.is_instant(t, rates.eeg_hz) {
            let w = 2.0 * PI * tpl.eeg_freq_hz * t as f64 / rates.master_hz;
            for c in 0..k {
                let clean = tpl.eeg_amplitude_uv * (w + phases[c]).sin();
                eeg.0[c] = T::lit(clean);
                eeg.1[c] = T::lit(clean + config.noise.draw(config.noise.eeg, &mut eeg_rng));
            }
        }
        if rates.is_instant(t, rates.context_hz) {
            ctx = ContextObs {
                time_index: (t as f64 / rates.master_hz).floor() as usize,
                location_id: seg_ctx.0,
                usage_id: seg_ctx.1,
            };
        }

        frames.push(SignalFrame {
            t,
            gaze: gaze.1,
            heart: heart.1,
            eeg: eeg.1.clone(),
            context: ctx,
        });
        if keep_clean {
            clean_frames.push(SignalFrame {
                t,
                gaze: gaze.0,
                heart: heart.0,
                eeg: eeg.0.clone(),
                context: ctx,
            });
        }
        intents.push(intent);
    }

    Ok(EpisodeTrace {
        frames,
        intents,
        clean: keep_clean.then_some(clean_frames),
        rates,
        ticks_per_intent: config.ticks_per_intent,
        intent_count: n,
    })
}

/// Transition counts `counts[i][j]` between consecutive entries of `seq`.
pub fn transition_counts(seq: &[usize], n: usize) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; n]; n];
    for w in seq.windows(2) {
        counts[w[0]][w[1]] += 1;
    }
    counts
}

/// Writes one CSV row per master tick:
/// `t,intent,gaze_x,gaze_y,heart,eeg_0..eeg_{k-1},time_index,location_id,usage_id`.
pub fn write_episode_csv<T: Scalar, W: Write>(trace: &EpisodeTrace<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = trace.eeg_channels();
    let mut header: Vec<String> = ["t", "intent", "gaze_x", "gaze_y", "heart"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..k).map(|c| format!("eeg_{c}")));
    header.extend(
        ["time_index", "location_id", "usage_id"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for (f, &intent) in trace.frames.iter().zip(&trace.intents) {
        let mut rec = vec![
            f.t.to_string(),
            intent.to_string(),
            fmt_num(f.gaze[0]),
            fmt_num(f.gaze[1]),
            fmt_num(f.heart),
        ];
        rec.extend(f.eeg.iter().map(|&v| fmt_num(v)));
        rec.push(f.context.time_index.to_string());
        rec.push(f.context.location_id.to_string());
        rec.push(f.context.usage_id.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_num<T: Scalar>(v: T) -> String {
    format!("{:.9}", v.as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ScenarioConfig {
        let mut c = ScenarioConfig::calibrated(10, seed);
        c.duration = 256 * 8;
        c
    }

    #[test]
    fn laplacian_rejects_non_positive_scale() {
        assert!(LaplacianNoiseSpec::new(0.0f64).is_err());
        assert!(LaplacianNoiseSpec::new(-1.0f64).is_err());
        assert!(sample_laplacian(&LaplacianNoiseSpec::new(1.0f64).unwrap(), 0, 1).is_err());
    }

    #[test]
    fn laplacian_moments() {
        let spec = LaplacianNoiseSpec::new(2.0f64).unwrap();
        let xs = sample_laplacian(&spec, 1_000_000, 11).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!((var - 8.0).abs() / 8.0 < 0.02, "variance {var}");

        let spec = LaplacianNoiseSpec::new(0.12f64).unwrap();
        let xs = sample_laplacian(&spec, 1_000_000, 12).unwrap();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.001, "mean {mean}");
    }

    #[test]
    fn laplacian_is_deterministic() {
        let spec = LaplacianNoiseSpec::new(0.5f32).unwrap();
        assert_eq!(
            sample_laplacian(&spec, 100, 5).unwrap(),
            sample_laplacian(&spec, 100, 5).unwrap()
        );
    }

    #[test]
    fn spectral_density_values() {
        assert!((spectral_density(0.12f64, 0.0) - 2.0).abs() < 1e-12);
        assert!((spectral_density(5.0f64, 0.0) - 2.0).abs() < 1e-12);
        let v = spectral_density(0.12f64, 1.0);
        // 2·0.0144 / (0.0144 + 4π²)
        let expected = 0.0288 / (0.0144 + 4.0 * PI * PI);
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 7.29e-4).abs() < 5e-7);
    }

    #[test]
    fn silent_noise_reproduces_clean_frames() {
        let mut c = small(3);
        c.noise = NoiseConfig::silent();
        let tr: EpisodeTrace<f64> = gen_episode(&c).unwrap();
        assert_eq!(&tr.frames, tr.clean.as_ref().unwrap());
    }

    #[test]
    fn identity_chain_is_absorbing() {
        let mut c = small(4);
        c.transition_matrix = sticky_transitions(10, 1.0);
        c.initial_intent = Some(3);
        let tr: EpisodeTrace<f64> = gen_episode(&c).unwrap();
        assert!(tr.intents.iter().all(|&i| i == 3));
    }

    #[test]
    fn missing_template_is_a_config_error() {
        let mut c = small(5);
        c.template_map.retain(|t| t.intent != 7);
        let err = gen_episode::<f64>(&c).unwrap_err();
        assert!(matches!(err, ZiaError::Config(ref m) if m.contains("missing intent 7")));
    }

    #[test]
    fn bad_rows_are_diagnosed_by_index() {
        let mut c = small(6);
        c.transition_matrix[2][2] -= 0.1;
        let d = c.diagnostics();
        assert_eq!(d.len(), 1);
        assert!(d[0].contains("row 2"));
        c.eeg_channels = 3;
        assert_eq!(c.diagnostics().len(), 2);
    }

    #[test]
    fn generation_is_bit_identical_per_seed() {
        let a: EpisodeTrace<f64> = gen_episode(&small(9)).unwrap();
        let b: EpisodeTrace<f64> = gen_episode(&small(9)).unwrap();
        let c: EpisodeTrace<f64> = gen_episode(&small(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn modalities_are_held_between_native_samples() {
        let tr: EpisodeTrace<f64> = gen_episode(&small(2)).unwrap();
        assert_eq!(
            tr.gaze_samples().len(),
            (tr.len() as f64 * 30.0 / 256.0).ceil() as usize
        );
        assert_eq!(tr.heart_samples().len(), tr.len() / 256);
        for w in tr.frames.windows(2) {
            if !tr.rates.is_instant(w[1].t, 30.0) {
                assert_eq!(w[0].gaze, w[1].gaze);
            }
            if !tr.rates.is_instant(w[1].t, 1.0) {
                assert_eq!(w[0].heart, w[1].heart);
                assert_eq!(w[0].context, w[1].context);
            }
        }
    }

    #[test]
    fn csv_layout_has_one_row_per_tick() {
        let mut c = small(1);
        c.duration = 40;
        let tr: EpisodeTrace<f64> = gen_episode(&c).unwrap();
        let mut buf = Vec::new();
        write_episode_csv(&tr, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,intent,gaze_x,gaze_y,heart,eeg_0,eeg_1,eeg_2,eeg_3,time_index,location_id,usage_id"
        );
        assert_eq!(lines.count(), 40);
    }

    #[test]
    fn config_json_round_trips() {
        let c = small(8);
        let s = serde_json::to_string(&c).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(c, back);
    }
}
