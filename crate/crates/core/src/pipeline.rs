//! End-to-end training and evaluation: simulated episodes are preprocessed,
//! cut into token windows, encoded per modality, aligned, and classified by
//! the variational transformer.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{arg_err, Result};
use crate::fusion::{
    attention_align, dtw_fuse, encode_modality, tape_attention_align, tape_contrastive,
    tape_dtw_fuse, tape_encode, EmbeddingSequence, EncoderParams, EncoderShape, Modality,
    DEFAULT_TAU,
};
use crate::infomet::Feature;
use crate::matrix::Matrix;
use crate::params::{Adam, ParamSet};
use crate::predictor::{
    init_weights, pooled_features, predict_from_pooled, tape_head_kl, tape_head_weight, tape_trunk,
    TransformerConfig, VariationalPosterior,
};
use crate::preprocess::{
    bandpass, clip_outliers, ema_smooth, encode_context, ica_clean, FilterSpec, IcaConfig,
};
use crate::rng;
use crate::scalar::Scalar;
use crate::signals::{gen_episode_with, EpisodeTrace, ScenarioConfig};

/// Lower and upper edge of the EEG spectral features, in Hz.
pub const EEG_BAND_HZ: (f64, f64) = (8.0, 30.0);
/// Heart-rate smoothing factor.
pub const HEART_EMA_ALPHA: f64 = 0.9;

/// Temporal alignment used before the transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    #[default]
    Attention,
    Dtw,
}

/// Which signal streams reach the encoders; masked streams are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub gaze: bool,
    pub heart: bool,
    pub context: bool,
    pub eeg: bool,
}

impl ModalityMask {
    pub const ALL: Self = Self {
        gaze: true,
        heart: true,
        context: true,
        eeg: true,
    };
    pub const GAZE: Self = Self {
        gaze: true,
        heart: false,
        context: false,
        eeg: false,
    };

    pub fn from_features(features: &[Feature]) -> Self {
        Self {
            gaze: features.contains(&Feature::Gaze),
            heart: features.contains(&Feature::Heart),
            context: features.contains(&Feature::Context),
            eeg: features.contains(&Feature::Eeg),
        }
    }

    pub fn features(&self) -> Vec<Feature> {
        let mut out = Vec::new();
        if self.gaze {
            out.push(Feature::Gaze);
        }
        if self.heart {
            out.push(Feature::Heart);
        }
        if self.context {
            out.push(Feature::Context);
        }
        if self.eeg {
            out.push(Feature::Eeg);
        }
        out
    }

    pub fn label(&self) -> String {
        crate::infomet::subset_label(&self.features())
    }

    fn bio(&self) -> bool {
        self.heart || self.eeg
    }

    /// The ladder gaze, +heart, +context, +EEG.
    pub fn ladder() -> [Self; 4] {
        let f = Feature::ladder();
        [1, 2, 3, 4].map(|k| Self::from_features(&f[..k]))
    }
}

/// Preprocessing and windowing options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Gaze samples per token window.
    pub gaze_window: usize,
    pub gaze_ema_alpha: f64,
    /// Clip scale for gaze deviations; the threshold is `clip_k · clip_scale`.
    pub clip_scale: f64,
    pub clip_k: f64,
    /// EEG samples per token window.
    pub eeg_window: usize,
    pub bandpass: FilterSpec,
    /// Run ICA artifact removal on the bandpassed EEG.
    pub ica: bool,
    pub ica_config: IcaConfig,
    pub context_dim: usize,
    /// Master-clock ticks between consecutive tokens.
    pub token_stride: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            gaze_window: 6,
            gaze_ema_alpha: 0.6,
            clip_scale: 0.12,
            clip_k: 3.0,
            eeg_window: 256,
            bandpass: FilterSpec::default(),
            ica: false,
            ica_config: IcaConfig::default(),
            context_dim: 32,
            token_stride: 64,
        }
    }
}

/// Optimisation options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train_episodes: usize,
    pub test_episodes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub encoder_hidden: usize,
    /// Weight of the same-tick contrastive term.
    pub contrastive_weight: f64,
    pub tau: f64,
    /// Weight of the KL term, which is also divided by the training-set size.
    pub beta: f64,
    pub mc_samples: usize,
    pub alignment: Alignment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_episodes: 24,
            test_episodes: 8,
            epochs: 12,
            batch_size: 16,
            lr: 2e-3,
            encoder_hidden: 64,
            contrastive_weight: 0.1,
            tau: DEFAULT_TAU,
            beta: 1.0,
            mc_samples: 16,
            alignment: Alignment::Attention,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_episodes == 0
            || self.test_episodes == 0
            || self.batch_size == 0
            || self.mc_samples == 0
        {
            return arg_err("episode counts, batch size and Monte Carlo samples must be positive");
        }
        if !(self.lr > 0.0 && self.tau > 0.0 && self.beta >= 0.0 && self.contrastive_weight >= 0.0)
        {
            return arg_err(
                "lr and tau must be positive; beta and contrastive_weight non-negative",
            );
        }
        Ok(())
    }
}

/// Preprocessed native-rate streams of one episode.
#[derive(Debug, Clone)]
pub struct Streams {
    pub gaze_ticks: Vec<usize>,
    pub gaze: [Vec<f64>; 2],
    pub heart_ticks: Vec<usize>,
    pub heart: Vec<f64>,
    pub eeg_ticks: Vec<usize>,
    pub eeg: Vec<Vec<f64>>,
    pub eeg_rate_hz: f64,
    pub ica_warning: Option<String>,
}

/// Clip and smooth gaze, smooth heart rate, bandpass (and optionally ICA) EEG.
pub fn preprocess_episode<T: Scalar>(
    trace: &EpisodeTrace<T>,
    cfg: &PreprocessConfig,
) -> Result<Streams> {
    let gs = trace.gaze_samples();
    let gaze_ticks = gs.iter().map(|g| g.0).collect();
    let axis = |a: usize| -> Result<Vec<f64>> {
        let raw: Vec<f64> = gs.iter().map(|g| g.1[a].as_f64()).collect();
        let clipped = clip_outliers(&raw, cfg.clip_scale, cfg.clip_k)?;
        if clipped.is_empty() {
            return Ok(clipped);
        }
        ema_smooth(&clipped, cfg.gaze_ema_alpha)
    };
    let gaze = [axis(0)?, axis(1)?];
    let hs = trace.heart_samples();
    let heart_ticks = hs.iter().map(|h| h.0).collect();
    let heart_raw: Vec<f64> = hs.iter().map(|h| h.1.as_f64()).collect();
    let heart = if heart_raw.is_empty() {
        heart_raw
    } else {
        ema_smooth(&heart_raw, HEART_EMA_ALPHA)?
    };
    let (eeg_ticks, raw) = trace.eeg_samples();
    let mut eeg = raw
        .iter()
        .map(|c| {
            bandpass(
                &c.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                &cfg.bandpass,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ica_warning = None;
    if cfg.ica {
        let res = ica_clean(&eeg, None, &cfg.ica_config)?;
        ica_warning = res.warning;
        eeg = res.cleaned;
    }
    Ok(Streams {
        gaze_ticks,
        gaze,
        heart_ticks,
        heart,
        eeg_ticks,
        eeg,
        eeg_rate_hz: trace.rates.eeg_hz,
        ica_warning,
    })
}

/// One training or test example: per-token encoder inputs and the label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub gaze: Matrix<f64>,
    pub bio: Matrix<f64>,
    pub context: Matrix<f64>,
    pub ticks: Vec<usize>,
    pub label: usize,
}

/// Encoder input widths for a preprocessing configuration.
pub fn input_widths(cfg: &PreprocessConfig) -> (usize, usize, usize) {
    (
        2 * cfg.gaze_window,
        1 + eeg_bins(cfg).len(),
        cfg.context_dim,
    )
}

fn eeg_bins(cfg: &PreprocessConfig) -> Vec<usize> {
    let res = cfg.bandpass.sample_rate_hz / cfg.eeg_window as f64;
    (0..=cfg.eeg_window / 2)
        .filter(|&b| {
            let f = b as f64 * res;
            f >= EEG_BAND_HZ.0 && f <= EEG_BAND_HZ.1
        })
        .collect()
}

/// Last index `i` with `ticks[i] <= t`.
fn last_at_or_before(ticks: &[usize], t: usize) -> Option<usize> {
    ticks.partition_point(|&x| x <= t).checked_sub(1)
}

struct SpectrumPlan {
    fft: Arc<dyn Fft<f64>>,
    bins: Vec<usize>,
    window: usize,
}

impl SpectrumPlan {
    fn new(cfg: &PreprocessConfig) -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(cfg.eeg_window),
            bins: eeg_bins(cfg),
            window: cfg.eeg_window,
        }
    }

    /// `ln(1 + P/window)` of the channel-summed power spectrum in the band.
    fn features(&self, eeg: &[Vec<f64>], end: usize) -> Vec<f64> {
        let start = end + 1 - self.window;
        let mut power = vec![0.0; self.window / 2 + 1];
        let mut buf = vec![Complex::new(0.0, 0.0); self.window];
        for ch in eeg {
            buf.iter_mut()
                .zip(&ch[start..=end])
                .for_each(|(b, &v)| *b = Complex::new(v, 0.0));
            self.fft.process(&mut buf);
            power
                .iter_mut()
                .zip(&buf)
                .for_each(|(p, c)| *p += c.norm_sqr());
        }
        self.bins
            .iter()
            .map(|&b| (1.0 + power[b] / self.window as f64).ln())
            .collect()
    }
}

/// Token samples at every segment end with full history for all windows.
pub fn build_samples<T: Scalar>(
    trace: &EpisodeTrace<T>,
    streams: &Streams,
    scenario: &ScenarioConfig,
    cfg: &PreprocessConfig,
    tokens: usize,
) -> Result<Vec<Sample>> {
    if tokens == 0 || cfg.gaze_window == 0 || cfg.eeg_window == 0 || cfg.token_stride == 0 {
        return arg_err("token count, windows and stride must be positive");
    }
    let plan = SpectrumPlan::new(cfg);
    let (gw, bw, cw) = input_widths(cfg);
    let span = (tokens - 1) * cfg.token_stride;
    let mut out = Vec::new();
    'segments: for end in trace.segment_ends() {
        if end < span {
            continue;
        }
        let ticks: Vec<usize> = (0..tokens)
            .map(|j| end - span + j * cfg.token_stride)
            .collect();
        let mut gaze = Vec::with_capacity(tokens * gw);
        let mut bio = Vec::with_capacity(tokens * bw);
        let mut context = Vec::with_capacity(tokens * cw);
        for &t in &ticks {
            let Some(gi) =
                last_at_or_before(&streams.gaze_ticks, t).filter(|&i| i + 1 >= cfg.gaze_window)
            else {
                continue 'segments;
            };
            for i in gi + 1 - cfg.gaze_window..=gi {
                gaze.push(streams.gaze[0][i]);
                gaze.push(streams.gaze[1][i]);
            }
            let Some(hi) = last_at_or_before(&streams.heart_ticks, t) else {
                continue 'segments;
            };
            bio.push(streams.heart[hi]);
            let Some(ei) =
                last_at_or_before(&streams.eeg_ticks, t).filter(|&i| i + 1 >= cfg.eeg_window)
            else {
                continue 'segments;
            };
            bio.extend(plan.features(&streams.eeg, ei));
            let obs = &trace.frames[t].context;
            context.extend(
                encode_context::<f64>(obs, scenario.location_vocab, scenario.usage_vocab, cw)?
                    .values,
            );
        }
        out.push(Sample {
            gaze: Matrix::from_vec(tokens, gw, gaze)?,
            bio: Matrix::from_vec(tokens, bw, bio)?,
            context: Matrix::from_vec(tokens, cw, context)?,
            ticks,
            label: trace.intents[end],
        });
    }
    Ok(out)
}

/// Per-column standardisation fitted on training tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(blocks: impl Iterator<Item = &'a Matrix<f64>>) -> Self {
        let mut n = 0.0;
        let mut mean: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        for m in blocks {
            if mean.is_empty() {
                mean = vec![0.0; m.cols()];
                sq = vec![0.0; m.cols()];
            }
            for r in m.row_iter() {
                n += 1.0;
                for (j, &v) in r.iter().enumerate() {
                    mean[j] += v;
                    sq[j] += v * v;
                }
            }
        }
        let n = f64::max(n, 1.0);
        let std = mean
            .iter()
            .zip(&sq)
            .map(|(&s, &q)| ((q / n) - (s / n) * (s / n)).max(0.0).sqrt().max(1e-6))
            .collect();
        Self {
            mean: mean.into_iter().map(|s| s / n).collect(),
            std,
        }
    }

    /// Standardised copy; columns in `zeroed` are set to zero.
    pub fn apply(&self, m: &Matrix<f64>, zeroed: impl Fn(usize) -> bool) -> Matrix<f64> {
        let mut out = m.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = if zeroed(j) {
                    0.0
                } else {
                    (*v - self.mean[j]) / self.std[j]
                };
            }
        }
        out
    }
}

/// A trained model with everything needed to classify new samples.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: TransformerConfig,
    pub encoders: EncoderParams<f64>,
    pub weights: ParamSet<f64>,
    pub mask: ModalityMask,
    pub alignment: Alignment,
    pub scalers: [Standardizer; 3],
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

struct Inputs {
    gaze: Matrix<f64>,
    bio: Matrix<f64>,
    context: Matrix<f64>,
}

fn masked_inputs(s: &Sample, mask: &ModalityMask, scalers: &[Standardizer; 3]) -> Inputs {
    Inputs {
        gaze: scalers[0].apply(&s.gaze, |_| !mask.gaze),
        // bio column 0 is heart rate, the rest EEG spectrum
        bio: scalers[1].apply(&s.bio, |j| if j == 0 { !mask.heart } else { !mask.eeg }),
        context: scalers[2].apply(&s.context, |_| !mask.context),
    }
}

fn tape_sample(
    tape: &mut Tape<f64>,
    enc: &crate::params::Bound,
    trunk: &crate::params::Bound,
    model: &TransformerConfig,
    mask: &ModalityMask,
    alignment: Alignment,
    x: &Inputs,
    tau: f64,
    contrastive: bool,
) -> Result<(Var, Option<Var>)> {
    let mut active = Vec::new();
    let mut encode = |tape: &mut Tape<f64>, on: bool, m: &Matrix<f64>, modality: Modality| {
        if on {
            let c = tape.constant(m.clone());
            let z = tape_encode(tape, enc, c, modality);
            active.push(z);
            z
        } else {
            tape.constant(Matrix::zeros(m.rows(), model.model_dim))
        }
    };
    let zg = encode(tape, mask.gaze, &x.gaze, Modality::Gaze);
    let zb = encode(tape, mask.bio(), &x.bio, Modality::Bio);
    let zc = encode(tape, mask.context, &x.context, Modality::Context);
    let fused = match alignment {
        Alignment::Attention => tape_attention_align(tape, enc, zg, zb, zc),
        Alignment::Dtw => tape_dtw_fuse(tape, zg, zb, zc, None)?,
    };
    let pooled = tape_trunk(tape, trunk, model, fused);
    let mut closs = None;
    if contrastive && active.len() >= 2 {
        let mut terms = Vec::new();
        for i in 0..active.len() {
            for j in i + 1..active.len() {
                terms.push(tape_contrastive(tape, active[i], active[j], tau));
            }
        }
        let count = terms.len();
        let mut s = terms[0];
        for &t in &terms[1..] {
            s = tape.add(s, t);
        }
        closs = Some(tape.scale(s, 1.0 / count as f64));
    }
    Ok((pooled, closs))
}

fn encoder_shape(
    cfg: &PreprocessConfig,
    train: &TrainConfig,
    model: &TransformerConfig,
) -> EncoderShape {
    let (gaze_in, bio_in, context_in) = input_widths(cfg);
    EncoderShape {
        gaze_in,
        bio_in,
        context_in,
        hidden: train.encoder_hidden,
        dim: model.model_dim,
    }
}

/// Trains encoders, alignment and transformer jointly on `samples`.
pub fn train_model(
    samples: &[Sample],
    model: &TransformerConfig,
    cfg: &PreprocessConfig,
    train: &TrainConfig,
    mask: ModalityMask,
    seed: u64,
) -> Result<TrainedModel> {
    model.validate()?;
    train.validate()?;
    if samples.is_empty() {
        return arg_err("no training samples");
    }
    if !(mask.gaze || mask.bio() || mask.context) {
        return arg_err("at least one modality must be active");
    }
    let scalers = [
        Standardizer::fit(samples.iter().map(|s| &s.gaze)),
        Standardizer::fit(samples.iter().map(|s| &s.bio)),
        Standardizer::fit(samples.iter().map(|s| &s.context)),
    ];
    let inputs: Vec<Inputs> = samples
        .iter()
        .map(|s| masked_inputs(s, &mask, &scalers))
        .collect();
    let mut encoders = EncoderParams::<f64>::init(
        encoder_shape(cfg, train, model),
        rng::derive_seed(seed, "init.encoders"),
    )?;
    let mut weights = init_weights::<f64>(model, rng::derive_seed(seed, "init.transformer"))?;
    let mut opt_e = Adam::new(&encoders.params, train.lr);
    let mut opt_w = Adam::new(&weights, train.lr);
    let n_train = samples.len() as f64;
    let (d, k) = (model.model_dim, model.intent_count);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut noise = rng::stream(seed, "train.head_noise");
    let mut losses = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng::indexed_stream(
            seed,
            "train.shuffle",
            epoch as u64,
        ));
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let mut tape = Tape::new();
            let be = encoders.params.bind(&mut tape);
            let bw = weights.bind(&mut tape);
            let mut pooled = Vec::with_capacity(batch.len());
            let mut closs = Vec::new();
            for &i in batch {
                let (p, c) = tape_sample(
                    &mut tape,
                    &be,
                    &bw,
                    model,
                    &mask,
                    train.alignment,
                    &inputs[i],
                    train.tau,
                    train.contrastive_weight > 0.0,
                )?;
                pooled.push(p);
                closs.extend(c);
            }
            let p = tape.concat_rows(&pooled);
            let w = tape_head_weight(&mut tape, &bw, Some(Matrix::randn(d, k, 1.0, &mut noise)));
            let logits = tape.matmul(p, w);
            let logits = tape.add_row(logits, bw.var("head.b"));
            let ls = tape.log_softmax_rows(logits);
            let at: Vec<(usize, usize)> = batch
                .iter()
                .enumerate()
                .map(|(r, &i)| (r, samples[i].label))
                .collect();
            let picked = tape.pick(ls, &at);
            let ce = tape.mean_all(picked);
            let mut loss = tape.scale(ce, -1.0);
            if !closs.is_empty() {
                let m = closs.len() as f64;
                let mut s = closs[0];
                for &c in &closs[1..] {
                    s = tape.add(s, c);
                }
                let s = tape.scale(s, train.contrastive_weight / m);
                loss = tape.add(loss, s);
            }
            if train.beta > 0.0 {
                let kl = tape_head_kl(&mut tape, &bw);
                let kl = tape.scale(kl, train.beta / n_train);
                loss = tape.add(loss, kl);
            }
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(crate::error::ZiaError::Numerical(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            total += lv * batch.len() as f64;
            let grads = tape.backward(loss);
            opt_e.step(&mut encoders.params, &be, &grads);
            opt_w.step(&mut weights, &bw, &grads);
        }
        losses.push(total / n_train);
        log::info!("epoch {epoch}: loss {:.4}", total / n_train);
    }
    Ok(TrainedModel {
        model: model.clone(),
        encoders,
        weights,
        mask,
        alignment: train.alignment,
        scalers,
        losses,
    })
}

impl TrainedModel {
    /// Fused token sequence for one sample.
    pub fn fuse(&self, s: &Sample) -> Result<EmbeddingSequence<f64>> {
        let x = masked_inputs(s, &self.mask, &self.scalers);
        let d = self.model.model_dim;
        let enc =
            |on: bool, m: &Matrix<f64>, modality: Modality| -> Result<EmbeddingSequence<f64>> {
                if on {
                    encode_modality(m, s.ticks.clone(), &self.encoders, modality)
                } else {
                    EmbeddingSequence::new(Matrix::zeros(m.rows(), d), modality, s.ticks.clone())
                }
            };
        let zg = enc(self.mask.gaze, &x.gaze, Modality::Gaze)?;
        let zb = enc(self.mask.bio(), &x.bio, Modality::Bio)?;
        let zc = enc(self.mask.context, &x.context, Modality::Context)?;
        match self.alignment {
            Alignment::Attention => attention_align(&zg, &zb, &zc, &self.encoders),
            Alignment::Dtw => dtw_fuse(&zg, &zb, &zc, None),
        }
    }

    /// Monte Carlo intent probabilities for one sample.
    pub fn predict(&self, s: &Sample, samples: usize, seed: u64) -> Result<Vec<f64>> {
        let fused = self.fuse(s)?;
        let (pooled, _) = pooled_features(&fused, &self.model, &self.weights)?;
        let post = VariationalPosterior::from_params(&self.weights)?;
        let p = predict_from_pooled(
            &pooled,
            self.weights.get("head.b")?,
            &post,
            samples,
            0.0,
            None,
            seed,
        )?;
        Ok(p.distribution.probs)
    }
}

/// Test-set outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub samples: usize,
    pub mean_entropy_bits: f64,
    pub predictions: Vec<(usize, usize, Vec<f64>)>,
}

pub fn evaluate(
    model: &TrainedModel,
    samples: &[Sample],
    mc_samples: usize,
    seed: u64,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return arg_err("no evaluation samples");
    }
    let mut correct = 0usize;
    let mut ent = 0.0;
    let mut predictions = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let probs = model.predict(
            s,
            mc_samples,
            rng::derive_indexed(seed, "eval.monte_carlo", i as u64),
        )?;
        let am = crate::predictor::argmax(&probs);
        correct += usize::from(am == s.label);
        ent -= probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.log2())
            .sum::<f64>();
        predictions.push((s.ticks[s.ticks.len() - 1], s.label, probs));
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        samples: samples.len(),
        mean_entropy_bits: ent / n,
        predictions,
    })
}

/// Train and test samples generated from independent episodes of `scenario`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub warnings: Vec<String>,
}

pub fn build_dataset(
    scenario: &ScenarioConfig,
    model: &TransformerConfig,
    cfg: &PreprocessConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<Dataset> {
    let mut warnings = Vec::new();
    let mut make = |name: &str, count: usize| -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for e in 0..count {
            let mut sc = scenario.clone();
            sc.seed = rng::derive_indexed(seed, name, e as u64);
            let trace = gen_episode_with::<f64>(&sc, false)?;
            let streams = preprocess_episode(&trace, cfg)?;
            if let Some(w) = &streams.ica_warning {
                warnings.push(format!("{name} episode {e}: {w}"));
            }
            out.extend(build_samples(
                &trace,
                &streams,
                &sc,
                cfg,
                model.sequence_len,
            )?);
        }
        Ok(out)
    };
    let train_set = make("simulation.train", train.train_episodes)?;
    let test_set = make("simulation.test", train.test_episodes)?;
    Ok(Dataset {
        train: train_set,
        test: test_set,
        warnings,
    })
}

/// Accuracy for one modality subset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub modality_subset: String,
    pub alignment: Alignment,
    pub attention_kind: crate::attention::AttentionKind,
    pub train_samples: usize,
    pub test_samples: usize,
    pub accuracy_pct: f64,
    pub mean_entropy_bits: f64,
}

/// Trains and evaluates one model per mask on a shared dataset.
pub fn run_masks(
    data: &Dataset,
    model: &TransformerConfig,
    cfg: &PreprocessConfig,
    train: &TrainConfig,
    masks: &[ModalityMask],
    seed: u64,
) -> Result<Vec<(AccuracyRow, TrainedModel, Evaluation)>> {
    masks
        .iter()
        .map(|&mask| {
            let m = train_model(&data.train, model, cfg, train, mask, seed)?;
            let ev = evaluate(&m, &data.test, train.mc_samples, seed)?;
            let row = AccuracyRow {
                modality_subset: mask.label(),
                alignment: train.alignment,
                attention_kind: model.attention_kind,
                train_samples: data.train.len(),
                test_samples: ev.samples,
                accuracy_pct: 100.0 * ev.accuracy,
                mean_entropy_bits: ev.mean_entropy_bits,
            };
            Ok((row, m, ev))
        })
        .collect()
}

/// The calibrated scenario behind the modality ladder: gaze points at the
/// wrong target a fifth of the time and context ids follow the intent half
/// of the time, so every added stream carries extra information.
pub fn ladder_scenario(seed: u64) -> ScenarioConfig {
    let mut sc = ScenarioConfig::calibrated(10, seed);
    sc.gaze_fidelity = 0.8;
    sc.context_strength = 0.5;
    sc
}

pub const ACCURACY_CSV_HEADER: [&str; 7] = [
    "modality_subset",
    "alignment",
    "attention_kind",
    "train_samples",
    "test_samples",
    "accuracy_pct",
    "mean_entropy_bits",
];

pub fn write_accuracy_csv<W: Write>(out: W, rows: &[AccuracyRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ACCURACY_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.modality_subset.clone(),
            match r.alignment {
                Alignment::Attention => "attention".into(),
                Alignment::Dtw => "dtw".into(),
            },
            match r.attention_kind {
                crate::attention::AttentionKind::Softmax => "softmax".into(),
                crate::attention::AttentionKind::Linear => "linear".into(),
            },
            r.train_samples.to_string(),
            r.test_samples.to_string(),
            format!("{:.4}", r.accuracy_pct),
            format!("{:.6}", r.mean_entropy_bits),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::NoiseConfig;

    fn tiny() -> (ScenarioConfig, TransformerConfig, PreprocessConfig) {
        let mut sc = ladder_scenario(1);
        sc.duration = 256 * 6;
        let model = TransformerConfig {
            intent_count: 10,
            ..TransformerConfig::reduced()
        };
        (sc, model, PreprocessConfig::default())
    }

    #[test]
    fn samples_have_expected_shapes() {
        let (sc, model, cfg) = tiny();
        let trace = gen_episode_with::<f64>(&sc, false).unwrap();
        let st = preprocess_episode(&trace, &cfg).unwrap();
        let s = build_samples(&trace, &st, &sc, &cfg, model.sequence_len).unwrap();
        // segments ending before the token span are skipped
        assert_eq!(s.len(), 6 - 2);
        let (g, b, c) = input_widths(&cfg);
        assert_eq!((g, b, c), (12, 24, 32));
        assert_eq!(s[0].gaze.shape(), (8, 12));
        assert_eq!(s[0].bio.shape(), (8, 24));
        assert_eq!(s[0].context.shape(), (8, 32));
        assert_eq!(*s[0].ticks.last().unwrap(), 3 * 256 - 1);
        assert_eq!(s[0].label, trace.intents[3 * 256 - 1]);
    }

    #[test]
    fn eeg_spectrum_peaks_at_the_intent_tone() {
        let (mut sc, model, cfg) = tiny();
        sc.noise = NoiseConfig::silent();
        let trace = gen_episode_with::<f64>(&sc, false).unwrap();
        let st = preprocess_episode(&trace, &cfg).unwrap();
        let s = build_samples(&trace, &st, &sc, &cfg, model.sequence_len).unwrap();
        for smp in &s {
            let last = smp.bio.row(7);
            let peak = (1..last.len())
                .max_by(|&a, &b| last[a].total_cmp(&last[b]))
                .unwrap();
            let f = eeg_bins(&cfg)[peak - 1] as f64;
            let want = sc.template(smp.label).eeg_freq_hz;
            assert!((f - want).abs() <= 1.0, "{f} vs {want}");
        }
    }

    #[test]
    fn standardizer_zeroes_masked_columns() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 6.0]]).unwrap();
        let s = Standardizer::fit(std::iter::once(&m));
        assert_eq!(s.mean, vec![2.0, 4.0]);
        let out = s.apply(&m, |j| j == 1);
        assert_eq!(out.as_slice(), &[-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn ladder_masks_are_nested() {
        let l = ModalityMask::ladder();
        assert_eq!(l[0], ModalityMask::GAZE);
        assert_eq!(l[3], ModalityMask::ALL);
        assert_eq!(l[1].label(), "gaze+heart");
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (mut sc, mut model, cfg) = tiny();
        sc.duration = 256 * 10;
        model.layers = 1;
        let train = TrainConfig {
            train_episodes: 2,
            test_episodes: 1,
            epochs: 3,
            ..TrainConfig::default()
        };
        let data = build_dataset(&sc, &model, &cfg, &train, 3).unwrap();
        let a = train_model(&data.train, &model, &cfg, &train, ModalityMask::ALL, 3).unwrap();
        let b = train_model(&data.train, &model, &cfg, &train, ModalityMask::ALL, 3).unwrap();
        assert_eq!(a.losses, b.losses);
        assert!(a.losses[2] < a.losses[0], "{:?}", a.losses);
        let ev = evaluate(&a, &data.test, 4, 3).unwrap();
        assert_eq!(ev.samples, data.test.len());
    }
}
