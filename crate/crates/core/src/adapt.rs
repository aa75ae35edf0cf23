//! Online adaptation: user feedback becomes a reward, and a linear softmax
//! policy over pooled transformer features is refined with clipped PPO.
//!
//! Each prediction is treated as a one-step episode, so the bootstrap value
//! after every step is zero.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::fusion::{EmbeddingSequence, Modality};
use crate::matrix::Matrix;
use crate::params::{ParamKind, ParamSet};
use crate::predictor::{pooled_features, TransformerConfig};
use crate::preprocess::encode_context;
use crate::rng;
use crate::scalar::Scalar;
use crate::signals::{gen_episode_with, EpisodeTrace, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Accepted,
    Overridden,
    Ignored,
}

/// The user's reaction to one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub predicted: usize,
    pub outcome: Outcome,
    pub corrected: Option<usize>,
}

impl FeedbackEvent {
    /// `corrected` must be present exactly when the prediction was overridden.
    pub fn new(predicted: usize, outcome: Outcome, corrected: Option<usize>) -> Result<Self> {
        if (outcome == Outcome::Overridden) != corrected.is_some() {
            return arg_err("a correction accompanies an override and nothing else");
        }
        Ok(Self {
            predicted,
            outcome,
            corrected,
        })
    }

    pub fn accepted(predicted: usize) -> Self {
        Self {
            predicted,
            outcome: Outcome::Accepted,
            corrected: None,
        }
    }

    pub fn overridden(predicted: usize, corrected: usize) -> Self {
        Self {
            predicted,
            outcome: Outcome::Overridden,
            corrected: Some(corrected),
        }
    }

    pub fn ignored(predicted: usize) -> Self {
        Self {
            predicted,
            outcome: Outcome::Ignored,
            corrected: None,
        }
    }
}

/// +1 when accepted, −1 when overridden, 0 otherwise.
pub fn reward(_predicted: usize, feedback: &FeedbackEvent) -> f64 {
    match feedback.outcome {
        Outcome::Accepted => 1.0,
        Outcome::Overridden => -1.0,
        Outcome::Ignored => 0.0,
    }
}

/// Generalised advantage estimates for one episode, terminal bootstrap 0,
/// before any normalisation.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return arg_err("rewards and values differ in length");
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lam) {
        return arg_err(format!(
            "gamma and lambda must lie in [0, 1], got {gamma}, {lam}"
        ));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        carry = delta + gamma * lam * carry;
        adv[t] = carry;
    }
    Ok(adv)
}

/// Subtracts the batch mean.
pub fn center(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let m = adv.iter().sum::<f64>() / adv.len() as f64;
    adv.iter_mut().for_each(|a| *a -= m);
}

/// [`gae`] followed by batch-wise centering.
pub fn advantage_estimate(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lam: f64,
) -> Result<Vec<f64>> {
    let mut a = gae(rewards, values, gamma, lam)?;
    center(&mut a);
    Ok(a)
}

/// `min(r·Â, clip(r, lo, hi)·Â)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_lo: f64, clip_hi: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(clip_lo, clip_hi) * advantage)
}

/// One batch of rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch<T> {
    /// One pooled state per row.
    pub states: Matrix<T>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl<T: Scalar> TrajectoryBatch<T> {
    pub fn new(
        states: Matrix<T>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        old_log_probs: Vec<f64>,
        advantages: Vec<f64>,
    ) -> Result<Self> {
        let n = states.rows();
        if n == 0 {
            return arg_err("empty trajectory batch");
        }
        if [
            actions.len(),
            rewards.len(),
            old_log_probs.len(),
            advantages.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return arg_err("trajectory sequences differ in length");
        }
        if rewards.iter().any(|r| ![-1.0, 0.0, 1.0].contains(r)) {
            return arg_err("rewards must be -1, 0 or +1");
        }
        Ok(Self {
            states,
            actions,
            rewards,
            old_log_probs,
            advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// PPO and value-head hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub entropy_coef: f64,
    /// Full-batch gradient steps per update.
    pub steps: usize,
    /// Step sizes are divided by the mean squared state norm.
    pub lr: f64,
    pub value_lr: f64,
    pub value_steps: usize,
    pub gamma: f64,
    pub lam: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_lo: 0.8,
            clip_hi: 1.2,
            entropy_coef: 0.01,
            steps: 16,
            lr: 30.0,
            value_lr: 0.5,
            value_steps: 8,
            gamma: 0.99,
            lam: 0.95,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_lo < 1.0 && 1.0 < self.clip_hi && self.clip_lo > 0.0) {
            return arg_err(format!(
                "clip range must straddle 1, got [{}, {}]",
                self.clip_lo, self.clip_hi
            ));
        }
        if !(self.entropy_coef >= 0.0 && self.lr > 0.0 && self.value_lr > 0.0) {
            return arg_err("learning rates must be positive and entropy_coef non-negative");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lam) {
            return arg_err("gamma and lambda must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Linear policy `softmax(s·W + b)` named `policy.w`, `policy.b`.
pub fn init_policy<T: Scalar>(dim: usize, intents: usize) -> Result<ParamSet<T>> {
    let mut ps = ParamSet::new();
    ps.insert("policy.w", ParamKind::Weight, Matrix::zeros(dim, intents))?;
    ps.insert("policy.b", ParamKind::Bias, Matrix::zeros(1, intents))?;
    Ok(ps)
}

/// Policy initialised from the predictor's output layer at its posterior mean.
pub fn policy_from_predictor<T: Scalar>(weights: &ParamSet<T>) -> Result<ParamSet<T>> {
    let mut ps = ParamSet::new();
    ps.insert(
        "policy.w",
        ParamKind::Weight,
        weights.get("head.mu")?.clone(),
    )?;
    ps.insert("policy.b", ParamKind::Bias, weights.get("head.b")?.clone())?;
    Ok(ps)
}

/// Affine value head `s·w + b` named `value.w`, `value.b`.
pub fn init_value<T: Scalar>(dim: usize) -> Result<ParamSet<T>> {
    let mut ps = ParamSet::new();
    ps.insert("value.w", ParamKind::Weight, Matrix::zeros(dim, 1))?;
    ps.insert("value.b", ParamKind::Bias, Matrix::zeros(1, 1))?;
    Ok(ps)
}

fn affine<T: Scalar>(states: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Vec<Vec<f64>>> {
    let z = states.matmul(w)?;
    Ok(z.row_iter()
        .map(|r| {
            r.iter()
                .zip(b.as_slice())
                .map(|(&x, &y)| (x + y).as_f64())
                .collect()
        })
        .collect())
}

fn log_softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    l.iter().map(|x| x - lse).collect()
}

/// Action log-probabilities per state.
pub fn policy_log_probs<T: Scalar>(
    policy: &ParamSet<T>,
    states: &Matrix<T>,
) -> Result<Vec<Vec<f64>>> {
    let logits = affine(states, policy.get("policy.w")?, policy.get("policy.b")?)?;
    Ok(logits.iter().map(|l| log_softmax(l)).collect())
}

/// Value estimates per state.
pub fn values<T: Scalar>(value: &ParamSet<T>, states: &Matrix<T>) -> Result<Vec<f64>> {
    Ok(
        affine(states, value.get("value.w")?, value.get("value.b")?)?
            .into_iter()
            .map(|v| v[0])
            .collect(),
    )
}

fn entropy_of(logp: &[f64]) -> f64 {
    -logp.iter().map(|&l| l.exp() * l).sum::<f64>()
}

/// Mean policy entropy over `states`, in nats.
pub fn mean_entropy<T: Scalar>(policy: &ParamSet<T>, states: &Matrix<T>) -> Result<f64> {
    let lp = policy_log_probs(policy, states)?;
    Ok(lp.iter().map(|l| entropy_of(l)).sum::<f64>() / lp.len().max(1) as f64)
}

/// PPO objective value and its gradient with respect to the logits.
fn objective_and_logit_grad(
    logp: &[Vec<f64>],
    batch_actions: &[usize],
    old: &[f64],
    adv: &[f64],
    cfg: &PpoConfig,
) -> (f64, Vec<Vec<f64>>) {
    let n = logp.len() as f64;
    let mut obj = 0.0;
    let grads = logp
        .iter()
        .enumerate()
        .map(|(i, lp)| {
            let a = batch_actions[i];
            let ratio = (lp[a] - old[i]).exp();
            let s = clipped_surrogate(ratio, adv[i], cfg.clip_lo, cfg.clip_hi);
            let h = entropy_of(lp);
            obj += (s + cfg.entropy_coef * h) / n;
            // the unclipped branch carries the gradient only when it is the minimum
            let live = ratio * adv[i] <= ratio.clamp(cfg.clip_lo, cfg.clip_hi) * adv[i];
            lp.iter()
                .enumerate()
                .map(|(j, &l)| {
                    let p = l.exp();
                    let onehot = if j == a { 1.0 } else { 0.0 };
                    let g_sur = if live {
                        adv[i] * ratio * (onehot - p)
                    } else {
                        0.0
                    };
                    let g_ent = -p * (l + h);
                    (g_sur + cfg.entropy_coef * g_ent) / n
                })
                .collect()
        })
        .collect();
    (obj, grads)
}

/// `1 + mean ‖s‖²`, the step-size normaliser.
fn mean_sq_norm<T: Scalar>(states: &Matrix<T>) -> f64 {
    1.0 + states.sum_sq().as_f64() / states.rows().max(1) as f64
}

/// Result of [`ppo_update`].
#[derive(Debug, Clone)]
pub struct PpoOutcome<T: Clone> {
    pub policy: ParamSet<T>,
    pub objective_before: f64,
    pub objective_after: f64,
    pub warning: Option<String>,
}

/// Gradient ascent on the clipped surrogate plus entropy bonus.
pub fn ppo_update<T: Scalar>(
    batch: &TrajectoryBatch<T>,
    policy: &ParamSet<T>,
    cfg: &PpoConfig,
) -> Result<PpoOutcome<T>> {
    cfg.validate()?;
    if batch.is_empty() {
        return arg_err("empty trajectory batch");
    }
    let objective = |p: &ParamSet<T>| -> Result<(f64, Vec<Vec<f64>>)> {
        let lp = policy_log_probs(p, &batch.states)?;
        Ok(objective_and_logit_grad(
            &lp,
            &batch.actions,
            &batch.old_log_probs,
            &batch.advantages,
            cfg,
        ))
    };
    let (objective_before, _) = objective(policy)?;
    let degenerate = batch.actions.iter().all(|&a| a == batch.actions[0])
        && batch.advantages.iter().all(|&a| a == 0.0);
    if degenerate {
        let warning = Some(
            "degenerate batch: one repeated action with zero advantage; update skipped".to_string(),
        );
        log::warn!("{}", warning.as_deref().unwrap_or_default());
        return Ok(PpoOutcome {
            policy: policy.clone(),
            objective_before,
            objective_after: objective_before,
            warning,
        });
    }
    let mut p = policy.clone();
    let lr = T::lit(cfg.lr / mean_sq_norm(&batch.states));
    for _ in 0..cfg.steps {
        let (_, g) = objective(&p)?;
        let k = g[0].len();
        let g = Matrix::from_vec(g.len(), k, g.into_iter().flatten().map(T::lit).collect())?;
        let gw = batch.states.matmul_ta(&g)?;
        let gb = Matrix::filled(1, g.rows(), T::one()).matmul(&g)?;
        p.get_mut("policy.w")?.axpy(lr, &gw)?;
        p.get_mut("policy.b")?.axpy(lr, &gb)?;
    }
    let (objective_after, _) = objective(&p)?;
    Ok(PpoOutcome {
        policy: p,
        objective_before,
        objective_after,
        warning: None,
    })
}

/// Least-squares steps of the value head toward `targets`.
pub fn value_update<T: Scalar>(
    value: &ParamSet<T>,
    states: &Matrix<T>,
    targets: &[f64],
    cfg: &PpoConfig,
) -> Result<ParamSet<T>> {
    if states.rows() != targets.len() || targets.is_empty() {
        return arg_err("value targets must match the states");
    }
    let mut v = value.clone();
    let n = targets.len() as f64;
    let lr = T::lit(-cfg.value_lr / mean_sq_norm(states));
    for _ in 0..cfg.value_steps {
        let pred = values(&v, states)?;
        let resid: Vec<T> = pred
            .iter()
            .zip(targets)
            .map(|(p, t)| T::lit(2.0 * (p - t) / n))
            .collect();
        let r = Matrix::column_vector(&resid);
        let gw = states.matmul_ta(&r)?;
        let gb = Matrix::filled(1, 1, r.sum());
        v.get_mut("value.w")?.axpy(lr, &gw)?;
        v.get_mut("value.b")?.axpy(lr, &gb)?;
    }
    Ok(v)
}

/// Simulated user: a correct prediction is accepted with probability
/// `1 − epsilon` (ignored otherwise); a wrong one is overridden with
/// probability `override_prob` (ignored otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UserModel {
    pub epsilon: f64,
    pub override_prob: f64,
    /// Accept every prediction regardless of correctness.
    pub always_accept: bool,
}

impl Default for UserModel {
    fn default() -> Self {
        Self {
            epsilon: 0.02,
            override_prob: 0.9,
            always_accept: false,
        }
    }
}

impl UserModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) || !(0.0..=1.0).contains(&self.override_prob) {
            return arg_err("user-model probabilities must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn respond(&self, predicted: usize, truth: usize, rng: &mut rng::Rng) -> FeedbackEvent {
        if self.always_accept {
            return FeedbackEvent::accepted(predicted);
        }
        if predicted == truth {
            if rng.gen::<f64>() < 1.0 - self.epsilon {
                FeedbackEvent::accepted(predicted)
            } else {
                FeedbackEvent::ignored(predicted)
            }
        } else if rng.gen::<f64>() < self.override_prob {
            FeedbackEvent::overridden(predicted, truth)
        } else {
            FeedbackEvent::ignored(predicted)
        }
    }
}

/// Pooled transformer features of the context observation at each segment end.
pub fn context_states<T: Scalar>(
    trace: &EpisodeTrace<T>,
    scenario: &ScenarioConfig,
    model: &TransformerConfig,
    weights: &ParamSet<T>,
) -> Result<Matrix<T>> {
    let ends = trace.segment_ends();
    let mut rows = Vec::with_capacity(ends.len());
    for &end in &ends {
        let obs = &trace.frames[end].context;
        let enc = encode_context::<T>(
            obs,
            scenario.location_vocab,
            scenario.usage_vocab,
            model.model_dim,
        )?;
        let z = EmbeddingSequence::new(
            Matrix::row_vector(&enc.values),
            Modality::Context,
            vec![end],
        )?;
        rows.push(pooled_features(&z, model, weights)?.0);
    }
    let refs: Vec<&Matrix<T>> = rows.iter().collect();
    Matrix::concat_rows(&refs)
}

/// Per-feature standardisation fitted on the first epoch's states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StateNormalizer {
    pub fn fit<T: Scalar>(states: &Matrix<T>) -> Self {
        let (n, d) = (states.rows().max(1) as f64, states.cols());
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for r in states.row_iter() {
            for (j, v) in r.iter().enumerate() {
                mean[j] += v.as_f64() / n;
                sq[j] += v.as_f64() * v.as_f64() / n;
            }
        }
        let std = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| (s - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Self { mean, std }
    }

    pub fn apply<T: Scalar>(&self, states: &Matrix<T>) -> Matrix<T> {
        let mut out = states.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = T::lit((v.as_f64() - self.mean[j]) / self.std[j]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_reward: f64,
    pub accept_rate: f64,
    /// Mean policy entropy over the epoch's states before the update, in nats.
    pub policy_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptationReport<T: Clone> {
    pub curve: Vec<EpochStats>,
    pub policy: ParamSet<T>,
    pub steps: usize,
    pub warnings: Vec<String>,
}

impl<T: Clone> AdaptationReport<T> {
    pub fn final_accept_rate(&self) -> f64 {
        self.curve.last().map_or(0.0, |e| e.accept_rate)
    }
}

/// Adaptation schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub ppo: PpoConfig,
    pub user: UserModel,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 250,
            ppo: PpoConfig::default(),
            user: UserModel::default(),
        }
    }
}

/// Rolls out `epochs × steps_per_epoch` predictions against the user model,
/// updating the policy once per epoch.
pub fn run_adaptation<T: Scalar>(
    scenario: &ScenarioConfig,
    model: &TransformerConfig,
    weights: &ParamSet<T>,
    adapt: &AdaptationConfig,
    seed: u64,
) -> Result<AdaptationReport<T>> {
    adapt.ppo.validate()?;
    adapt.user.validate()?;
    if adapt.epochs == 0 || adapt.steps_per_epoch == 0 {
        return arg_err("adaptation needs at least one epoch and one step");
    }
    let mut policy = policy_from_predictor(weights)?;
    let mut value = init_value::<T>(model.model_dim)?;
    let mut normalizer: Option<StateNormalizer> = None;
    let mut curve = Vec::with_capacity(adapt.epochs);
    let mut warnings = Vec::new();
    for epoch in 0..adapt.epochs {
        let mut sc = scenario.clone();
        sc.seed = rng::derive_indexed(seed, "adapt.episode", epoch as u64);
        sc.duration = adapt.steps_per_epoch * sc.ticks_per_intent;
        let trace = gen_episode_with::<T>(&sc, false)?;
        let raw = context_states(&trace, &sc, model, weights)?;
        let states = normalizer
            .get_or_insert_with(|| StateNormalizer::fit(&raw))
            .apply(&raw);
        let truth = trace.segment_intents();
        let logp = policy_log_probs(&policy, &states)?;
        let mut act_rng = rng::indexed_stream(seed, "adapt.actions", epoch as u64);
        let mut user_rng = rng::indexed_stream(seed, "adapt.user", epoch as u64);
        let mut actions = Vec::with_capacity(logp.len());
        let mut old = Vec::with_capacity(logp.len());
        let mut rewards = Vec::with_capacity(logp.len());
        let mut accepted = 0usize;
        for (i, lp) in logp.iter().enumerate() {
            let u: f64 = act_rng.gen();
            let mut acc = 0.0;
            let a = lp
                .iter()
                .position(|&l| {
                    acc += l.exp();
                    u < acc
                })
                .unwrap_or(lp.len() - 1);
            let fb = adapt.user.respond(a, truth[i], &mut user_rng);
            accepted += usize::from(fb.outcome == Outcome::Accepted);
            actions.push(a);
            old.push(lp[a]);
            rewards.push(reward(a, &fb));
        }
        let n = rewards.len() as f64;
        let v = values(&value, &states)?;
        // one-step episodes: GAE reduces to r − V(s)
        let mut adv: Vec<f64> = Vec::with_capacity(rewards.len());
        for (r, vv) in rewards.iter().zip(&v) {
            adv.extend(gae(&[*r], &[*vv], adapt.ppo.gamma, adapt.ppo.lam)?);
        }
        center(&mut adv);
        let entropy = logp.iter().map(|l| entropy_of(l)).sum::<f64>() / n;
        curve.push(EpochStats {
            epoch,
            mean_reward: rewards.iter().sum::<f64>() / n,
            accept_rate: accepted as f64 / n,
            policy_entropy: entropy,
        });
        let batch = TrajectoryBatch::new(states.clone(), actions, rewards.clone(), old, adv)?;
        let out = ppo_update(&batch, &policy, &adapt.ppo)?;
        if let Some(w) = out.warning {
            warnings.push(format!("epoch {epoch}: {w}"));
        }
        policy = out.policy;
        value = value_update(&value, &states, &rewards, &adapt.ppo)?;
    }
    Ok(AdaptationReport {
        curve,
        policy,
        steps: adapt.epochs * adapt.steps_per_epoch,
        warnings,
    })
}

pub const CURVE_CSV_HEADER: [&str; 4] = ["epoch", "mean_reward", "accept_rate", "policy_entropy"];

pub fn write_curve_csv<W: Write>(out: W, curve: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_CSV_HEADER)?;
    for e in curve {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.6}", e.mean_reward),
            format!("{:.6}", e.accept_rate),
            format!("{:.6}", e.policy_entropy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// The three-intent bandit: context fully determines the intent and intents
/// are drawn independently at every step.
pub fn bandit_scenario(seed: u64) -> ScenarioConfig {
    let mut sc = ScenarioConfig::calibrated(3, seed);
    sc.transition_matrix = vec![vec![1.0 / 3.0; 3]; 3];
    sc.context_strength = 1.0;
    sc
}
