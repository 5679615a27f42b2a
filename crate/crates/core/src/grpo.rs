//! Group-relative policy optimization with decoupled zoom-in training.
//!
//! Two kinds of rollout groups feed one update:
//!
//! * [`GroupMode::MultiStep`]: whole episodes scored by the final answer, the
//!   reward shared across every step; episodes that never answer are masked.
//! * [`GroupMode::SingleStepZoom`]: one generation under the forced zoom-in
//!   prefix, scored by whether the predicted span overlaps the ground truth.
//!
//! Advantages are the group-normalized rewards; the update is a single
//! REINFORCE-with-advantage step over all unmasked steps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{SamplingConfig, SlowFastLayout, TimeSpan, VideoMeta};
use crate::reasoning::{
    build_prompt, parse_step, run_episode, EpisodeError, EpisodeStep, EpisodeTrace, PolicyBackend, Prefix,
    QuestionSpec, ScriptedBackend, StepAction, Termination,
};
use crate::rewards::{assign_trace_rewards, zoom_reward, RewardBundle, RewardError};
use crate::seeds;
use crate::synthetic_env::{action_logprob_grad, Decision, PolicyError, SyntheticBackend, SynthPolicyParams};

pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 rollouts, got {0}")]
    InvalidGroup(usize),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("non-finite gradient (norm {norm}) at group {group}, rollout {rollout}, step {step}")]
    NonFiniteGradient {
        norm: f64,
        group: usize,
        rollout: usize,
        step: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub learning_rate: f64,
    /// Rollout groups (questions) per update.
    pub batch_size: usize,
    /// Fraction of each batch trained as single-step zoom groups.
    pub mix_ratio: f64,
    pub updates: usize,
    pub kl_coeff: f64,
}

impl Default for TrainConfig {
    /// The large-model recipe: lr 1e-6, 32 questions of 8 rollouts each.
    fn default() -> Self {
        Self {
            group_size: 8,
            learning_rate: 1e-6,
            batch_size: 32,
            mix_ratio: 0.5,
            updates: 500,
            kl_coeff: 0.0,
        }
    }
}

impl TrainConfig {
    /// Step size sized for the small synthetic policy; everything else as
    /// in [`TrainConfig::default`].
    pub fn synthetic() -> Self {
        Self {
            learning_rate: 0.01,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::Config("group_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(GrpoError::Config("mix_ratio must be within [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(GrpoError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(GrpoError::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(self.kl_coeff.is_finite() && self.kl_coeff >= 0.0) {
            return Err(GrpoError::Config("kl_coeff must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Number of single-step zoom groups in a mixed batch.
    pub fn single_step_groups(&self) -> usize {
        (self.batch_size as f64 * self.mix_ratio).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupMode {
    MultiStep,
    SingleStepZoom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub trace: EpisodeTrace,
    pub rewards: RewardBundle,
    /// Policy decisions aligned with `trace.steps`; empty for backends that
    /// expose no score function.
    #[serde(skip)]
    pub decisions: Vec<Decision>,
}

impl Rollout {
    pub fn reward(&self) -> f64 {
        self.rewards.outcome()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub sample_id: String,
    pub mode: GroupMode,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(Rollout::reward).collect()
    }

    /// Which steps of rollout `i` receive gradient. Single-step zoom samples
    /// are complete on their own, so they are never masked.
    pub fn train_mask(&self, i: usize) -> Vec<bool> {
        let r = &self.rollouts[i];
        match self.mode {
            GroupMode::MultiStep => r.trace.loss_mask.clone(),
            GroupMode::SingleStepZoom => vec![true; r.trace.steps.len()],
        }
    }
}

/// A backend whose sampled actions can be scored after the fact.
pub trait TrainableBackend: PolicyBackend {
    fn take_decisions(&mut self) -> Vec<Decision>;
}

impl TrainableBackend for SyntheticBackend<'_> {
    fn take_decisions(&mut self) -> Vec<Decision> {
        SyntheticBackend::take_decisions(self)
    }
}

impl TrainableBackend for ScriptedBackend {
    fn take_decisions(&mut self) -> Vec<Decision> {
        Vec::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub sample_id: String,
    pub meta: VideoMeta,
    pub question: QuestionSpec,
}

/// `(r - mean) / (std + eps)` with the population standard deviation; a group
/// whose rewards are all equal gets exact zeros.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::InvalidGroup(rewards.len()));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect())
}

/// Keeps groups whose rollouts are neither all right nor all wrong.
pub fn select_training_samples(groups: Vec<RolloutGroup>) -> Vec<RolloutGroup> {
    groups
        .into_iter()
        .filter(|g| {
            let r = g.rewards();
            r.contains(&1.0) && r.contains(&0.0)
        })
        .collect()
}

fn rollout_seed(seed: u64, i: usize) -> u64 {
    seeds::derive(seed, 0x5EED_0000 + i as u64)
}

/// `group_size` full episodes, each from `make_backend(i)`.
pub fn rollout_multistep<B, F>(
    mut make_backend: F,
    sample: &TrainingSample,
    sampling: &SamplingConfig,
    group_size: usize,
    seed: u64,
) -> Result<RolloutGroup, GrpoError>
where
    B: TrainableBackend,
    F: FnMut(usize) -> B,
{
    if group_size < 2 {
        return Err(GrpoError::InvalidGroup(group_size));
    }
    if sample.question.gt_answer.is_none() {
        return Err(GrpoError::InvalidSample(format!("{} has no gt_answer", sample.sample_id)));
    }
    let mut rollouts = Vec::with_capacity(group_size);
    for i in 0..group_size {
        let mut backend = make_backend(i);
        let trace = run_episode(&mut backend, &sample.meta, &sample.question, sampling, rollout_seed(seed, i))?;
        let rewards = assign_trace_rewards(&trace, &sample.question)?;
        rollouts.push(Rollout {
            trace,
            rewards,
            decisions: backend.take_decisions(),
        });
    }
    Ok(RolloutGroup {
        sample_id: sample.sample_id.clone(),
        mode: GroupMode::MultiStep,
        rollouts,
    })
}

/// `group_size` one-step generations under the forced zoom-in prefix, each
/// scored against the ground-truth spans. Unparseable output scores 0.
pub fn rollout_singlestep_zoom<B, F>(
    mut make_backend: F,
    sample: &TrainingSample,
    sampling: &SamplingConfig,
    group_size: usize,
    seed: u64,
) -> Result<RolloutGroup, GrpoError>
where
    B: TrainableBackend,
    F: FnMut(usize) -> B,
{
    if group_size < 2 {
        return Err(GrpoError::InvalidGroup(group_size));
    }
    let gt_spans = match &sample.question.gt_spans {
        Some(spans) if !spans.is_empty() => spans.clone(),
        _ => {
            return Err(GrpoError::InvalidSample(format!(
                "{} has no ground-truth spans",
                sample.sample_id
            )))
        }
    };
    sample
        .question
        .validate()
        .map_err(|e| GrpoError::InvalidSample(e.to_string()))?;
    let layout = SlowFastLayout::new(sample.meta.clone(), sampling).map_err(EpisodeError::from)?;
    let prompt = build_prompt(&layout, &sample.question, &[]);
    let prefix = Prefix::ZoomIn;
    let prefix_text = prefix.text().expect("zoom prefix has text");

    let mut rollouts = Vec::with_capacity(group_size);
    for i in 0..group_size {
        let mut backend = make_backend(i);
        let mut raw = backend
            .generate(&prompt, prefix, crate::reasoning::step_seed(rollout_seed(seed, i), 0))
            .map_err(|source| EpisodeError::Backend { step: 1, source })?;
        if !raw.trim_start().starts_with(prefix_text) {
            raw = format!("{prefix_text} {raw}");
        }
        let action = parse_step(&raw);
        let mut layout_after = layout.clone();
        let mut reward = 0.0;
        let mut termination = Termination::Malformed;
        if let StepAction::Zoom(span) = &action {
            termination = Termination::InvalidZoom;
            if let Ok(clamped) = TimeSpan::clamped(span.start_s() as i64, span.end_s() as i64, &sample.meta) {
                reward = zoom_reward(&clamped, &gt_spans)?;
                termination = Termination::SingleZoom;
                if let Ok(next) = crate::layout::append_zoom(&layout, clamped, sampling) {
                    layout_after = next;
                }
            }
        }
        let trace = EpisodeTrace {
            question: sample.question.clone(),
            steps: vec![EpisodeStep {
                forced_prefix: prefix,
                raw_text: raw,
                action,
                layout_after,
            }],
            finished: false,
            loss_mask: vec![false],
            termination,
        };
        rollouts.push(Rollout {
            trace,
            rewards: RewardBundle {
                answer_reward: 0.0,
                zoom_reward: Some(reward),
                per_step_reward: vec![reward],
            },
            decisions: backend.take_decisions(),
        });
    }
    Ok(RolloutGroup {
        sample_id: sample.sample_id.clone(),
        mode: GroupMode::SingleStepZoom,
        rollouts,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub groups: usize,
    pub single_step_groups: usize,
    pub multi_step_groups: usize,
    pub mean_reward: f64,
    /// Zoom steps overlapping a ground-truth span, over zoom steps on
    /// grounded questions.
    pub zoom_hit_rate: f64,
    /// Correct final answers over multi-step rollouts.
    pub answer_accuracy: f64,
    pub grad_norm: f64,
    pub trained_steps: usize,
}

/// Reward and accuracy statistics over a batch of groups; `grad_norm` and
/// `trained_steps` are left at zero.
pub fn batch_stats(groups: &[RolloutGroup]) -> UpdateStats {
    let mut s = UpdateStats {
        groups: groups.len(),
        ..UpdateStats::default()
    };
    let (mut rewards, mut n_rollouts) = (0.0, 0usize);
    let (mut hits, mut zooms) = (0usize, 0usize);
    let (mut correct, mut answered) = (0.0, 0usize);
    for g in groups {
        match g.mode {
            GroupMode::MultiStep => s.multi_step_groups += 1,
            GroupMode::SingleStepZoom => s.single_step_groups += 1,
        }
        for r in &g.rollouts {
            rewards += r.reward();
            n_rollouts += 1;
            if g.mode == GroupMode::MultiStep {
                correct += r.rewards.answer_reward;
                answered += 1;
            }
            if let Some(gts) = &r.trace.question.gt_spans {
                for span in r.trace.zoom_spans() {
                    zooms += 1;
                    hits += gts.iter().any(|gt| gt.overlap_s(&span) > 0) as usize;
                }
            }
        }
    }
    let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
    s.mean_reward = ratio(rewards, n_rollouts);
    s.zoom_hit_rate = ratio(hits as f64, zooms);
    s.answer_accuracy = ratio(correct, answered);
    s
}

/// Summed score-function gradient `sum advantage * grad log pi(action)` over
/// every unmasked step.
pub fn policy_gradient(
    groups: &[RolloutGroup],
    params: &SynthPolicyParams,
) -> Result<(SynthPolicyParams, usize), GrpoError> {
    let mut grad = params.zeros_like();
    let mut steps = 0usize;
    for (gi, g) in groups.iter().enumerate() {
        let adv = group_advantages(&g.rewards())?;
        for (ri, (r, a)) in g.rollouts.iter().zip(&adv).enumerate() {
            if *a == 0.0 {
                continue;
            }
            let mask = g.train_mask(ri);
            for (si, decision) in r.decisions.iter().enumerate() {
                if !mask.get(si).copied().unwrap_or(false) {
                    continue;
                }
                let (_, score) = action_logprob_grad(params, &decision.observation, decision.action)?;
                if !score.is_finite() {
                    return Err(GrpoError::NonFiniteGradient {
                        norm: score.norm(),
                        group: gi,
                        rollout: ri,
                        step: si,
                    });
                }
                grad.add_scaled(&score, *a);
                steps += 1;
            }
        }
    }
    Ok((grad, steps))
}

/// One ascent step. With `kl_coeff > 0` a proximal pull toward `reference`
/// is added to the gradient.
pub fn policy_update(
    groups: &[RolloutGroup],
    params: &SynthPolicyParams,
    reference: Option<&SynthPolicyParams>,
    cfg: &TrainConfig,
) -> Result<(SynthPolicyParams, UpdateStats), GrpoError> {
    let (mut grad, steps) = policy_gradient(groups, params)?;
    if cfg.kl_coeff > 0.0 {
        if let Some(reference) = reference {
            grad.add_scaled(params, -cfg.kl_coeff);
            grad.add_scaled(reference, cfg.kl_coeff);
        }
    }
    let norm = grad.norm();
    if !norm.is_finite() {
        return Err(GrpoError::NonFiniteGradient {
            norm,
            group: usize::MAX,
            rollout: usize::MAX,
            step: usize::MAX,
        });
    }
    let mut next = params.clone();
    next.add_scaled(&grad, cfg.learning_rate);
    let mut stats = batch_stats(groups);
    stats.grad_norm = norm;
    stats.trained_steps = steps;
    Ok((next, stats))
}
