//! Training runs and held-out evaluation for the RL ablations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::env::{draw_kind, EnvConfig, EnvError, QuestionKind};
use super::policy::{SampleMode, SynthPolicyParams, SyntheticBackend, SyntheticInstance};
use crate::grpo::{
    batch_stats, policy_update, rollout_multistep, rollout_singlestep_zoom, select_training_samples, GroupMode,
    GrpoError, RolloutGroup, TrainConfig, TrainingSample,
};
use crate::layout::{SamplingConfig, SlowFastLayout, TimeSpan};
use crate::reasoning::{build_prompt, parse_step, run_episode, BackendError, EpisodeError, PolicyBackend, Prefix, StepAction, ZOOM_PREFIX};
use crate::seeds;

const EVAL_SALT: u64 = 0x0E7A_15E7_0000;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
}

/// Which rollout groups make up a training batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Every group is a multi-step episode scored by its final answer.
    #[serde(rename = "outcome")]
    OutcomeOnly,
    /// Grounded questions train only the zoom step; the rest multi-step.
    Decoupled,
    /// A fixed share of single-step zoom groups, the rest multi-step.
    Mixed,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::OutcomeOnly => "outcome",
            Variant::Decoupled => "decoupled",
            Variant::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "outcome" => Ok(Variant::OutcomeOnly),
            "decoupled" => Ok(Variant::Decoupled),
            "mixed" => Ok(Variant::Mixed),
            other => Err(format!("unknown variant {other:?} (expected outcome, decoupled or mixed)")),
        }
    }
}

/// How the zoom step is chosen at evaluation time. Baselines keep the
/// trained answer head and replace only the zoom choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPolicy {
    Trained,
    /// Answer straight from the fast track.
    NoZoom,
    /// One slow clip spanning the whole video.
    UniformZoom,
    /// One slow clip on a uniformly random window.
    RandomZoom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub accuracy: f64,
    pub local_accuracy: f64,
    pub global_accuracy: f64,
    /// Zoom choices overlapping the event span, over local questions.
    pub hit_rate: f64,
    pub mean_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub update: usize,
    pub variant: Variant,
    pub single_step_groups: usize,
    pub multi_step_groups: usize,
    pub selected_groups: usize,
    pub mean_reward: f64,
    pub zoom_hit_rate: f64,
    pub answer_accuracy: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub update: usize,
    pub variant: Variant,
    pub accuracy: f64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub variant: Variant,
    pub seed: u64,
    pub timeline: Vec<MetricsRecord>,
    pub final_eval: EvalReport,
    pub params: SynthPolicyParams,
}

impl ExperimentResult {
    pub fn summary(&self) -> Vec<SummaryRow> {
        self.timeline
            .iter()
            .filter_map(|m| {
                m.eval.as_ref().map(|e| SummaryRow {
                    update: m.update,
                    variant: m.variant,
                    accuracy: e.accuracy,
                    hit_rate: e.hit_rate,
                })
            })
            .collect()
    }
}

pub fn held_out_instances(seed: u64, env: &EnvConfig, sampling: &SamplingConfig) -> Result<Vec<SyntheticInstance>, EnvError> {
    let base = seeds::derive(seed ^ EVAL_SALT, 0);
    (0..env.eval_instances)
        .into_par_iter()
        .map(|i| SyntheticInstance::generate(seeds::derive(base, i as u64), env, sampling))
        .collect()
}

/// Emits a fixed zoom at the first step, then defers to the wrapped policy.
struct FixedZoomBackend<'a> {
    inner: SyntheticBackend<'a>,
    zoom: Option<TimeSpan>,
}

impl PolicyBackend for FixedZoomBackend<'_> {
    fn generate(&mut self, prompt: &str, forced_prefix: Prefix, rng_seed: u64) -> Result<String, BackendError> {
        match self.zoom.take() {
            Some(span) => Ok(format!("{ZOOM_PREFIX} \\boxed{{[{}, {}]}}", span.start_s(), span.end_s())),
            None => self.inner.generate(prompt, forced_prefix, rng_seed),
        }
    }
}

struct EpisodeOutcome {
    local: bool,
    correct: bool,
    hit: Option<bool>,
    steps: usize,
}

fn greedy_zoom_hit(
    params: &SynthPolicyParams,
    inst: &SyntheticInstance,
    env: &EnvConfig,
    sampling: &SamplingConfig,
) -> Result<bool, ExperimentError> {
    let layout = SlowFastLayout::new(env.meta(inst.sample_id()), sampling).map_err(EpisodeError::from)?;
    let prompt = build_prompt(&layout, &inst.question.to_spec(), &[]);
    let mut backend = SyntheticBackend::new(params, inst, env, sampling, SampleMode::Greedy);
    let text = backend
        .generate(&prompt, Prefix::ZoomIn, 0)
        .map_err(|source| EpisodeError::Backend { step: 1, source })?;
    Ok(match parse_step(&text) {
        StepAction::Zoom(span) => span.overlap_s(&inst.video.event_span) > 0,
        _ => false,
    })
}

fn evaluate_one(
    params: &SynthPolicyParams,
    inst: &SyntheticInstance,
    env: &EnvConfig,
    sampling: &SamplingConfig,
    policy: EvalPolicy,
    seed: u64,
) -> Result<EpisodeOutcome, ExperimentError> {
    let local = inst.question.kind == QuestionKind::Local;
    let spec = inst.question.to_spec();
    let meta = env.meta(inst.sample_id());
    let inner = SyntheticBackend::new(params, inst, env, sampling, SampleMode::Greedy);
    let (trace, hit) = match policy {
        EvalPolicy::Trained => {
            let trace = run_episode(&mut SyntheticBackend::new(params, inst, env, sampling, SampleMode::Greedy), &meta, &spec, sampling, seed)?;
            let hit = if local { Some(greedy_zoom_hit(params, inst, env, sampling)?) } else { None };
            (trace, hit)
        }
        EvalPolicy::NoZoom => {
            let cfg = SamplingConfig {
                max_steps: 1,
                ..sampling.clone()
            };
            let mut backend = inner;
            (run_episode(&mut backend, &meta, &spec, &cfg, seed)?, local.then_some(false))
        }
        EvalPolicy::UniformZoom | EvalPolicy::RandomZoom => {
            let span = if policy == EvalPolicy::UniformZoom {
                TimeSpan::new(0, env.duration_s).expect("non-empty video")
            } else {
                use rand::Rng;
                env.window_span(seeds::rng(seed).random_range(0..env.num_windows()))
            };
            let cfg = SamplingConfig {
                max_steps: 2,
                ..sampling.clone()
            };
            let mut backend = FixedZoomBackend { inner, zoom: Some(span) };
            let hit = local.then(|| span.overlap_s(&inst.video.event_span) > 0);
            (run_episode(&mut backend, &meta, &spec, &cfg, seed)?, hit)
        }
    };
    Ok(EpisodeOutcome {
        local,
        correct: trace.final_answer() == Some(inst.question.gt_letter()),
        hit,
        steps: trace.steps.len(),
    })
}

/// Greedy held-out evaluation with at most `sampling.max_steps` steps.
pub fn evaluate(
    params: &SynthPolicyParams,
    instances: &[SyntheticInstance],
    env: &EnvConfig,
    sampling: &SamplingConfig,
    policy: EvalPolicy,
    seed: u64,
) -> Result<EvalReport, ExperimentError> {
    let outcomes: Vec<EpisodeOutcome> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| evaluate_one(params, inst, env, sampling, policy, seeds::derive(seed, i as u64)))
        .collect::<Result<_, _>>()?;
    let frac = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let n = outcomes.len();
    let n_local = outcomes.iter().filter(|o| o.local).count();
    let correct = outcomes.iter().filter(|o| o.correct).count();
    let correct_local = outcomes.iter().filter(|o| o.local && o.correct).count();
    let hits = outcomes.iter().filter(|o| o.hit == Some(true)).count();
    Ok(EvalReport {
        instances: n,
        accuracy: frac(correct, n),
        local_accuracy: frac(correct_local, n_local),
        global_accuracy: frac(correct - correct_local, n - n_local),
        hit_rate: frac(hits, n_local),
        mean_steps: outcomes.iter().map(|o| o.steps).sum::<usize>() as f64 / n.max(1) as f64,
    })
}

/// Group plan for one update: `(instance seed, mode, question kind)`.
pub fn batch_plan(variant: Variant, train: &TrainConfig, env: &EnvConfig, seed: u64, update: usize) -> Vec<(u64, GroupMode, QuestionKind)> {
    let base = seeds::derive(seed, update as u64);
    let n_single = match variant {
        Variant::Mixed => train.single_step_groups(),
        _ => 0,
    };
    (0..train.batch_size)
        .map(|j| {
            let s = seeds::derive(base, j as u64);
            if j < n_single {
                return (s, GroupMode::SingleStepZoom, QuestionKind::Local);
            }
            let kind = draw_kind(s, env);
            let mode = match (variant, kind) {
                (Variant::Decoupled, QuestionKind::Local) => GroupMode::SingleStepZoom,
                _ => GroupMode::MultiStep,
            };
            (s, mode, kind)
        })
        .collect()
}

fn collect_group(
    params: &SynthPolicyParams,
    env: &EnvConfig,
    sampling: &SamplingConfig,
    train: &TrainConfig,
    (seed, mode, kind): (u64, GroupMode, QuestionKind),
) -> Result<RolloutGroup, ExperimentError> {
    let inst = SyntheticInstance::generate_kind(seed, kind, env, sampling)?;
    let sample = TrainingSample {
        sample_id: inst.sample_id(),
        meta: env.meta(inst.sample_id()),
        question: inst.question.to_spec(),
    };
    let make = |_| SyntheticBackend::new(params, &inst, env, sampling, SampleMode::Sample);
    Ok(match mode {
        GroupMode::MultiStep => rollout_multistep(make, &sample, sampling, train.group_size, seed)?,
        GroupMode::SingleStepZoom => rollout_singlestep_zoom(make, &sample, sampling, train.group_size, seed)?,
    })
}

/// Trains from zero parameters for `train.updates` updates, calling
/// `on_record` after each one.
pub fn run_experiment_with(
    variant: Variant,
    train: &TrainConfig,
    env: &EnvConfig,
    sampling: &SamplingConfig,
    seed: u64,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<ExperimentResult, ExperimentError> {
    train.validate()?;
    env.validate()?;
    sampling.validate().map_err(EnvError::from)?;
    let held_out = held_out_instances(seed, env, sampling)?;
    let initial = SynthPolicyParams::zeros(env);
    let mut params = initial.clone();
    let mut timeline = Vec::with_capacity(train.updates);
    let eval_seed = seeds::derive(seed, u64::MAX);

    for update in 0..train.updates {
        let plan = batch_plan(variant, train, env, seed, update);
        let snapshot = &params;
        let groups: Vec<RolloutGroup> = plan
            .into_par_iter()
            .map(|p| collect_group(snapshot, env, sampling, train, p))
            .collect::<Result<_, _>>()?;
        let batch = batch_stats(&groups);
        let selected = select_training_samples(groups);
        let (next, update_stats) = policy_update(&selected, &params, Some(&initial), train)?;
        params = next;

        let last = update + 1 == train.updates;
        let eval = if last || (env.eval_every > 0 && (update + 1) % env.eval_every == 0) {
            Some(evaluate(&params, &held_out, env, sampling, EvalPolicy::Trained, eval_seed)?)
        } else {
            None
        };
        let record = MetricsRecord {
            update,
            variant,
            single_step_groups: batch.single_step_groups,
            multi_step_groups: batch.multi_step_groups,
            selected_groups: selected.len(),
            mean_reward: batch.mean_reward,
            zoom_hit_rate: batch.zoom_hit_rate,
            answer_accuracy: batch.answer_accuracy,
            grad_norm: update_stats.grad_norm,
            eval,
        };
        on_record(&record);
        timeline.push(record);
    }

    let final_eval = match timeline.last().and_then(|m| m.eval.clone()) {
        Some(e) => e,
        None => evaluate(&params, &held_out, env, sampling, EvalPolicy::Trained, eval_seed)?,
    };
    Ok(ExperimentResult {
        variant,
        seed,
        timeline,
        final_eval,
        params,
    })
}

pub fn run_experiment(
    variant: Variant,
    train: &TrainConfig,
    env: &EnvConfig,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<ExperimentResult, ExperimentError> {
    run_experiment_with(variant, train, env, sampling, seed, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (TrainConfig, EnvConfig) {
        let train = TrainConfig {
            updates: 6,
            batch_size: 8,
            ..TrainConfig::synthetic()
        };
        let env = EnvConfig {
            eval_instances: 40,
            eval_every: 3,
            ..EnvConfig::default()
        };
        (train, env)
    }

    #[test]
    fn batch_plan_composition() {
        let (train, env) = small();
        let plan = batch_plan(Variant::Mixed, &train, &env, 1, 0);
        let single = plan.iter().filter(|p| p.1 == GroupMode::SingleStepZoom).count();
        assert_eq!(single, train.single_step_groups());
        let plan = batch_plan(Variant::OutcomeOnly, &train, &env, 1, 0);
        assert!(plan.iter().all(|p| p.1 == GroupMode::MultiStep));
        let plan = batch_plan(Variant::Decoupled, &train, &env, 1, 0);
        assert!(plan
            .iter()
            .all(|p| (p.1 == GroupMode::SingleStepZoom) == (p.2 == QuestionKind::Local)));
    }

    #[test]
    fn experiment_is_deterministic() {
        let (train, env) = small();
        let s = SamplingConfig::default();
        let a = run_experiment(Variant::Mixed, &train, &env, &s, 3).unwrap();
        let b = run_experiment(Variant::Mixed, &train, &env, &s, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.timeline.len(), 6);
        assert_eq!(a.summary().len(), 2);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [Variant::OutcomeOnly, Variant::Decoupled, Variant::Mixed] {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("both".parse::<Variant>().is_err());
    }

    #[test]
    fn baselines_run() {
        let (_, env) = small();
        let s = SamplingConfig::default();
        let inst = held_out_instances(0, &env, &s).unwrap();
        let params = SynthPolicyParams::zeros(&env);
        for policy in [EvalPolicy::Trained, EvalPolicy::NoZoom, EvalPolicy::UniformZoom, EvalPolicy::RandomZoom] {
            let r = evaluate(&params, &inst, &env, &s, policy, 0).unwrap();
            assert_eq!(r.instances, 40);
            assert!((0.0..=1.0).contains(&r.accuracy));
        }
        let uniform = evaluate(&params, &inst, &env, &s, EvalPolicy::UniformZoom, 0).unwrap();
        assert_eq!(uniform.hit_rate, 1.0);
    }
}
