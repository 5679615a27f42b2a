//! Three-head log-linear policy over the synthetic environment.
//!
//! * decide head: Bernoulli answer-vs-zoom from `[bias, evidence, global]`
//! * zoom head: softmax over fixed windows from each window's scene histogram
//!   (question scene first) plus an already-zoomed flag
//! * answer head: softmax over options from `[seen in slow clips, share of fast frames]`
//!
//! Log-probabilities are exact, so the score function used by GRPO is the
//! analytic gradient below.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::env::{observe_fast, observe_slow, option_letter, EnvConfig, EnvError, FastObservation, QuestionKind, SynthQuestion, SyntheticVideo};
use crate::layout::{parse_rendered_layout, SamplingConfig, TimeSpan};
use crate::reasoning::{BackendError, PolicyBackend, Prefix, ANSWER_PREFIX, ZOOM_PREFIX};
use crate::seeds;

pub const DECIDE_DIM: usize = 3;
pub const ANSWER_DIM: usize = 2;

pub fn zoom_dim(env: &EnvConfig) -> usize {
    env.num_categories + 1
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("action has zero probability under the policy: {0}")]
    ZeroProbability(String),
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPolicyParams {
    pub zoom_logits: Vec<f64>,
    pub answer_logits: Vec<f64>,
    /// Weights of the decide head; the first entry is the plain bias.
    pub decide_logit: Vec<f64>,
}

impl SynthPolicyParams {
    pub fn zeros(env: &EnvConfig) -> Self {
        Self {
            zoom_logits: vec![0.0; zoom_dim(env)],
            answer_logits: vec![0.0; ANSWER_DIM],
            decide_logit: vec![0.0; DECIDE_DIM],
        }
    }

    pub fn len(&self) -> usize {
        self.zoom_logits.len() + self.answer_logits.len() + self.decide_logit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.zoom_logits);
        v.extend_from_slice(&self.answer_logits);
        v.extend_from_slice(&self.decide_logit);
        v
    }

    /// Same shape as `self`, values from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self, PolicyError> {
        if flat.len() != self.len() {
            return Err(PolicyError::Shape(format!("expected {} values, got {}", self.len(), flat.len())));
        }
        let (z, rest) = flat.split_at(self.zoom_logits.len());
        let (a, d) = rest.split_at(self.answer_logits.len());
        Ok(Self {
            zoom_logits: z.to_vec(),
            answer_logits: a.to_vec(),
            decide_logit: d.to_vec(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            zoom_logits: vec![0.0; self.zoom_logits.len()],
            answer_logits: vec![0.0; self.answer_logits.len()],
            decide_logit: vec![0.0; self.decide_logit.len()],
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        let pairs = [
            (&mut self.zoom_logits, &other.zoom_logits),
            (&mut self.answer_logits, &other.answer_logits),
            (&mut self.decide_logit, &other.decide_logit),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }
}

/// Everything a head conditions on at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub forced: Prefix,
    pub decide: Vec<f64>,
    /// One feature row per zoom window.
    pub zoom: Vec<Vec<f64>>,
    /// One feature row per answer option.
    pub answer: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyAction {
    Zoom(usize),
    Answer(usize),
}

/// One sampled step: what the policy saw, what it did, and how likely that was.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub observation: Observation,
    pub action: PolicyAction,
    pub logprob: f64,
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `ln(sigmoid(z))` without overflow.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    log_sigmoid(z).exp()
}

fn head_logits(weights: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().map(|r| dot(weights, r)).collect()
}

/// Full distribution over actions, as `(action, logprob)`.
pub fn action_distribution(params: &SynthPolicyParams, obs: &Observation) -> Vec<(PolicyAction, f64)> {
    let zoom = log_softmax(&head_logits(&params.zoom_logits, &obs.zoom));
    let answer = log_softmax(&head_logits(&params.answer_logits, &obs.answer));
    let z = dot(&params.decide_logit, &obs.decide);
    let (la, lz) = match obs.forced {
        Prefix::Free => (log_sigmoid(z), log_sigmoid(-z)),
        Prefix::Answer => (0.0, f64::NEG_INFINITY),
        Prefix::ZoomIn => (f64::NEG_INFINITY, 0.0),
    };
    let mut out = Vec::with_capacity(zoom.len() + answer.len());
    out.extend(answer.iter().enumerate().map(|(k, lp)| (PolicyAction::Answer(k), la + lp)));
    out.extend(zoom.iter().enumerate().map(|(w, lp)| (PolicyAction::Zoom(w), lz + lp)));
    out
}

/// Log-probability of `action` and its exact gradient with respect to every
/// parameter.
pub fn action_logprob_grad(
    params: &SynthPolicyParams,
    obs: &Observation,
    action: PolicyAction,
) -> Result<(f64, SynthPolicyParams), PolicyError> {
    let mut grad = params.zeros_like();
    let forbidden = matches!(
        (obs.forced, action),
        (Prefix::Answer, PolicyAction::Zoom(_)) | (Prefix::ZoomIn, PolicyAction::Answer(_))
    );
    if forbidden {
        return Err(PolicyError::ZeroProbability(format!("{action:?} under forced {:?}", obs.forced)));
    }
    let (weights, rows, grad_head, chosen) = match action {
        PolicyAction::Zoom(w) => (&params.zoom_logits, &obs.zoom, &mut grad.zoom_logits, w),
        PolicyAction::Answer(k) => (&params.answer_logits, &obs.answer, &mut grad.answer_logits, k),
    };
    if chosen >= rows.len() {
        return Err(PolicyError::ZeroProbability(format!(
            "{action:?} outside {} available choices",
            rows.len()
        )));
    }
    let lsm = log_softmax(&head_logits(weights, rows));
    let mut logprob = lsm[chosen];
    for (j, row) in rows.iter().enumerate() {
        let coef = f64::from(j == chosen) - lsm[j].exp();
        for (g, x) in grad_head.iter_mut().zip(row) {
            *g += coef * x;
        }
    }

    if obs.forced == Prefix::Free {
        let z = dot(&params.decide_logit, &obs.decide);
        let (lp, coef) = match action {
            // d/dz ln sigmoid(z) = 1 - sigmoid(z);  d/dz ln sigmoid(-z) = -sigmoid(z)
            PolicyAction::Answer(_) => (log_sigmoid(z), 1.0 - sigmoid(z)),
            PolicyAction::Zoom(_) => (log_sigmoid(-z), -sigmoid(z)),
        };
        logprob += lp;
        for (g, x) in grad.decide_logit.iter_mut().zip(&obs.decide) {
            *g = coef * x;
        }
    }
    if !logprob.is_finite() {
        return Err(PolicyError::ZeroProbability(format!("{action:?} has log-probability {logprob}")));
    }
    Ok((logprob, grad))
}

/// Sampling or argmax action selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Sample,
    Greedy,
}

fn choose(dist: &[(PolicyAction, f64)], mode: SampleMode, seed: u64) -> (PolicyAction, f64) {
    match mode {
        SampleMode::Greedy => {
            let mut best = dist[0];
            for &cand in &dist[1..] {
                if cand.1 > best.1 {
                    best = cand;
                }
            }
            best
        }
        SampleMode::Sample => {
            let mut u: f64 = seeds::rng(seed).random();
            for &(a, lp) in dist {
                let p = lp.exp();
                if u < p {
                    return (a, lp);
                }
                u -= p;
            }
            // rounding left a sliver of mass; take the last reachable action
            *dist.iter().rev().find(|(_, lp)| lp.is_finite()).expect("non-empty distribution")
        }
    }
}

/// A generated instance with its fast-track observation precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    pub seed: u64,
    pub video: SyntheticVideo,
    pub question: SynthQuestion,
    pub fast: FastObservation,
}

impl SyntheticInstance {
    pub fn new(seed: u64, video: SyntheticVideo, question: SynthQuestion, env: &EnvConfig, sampling: &SamplingConfig) -> Result<Self, EnvError> {
        let fast = observe_fast(&video, env, sampling)?;
        Ok(Self {
            seed,
            video,
            question,
            fast,
        })
    }

    pub fn generate(seed: u64, env: &EnvConfig, sampling: &SamplingConfig) -> Result<Self, EnvError> {
        let (video, question) = super::env::gen_instance(seed, env);
        Self::new(seed, video, question, env, sampling)
    }

    pub fn generate_kind(seed: u64, kind: QuestionKind, env: &EnvConfig, sampling: &SamplingConfig) -> Result<Self, EnvError> {
        let (video, question) = super::env::gen_instance_of_kind(seed, env, kind);
        Self::new(seed, video, question, env, sampling)
    }

    pub fn sample_id(&self) -> String {
        format!("synthetic-{}", self.seed)
    }

    /// Features for the current step given the clips zoomed so far.
    pub fn observe(&self, zoomed: &[TimeSpan], forced: Prefix, env: &EnvConfig, sampling: &SamplingConfig) -> Result<Observation, EnvError> {
        let q = &self.question;
        let n_cat = env.num_categories;
        let reference = q.scene.unwrap_or(0) as usize;

        let mut fine = vec![0u32; env.num_symbols];
        for span in zoomed {
            for (acc, c) in fine.iter_mut().zip(observe_slow(&self.video, *span, env, sampling)?) {
                *acc += c;
            }
        }

        let zoom = self
            .fast
            .window_counts
            .iter()
            .enumerate()
            .map(|(w, counts)| {
                let total = counts.iter().sum::<u32>().max(1) as f64;
                let mut row: Vec<f64> = (0..n_cat).map(|i| counts[(reference + i) % n_cat] as f64 / total).collect();
                let window = env.window_span(w);
                row.push(f64::from(zoomed.iter().any(|s| s.overlap_s(&window) > 0)));
                row
            })
            .collect();

        let frames = self.fast.frames.max(1) as f64;
        let answer: Vec<Vec<f64>> = q
            .options
            .iter()
            .map(|&o| match q.kind {
                QuestionKind::Local => vec![f64::from(fine[o as usize] > 0), 0.0],
                QuestionKind::Global => vec![0.0, self.fast.total_counts[o as usize] as f64 / frames],
            })
            .collect();
        let evidence = answer.iter().any(|row| row[0] > 0.0);
        let decide = vec![1.0, f64::from(evidence), f64::from(q.kind == QuestionKind::Global)];

        Ok(Observation {
            forced,
            decide,
            zoom,
            answer,
        })
    }

    pub fn action_text(&self, action: PolicyAction, env: &EnvConfig) -> String {
        match action {
            PolicyAction::Zoom(w) => {
                let span = env.window_span(w);
                format!("{ZOOM_PREFIX} \\boxed{{[{}, {}]}}", span.start_s(), span.end_s())
            }
            PolicyAction::Answer(k) => format!("{ANSWER_PREFIX} \\boxed{{{}}}", option_letter(k)),
        }
    }
}

/// Backend that reads the zoomed clips back out of the prompt, samples the
/// policy, and keeps a log of its decisions for the gradient step.
pub struct SyntheticBackend<'a> {
    params: &'a SynthPolicyParams,
    instance: &'a SyntheticInstance,
    env: &'a EnvConfig,
    sampling: &'a SamplingConfig,
    mode: SampleMode,
    decisions: Vec<Decision>,
}

impl<'a> SyntheticBackend<'a> {
    pub fn new(
        params: &'a SynthPolicyParams,
        instance: &'a SyntheticInstance,
        env: &'a EnvConfig,
        sampling: &'a SamplingConfig,
        mode: SampleMode,
    ) -> Self {
        Self {
            params,
            instance,
            env,
            sampling,
            mode,
            decisions: Vec::new(),
        }
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }

    pub fn take_decisions(&mut self) -> Vec<Decision> {
        std::mem::take(&mut self.decisions)
    }
}

impl PolicyBackend for SyntheticBackend<'_> {
    fn generate(&mut self, prompt: &str, forced_prefix: Prefix, rng_seed: u64) -> Result<String, BackendError> {
        let (_, zoomed) = parse_rendered_layout(prompt).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let obs = self
            .instance
            .observe(&zoomed, forced_prefix, self.env, self.sampling)
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let dist = action_distribution(self.params, &obs);
        let (action, logprob) = choose(&dist, self.mode, rng_seed);
        let text = self.instance.action_text(action, self.env);
        self.decisions.push(Decision {
            observation: obs,
            action,
            logprob,
        });
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{SlowFastLayout, VideoMeta};
    use crate::reasoning::{build_prompt, parse_step, StepAction};

    fn two_window_obs(forced: Prefix) -> Observation {
        Observation {
            forced,
            decide: vec![1.0, 0.0, 0.0],
            zoom: vec![vec![1.0], vec![0.0]],
            answer: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        }
    }

    #[test]
    fn two_window_hand_computed() {
        let params = SynthPolicyParams {
            zoom_logits: vec![0.0],
            answer_logits: vec![0.0, 0.0],
            decide_logit: vec![0.0, 0.0, 0.0],
        };
        let (lp, g) = action_logprob_grad(&params, &two_window_obs(Prefix::ZoomIn), PolicyAction::Zoom(0)).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        // feature of window 0 is 1, window 1 is 0: d/dθ = (1 - 0.5) * 1 + (0 - 0.5) * 0
        assert_eq!(g.zoom_logits, vec![0.5]);
        assert_eq!(g.answer_logits, vec![0.0, 0.0]);
        assert_eq!(g.decide_logit, vec![0.0; 3]);
    }

    #[test]
    fn forbidden_actions_error() {
        let params = SynthPolicyParams {
            zoom_logits: vec![0.0],
            answer_logits: vec![0.0, 0.0],
            decide_logit: vec![0.0; 3],
        };
        assert!(action_logprob_grad(&params, &two_window_obs(Prefix::Answer), PolicyAction::Zoom(0)).is_err());
        assert!(action_logprob_grad(&params, &two_window_obs(Prefix::ZoomIn), PolicyAction::Answer(0)).is_err());
        assert!(action_logprob_grad(&params, &two_window_obs(Prefix::Free), PolicyAction::Zoom(9)).is_err());
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let params = SynthPolicyParams {
            zoom_logits: vec![1e6],
            answer_logits: vec![0.0, 0.0],
            decide_logit: vec![0.0; 3],
        };
        let (lp, g) = action_logprob_grad(&params, &two_window_obs(Prefix::ZoomIn), PolicyAction::Zoom(1)).unwrap();
        assert_eq!(lp, -1e6);
        assert_eq!(g.zoom_logits, vec![-1.0]);
    }

    #[test]
    fn uniform_policy_symmetric_logprob() {
        let params = SynthPolicyParams {
            zoom_logits: vec![0.0],
            answer_logits: vec![0.0, 0.0],
            decide_logit: vec![0.0; 3],
        };
        let obs = two_window_obs(Prefix::Free);
        let lps: Vec<f64> = action_distribution(&params, &obs).iter().map(|(_, lp)| *lp).collect();
        for lp in &lps {
            assert!((lp - lps[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_round_trip() {
        let env = EnvConfig::default();
        let p = SynthPolicyParams::zeros(&env);
        let flat: Vec<f64> = (0..p.len()).map(|i| i as f64).collect();
        assert_eq!(p.with_flat(&flat).unwrap().to_flat(), flat);
        assert!(p.with_flat(&flat[1..]).is_err());
    }

    #[test]
    fn backend_honours_forced_zoom_and_is_deterministic() {
        let env = EnvConfig::default();
        let sampling = SamplingConfig::default();
        let params = SynthPolicyParams {
            decide_logit: vec![50.0, 0.0, 0.0],
            ..SynthPolicyParams::zeros(&env)
        };
        let inst = SyntheticInstance::generate(5, &env, &sampling).unwrap();
        let meta = VideoMeta::new(env.duration_s as f64, "s").unwrap();
        let layout = SlowFastLayout::new(meta, &sampling).unwrap();
        let prompt = build_prompt(&layout, &inst.question.to_spec(), &[]);
        let mut b = SyntheticBackend::new(&params, &inst, &env, &sampling, SampleMode::Sample);
        for seed in 0..50 {
            let text = b.generate(&prompt, Prefix::ZoomIn, seed).unwrap();
            assert!(text.starts_with(ZOOM_PREFIX));
            assert!(matches!(parse_step(&text), StepAction::Zoom(_)));
            assert_eq!(text, b.generate(&prompt, Prefix::ZoomIn, seed).unwrap());
        }
        // decide head strongly prefers answering when free
        let text = b.generate(&prompt, Prefix::Free, 1).unwrap();
        assert!(text.starts_with(ANSWER_PREFIX));
    }

    #[test]
    fn backend_rejects_unparseable_prompt() {
        let env = EnvConfig::default();
        let sampling = SamplingConfig::default();
        let params = SynthPolicyParams::zeros(&env);
        let inst = SyntheticInstance::generate(5, &env, &sampling).unwrap();
        let mut b = SyntheticBackend::new(&params, &inst, &env, &sampling, SampleMode::Greedy);
        assert!(matches!(b.generate("hello", Prefix::Free, 0), Err(BackendError::Protocol(_))));
    }
}
