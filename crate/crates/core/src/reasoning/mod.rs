//! Multi-step zoom-in controller.
//!
//! Each step the backend sees the current slow-fast layout, the question and
//! every earlier step's text, and replies with either a zoom request
//! (`\boxed{[start, end]}`) or an option letter (`\boxed{X}`). The last
//! allowed step is generated under the forced answer prefix. Episodes that
//! never produce an answer are kept but fully loss-masked.

mod backend;

pub use backend::{
    BackendError, GenerateRequest, GenerateResponse, PolicyBackend, RemoteBackend, RemoteConfig, ScriptedBackend,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{append_zoom, render_prompt, LayoutError, SamplingConfig, SlowFastLayout, TimeSpan, VideoMeta};

pub const ANSWER_PREFIX: &str = "I get the answer.";
pub const ZOOM_PREFIX: &str = "I need to zoom in on the video.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Prefix {
    Answer,
    ZoomIn,
    Free,
}

impl Prefix {
    pub fn text(self) -> Option<&'static str> {
        match self {
            Prefix::Answer => Some(ANSWER_PREFIX),
            Prefix::ZoomIn => Some(ZOOM_PREFIX),
            Prefix::Free => None,
        }
    }

    /// The prefix a text opens with, ignoring leading whitespace.
    pub fn declared_by(text: &str) -> Prefix {
        let t = text.trim_start();
        if t.starts_with(ANSWER_PREFIX) {
            Prefix::Answer
        } else if t.starts_with(ZOOM_PREFIX) {
            Prefix::ZoomIn
        } else {
            Prefix::Free
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub letter: char,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub text: String,
    pub options: Vec<AnswerOption>,
    #[serde(default)]
    pub gt_answer: Option<char>,
    #[serde(default)]
    pub gt_spans: Option<Vec<TimeSpan>>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuestionError {
    #[error("a question needs 2 to 10 options, got {0}")]
    OptionCount(usize),
    #[error("option letter {0:?} is not an uppercase letter A-J")]
    BadLetter(char),
    #[error("option letter {0} appears twice")]
    DuplicateLetter(char),
    #[error("ground-truth answer {0} is not one of the options")]
    UnknownAnswer(char),
}

impl QuestionSpec {
    pub fn validate(&self) -> Result<(), QuestionError> {
        if !(2..=10).contains(&self.options.len()) {
            return Err(QuestionError::OptionCount(self.options.len()));
        }
        let mut seen = Vec::with_capacity(self.options.len());
        for opt in &self.options {
            if !('A'..='J').contains(&opt.letter) {
                return Err(QuestionError::BadLetter(opt.letter));
            }
            if seen.contains(&opt.letter) {
                return Err(QuestionError::DuplicateLetter(opt.letter));
            }
            seen.push(opt.letter);
        }
        if let Some(gt) = self.gt_answer {
            if !seen.contains(&gt) {
                return Err(QuestionError::UnknownAnswer(gt));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = format!("Question: {}\nOptions:", self.text);
        for opt in &self.options {
            let _ = write!(out, "\n{}. {}", opt.letter, opt.text);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepAction {
    Zoom(TimeSpan),
    Answer(char),
    Malformed(String),
}

impl StepAction {
    pub fn is_answer(&self) -> bool {
        matches!(self, StepAction::Answer(_))
    }
}

/// Payload of the last `\boxed{...}` in `text`, braces balanced.
fn last_boxed(text: &str) -> Option<&str> {
    const OPEN: &str = "\\boxed{";
    let start = text.rfind(OPEN)? + OPEN.len();
    let mut depth = 1usize;
    for (i, ch) in text[start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_span_payload(payload: &str) -> Option<Result<TimeSpan, String>> {
    let inner = payload.strip_prefix('[')?.strip_suffix(']')?;
    let (a, b) = inner.split_once(',')?;
    let (a, b) = (a.trim(), b.trim());
    let (Ok(a), Ok(b)) = (a.parse::<i64>(), b.parse::<i64>()) else {
        return Some(Err(format!("span endpoints are not integers: [{inner}]")));
    };
    if a < 0 {
        return Some(Err(format!("negative span start {a}")));
    }
    if a >= b {
        return Some(Err(format!("span [{a}, {b}] is empty or reversed")));
    }
    Some(Ok(TimeSpan::new(a as u64, b as u64).expect("checked a < b")))
}

/// Reads the action out of one step's text. Never fails: unusable text
/// becomes [`StepAction::Malformed`].
pub fn parse_step(raw_text: &str) -> StepAction {
    let Some(payload) = last_boxed(raw_text) else {
        return StepAction::Malformed("no boxed payload".into());
    };
    let payload = payload.trim();
    let action = if let Some(span) = parse_span_payload(payload) {
        match span {
            Ok(span) => StepAction::Zoom(span),
            Err(reason) => return StepAction::Malformed(reason),
        }
    } else {
        let mut chars = payload.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if ('A'..='J').contains(&c.to_ascii_uppercase()) => {
                StepAction::Answer(c.to_ascii_uppercase())
            }
            _ => return StepAction::Malformed(format!("unrecognised boxed payload {payload:?}")),
        }
    };
    match (Prefix::declared_by(raw_text), &action) {
        (Prefix::Answer, StepAction::Zoom(_)) | (Prefix::ZoomIn, StepAction::Answer(_)) => {
            StepAction::Malformed("prefix/action mismatch".into())
        }
        _ => action,
    }
}

/// Canonical text for a well-formed action; `parse_step` inverts it.
pub fn render_action(action: &StepAction) -> Option<String> {
    match action {
        StepAction::Zoom(span) => Some(format!(
            "{ZOOM_PREFIX} \\boxed{{[{}, {}]}}",
            span.start_s(),
            span.end_s()
        )),
        StepAction::Answer(letter) => Some(format!("{ANSWER_PREFIX} \\boxed{{{letter}}}")),
        StepAction::Malformed(_) => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub forced_prefix: Prefix,
    pub raw_text: String,
    pub action: StepAction,
    pub layout_after: SlowFastLayout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    Malformed,
    InvalidZoom,
    BudgetExceeded,
    /// A lone zoom step generated for decoupled zoom training.
    SingleZoom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub question: QuestionSpec,
    pub steps: Vec<EpisodeStep>,
    pub finished: bool,
    pub loss_mask: Vec<bool>,
    pub termination: Termination,
}

impl EpisodeTrace {
    pub fn final_answer(&self) -> Option<char> {
        match self.steps.last().map(|s| &s.action) {
            Some(StepAction::Answer(c)) => Some(*c),
            _ => None,
        }
    }

    pub fn zoom_spans(&self) -> impl Iterator<Item = TimeSpan> + '_ {
        self.steps.iter().filter_map(|s| match s.action {
            StepAction::Zoom(span) => Some(span),
            _ => None,
        })
    }

    pub fn final_layout(&self) -> Option<&SlowFastLayout> {
        self.steps.last().map(|s| &s.layout_after)
    }
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("backend failed at step {step}")]
    Backend {
        step: usize,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Question(#[from] QuestionError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

/// Prompt for the next step: layout line, question, then earlier steps.
pub fn build_prompt(layout: &SlowFastLayout, question: &QuestionSpec, steps: &[EpisodeStep]) -> String {
    let mut prompt = render_prompt(layout);
    prompt.push('\n');
    prompt.push_str(&question.render());
    for (i, step) in steps.iter().enumerate() {
        let _ = write!(prompt, "\n<step {}>\n{}", i + 1, step.raw_text);
    }
    prompt
}

/// Per-step seed stream for one episode.
pub fn step_seed(episode_seed: u64, step: usize) -> u64 {
    crate::seeds::derive(episode_seed, step as u64)
}

pub fn run_episode<B: PolicyBackend + ?Sized>(
    backend: &mut B,
    meta: &VideoMeta,
    question: &QuestionSpec,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<EpisodeTrace, EpisodeError> {
    question.validate()?;
    cfg.validate()?;
    let mut layout = SlowFastLayout::new(meta.clone(), cfg)?;
    let mut steps: Vec<EpisodeStep> = Vec::with_capacity(cfg.max_steps);
    let mut termination = Termination::Malformed;

    for step in 0..cfg.max_steps {
        let forced = if step + 1 == cfg.max_steps {
            Prefix::Answer
        } else {
            Prefix::Free
        };
        let prompt = build_prompt(&layout, question, &steps);
        let mut raw = backend
            .generate(&prompt, forced, step_seed(seed, step))
            .map_err(|source| EpisodeError::Backend { step: step + 1, source })?;
        if let Some(p) = forced.text() {
            if !raw.trim_start().starts_with(p) {
                raw = format!("{p} {raw}");
            }
        }
        let action = parse_step(&raw);
        let mut stop = None;
        match &action {
            StepAction::Answer(_) => stop = Some(Termination::Answered),
            StepAction::Malformed(_) => stop = Some(Termination::Malformed),
            StepAction::Zoom(span) => {
                let clamped = TimeSpan::clamped(span.start_s() as i64, span.end_s() as i64, meta);
                match clamped.and_then(|s| append_zoom(&layout, s, cfg)) {
                    Ok(next) => layout = next,
                    Err(LayoutError::BudgetExceeded { .. }) => stop = Some(Termination::BudgetExceeded),
                    Err(_) => stop = Some(Termination::InvalidZoom),
                }
            }
        }
        steps.push(EpisodeStep {
            forced_prefix: forced,
            raw_text: raw,
            action,
            layout_after: layout.clone(),
        });
        if let Some(t) = stop {
            termination = t;
            break;
        }
    }

    let finished = termination == Termination::Answered;
    Ok(EpisodeTrace {
        question: question.clone(),
        loss_mask: vec![finished; steps.len()],
        steps,
        finished,
        termination,
    })
}
