//! Slow-fast video context: a densely sampled low-resolution fast track over
//! the whole video, plus zoomed high-resolution slow clips appended in time
//! order.
//!
//! The rendered prompt looks like
//!
//! ```text
//! Full video [0,3600]: <fast_video> Subset zoom-in video clip [30,40]: <slow_video_1> Subset zoom-in video clip [85,90]: <slow_video_2>
//! ```
//!
//! Placeholders are literal tokens; the encoder that would replace them with
//! visual tokens lives outside this crate.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid span: {0}")]
    InvalidSpan(String),
    #[error("token budget exceeded: layout would cost {cost} tokens, budget is {budget}")]
    BudgetExceeded { cost: u64, budget: u64 },
    #[error("cannot parse rendered layout: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, LayoutError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub duration_s: f64,
    pub source_id: String,
}

impl VideoMeta {
    pub fn new(duration_s: f64, source_id: impl Into<String>) -> Result<Self> {
        let meta = Self {
            duration_s,
            source_id: source_id.into(),
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(LayoutError::InvalidInput(format!(
                "video duration must be a positive number of seconds, got {}",
                self.duration_s
            )));
        }
        Ok(())
    }

    /// Last whole second a span may end at.
    pub fn whole_seconds(&self) -> u64 {
        self.duration_s.floor() as u64
    }
}

/// Whether `append_zoom` enforces `context_budget_tokens`.
///
/// The default fast-track constants (768 frames at 32 tokens) already exceed
/// a 16k budget on their own, so the check is off unless asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetCheck {
    Strict,
    #[default]
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub fps_fast: f64,
    pub max_fast_frames: u64,
    pub tokens_per_fast_frame: u64,
    pub max_slow_frames: u64,
    pub tokens_per_slow_frame: u64,
    pub context_budget_tokens: u64,
    pub max_steps: usize,
    pub budget_check: BudgetCheck,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            fps_fast: 1.0,
            max_fast_frames: 768,
            tokens_per_fast_frame: 32,
            max_slow_frames: 32,
            tokens_per_slow_frame: 256,
            context_budget_tokens: 16384,
            max_steps: 3,
            budget_check: BudgetCheck::Off,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_fast_frames", self.max_fast_frames),
            ("tokens_per_fast_frame", self.tokens_per_fast_frame),
            ("max_slow_frames", self.max_slow_frames),
            ("tokens_per_slow_frame", self.tokens_per_slow_frame),
            ("context_budget_tokens", self.context_budget_tokens),
            ("max_steps", self.max_steps as u64),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(LayoutError::InvalidInput(format!("{name} must be positive")));
            }
        }
        if !(self.fps_fast.is_finite() && self.fps_fast > 0.0) {
            return Err(LayoutError::InvalidInput(format!(
                "fps_fast must be positive, got {}",
                self.fps_fast
            )));
        }
        if self.tokens_per_slow_frame < self.tokens_per_fast_frame {
            return Err(LayoutError::InvalidInput(
                "tokens_per_slow_frame must be at least tokens_per_fast_frame".into(),
            ));
        }
        Ok(())
    }
}

/// Half-open interval `[start_s, end_s)` in whole seconds, `start_s < end_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawSpan", into = "RawSpan")]
pub struct TimeSpan {
    start_s: u64,
    end_s: u64,
}

#[derive(Serialize, Deserialize)]
struct RawSpan {
    start_s: u64,
    end_s: u64,
}

impl TryFrom<RawSpan> for TimeSpan {
    type Error = LayoutError;
    fn try_from(raw: RawSpan) -> Result<Self> {
        TimeSpan::new(raw.start_s, raw.end_s)
    }
}

impl From<TimeSpan> for RawSpan {
    fn from(span: TimeSpan) -> Self {
        RawSpan {
            start_s: span.start_s,
            end_s: span.end_s,
        }
    }
}

impl TimeSpan {
    pub fn new(start_s: u64, end_s: u64) -> Result<Self> {
        if start_s >= end_s {
            return Err(LayoutError::InvalidSpan(format!("[{start_s},{end_s}] is empty or reversed")));
        }
        Ok(Self { start_s, end_s })
    }

    /// Clamps a possibly out-of-range span (as emitted by a model) to
    /// `[0, duration]`, rounding the upper bound down to a whole second.
    pub fn clamped(start: i64, end: i64, meta: &VideoMeta) -> Result<Self> {
        let limit = meta.whole_seconds() as i64;
        let start_c = start.clamp(0, limit);
        let end_c = end.clamp(0, limit);
        if start_c >= end_c {
            return Err(LayoutError::InvalidSpan(format!(
                "[{start},{end}] is empty after clamping to [0,{limit}]"
            )));
        }
        Self::new(start_c as u64, end_c as u64)
    }

    pub fn start_s(&self) -> u64 {
        self.start_s
    }

    pub fn end_s(&self) -> u64 {
        self.end_s
    }

    pub fn len_s(&self) -> u64 {
        self.end_s - self.start_s
    }

    /// Length of the intersection, in seconds.
    pub fn overlap_s(&self, other: &TimeSpan) -> u64 {
        let lo = self.start_s.max(other.start_s);
        let hi = self.end_s.min(other.end_s);
        hi.saturating_sub(lo)
    }

    pub fn contains_span(&self, other: &TimeSpan) -> bool {
        self.start_s <= other.start_s && other.end_s <= self.end_s
    }

    pub fn contains_time(&self, t: f64) -> bool {
        t >= self.start_s as f64 && t < self.end_s as f64
    }
}

impl fmt::Display for TimeSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.start_s, self.end_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowClip {
    pub span: TimeSpan,
    pub frame_timestamps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowFastLayout {
    pub meta: VideoMeta,
    pub fast_timestamps: Arc<[f64]>,
    pub slow_clips: Vec<SlowClip>,
}

/// Centers of `count` equal bins covering `[start, start + len)`.
fn bin_centers(start: f64, len: f64, count: u64) -> Vec<f64> {
    let width = len / count as f64;
    (0..count).map(|i| start + (i as f64 + 0.5) * width).collect()
}

/// Fast-track timestamps: `min(floor(T * fps), max_fast_frames)` frames (at
/// least one), one at the center of each equal subdivision of `[0, T]`.
pub fn plan_fast_sampling(meta: &VideoMeta, cfg: &SamplingConfig) -> Result<Vec<f64>> {
    meta.validate()?;
    let wanted = (meta.duration_s * cfg.fps_fast).floor();
    let count = (wanted as u64).min(cfg.max_fast_frames).max(1);
    Ok(bin_centers(0.0, meta.duration_s, count))
}

/// Slow-clip timestamps: at most `max_slow_frames` bin centers within the
/// span, and never more than one per whole second.
pub fn plan_slow_sampling(span: TimeSpan, cfg: &SamplingConfig) -> SlowClip {
    let count = span.len_s().min(cfg.max_slow_frames).max(1);
    SlowClip {
        span,
        frame_timestamps: bin_centers(span.start_s as f64, span.len_s() as f64, count),
    }
}

/// Clamp-then-plan, for spans that have not been validated against the video.
pub fn plan_slow_sampling_clamped(
    start: i64,
    end: i64,
    meta: &VideoMeta,
    cfg: &SamplingConfig,
) -> Result<SlowClip> {
    Ok(plan_slow_sampling(TimeSpan::clamped(start, end, meta)?, cfg))
}

impl SlowFastLayout {
    /// Fast track only, no zoomed clips.
    pub fn new(meta: VideoMeta, cfg: &SamplingConfig) -> Result<Self> {
        let fast = plan_fast_sampling(&meta, cfg)?;
        Ok(Self {
            meta,
            fast_timestamps: fast.into(),
            slow_clips: Vec::new(),
        })
    }

    pub fn spans(&self) -> impl Iterator<Item = TimeSpan> + '_ {
        self.slow_clips.iter().map(|c| c.span)
    }
}

/// Sum of fast and slow visual tokens.
pub fn token_cost(layout: &SlowFastLayout, cfg: &SamplingConfig) -> u64 {
    let fast = layout.fast_timestamps.len() as u64 * cfg.tokens_per_fast_frame;
    let slow: u64 = layout
        .slow_clips
        .iter()
        .map(|c| c.frame_timestamps.len() as u64 * cfg.tokens_per_slow_frame)
        .sum();
    fast + slow
}

/// Adds a zoomed clip, keeping clips sorted by start time. Equal starts keep
/// insertion order.
pub fn append_zoom(layout: &SlowFastLayout, span: TimeSpan, cfg: &SamplingConfig) -> Result<SlowFastLayout> {
    if span.end_s() > layout.meta.whole_seconds() {
        return Err(LayoutError::InvalidSpan(format!(
            "{span} extends past the end of a {}s video",
            layout.meta.duration_s
        )));
    }
    let clip = plan_slow_sampling(span, cfg);
    let at = layout
        .slow_clips
        .partition_point(|c| c.span.start_s() <= span.start_s());
    let mut next = layout.clone();
    next.slow_clips.insert(at, clip);
    if cfg.budget_check == BudgetCheck::Strict {
        let cost = token_cost(&next, cfg);
        if cost > cfg.context_budget_tokens {
            return Err(LayoutError::BudgetExceeded {
                cost,
                budget: cfg.context_budget_tokens,
            });
        }
    }
    Ok(next)
}

const FULL_VIDEO: &str = "Full video [0,";
const FAST_TOKEN: &str = "<fast_video>";
const CLIP_HEAD: &str = " Subset zoom-in video clip [";

pub fn render_prompt(layout: &SlowFastLayout) -> String {
    let mut out = format!("{FULL_VIDEO}{}]: {FAST_TOKEN}", layout.meta.whole_seconds());
    for (k, clip) in layout.slow_clips.iter().enumerate() {
        out.push_str(&format!(
            "{CLIP_HEAD}{},{}]: <slow_video_{}>",
            clip.span.start_s(),
            clip.span.end_s(),
            k + 1
        ));
    }
    out
}

/// Inverse of [`render_prompt`]: recovers the whole-second duration and the
/// ordered clip spans. Trailing text after the last placeholder is ignored,
/// so a full controller prompt (layout line first) parses too.
pub fn parse_rendered_layout(text: &str) -> Result<(u64, Vec<TimeSpan>)> {
    let err = |m: &str| LayoutError::Parse(m.to_string());
    let rest = text.strip_prefix(FULL_VIDEO).ok_or_else(|| err("missing full-video header"))?;
    let (dur, rest) = rest.split_once(']').ok_or_else(|| err("unterminated duration"))?;
    let duration: u64 = dur.parse().map_err(|_| err("duration is not an integer"))?;
    let mut rest = rest
        .strip_prefix(": ")
        .and_then(|r| r.strip_prefix(FAST_TOKEN))
        .ok_or_else(|| err("missing fast-video placeholder"))?;
    let mut spans = Vec::new();
    while let Some(tail) = rest.strip_prefix(CLIP_HEAD) {
        let (body, tail) = tail.split_once(']').ok_or_else(|| err("unterminated clip span"))?;
        let (a, b) = body.split_once(',').ok_or_else(|| err("clip span needs two endpoints"))?;
        let a: u64 = a.parse().map_err(|_| err("clip start is not an integer"))?;
        let b: u64 = b.parse().map_err(|_| err("clip end is not an integer"))?;
        spans.push(TimeSpan::new(a, b)?);
        let placeholder = format!(": <slow_video_{}>", spans.len());
        rest = tail
            .strip_prefix(placeholder.as_str())
            .ok_or_else(|| err("missing or misnumbered slow-video placeholder"))?;
    }
    Ok((duration, spans))
}
