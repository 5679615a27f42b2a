//! Cleaning for annotated chain-of-thought records: accuracy and format
//! filters, time normalization, step prefixes and training-sample assembly.

use std::collections::HashMap;
use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;
use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{append_zoom, LayoutError, SamplingConfig, SlowFastLayout, TimeSpan, VideoMeta};
use crate::reasoning::{QuestionSpec, ANSWER_PREFIX, ZOOM_PREFIX};
use crate::rewards::{answer_reward, max_iou};
use crate::seeds;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CotKind {
    Zoom,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTRecord {
    pub record_id: String,
    pub video_id: String,
    pub question: QuestionSpec,
    pub kind: CotKind,
    pub cot_text: String,
    #[serde(default)]
    pub pred_span: Option<TimeSpan>,
    #[serde(default)]
    pub pred_answer: Option<char>,
    #[serde(default)]
    pub annotator_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    WrongAnswer,
    LowIou,
    RepeatedPattern,
    StyleViolation,
    UnparseableTime,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub wrong_answer: usize,
    pub low_iou: usize,
    pub repeated_pattern: usize,
    pub style_violation: usize,
    pub unparseable_time: usize,
    pub kept: usize,
}

impl FilterReport {
    pub fn record(&mut self, outcome: Result<(), DropReason>) {
        match outcome {
            Ok(()) => self.kept += 1,
            Err(DropReason::WrongAnswer) => self.wrong_answer += 1,
            Err(DropReason::LowIou) => self.low_iou += 1,
            Err(DropReason::RepeatedPattern) => self.repeated_pattern += 1,
            Err(DropReason::StyleViolation) => self.style_violation += 1,
            Err(DropReason::UnparseableTime) => self.unparseable_time += 1,
        }
    }

    pub fn dropped(&self) -> usize {
        self.wrong_answer + self.low_iou + self.repeated_pattern + self.style_violation + self.unparseable_time
    }

    pub fn total(&self) -> usize {
        self.dropped() + self.kept
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(default)]
    pub gt_answer: Option<char>,
    #[serde(default)]
    pub gt_spans: Option<Vec<TimeSpan>>,
}

/// One line of a ground-truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub record_id: String,
    #[serde(flatten)]
    pub truth: GroundTruth,
}

/// Ground truth by record id; records not listed fall back to the answer and
/// spans embedded in their own question.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthIndex {
    by_record: HashMap<String, GroundTruth>,
}

impl GroundTruthIndex {
    pub fn new(entries: impl IntoIterator<Item = GroundTruthEntry>) -> Self {
        Self {
            by_record: entries.into_iter().map(|e| (e.record_id, e.truth)).collect(),
        }
    }

    pub fn lookup(&self, record: &CoTRecord) -> GroundTruth {
        self.by_record.get(&record.record_id).cloned().unwrap_or_else(|| GroundTruth {
            gt_answer: record.question.gt_answer,
            gt_spans: record.question.gt_spans.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Case-insensitive substrings that mark an undesired style.
    pub forbidden_lexicon: Vec<String>,
    pub min_repeat_chars: usize,
    pub min_repeats: usize,
    /// Zoom records below this IoU against the ground truth are dropped.
    pub min_iou: f64,
    /// Chance a zoom sample is shown no slow clip (otherwise a wrong one).
    pub no_clip_probability: f64,
    /// Length of the slow clip placed in assembled samples.
    pub slow_clip_s: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            forbidden_lexicon: ["caption", "audio", "transcript", "the voice"]
                .map(String::from)
                .to_vec(),
            min_repeat_chars: 20,
            min_repeats: 3,
            min_iou: 0.1,
            no_clip_probability: 0.5,
            slow_clip_s: 32,
        }
    }
}

/// Accuracy rule for one record.
pub fn accuracy_check(record: &CoTRecord, gt: &GroundTruth, cfg: &PipelineConfig) -> Result<(), DropReason> {
    match record.kind {
        CotKind::Answer => {
            let (Some(pred), Some(truth)) = (record.pred_answer, gt.gt_answer) else {
                return Err(DropReason::UnparseableTime);
            };
            if answer_reward(pred, truth) == 1.0 {
                Ok(())
            } else {
                Err(DropReason::WrongAnswer)
            }
        }
        CotKind::Zoom => {
            let (Some(pred), Some(spans)) = (record.pred_span, gt.gt_spans.as_deref()) else {
                return Err(DropReason::UnparseableTime);
            };
            match max_iou(&pred, spans) {
                Ok(best) if best >= cfg.min_iou => Ok(()),
                Ok(_) => Err(DropReason::LowIou),
                Err(_) => Err(DropReason::UnparseableTime),
            }
        }
    }
}

/// True when some substring of at least `min_len` characters occurs
/// `repeats` times back to back.
pub fn has_repeated_pattern(text: &str, min_len: usize, repeats: usize) -> bool {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    if repeats < 2 {
        return n >= min_len.max(1);
    }
    // a k-fold tandem repeat of period L is a run of (k-1)L positions with c[j] == c[j+L]
    let min_len = min_len.max(1);
    for period in min_len..=n / repeats {
        let need = (repeats - 1) * period;
        let mut run = 0usize;
        for j in 0..n - period {
            if chars[j] == chars[j + period] {
                run += 1;
                if run >= need {
                    return true;
                }
            } else {
                run = 0;
            }
        }
    }
    false
}

pub fn format_check(text: &str, cfg: &PipelineConfig) -> Result<(), DropReason> {
    if has_repeated_pattern(text, cfg.min_repeat_chars, cfg.min_repeats) {
        return Err(DropReason::RepeatedPattern);
    }
    let lower = text.to_lowercase();
    if cfg
        .forbidden_lexicon
        .iter()
        .any(|w| !w.is_empty() && lower.contains(&w.to_lowercase()))
    {
        return Err(DropReason::StyleViolation);
    }
    Ok(())
}

fn run_filter(
    records: Vec<CoTRecord>,
    check: impl Fn(&CoTRecord) -> Result<(), DropReason> + Sync + Send,
) -> (Vec<CoTRecord>, FilterReport) {
    let outcomes: Vec<Result<(), DropReason>> = records.par_iter().map(&check).collect();
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for (record, outcome) in records.into_iter().zip(outcomes) {
        report.record(outcome);
        if outcome.is_ok() {
            kept.push(record);
        }
    }
    (kept, report)
}

pub fn accuracy_filter(
    records: Vec<CoTRecord>,
    gt: &GroundTruthIndex,
    cfg: &PipelineConfig,
) -> (Vec<CoTRecord>, FilterReport) {
    run_filter(records, |r| accuracy_check(r, &gt.lookup(r), cfg))
}

pub fn format_filter(records: Vec<CoTRecord>, cfg: &PipelineConfig) -> (Vec<CoTRecord>, FilterReport) {
    run_filter(records, |r| format_check(&r.cot_text, cfg))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedText {
    pub text: String,
    /// Time-like tokens left untouched because they fit no known form.
    pub unparseable: Vec<String>,
}

fn time_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(concat!(
            r"(?P<colon>\b\d+(?::\d+)+(?:\.\d+)?\b)",
            r"|(?P<words>\b(?P<wm>\d+(?:\.\d+)?)\s*minutes?\b(?:\s+(?:and\s+)?(?P<ws>\d+(?:\.\d+)?)\s*seconds?\b)?)",
            r"|(?P<compact>\b(?P<cm>\d+)m(?P<cs>\d+)s\b)",
        ))
        .expect("valid time regex")
    })
}

fn colon_seconds(token: &str) -> Option<u64> {
    if token.contains('.') {
        return None;
    }
    let parts: Vec<&str> = token.split(':').collect();
    let num = |s: &str| s.parse::<u64>().ok();
    match parts.as_slice() {
        [m, s] if (1..=3).contains(&m.len()) && s.len() == 2 => {
            let (m, s) = (num(m)?, num(s)?);
            (s < 60).then_some(m * 60 + s)
        }
        [h, m, s] if (1..=2).contains(&h.len()) && m.len() == 2 && s.len() == 2 => {
            let (h, m, s) = (num(h)?, num(m)?, num(s)?);
            (m < 60 && s < 60).then_some(h * 3600 + m * 60 + s)
        }
        _ => None,
    }
}

/// Rewrites `MM:SS`, `H:MM:SS`, `N minute(s) [M second(s)]` and `NmMs` to
/// whole seconds. Bare integers are left alone.
pub fn normalize_times(text: &str) -> NormalizedText {
    let mut unparseable = Vec::new();
    let out = time_regex().replace_all(text, |caps: &Captures| {
        let whole = caps.get(0).expect("match").as_str();
        let converted = if let Some(tok) = caps.name("colon") {
            colon_seconds(tok.as_str())
        } else if caps.name("words").is_some() {
            let m = caps["wm"].parse::<u64>().ok();
            let s = match caps.name("ws") {
                Some(s) => s.as_str().parse::<u64>().ok(),
                None => Some(0),
            };
            match (m, s) {
                (Some(m), Some(s)) if s < 60 || caps.name("ws").is_none() => Some(m * 60 + s),
                _ => None,
            }
        } else {
            let m = caps["cm"].parse::<u64>().ok();
            let s = caps["cs"].parse::<u64>().ok();
            match (m, s) {
                (Some(m), Some(s)) if s < 60 => Some(m * 60 + s),
                _ => None,
            }
        };
        match converted {
            Some(secs) => secs.to_string(),
            None => {
                unparseable.push(whole.to_string());
                whole.to_string()
            }
        }
    });
    NormalizedText {
        text: out.into_owned(),
        unparseable,
    }
}

pub fn kind_prefix(kind: CotKind) -> &'static str {
    match kind {
        CotKind::Answer => ANSWER_PREFIX,
        CotKind::Zoom => ZOOM_PREFIX,
    }
}

/// Puts the step prefix in front of the chain of thought, once.
pub fn attach_prefix(mut record: CoTRecord) -> CoTRecord {
    let prefix = kind_prefix(record.kind);
    if !record.cot_text.trim_start().starts_with(prefix) {
        record.cot_text = format!("{prefix} {}", record.cot_text.trim_start());
    }
    record
}

/// Full cleaning pass: prediction present, times normalizable, accurate,
/// well formatted. Survivors get normalized times and their prefix.
pub fn clean_records(
    records: Vec<CoTRecord>,
    gt: &GroundTruthIndex,
    cfg: &PipelineConfig,
) -> (Vec<CoTRecord>, FilterReport) {
    let outcomes: Vec<Result<CoTRecord, DropReason>> = records
        .into_par_iter()
        .map(|r| {
            accuracy_check(&r, &gt.lookup(&r), cfg)?;
            format_check(&r.cot_text, cfg)?;
            let norm = normalize_times(&r.cot_text);
            if !norm.unparseable.is_empty() {
                return Err(DropReason::UnparseableTime);
            }
            Ok(attach_prefix(CoTRecord {
                cot_text: norm.text,
                ..r
            }))
        })
        .collect();
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => {
                report.record(Ok(()));
                kept.push(r);
            }
            Err(reason) => report.record(Err(reason)),
        }
    }
    (kept, report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub layout: SlowFastLayout,
    pub target_text: String,
}

/// Slow clip of `len` seconds around `span`, shifted to stay inside the video.
fn grow_around(span: TimeSpan, len: u64, limit: u64) -> Result<TimeSpan, LayoutError> {
    let span = TimeSpan::new(span.start_s().min(limit.saturating_sub(1)), span.end_s().min(limit))?;
    let len = len.max(span.len_s()).min(limit);
    let pad = len - span.len_s();
    let mut start = span.start_s().saturating_sub(pad / 2);
    if start + len > limit {
        start = limit - len;
    }
    TimeSpan::new(start, start + len)
}

/// Picks the slow clips a training sample is shown: for answer records, a
/// clip containing a ground-truth span; for zoom records, either nothing or
/// a clip that misses every ground-truth span.
pub fn assemble_training_sample(
    record: &CoTRecord,
    gt_spans: &[TimeSpan],
    meta: &VideoMeta,
    sampling: &SamplingConfig,
    cfg: &PipelineConfig,
    rng_seed: u64,
) -> Result<TrainingExample, PipelineError> {
    let mut rng = seeds::rng(rng_seed);
    let mut layout = SlowFastLayout::new(meta.clone(), sampling)?;
    let limit = meta.whole_seconds();
    match record.kind {
        CotKind::Answer => {
            if gt_spans.is_empty() {
                return Err(PipelineError::MissingGroundTruth(format!(
                    "answer record {} has no ground-truth spans",
                    record.record_id
                )));
            }
            let gt = gt_spans[rng.random_range(0..gt_spans.len())];
            let clip = grow_around(gt, cfg.slow_clip_s, limit)?;
            layout = append_zoom(&layout, clip, sampling)?;
        }
        CotKind::Zoom => {
            if !rng.random_bool(cfg.no_clip_probability) {
                let len = cfg.slow_clip_s.min(limit).max(1);
                let starts: Vec<u64> = (0..=limit.saturating_sub(len))
                    .filter(|&s| {
                        let cand = TimeSpan::new(s, s + len).expect("len >= 1");
                        gt_spans.iter().all(|g| g.overlap_s(&cand) == 0)
                    })
                    .collect();
                if !starts.is_empty() && len <= limit {
                    let s = starts[rng.random_range(0..starts.len())];
                    layout = append_zoom(&layout, TimeSpan::new(s, s + len)?, sampling)?;
                }
            }
        }
    }
    Ok(TrainingExample {
        layout,
        target_text: attach_prefix(record.clone()).cot_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoning::AnswerOption;
    use crate::rewards::iou;

    fn span(a: u64, b: u64) -> TimeSpan {
        TimeSpan::new(a, b).unwrap()
    }

    fn question() -> QuestionSpec {
        QuestionSpec {
            text: "What is the chef cutting?".into(),
            options: ('A'..='D')
                .map(|l| AnswerOption {
                    letter: l,
                    text: format!("opt {l}"),
                })
                .collect(),
            gt_answer: Some('A'),
            gt_spans: Some(vec![span(40, 60)]),
        }
    }

    fn record(kind: CotKind, text: &str) -> CoTRecord {
        CoTRecord {
            record_id: "r1".into(),
            video_id: "v1".into(),
            question: question(),
            kind,
            cot_text: text.into(),
            pred_span: (kind == CotKind::Zoom).then(|| span(40, 60)),
            pred_answer: (kind == CotKind::Answer).then_some('A'),
            annotator_id: "annotator-0".into(),
        }
    }

    #[test]
    fn accuracy_rules() {
        let cfg = PipelineConfig::default();
        let idx = GroundTruthIndex::default();
        // [0,21) vs [40,60) is disjoint; [55,100) vs [40,60): 5/60
        let mut low = record(CotKind::Zoom, "t");
        low.pred_span = Some(span(55, 100));
        assert!(iou(&span(55, 100), &span(40, 60)) < 0.1);
        assert_eq!(accuracy_check(&low, &idx.lookup(&low), &cfg), Err(DropReason::LowIou));
        let mut half = record(CotKind::Zoom, "t");
        half.pred_span = Some(span(40, 50));
        assert_eq!(iou(&span(40, 50), &span(40, 60)), 0.5);
        assert_eq!(accuracy_check(&half, &idx.lookup(&half), &cfg), Ok(()));
        let mut wrong = record(CotKind::Answer, "t");
        wrong.pred_answer = Some('B');
        assert_eq!(accuracy_check(&wrong, &idx.lookup(&wrong), &cfg), Err(DropReason::WrongAnswer));
        let mut missing = record(CotKind::Answer, "t");
        missing.pred_answer = None;
        assert_eq!(
            accuracy_check(&missing, &idx.lookup(&missing), &cfg),
            Err(DropReason::UnparseableTime)
        );
    }

    #[test]
    fn ground_truth_index_overrides_embedded() {
        let idx = GroundTruthIndex::new([GroundTruthEntry {
            record_id: "r1".into(),
            truth: GroundTruth {
                gt_answer: Some('B'),
                gt_spans: None,
            },
        }]);
        let r = record(CotKind::Answer, "t");
        assert_eq!(
            accuracy_check(&r, &idx.lookup(&r), &PipelineConfig::default()),
            Err(DropReason::WrongAnswer)
        );
    }

    #[test]
    fn format_rules() {
        let cfg = PipelineConfig::default();
        assert_eq!(
            format_check("Based on the captions, the man leaves.", &cfg),
            Err(DropReason::StyleViolation)
        );
        assert_eq!(format_check("THE VOICE says hi", &cfg), Err(DropReason::StyleViolation));
        assert_eq!(format_check("abcdefghij", &cfg), Ok(()));
        let clause = "the man opens the door."; // 23 chars
        let text = format!("First, {clause}{clause}{clause} Then he leaves.");
        assert_eq!(format_check(&text, &cfg), Err(DropReason::RepeatedPattern));
        assert_eq!(format_check(&format!("{clause}{clause}"), &cfg), Ok(()));
    }

    fn brute_force_repeat(text: &str, min_len: usize, repeats: usize) -> bool {
        let c: Vec<char> = text.chars().collect();
        let n = c.len();
        (min_len..=n).any(|l| {
            (0..n).any(|i| i + repeats * l <= n && (1..repeats).all(|k| c[i..i + l] == c[i + k * l..i + (k + 1) * l]))
        })
    }

    #[test]
    fn repetition_matches_brute_force() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(0..40);
            let text: String = (0..n).map(|_| if rng.random_bool(0.5) { 'a' } else { 'b' }).collect();
            for (min_len, reps) in [(2, 3), (3, 2), (4, 3), (1, 4)] {
                assert_eq!(
                    has_repeated_pattern(&text, min_len, reps),
                    brute_force_repeat(&text, min_len, reps),
                    "{text} {min_len} {reps}"
                );
            }
        }
    }

    #[test]
    fn time_normalization() {
        assert_eq!(normalize_times("at 01:50 the chef").text, "at 110 the chef");
        assert_eq!(normalize_times("110").text, "110");
        assert_eq!(normalize_times("2 minutes").text, "120");
        assert_eq!(normalize_times("1 minute 5 seconds in").text, "65 in");
        assert_eq!(normalize_times("around 2m30s, and 1:02:03").text, "around 150, and 3723");
        let bad = normalize_times("at 1:75 or 1.5 minutes");
        assert_eq!(bad.text, "at 1:75 or 1.5 minutes");
        assert_eq!(bad.unparseable, vec!["1:75".to_string(), "1.5 minutes".to_string()]);
        let once = normalize_times("from 00:30 to 2 minutes 10 seconds").text;
        assert_eq!(normalize_times(&once).text, once);
    }

    #[test]
    fn prefixes() {
        let z = attach_prefix(record(CotKind::Zoom, "The cooking is near the end."));
        assert_eq!(z.cot_text, "I need to zoom in on the video. The cooking is near the end.");
        assert_eq!(attach_prefix(z.clone()), z);
        let a = attach_prefix(record(CotKind::Answer, "It is A."));
        assert!(a.cot_text.starts_with("I get the answer."));
    }

    #[test]
    fn answer_sample_contains_gt() {
        let meta = VideoMeta::new(120.0, "v").unwrap();
        let s = SamplingConfig::default();
        let cfg = PipelineConfig::default();
        let ex = assemble_training_sample(&record(CotKind::Answer, "x"), &[span(40, 60)], &meta, &s, &cfg, 1).unwrap();
        let clips: Vec<_> = ex.layout.spans().collect();
        assert_eq!(clips.len(), 1);
        assert!(clips[0].contains_span(&span(40, 60)));
        assert_eq!(clips[0].len_s(), 32);
        // near the end the clip is shifted back inside the video
        let ex = assemble_training_sample(&record(CotKind::Answer, "x"), &[span(115, 120)], &meta, &s, &cfg, 1).unwrap();
        assert_eq!(ex.layout.slow_clips[0].span, span(88, 120));
        assert!(assemble_training_sample(&record(CotKind::Answer, "x"), &[], &meta, &s, &cfg, 1).is_err());
    }

    #[test]
    fn zoom_sample_branches() {
        let meta = VideoMeta::new(300.0, "v").unwrap();
        let s = SamplingConfig::default();
        let cfg = PipelineConfig::default();
        let gts = [span(40, 60), span(200, 210)];
        let (mut none, mut wrong) = (0, 0);
        for seed in 0..200 {
            let ex = assemble_training_sample(&record(CotKind::Zoom, "x"), &gts, &meta, &s, &cfg, seed).unwrap();
            assert!(ex.target_text.starts_with(ZOOM_PREFIX));
            match ex.layout.slow_clips.as_slice() {
                [] => none += 1,
                [clip] => {
                    wrong += 1;
                    assert_eq!(max_iou(&clip.span, &gts).unwrap(), 0.0);
                }
                _ => panic!("at most one clip"),
            }
        }
        assert!(none > 50 && wrong > 50, "{none} {wrong}");
    }

    #[test]
    fn short_video_falls_back_to_no_clip() {
        let meta = VideoMeta::new(30.0, "v").unwrap();
        let cfg = PipelineConfig {
            no_clip_probability: 0.0,
            ..PipelineConfig::default()
        };
        let ex = assemble_training_sample(&record(CotKind::Zoom, "x"), &[span(10, 20)], &meta, &SamplingConfig::default(), &cfg, 3).unwrap();
        assert!(ex.layout.slow_clips.is_empty());
    }

    #[test]
    fn reports_reconcile() {
        let cfg = PipelineConfig::default();
        let recs = vec![
            record(CotKind::Zoom, "fine"),
            record(CotKind::Answer, "audio cue"),
            record(CotKind::Answer, "at 9:99"),
        ];
        let (kept, rep) = clean_records(recs, &GroundTruthIndex::default(), &cfg);
        assert_eq!(kept.len(), 1);
        assert_eq!(rep.total(), 3);
        assert_eq!(rep.style_violation, 1);
        assert_eq!(rep.unparseable_time, 1);
    }
}
