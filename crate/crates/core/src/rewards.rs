//! Binary accuracy rewards for answers and zoom-in spans.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::TimeSpan;
use crate::reasoning::{EpisodeTrace, QuestionSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("missing ground truth: {0}")]
    MissingGroundTruth(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    pub answer_reward: f64,
    pub zoom_reward: Option<f64>,
    pub per_step_reward: Vec<f64>,
}

impl RewardBundle {
    /// The scalar GRPO normalizes over: zoom reward when present, else the
    /// answer reward.
    pub fn outcome(&self) -> f64 {
        self.zoom_reward.unwrap_or(self.answer_reward)
    }
}

/// Interval IoU on half-open whole-second spans. TimeSpan cannot be empty, so
/// the union is always positive.
pub fn iou(a: &TimeSpan, b: &TimeSpan) -> f64 {
    let inter = a.overlap_s(b);
    let union = a.len_s() + b.len_s() - inter;
    inter as f64 / union as f64
}

/// Best IoU of `pred` against any ground-truth span.
pub fn max_iou(pred: &TimeSpan, gt_spans: &[TimeSpan]) -> Result<f64, RewardError> {
    gt_spans
        .iter()
        .map(|gt| iou(pred, gt))
        .reduce(f64::max)
        .ok_or(RewardError::MissingGroundTruth("no ground-truth spans"))
}

fn normalize_letter(c: char) -> char {
    c.to_ascii_uppercase()
}

pub fn answer_reward(pred: char, gt: char) -> f64 {
    if normalize_letter(pred) == normalize_letter(gt) {
        1.0
    } else {
        0.0
    }
}

/// Like [`answer_reward`] for raw predicted text such as `" b "`.
pub fn answer_reward_str(pred: &str, gt: char) -> f64 {
    let mut chars = pred.trim().chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => answer_reward(c, gt),
        _ => 0.0,
    }
}

/// 1 when the prediction overlaps any ground-truth span at all.
pub fn zoom_reward(pred: &TimeSpan, gt_spans: &[TimeSpan]) -> Result<f64, RewardError> {
    let best = max_iou(pred, gt_spans)?;
    Ok(if best > 0.0 { 1.0 } else { 0.0 })
}

/// Outcome reward shared by every step of a finished trace; zeros for a
/// masked one.
pub fn assign_trace_rewards(trace: &EpisodeTrace, question: &QuestionSpec) -> Result<RewardBundle, RewardError> {
    let n = trace.steps.len();
    if !trace.finished {
        return Ok(RewardBundle {
            answer_reward: 0.0,
            zoom_reward: None,
            per_step_reward: vec![0.0; n],
        });
    }
    let gt = question
        .gt_answer
        .ok_or(RewardError::MissingGroundTruth("question has no gt_answer"))?;
    let r = trace.final_answer().map_or(0.0, |pred| answer_reward(pred, gt));
    Ok(RewardBundle {
        answer_reward: r,
        zoom_reward: None,
        per_step_reward: vec![r; n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{SamplingConfig, VideoMeta};
    use crate::reasoning::{run_episode, AnswerOption, ScriptedBackend};

    fn span(a: u64, b: u64) -> TimeSpan {
        TimeSpan::new(a, b).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&span(30, 40), &span(35, 50)), 0.25);
        assert_eq!(iou(&span(10, 20), &span(10, 20)), 1.0);
        assert_eq!(iou(&span(0, 10), &span(10, 20)), 0.0);
    }

    #[test]
    fn answer_examples() {
        assert_eq!(answer_reward('A', 'A'), 1.0);
        assert_eq!(answer_reward('B', 'A'), 0.0);
        assert_eq!(answer_reward('a', 'A'), 1.0);
        assert_eq!(answer_reward_str(" a\n", 'A'), 1.0);
        assert_eq!(answer_reward_str("AB", 'A'), 0.0);
    }

    #[test]
    fn zoom_examples() {
        assert_eq!(zoom_reward(&span(30, 40), &[span(35, 50)]).unwrap(), 1.0);
        assert_eq!(zoom_reward(&span(0, 10), &[span(10, 20)]).unwrap(), 0.0);
        assert_eq!(zoom_reward(&span(5, 6), &[span(0, 3), span(5, 9)]).unwrap(), 1.0);
        assert!(matches!(
            zoom_reward(&span(5, 6), &[]),
            Err(RewardError::MissingGroundTruth(_))
        ));
    }

    fn question(gt: Option<char>) -> QuestionSpec {
        QuestionSpec {
            text: "q".into(),
            options: vec![
                AnswerOption { letter: 'A', text: "x".into() },
                AnswerOption { letter: 'B', text: "y".into() },
            ],
            gt_answer: gt,
            gt_spans: None,
        }
    }

    fn trace(lines: &[&str], q: &QuestionSpec) -> EpisodeTrace {
        let mut b = ScriptedBackend::new(lines.iter().copied());
        let meta = VideoMeta::new(100.0, "v").unwrap();
        run_episode(&mut b, &meta, q, &SamplingConfig::default(), 0).unwrap()
    }

    #[test]
    fn shared_trace_rewards() {
        let q = question(Some('A'));
        let t = trace(&["\\boxed{[1, 2]}", "\\boxed{[3, 4]}", "\\boxed{A}"], &q);
        assert_eq!(assign_trace_rewards(&t, &q).unwrap().per_step_reward, vec![1.0; 3]);
        let t = trace(&["\\boxed{[1, 2]}", "I get the answer. \\boxed{B}"], &q);
        assert_eq!(assign_trace_rewards(&t, &q).unwrap().per_step_reward, vec![0.0; 2]);
        let t = trace(&["\\boxed{[1, 2]}", "\\boxed{[1, 2]}", "\\boxed{[1, 2]}"], &q);
        assert!(!t.finished);
        let r = assign_trace_rewards(&t, &q).unwrap();
        assert_eq!(r.per_step_reward, vec![0.0; 3]);
        assert!(t.loss_mask.iter().all(|m| !m));
    }

    #[test]
    fn finished_trace_without_gt_errors() {
        let q = question(None);
        let t = trace(&["\\boxed{A}"], &q);
        assert!(assign_trace_rewards(&t, &q).is_err());
    }
}
