use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{plan_fast_sampling, plan_slow_sampling, LayoutError, SamplingConfig, TimeSpan, VideoMeta};
use crate::reasoning::{AnswerOption, QuestionSpec};
use crate::seeds;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub duration_s: u64,
    /// Coarse scene categories, visible in the fast track.
    pub num_categories: usize,
    /// Fine detail symbols, visible only inside zoomed clips.
    pub num_symbols: usize,
    /// Zoom windows partition the video into equal spans of this length.
    pub window_s: u64,
    pub num_options: usize,
    /// Probability an event second shows the question's scene category;
    /// the remaining event seconds show the companion category.
    pub p_hint: f64,
    /// Probability a decoy second shows the scene category. The decoy holds
    /// no key and never shows the companion.
    pub p_decoy: f64,
    /// Decoy segments per video.
    pub num_decoys: usize,
    /// Probability a background shot shows the question's scene category.
    pub background_hint_rate: f64,
    pub shot_s: u64,
    pub event_min_s: u64,
    pub event_max_s: u64,
    /// Consecutive seconds carrying the key symbol inside the event.
    pub key_s: u64,
    /// Weight of the dominant background category relative to the others.
    pub dominant_weight: f64,
    /// Fraction of generated questions that are local (grounded).
    pub local_fraction: f64,
    pub eval_instances: usize,
    pub eval_every: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            duration_s: 600,
            num_categories: 6,
            num_symbols: 8,
            window_s: 30,
            num_options: 4,
            p_hint: 0.8,
            p_decoy: 1.0,
            num_decoys: 2,
            background_hint_rate: 0.05,
            shot_s: 10,
            event_min_s: 10,
            event_max_s: 20,
            key_s: 3,
            dominant_weight: 4.0,
            local_fraction: 0.5,
            eval_instances: 400,
            eval_every: 50,
        }
    }
}

impl EnvConfig {
    pub fn num_windows(&self) -> usize {
        (self.duration_s / self.window_s) as usize
    }

    pub fn window_span(&self, w: usize) -> TimeSpan {
        let start = w as u64 * self.window_s;
        TimeSpan::new(start, (start + self.window_s).min(self.duration_s)).expect("window inside video")
    }

    pub fn meta(&self, source_id: impl Into<String>) -> VideoMeta {
        VideoMeta {
            duration_s: self.duration_s as f64,
            source_id: source_id.into(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |m: &str| Err(EnvError::Config(m.to_string()));
        if self.window_s == 0 || self.duration_s == 0 || !self.duration_s.is_multiple_of(self.window_s) {
            return fail("duration_s must be a positive multiple of window_s");
        }
        if self.num_windows() < 2 {
            return fail("need at least two zoom windows");
        }
        if self.num_options < 2 || self.num_options > 10 {
            return fail("num_options must be in 2..=10");
        }
        if self.num_categories < self.num_options + 1 || self.num_categories > u8::MAX as usize {
            return fail("num_categories must exceed num_options (one category is the question scene)");
        }
        if self.num_symbols < self.num_options + 1 || self.num_symbols > u8::MAX as usize {
            return fail("num_symbols must leave at least one filler symbol beyond the options");
        }
        for (name, p) in [
            ("p_hint", self.p_hint),
            ("p_decoy", self.p_decoy),
            ("background_hint_rate", self.background_hint_rate),
            ("local_fraction", self.local_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(EnvError::Config(format!("{name} must be a probability")));
            }
        }
        if self.shot_s == 0 || self.key_s == 0 {
            return fail("shot_s and key_s must be positive");
        }
        if !(self.key_s <= self.event_min_s && self.event_min_s <= self.event_max_s) {
            return fail("need key_s <= event_min_s <= event_max_s");
        }
        if (self.num_decoys as u64 + 1) * self.event_max_s * 2 > self.duration_s {
            return fail("video too short to hold the event and its decoys");
        }
        if !(self.dominant_weight.is_finite() && self.dominant_weight >= 1.0) {
            return fail("dominant_weight must be >= 1");
        }
        Ok(())
    }
}

/// Symbolic two-resolution video. `coarse[t]` is the scene category at second
/// `t`; `fine[t]` the detail symbol, only observable through a zoomed clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub duration_s: u64,
    pub coarse: Vec<u8>,
    pub fine: Vec<u8>,
    pub event_span: TimeSpan,
    pub key_symbol: u8,
    /// Scene category the event is shot in.
    pub scene: u8,
    /// Category filling the event seconds that do not show the scene.
    pub companion: u8,
    /// Most frequent background category (never the event scene).
    pub dominant: u8,
    /// Segments that look like the event in the fast track but hold no key.
    pub decoy_spans: Vec<TimeSpan>,
    /// Symbols that never occur anywhere in `fine`.
    pub absent_symbols: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Local,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthQuestion {
    pub kind: QuestionKind,
    /// Fine symbols for local questions, coarse categories for global ones.
    pub options: Vec<u8>,
    pub gt_index: usize,
    pub gt_spans: Option<Vec<TimeSpan>>,
    /// Scene the question refers to (local only).
    pub scene: Option<u8>,
}

impl SynthQuestion {
    pub fn gt_letter(&self) -> char {
        option_letter(self.gt_index)
    }

    pub fn to_spec(&self) -> QuestionSpec {
        let (text, label) = match self.kind {
            QuestionKind::Local => (
                format!(
                    "Which detail can be seen during the scene-{} segment?",
                    self.scene.unwrap_or_default()
                ),
                "detail",
            ),
            QuestionKind::Global => ("Which scene occupies most of the video?".to_string(), "scene"),
        };
        QuestionSpec {
            text,
            options: self
                .options
                .iter()
                .enumerate()
                .map(|(i, s)| AnswerOption {
                    letter: option_letter(i),
                    text: format!("{label}-{s}"),
                })
                .collect(),
            gt_answer: Some(self.gt_letter()),
            gt_spans: self.gt_spans.clone(),
        }
    }
}

pub fn option_letter(index: usize) -> char {
    (b'A' + index as u8) as char
}

pub fn option_index(letter: char) -> Option<usize> {
    let c = letter.to_ascii_uppercase();
    c.is_ascii_uppercase().then(|| (c as u8 - b'A') as usize)
}

fn sample_weighted<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn other_category<R: Rng>(rng: &mut R, n: usize, not: u8) -> u8 {
    let c = rng.random_range(0..n - 1) as u8;
    if c >= not {
        c + 1
    } else {
        c
    }
}

fn generate_video(seed: u64, cfg: &EnvConfig) -> SyntheticVideo {
    let mut rng = seeds::rng(seeds::derive(seed, 0));
    let d = cfg.duration_s;
    let n_cat = cfg.num_categories;

    let scene = rng.random_range(0..n_cat) as u8;
    let companion = ((scene as usize + 1) % n_cat) as u8;
    let dominant = loop {
        let c = other_category(&mut rng, n_cat, scene);
        if c != companion {
            break c;
        }
    };

    let event_len = rng.random_range(cfg.event_min_s..=cfg.event_max_s);
    let event_start = rng.random_range(0..=d - event_len);
    let event_span = TimeSpan::new(event_start, event_start + event_len).expect("event fits");
    let mut decoy_spans: Vec<TimeSpan> = Vec::with_capacity(cfg.num_decoys);
    while decoy_spans.len() < cfg.num_decoys {
        let len = rng.random_range(cfg.event_min_s..=cfg.event_max_s);
        let s = rng.random_range(0..=d - len);
        let cand = TimeSpan::new(s, s + len).expect("decoy fits");
        if cand.overlap_s(&event_span) == 0 && decoy_spans.iter().all(|o| o.overlap_s(&cand) == 0) {
            decoy_spans.push(cand);
        }
    }

    let weights: Vec<f64> = (0..n_cat as u8)
        .map(|c| match c {
            c if c == scene || c == companion => 0.0,
            c if c == dominant => cfg.dominant_weight,
            _ => 1.0,
        })
        .collect();
    let mut coarse = Vec::with_capacity(d as usize);
    while (coarse.len() as u64) < d {
        let cat = if rng.random_bool(cfg.background_hint_rate) {
            scene
        } else {
            sample_weighted(&mut rng, &weights) as u8
        };
        let n = cfg.shot_s.min(d - coarse.len() as u64);
        coarse.extend(std::iter::repeat_n(cat, n as usize));
    }
    for t in event_span.start_s()..event_span.end_s() {
        coarse[t as usize] = if rng.random_bool(cfg.p_hint) { scene } else { companion };
    }
    for span in &decoy_spans {
        for t in span.start_s()..span.end_s() {
            if rng.random_bool(cfg.p_decoy) {
                coarse[t as usize] = scene;
            }
        }
    }

    let mut symbols: Vec<u8> = (0..cfg.num_symbols as u8).collect();
    symbols.shuffle(&mut rng);
    let key_symbol = symbols[0];
    let absent_symbols = symbols[1..cfg.num_options].to_vec();
    let fillers = &symbols[cfg.num_options..];
    let mut fine: Vec<u8> = (0..d).map(|_| fillers[rng.random_range(0..fillers.len())]).collect();
    let key_start = rng.random_range(event_span.start_s()..=event_span.end_s() - cfg.key_s);
    for t in key_start..key_start + cfg.key_s {
        fine[t as usize] = key_symbol;
    }

    SyntheticVideo {
        duration_s: d,
        coarse,
        fine,
        event_span,
        key_symbol,
        scene,
        companion,
        dominant,
        decoy_spans,
        absent_symbols,
    }
}

fn category_counts(video: &SyntheticVideo, n_cat: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_cat];
    for &c in &video.coarse {
        counts[c as usize] += 1;
    }
    counts
}

fn generate_question(seed: u64, video: &SyntheticVideo, cfg: &EnvConfig, kind: QuestionKind) -> SynthQuestion {
    let mut rng = seeds::rng(seeds::derive(seed, 1));
    match kind {
        QuestionKind::Local => {
            let mut options = vec![video.key_symbol];
            options.extend_from_slice(&video.absent_symbols);
            options.shuffle(&mut rng);
            let gt_index = options.iter().position(|&s| s == video.key_symbol).expect("key listed");
            SynthQuestion {
                kind,
                options,
                gt_index,
                gt_spans: Some(vec![video.event_span]),
                scene: Some(video.scene),
            }
        }
        QuestionKind::Global => {
            let counts = category_counts(video, cfg.num_categories);
            let best = *counts.iter().max().expect("categories");
            let top = counts.iter().position(|&c| c == best).expect("max exists") as u8;
            // distractors must be strictly less frequent so exactly one option is right
            let mut pool: Vec<u8> = (0..cfg.num_categories as u8)
                .filter(|&c| c != top && counts[c as usize] < best)
                .collect();
            pool.shuffle(&mut rng);
            let mut options = vec![top];
            options.extend(pool.into_iter().take(cfg.num_options - 1));
            options.shuffle(&mut rng);
            let gt_index = options.iter().position(|&c| c == top).expect("top listed");
            SynthQuestion {
                kind,
                options,
                gt_index,
                gt_spans: None,
                scene: None,
            }
        }
    }
}

pub fn draw_kind(seed: u64, cfg: &EnvConfig) -> QuestionKind {
    let mut rng = seeds::rng(seeds::derive(seed, 2));
    if rng.random_bool(cfg.local_fraction) {
        QuestionKind::Local
    } else {
        QuestionKind::Global
    }
}

/// Deterministic instance for `seed`, question kind drawn from
/// `local_fraction`.
pub fn gen_instance(seed: u64, cfg: &EnvConfig) -> (SyntheticVideo, SynthQuestion) {
    gen_instance_of_kind(seed, cfg, draw_kind(seed, cfg))
}

pub fn gen_instance_of_kind(seed: u64, cfg: &EnvConfig, kind: QuestionKind) -> (SyntheticVideo, SynthQuestion) {
    let video = generate_video(seed, cfg);
    let question = generate_question(seed, &video, cfg, kind);
    (video, question)
}

/// Category counts per zoom window, from the fast track's frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastObservation {
    pub window_counts: Vec<Vec<u32>>,
    pub total_counts: Vec<u32>,
    pub frames: usize,
}

pub fn observe_fast(video: &SyntheticVideo, env: &EnvConfig, sampling: &SamplingConfig) -> Result<FastObservation, EnvError> {
    let meta = env.meta("synthetic");
    let ts = plan_fast_sampling(&meta, sampling)?;
    let w = env.num_windows();
    let mut window_counts = vec![vec![0u32; env.num_categories]; w];
    let mut total_counts = vec![0u32; env.num_categories];
    for &t in &ts {
        let sec = (t.floor() as usize).min(video.coarse.len() - 1);
        let cat = video.coarse[sec] as usize;
        let win = (sec as u64 / env.window_s) as usize;
        window_counts[win.min(w - 1)][cat] += 1;
        total_counts[cat] += 1;
    }
    Ok(FastObservation {
        window_counts,
        total_counts,
        frames: ts.len(),
    })
}

/// Fine-symbol counts over the slow frames sampled inside `span`.
pub fn observe_slow(
    video: &SyntheticVideo,
    span: TimeSpan,
    env: &EnvConfig,
    sampling: &SamplingConfig,
) -> Result<Vec<u32>, EnvError> {
    if span.end_s() > video.duration_s {
        return Err(EnvError::Layout(LayoutError::InvalidSpan(format!(
            "{span} outside a {}s video",
            video.duration_s
        ))));
    }
    let clip = plan_slow_sampling(span, sampling);
    let mut counts = vec![0u32; env.num_symbols];
    for t in clip.frame_timestamps {
        counts[video.fine[t.floor() as usize] as usize] += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        let cfg = EnvConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_windows(), 20);
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = EnvConfig::default();
        assert_eq!(gen_instance(0, &cfg), gen_instance(0, &cfg));
        assert_ne!(gen_instance(0, &cfg).0, gen_instance(1, &cfg).0);
    }

    #[test]
    fn key_only_inside_event() {
        let cfg = EnvConfig::default();
        for seed in 0..1000 {
            let (v, q) = gen_instance(seed, &cfg);
            for (t, &s) in v.fine.iter().enumerate() {
                if s == v.key_symbol {
                    assert!(v.event_span.contains_time(t as f64), "seed {seed}");
                }
                assert!(!v.absent_symbols.contains(&s));
            }
            assert!(v.fine.contains(&v.key_symbol));
            assert_eq!(v.decoy_spans.len(), cfg.num_decoys);
            for d in &v.decoy_spans {
                assert_eq!(v.event_span.overlap_s(d), 0);
            }
            assert_eq!(q.options.len(), cfg.num_options);
        }
    }

    #[test]
    fn hint_rate_matches_config() {
        let cfg = EnvConfig::default();
        let (mut hits, mut total) = (0usize, 0usize);
        for seed in 0..1000 {
            let (v, _) = gen_instance(seed, &cfg);
            for t in v.event_span.start_s()..v.event_span.end_s() {
                total += 1;
                hits += (v.coarse[t as usize] == v.scene) as usize;
            }
        }
        let frac = hits as f64 / total as f64;
        assert!((frac - 0.8).abs() <= 0.04, "{frac}");
    }

    #[test]
    fn exactly_one_correct_global_option() {
        let cfg = EnvConfig::default();
        for seed in 0..300 {
            let (v, q) = gen_instance_of_kind(seed, &cfg, QuestionKind::Global);
            let counts = category_counts(&v, cfg.num_categories);
            let gt = counts[q.options[q.gt_index] as usize];
            for (i, &o) in q.options.iter().enumerate() {
                if i != q.gt_index {
                    assert!(counts[o as usize] < gt);
                }
            }
            assert_eq!(q.options.len(), cfg.num_options);
        }
    }

    #[test]
    fn slow_observation_reveals_key_only_in_event() {
        let cfg = EnvConfig::default();
        let s = SamplingConfig::default();
        for seed in 0..200 {
            let (v, _) = gen_instance(seed, &cfg);
            let inside = observe_slow(&v, v.event_span, &cfg, &s).unwrap();
            assert!(inside[v.key_symbol as usize] >= 1);
            for d in &v.decoy_spans {
                let outside = observe_slow(&v, *d, &cfg, &s).unwrap();
                assert_eq!(outside[v.key_symbol as usize], 0);
            }
        }
    }

    #[test]
    fn whole_video_zoom_can_miss_the_key() {
        // 32 frames over 600 s land 18.75 s apart; a 3 s key run fits between them
        let cfg = EnvConfig::default();
        let s = SamplingConfig::default();
        let whole = TimeSpan::new(0, cfg.duration_s).unwrap();
        let stride = cfg.duration_s as f64 / s.max_slow_frames as f64;
        let clip = plan_slow_sampling(whole, &s);
        let mut missed = 0;
        for seed in 0..200 {
            let (v, _) = gen_instance(seed, &cfg);
            let seen = observe_slow(&v, whole, &cfg, &s).unwrap()[v.key_symbol as usize] > 0;
            let key_secs: Vec<usize> = (0..v.fine.len()).filter(|&t| v.fine[t] == v.key_symbol).collect();
            let expected = clip
                .frame_timestamps
                .iter()
                .any(|t| key_secs.contains(&(t.floor() as usize)));
            assert_eq!(seen, expected);
            missed += (!seen) as usize;
        }
        assert!(stride > cfg.key_s as f64);
        assert!(missed > 100, "{missed}");
    }

    #[test]
    fn invalid_slow_span() {
        let cfg = EnvConfig::default();
        let (v, _) = gen_instance(3, &cfg);
        let bad = TimeSpan::new(590, 700).unwrap();
        assert!(observe_slow(&v, bad, &cfg, &SamplingConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = EnvConfig {
            duration_s: 610,
            ..EnvConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = EnvConfig {
            p_hint: 1.5,
            ..EnvConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
