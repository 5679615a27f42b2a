//! Python bindings. Structured results come back as plain dicts and lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use engine::config::SlowfastConfig;
use engine::data_pipeline::{self, CoTRecord, GroundTruthEntry, GroundTruthIndex};
use engine::grpo;
use engine::layout::{self, SamplingConfig, SlowFastLayout, TimeSpan, VideoMeta};
use engine::reasoning::{self, QuestionSpec, ScriptedBackend};
use engine::rewards;
use engine::synthetic_env::{self, Variant};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn span(s: (u64, u64)) -> PyResult<TimeSpan> {
    TimeSpan::new(s.0, s.1).map_err(value_err)
}

fn build_layout(duration_s: f64, clips: &[(u64, u64)], source_id: &str, cfg: &SamplingConfig) -> PyResult<SlowFastLayout> {
    let meta = VideoMeta::new(duration_s, source_id).map_err(value_err)?;
    let mut out = SlowFastLayout::new(meta, cfg).map_err(value_err)?;
    for &c in clips {
        out = layout::append_zoom(&out, span(c)?, cfg).map_err(value_err)?;
    }
    Ok(out)
}

/// Prompt line for a video of `duration_s` seconds and its zoomed clips.
#[pyfunction]
#[pyo3(signature = (duration_s, clips=Vec::new(), source_id="video"))]
fn render_prompt(duration_s: f64, clips: Vec<(u64, u64)>, source_id: &str) -> PyResult<String> {
    let l = build_layout(duration_s, &clips, source_id, &SamplingConfig::default())?;
    Ok(layout::render_prompt(&l))
}

/// Whole-second duration and ordered clip spans of a rendered prompt.
#[pyfunction]
fn parse_rendered_layout(text: &str) -> PyResult<(u64, Vec<(u64, u64)>)> {
    let (t, spans) = layout::parse_rendered_layout(text).map_err(value_err)?;
    Ok((t, spans.iter().map(|s| (s.start_s(), s.end_s())).collect()))
}

/// Fast-track frame timestamps.
#[pyfunction]
#[pyo3(signature = (duration_s, fps_fast=1.0, max_fast_frames=768))]
fn plan_fast_sampling(duration_s: f64, fps_fast: f64, max_fast_frames: u64) -> PyResult<Vec<f64>> {
    let cfg = SamplingConfig {
        fps_fast,
        max_fast_frames,
        ..SamplingConfig::default()
    };
    cfg.validate().map_err(value_err)?;
    let meta = VideoMeta::new(duration_s, "video").map_err(value_err)?;
    layout::plan_fast_sampling(&meta, &cfg).map_err(value_err)
}

/// Visual tokens of the fast track plus every slow clip.
#[pyfunction]
#[pyo3(signature = (duration_s, clips=Vec::new()))]
fn token_cost(duration_s: f64, clips: Vec<(u64, u64)>) -> PyResult<u64> {
    let cfg = SamplingConfig::default();
    let l = build_layout(duration_s, &clips, "video", &cfg)?;
    Ok(layout::token_cost(&l, &cfg))
}

#[pyfunction]
fn iou(a: (u64, u64), b: (u64, u64)) -> PyResult<f64> {
    Ok(rewards::iou(&span(a)?, &span(b)?))
}

/// 1.0 when `pred` overlaps any ground-truth span, else 0.0.
#[pyfunction]
fn zoom_reward(pred: (u64, u64), gt_spans: Vec<(u64, u64)>) -> PyResult<f64> {
    let gt = gt_spans.into_iter().map(span).collect::<PyResult<Vec<_>>>()?;
    rewards::zoom_reward(&span(pred)?, &gt).map_err(value_err)
}

#[pyfunction]
fn group_advantages(rewards: Vec<f64>) -> PyResult<Vec<f64>> {
    grpo::group_advantages(&rewards).map_err(value_err)
}

/// The action a raw reasoning step declares.
#[pyfunction]
fn parse_step(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &reasoning::parse_step(text))
}

/// Text with times rewritten to whole seconds, and the tokens that could not be.
#[pyfunction]
fn normalize_times(text: &str) -> (String, Vec<String>) {
    let n = data_pipeline::normalize_times(text);
    (n.text, n.unparseable)
}

/// Runs one episode against scripted responses; returns the trace and,
/// when the question carries an answer, its rewards.
#[pyfunction]
#[pyo3(signature = (responses, question, duration_s, seed=0, max_steps=None))]
fn run_scripted_episode(
    py: Python<'_>,
    responses: Vec<String>,
    question: &Bound<'_, PyAny>,
    duration_s: f64,
    seed: u64,
    max_steps: Option<usize>,
) -> PyResult<Py<PyAny>> {
    let question: QuestionSpec = from_py(py, question)?;
    let mut cfg = SamplingConfig::default();
    if let Some(m) = max_steps {
        cfg.max_steps = m;
    }
    let meta = VideoMeta::new(duration_s, "video").map_err(value_err)?;
    let mut backend = ScriptedBackend::new(responses);
    let trace = reasoning::run_episode(&mut backend, &meta, &question, &cfg, seed).map_err(value_err)?;
    let rewards = match question.gt_answer {
        Some(_) => Some(rewards::assign_trace_rewards(&trace, &question).map_err(value_err)?),
        None => None,
    };
    to_py(py, &serde_json::json!({ "trace": trace, "rewards": rewards }))
}

/// Cleans CoT records; returns `(kept, report)`.
#[pyfunction]
#[pyo3(signature = (records, ground_truth=None))]
fn filter_cots(
    py: Python<'_>,
    records: &Bound<'_, PyAny>,
    ground_truth: Option<&Bound<'_, PyAny>>,
) -> PyResult<(Py<PyAny>, Py<PyAny>)> {
    let records: Vec<CoTRecord> = from_py(py, records)?;
    let gt = match ground_truth {
        Some(g) => GroundTruthIndex::new(from_py::<Vec<GroundTruthEntry>>(py, g)?),
        None => GroundTruthIndex::default(),
    };
    let (kept, report) = data_pipeline::clean_records(records, &gt, &Default::default());
    Ok((to_py(py, &kept)?, to_py(py, &report)?))
}

/// Trains the synthetic policy under `variant` ("outcome", "decoupled" or
/// "mixed"). `config` is TOML text overlaid on the defaults.
#[pyfunction]
#[pyo3(signature = (variant, seed=0, updates=None, config=None))]
fn run_experiment(
    py: Python<'_>,
    variant: &str,
    seed: u64,
    updates: Option<usize>,
    config: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let variant: Variant = variant.parse().map_err(PyValueError::new_err)?;
    let mut cfg = match config {
        Some(text) => SlowfastConfig::from_toml_str(text).map_err(value_err)?,
        None => SlowfastConfig::default(),
    };
    if let Some(u) = updates {
        cfg.train.updates = u;
    }
    let result = py
        .detach(|| synthetic_env::run_experiment(variant, &cfg.train, &cfg.env, &cfg.layout, seed))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(
        py,
        &serde_json::json!({
            "variant": result.variant,
            "seed": result.seed,
            "final_eval": result.final_eval,
            "summary": result.summary(),
            "params": result.params,
        }),
    )
}

#[pymodule]
fn slowfast(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_rendered_layout, m)?)?;
    m.add_function(wrap_pyfunction!(plan_fast_sampling, m)?)?;
    m.add_function(wrap_pyfunction!(token_cost, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(zoom_reward, m)?)?;
    m.add_function(wrap_pyfunction!(group_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(parse_step, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_times, m)?)?;
    m.add_function(wrap_pyfunction!(run_scripted_episode, m)?)?;
    m.add_function(wrap_pyfunction!(filter_cots, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("ANSWER_PREFIX", reasoning::ANSWER_PREFIX)?;
    m.add("ZOOM_PREFIX", reasoning::ZOOM_PREFIX)?;
    Ok(())
}
