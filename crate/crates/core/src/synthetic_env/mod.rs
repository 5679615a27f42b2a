//! Desk-scale stand-in for long videos and the video-language model.
//!
//! Videos are per-second symbol tracks: a coarse scene track visible through
//! the fast frames and a fine detail track visible only inside zoomed clips.
//! A grounded ("local") question asks which detail appears during a scene;
//! the answer is only observable by zooming on the right span. A "global"
//! question asks for the dominant scene and is answerable from the fast
//! track alone.

mod env;
mod experiment;
mod policy;

pub use env::{
    draw_kind, gen_instance, gen_instance_of_kind, observe_fast, observe_slow, option_index, option_letter, EnvConfig,
    EnvError, FastObservation, QuestionKind, SynthQuestion, SyntheticVideo,
};
pub use experiment::{
    batch_plan, evaluate, held_out_instances, run_experiment, run_experiment_with, EvalPolicy, EvalReport,
    ExperimentError, ExperimentResult, MetricsRecord, SummaryRow, Variant,
};
pub use policy::{
    action_distribution, action_logprob_grad, zoom_dim, Decision, Observation, PolicyAction, PolicyError,
    SampleMode, SynthPolicyParams, SyntheticBackend, SyntheticInstance, ANSWER_DIM, DECIDE_DIM,
};
