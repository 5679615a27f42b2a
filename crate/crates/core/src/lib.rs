//! Slow-fast video context management, multi-step zoom-in reasoning and
//! decoupled group-relative policy optimization.
//!
//! * [`layout`]: fast-track sampling, zoomed slow clips, token accounting and
//!   the prompt template
//! * [`reasoning`]: the step controller and model backends
//! * [`rewards`]: answer and zoom-span rewards
//! * [`grpo`]: rollout groups, advantages and the policy update
//! * [`synthetic_env`]: symbolic two-resolution videos and a trainable policy
//! * [`data_pipeline`]: chain-of-thought record cleaning and sample assembly

pub mod config;
pub mod data_pipeline;
pub mod grpo;
pub mod layout;
pub mod reasoning;
pub mod rewards;
pub mod seeds;
pub mod synthetic_env;
