//! Reinforcement learning of speak/silence timing for full-duplex dialogue
//! agents.
//!
//! A token-level policy is projected onto a binary speak/silence state by
//! summing token logits per vocabulary subset; the resulting state policy is
//! trained with group-relative policy optimization against rule-based
//! interruption and response-latency rewards. A raw-token GRPO baseline is
//! provided for comparison.

pub mod checkpoint;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod interval;
pub mod metrics;
pub mod model;
pub mod projection;
pub mod reward;
pub mod rollout;
pub mod scenario;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use interval::{intersect_duration, normalize_intervals, IntervalSet, TimeInterval};
pub use model::{EpisodeInput, FrameLogits, Policy, PolicyConfig};
pub use projection::{
    binary_kl, categorical_kl, project_logits, state_distribution, state_log_prob, StateDistribution, StateLogits,
};
pub use reward::{group_advantages, total_reward, AdvantageSet, RewardBreakdown, RewardConfig};
pub use vocab::{extract_states, StateSequence, TokenSequence, VocabPartition};
