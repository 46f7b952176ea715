//! Rolling a policy out on scenario specs and collecting what metrics need.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::EpisodeResult;
use crate::model::Policy;
use crate::reward::{segment_utterances, total_reward, RewardBreakdown, RewardConfig};
use crate::rollout::sample_rollout;
use crate::scenario::ScenarioSpec;
use crate::vocab::VocabPartition;

/// Temperature used for evaluation rollouts.
pub const EVAL_TEMPERATURE: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedEpisode {
    pub result: EpisodeResult,
    pub reward: RewardBreakdown,
    pub tokens: Vec<usize>,
}

/// Non-pad tokens after the forced prompt, rendered as words.
pub fn transcript(tokens: &[usize], prompt_frames: usize, partition: &VocabPartition) -> Vec<String> {
    tokens
        .iter()
        .skip(prompt_frames)
        .filter(|&&t| !partition.is_pad(t))
        .map(|t| format!("w{t}"))
        .collect()
}

pub fn evaluate_specs(
    policy: &Policy,
    specs: &[ScenarioSpec],
    partition: &VocabPartition,
    reward: &RewardConfig,
    temperature: f64,
    seed: u64,
) -> Result<Vec<EvaluatedEpisode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs
        .iter()
        .map(|spec| {
            let input = spec.episode_input(reward.delta_t);
            let r = sample_rollout(policy, &input, partition, temperature, rng.next_u64())?;
            let model = segment_utterances(&r.states, reward);
            Ok(EvaluatedEpisode {
                result: EpisodeResult::new(spec, model),
                reward: total_reward(&r.states, &spec.user, reward),
                tokens: r.tokens,
            })
        })
        .collect()
}

pub fn mean_total_reward(episodes: &[EvaluatedEpisode]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    episodes.iter().map(|e| e.reward.r_total).sum::<f64>() / episodes.len() as f64
}
