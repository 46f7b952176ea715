//! Autoregressive sampling of token rollouts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EpisodeInput, Policy, Trace};
use crate::projection::{log_softmax, project_unchecked, state_distribution};
use crate::vocab::{extract_states, StateSequence, VocabPartition};

/// Temperatures below this sample greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// A sampled trajectory plus the log-probabilities of what was sampled under
/// the sampling parameters. Log-probabilities are those of the untempered
/// policy, which is what the training objectives compare against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    pub states: StateSequence,
    pub state_logprobs_old: Vec<f64>,
    pub token_logprobs_old: Vec<f64>,
    /// Leading frames that were forced rather than sampled.
    pub prompt_frames: usize,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Frames that count towards the training objectives.
    pub fn trainable_frames(&self) -> std::ops::Range<usize> {
        self.prompt_frames.min(self.len())..self.len()
    }
}

/// Speech tokens forced during an episode's prompt phase.
pub fn prompt_tokens(partition: &VocabPartition, frames: usize, content_seed: Option<u64>) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(content_seed.unwrap_or(0));
    let ids = partition.non_pad_ids();
    (0..frames).map(|_| ids[rng.random_range(0..ids.len())]).collect()
}

fn pick(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature < GREEDY_TEMPERATURE {
        // lowest id wins ties
        let mut best = 0;
        for (v, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = v;
            }
        }
        return best;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (v, w) in weights.iter().enumerate() {
        if u < *w {
            return v;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Sample one rollout over the episode's full horizon, keeping the forward
/// trace so a training step can reuse it at the sampling parameters.
pub fn sample_rollout_traced(
    policy: &Policy,
    episode: &EpisodeInput,
    partition: &VocabPartition,
    temperature: f64,
    rng_seed: u64,
) -> Result<(Rollout, Trace)> {
    if partition.vocab_size() != policy.config().vocab_size {
        return Err(Error::Shape {
            expected: policy.config().vocab_size,
            got: partition.vocab_size(),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let horizon = episode.horizon();
    let forced = prompt_tokens(partition, episode.forced_active_frames.min(horizon), episode.content_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut trace = policy.new_trace(horizon);
    let mut tokens = Vec::with_capacity(horizon);
    let mut state_lp = Vec::with_capacity(horizon);
    let mut token_lp = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let logits = policy.step(&mut trace, tokens.last().copied(), episode.user_activity_bits[t])?;
        let token = match forced.get(t) {
            Some(&f) => f,
            None => pick(logits, temperature, &mut rng),
        };
        let dist = state_distribution(project_unchecked(logits, partition));
        state_lp.push(dist.log_prob(partition.state_of(token)?));
        token_lp.push(log_softmax(logits)[token]);
        tokens.push(token);
    }
    let states = extract_states(&tokens, partition)?;
    Ok((
        Rollout {
            tokens,
            states,
            state_logprobs_old: state_lp,
            token_logprobs_old: token_lp,
            prompt_frames: forced.len(),
        },
        trace,
    ))
}

pub fn sample_rollout(
    policy: &Policy,
    episode: &EpisodeInput,
    partition: &VocabPartition,
    temperature: f64,
    rng_seed: u64,
) -> Result<Rollout> {
    sample_rollout_traced(policy, episode, partition, temperature, rng_seed).map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PolicyConfig;
    use crate::projection::state_log_prob;

    fn setup() -> (Policy, VocabPartition, EpisodeInput) {
        let pol = Policy::init(PolicyConfig {
            vocab_size: 6,
            embed_dim: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2,
            max_horizon: 40,
            seed: 5,
        })
        .unwrap();
        let part = VocabPartition::new(6, [0]).unwrap();
        let bits = (0..30).map(|t| u8::from(t < 12)).collect();
        (pol, part, EpisodeInput::new(bits))
    }

    #[test]
    fn deterministic_under_seed() {
        let (pol, part, ep) = setup();
        let a = sample_rollout(&pol, &ep, &part, 1.0, 17).unwrap();
        let b = sample_rollout(&pol, &ep, &part, 1.0, 17).unwrap();
        assert_eq!(a, b);
        let c = sample_rollout(&pol, &ep, &part, 1.0, 18).unwrap();
        assert_ne!(a.tokens, c.tokens);
        assert_eq!(a.len(), 30);
    }

    #[test]
    fn recorded_logprobs_match_recomputation() {
        let (pol, part, ep) = setup();
        let r = sample_rollout(&pol, &ep, &part, 1.0, 3).unwrap();
        let logits = pol.forward(&ep, &r.tokens).unwrap();
        for t in 0..r.len() {
            let s = r.states.as_slice()[t];
            let lp = state_log_prob(logits.frame(t), &part, s).unwrap();
            assert!((lp - r.state_logprobs_old[t]).abs() < 1e-9);
            let tok = log_softmax(logits.frame(t))[r.tokens[t]];
            assert!((tok - r.token_logprobs_old[t]).abs() < 1e-9);
            assert!(r.state_logprobs_old[t] <= 0.0 && r.token_logprobs_old[t] <= 0.0);
        }
    }

    #[test]
    fn greedy_picks_argmax() {
        let (pol, part, ep) = setup();
        let r = sample_rollout(&pol, &ep, &part, 1e-7, 1).unwrap();
        let logits = pol.forward(&ep, &r.tokens).unwrap();
        for t in 0..r.len() {
            let row = logits.frame(t);
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(row[r.tokens[t]], best);
        }
        assert_eq!(r, sample_rollout(&pol, &ep, &part, 1e-7, 99).unwrap());
    }

    #[test]
    fn prompt_frames_are_forced_speech() {
        let (pol, part, mut ep) = setup();
        ep.forced_active_frames = 7;
        ep.content_seed = Some(12);
        let r = sample_rollout(&pol, &ep, &part, 1.0, 2).unwrap();
        assert!(r.states.as_slice()[..7].iter().all(|&s| s == 1));
        assert_eq!(r.prompt_frames, 7);
        assert_eq!(r.trainable_frames(), 7..30);
        assert_eq!(&r.tokens[..7], &prompt_tokens(&part, 7, Some(12))[..]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (pol, part, ep) = setup();
        assert!(sample_rollout(&pol, &ep, &part, 0.0, 1).is_err());
        let wrong = VocabPartition::new(4, [0]).unwrap();
        assert!(matches!(sample_rollout(&pol, &ep, &wrong, 1.0, 1), Err(Error::Shape { .. })));
        let long = EpisodeInput::new(vec![0; 41]);
        assert!(matches!(sample_rollout(&pol, &long, &part, 1.0, 1), Err(Error::Horizon { .. })));
    }
}
