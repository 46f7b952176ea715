#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use duplex_rl::rollout::{sample_rollout_traced, Rollout};
use duplex_rl::trainer::RolloutGroup;
use duplex_rl::{IntervalSet, Policy, PolicyConfig, RewardConfig, StateSequence, VocabPartition};

pub const FRAME_MS: usize = 80;

/// A random episode with every endpoint on the 80 ms frame grid.
pub struct GridEpisode {
    pub states: Vec<u8>,
    /// user speech as half-open frame ranges
    pub user_frames: Vec<(usize, usize)>,
    pub gap_merge: usize,
}

impl GridEpisode {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let frames = rng.random_range(1..=120);
        let p_switch = rng.random_range(0.02..0.5);
        let mut states = Vec::with_capacity(frames);
        let mut s = rng.random_range(0..2u8);
        for _ in 0..frames {
            if rng.random::<f64>() < p_switch {
                s ^= 1;
            }
            states.push(s);
        }
        let mut user_frames = Vec::new();
        for _ in 0..rng.random_range(0..5) {
            let a = rng.random_range(0..frames + 20);
            let b = a + rng.random_range(1..40);
            user_frames.push((a, b));
        }
        GridEpisode {
            states,
            user_frames,
            gap_merge: rng.random_range(0..3),
        }
    }

    pub fn user(&self) -> IntervalSet {
        let pairs: Vec<(f64, f64)> = self
            .user_frames
            .iter()
            .map(|&(a, b)| (a as f64 * 0.08, b as f64 * 0.08))
            .collect();
        IntervalSet::from_pairs(&pairs).unwrap()
    }

    pub fn state_sequence(&self) -> StateSequence {
        StateSequence::new(self.states.clone()).unwrap()
    }

    pub fn config(&self) -> RewardConfig {
        RewardConfig {
            gap_merge_tokens: self.gap_merge,
            ..Default::default()
        }
    }
}

/// Scores recomputed from 1 ms occupancy cells with integer arithmetic.
/// Returns (r_int, r_re, r_total).
pub fn brute_force_reward(ep: &GridEpisode, tau_int_ms: usize, tau_re_ms: usize) -> (f64, f64, f64) {
    let end = ep
        .user_frames
        .iter()
        .map(|&(_, b)| b)
        .chain([ep.states.len()])
        .max()
        .unwrap()
        * FRAME_MS
        + 1;
    let mut user = vec![false; end];
    for &(a, b) in &ep.user_frames {
        user[a * FRAME_MS..b * FRAME_MS].iter_mut().for_each(|c| *c = true);
    }
    let mut model = vec![false; end];
    for (t, &s) in ep.states.iter().enumerate() {
        if s == 1 {
            model[t * FRAME_MS..(t + 1) * FRAME_MS].iter_mut().for_each(|c| *c = true);
        }
    }
    // close short silent gaps between speaking cells
    let max_gap = ep.gap_merge * FRAME_MS;
    let mut last_on: Option<usize> = None;
    for c in 0..end {
        if model[c] {
            if let Some(l) = last_on {
                if c - l - 1 > 0 && c - l - 1 <= max_gap {
                    model[l + 1..c].iter_mut().for_each(|x| *x = true);
                }
            }
            last_on = Some(c);
        }
    }
    let mut utterances = Vec::new();
    let mut c = 0;
    while c < end {
        if model[c] {
            let a = c;
            while c < end && model[c] {
                c += 1;
            }
            utterances.push((a, c));
        } else {
            c += 1;
        }
    }
    if utterances.is_empty() {
        return (1.0, 0.0, 0.0);
    }
    let (mut int_pass, mut re_pass) = (0usize, 0usize);
    for &(a, b) in &utterances {
        let overlap = (a..b).filter(|&c| user[c]).count();
        if overlap <= tau_int_ms {
            int_pass += 1;
        }
        // a user utterance ends at cell boundary e when cell e-1 is speech and cell e is not
        let last_end = (1..=a).rev().find(|&e| user[e - 1] && !user[e]);
        if let Some(e) = last_end {
            if a - e <= tau_re_ms {
                re_pass += 1;
            }
        }
    }
    let k = utterances.len() as f64;
    let r_int = int_pass as f64 / k;
    let r_re = re_pass as f64 / k;
    (r_int, r_re, r_int * r_re)
}

pub fn tiny_policy(seed: u64, vocab: usize) -> Policy {
    Policy::init(PolicyConfig {
        vocab_size: vocab,
        embed_dim: 8,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 2,
        max_horizon: 32,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// Rollouts sampled from `policy` with random advantages written over the
/// scored ones.
pub fn sampled_group(policy: &Policy, partition: &VocabPartition, seed: u64, g: usize) -> RolloutGroup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.random_range(6..20);
    let bits: Vec<u8> = (0..frames).map(|t| u8::from(t < frames / 2)).collect();
    let mut input = duplex_rl::EpisodeInput::new(bits);
    input.forced_active_frames = rng.random_range(0..3);
    let rollouts: Vec<Rollout> = (0..g)
        .map(|i| sample_rollout_traced(policy, &input, partition, 1.0, seed * 100 + i as u64).unwrap().0)
        .collect();
    let user = IntervalSet::from_pairs(&[(0.0, (frames / 2) as f64 * 0.08)]).unwrap();
    let mut group = RolloutGroup::score(input, &user, rollouts, &RewardConfig::default()).unwrap();
    for a in group.advantages.advantages.iter_mut() {
        *a = rng.random_range(-1.5..1.5);
    }
    group
}

/// Gradient of -(1/N) sum_i sum_t A_i log p(s_it) with logit derivatives
/// derived by hand and pushed through the policy's backward pass.
pub fn logprob_surrogate_grad(policy: &Policy, group: &RolloutGroup, partition: &VocabPartition) -> Vec<f64> {
    let v = policy.config().vocab_size;
    let n: usize = group.rollouts.iter().map(|r| r.trainable_frames().len()).sum();
    let mut grads = vec![0.0; policy.num_params()];
    for (i, r) in group.rollouts.iter().enumerate() {
        let trace = policy.trace(&group.episode, &r.tokens).unwrap();
        let logits = trace.logits();
        let mut d = vec![0.0; r.len() * v];
        for t in r.trainable_frames() {
            let z = logits.frame(t);
            let mut active = 0.0;
            let mut inactive = 0.0;
            for (id, &x) in z.iter().enumerate() {
                if partition.is_pad(id) {
                    inactive += x;
                } else {
                    active += x;
                }
            }
            let p_active = 1.0 / (1.0 + (inactive - active).exp());
            let s = if partition.is_pad(r.tokens[t]) { 0.0 } else { 1.0 };
            // d log p(s) / d margin = s - p_active
            let dm = -group.advantages.advantages[i] * (s - p_active) / n as f64;
            for id in 0..v {
                d[t * v + id] = if partition.is_pad(id) { -dm } else { dm };
            }
        }
        policy.backward(&trace, &d, &mut grads).unwrap();
    }
    grads
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}
