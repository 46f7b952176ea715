//! Rule-based temporal rewards.
//!
//! Model states are cut into utterances and mapped to seconds with a fixed
//! frame duration. Each utterance is checked for how long it talks over the
//! user (interruption) and how long after the user's last finished utterance
//! it starts (response). The sequence reward is the product of the two pass
//! rates, and rewards are standardized within each sampled group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::{intersect_duration, IntervalSet, TimeInterval};
use crate::vocab::{StateSequence, ACTIVE};

/// Below this group standard deviation all advantages are zero.
pub const MIN_REWARD_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Seconds per generated frame.
    pub delta_t: f64,
    /// Overlap tolerance in seconds.
    pub tau_int: f64,
    /// Latency limit in seconds.
    pub tau_re: f64,
    /// Active runs separated by at most this many silent frames form one utterance.
    pub gap_merge_tokens: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            delta_t: 0.08,
            tau_int: 1.0,
            tau_re: 1.0,
            gap_merge_tokens: 0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return Err(Error::Config(format!("delta_t must be positive, got {}", self.delta_t)));
        }
        if !(self.tau_int >= 0.0) || !(self.tau_re >= 0.0) {
            return Err(Error::Config("reward thresholds must be non-negative".into()));
        }
        Ok(())
    }

    /// Start time of frame `t`.
    pub fn frame_time(&self, t: usize) -> f64 {
        t as f64 * self.delta_t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub utterances: IntervalSet,
    pub overlaps: Vec<f64>,
    pub latencies: Vec<Option<f64>>,
    pub r_int: f64,
    pub r_re: f64,
    pub r_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub rewards: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

/// Maximal active runs as `[first, last]` frame index pairs, after closing
/// gaps of at most `gap_merge` silent frames.
pub fn active_runs(states: &[u8], gap_merge: usize) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut t = 0;
    while t < states.len() {
        if states[t] != ACTIVE {
            t += 1;
            continue;
        }
        let a = t;
        while t < states.len() && states[t] == ACTIVE {
            t += 1;
        }
        let b = t - 1;
        match runs.last_mut() {
            Some(last) if a - last.1 - 1 <= gap_merge => last.1 = b,
            _ => runs.push((a, b)),
        }
    }
    runs
}

pub fn segment_utterances(states: &StateSequence, cfg: &RewardConfig) -> IntervalSet {
    let raw = active_runs(states.as_slice(), cfg.gap_merge_tokens)
        .into_iter()
        .map(|(a, b)| {
            TimeInterval::new(cfg.frame_time(a), cfg.frame_time(b + 1))
                .expect("frame-aligned run has positive length")
        })
        .collect();
    IntervalSet::new(raw)
}

pub fn compute_overlaps(utterances: &IntervalSet, user: &IntervalSet) -> Vec<f64> {
    utterances.iter().map(|u| intersect_duration(u, user)).collect()
}

/// Start of each utterance minus the latest user end at or before it; `None`
/// when the user has not finished any utterance yet.
pub fn compute_latencies(utterances: &IntervalSet, user: &IntervalSet) -> Vec<Option<f64>> {
    utterances
        .iter()
        .map(|u| user.last_end_at_or_before(u.start()).map(|e| u.start() - e))
        .collect()
}

pub fn interruption_score(overlaps: &[f64], cfg: &RewardConfig) -> Result<f64> {
    if overlaps.is_empty() {
        return Err(Error::EmptyInput("interruption score needs at least one utterance"));
    }
    let pass = overlaps.iter().filter(|&&o| o <= cfg.tau_int).count();
    Ok(pass as f64 / overlaps.len() as f64)
}

pub fn response_score(latencies: &[Option<f64>], cfg: &RewardConfig) -> Result<f64> {
    if latencies.is_empty() {
        return Err(Error::EmptyInput("response score needs at least one utterance"));
    }
    let pass = latencies
        .iter()
        .filter(|l| matches!(l, Some(v) if *v <= cfg.tau_re))
        .count();
    Ok(pass as f64 / latencies.len() as f64)
}

/// Scores already-segmented model utterances. With no utterance at all the
/// model never interrupted (`r_int = 1`) but never responded either
/// (`r_re = 0`), so silence earns nothing.
pub fn score_utterances(
    utterances: IntervalSet,
    user: &IntervalSet,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let overlaps = compute_overlaps(&utterances, user);
    let latencies = compute_latencies(&utterances, user);
    let (r_int, r_re) = if utterances.is_empty() {
        (1.0, 0.0)
    } else {
        (
            interruption_score(&overlaps, cfg).expect("non-empty"),
            response_score(&latencies, cfg).expect("non-empty"),
        )
    };
    RewardBreakdown {
        utterances,
        overlaps,
        latencies,
        r_int,
        r_re,
        r_total: r_int * r_re,
    }
}

pub fn total_reward(states: &StateSequence, user: &IntervalSet, cfg: &RewardConfig) -> RewardBreakdown {
    score_utterances(segment_utterances(states, cfg), user, cfg)
}

/// Standardize group rewards with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Result<AdvantageSet> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupSize(g));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::numeric("group rewards", None));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    let advantages = if std < MIN_REWARD_STD {
        vec![0.0; g]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(AdvantageSet {
        rewards: rewards.to_vec(),
        mean,
        std,
        advantages,
    })
}

/// Keep a clip when user speech covers at least `threshold` of its duration.
pub fn density_filter(user: &IntervalSet, clip_duration: f64, threshold: f64) -> Result<bool> {
    if !(clip_duration > 0.0) {
        return Err(Error::Config(format!("clip duration must be positive, got {clip_duration}")));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("density threshold {threshold} outside [0, 1]")));
    }
    let speech = user.clipped(0.0, clip_duration).measure();
    Ok(speech / clip_duration >= threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::normalize_intervals;

    fn states(v: &[u8]) -> StateSequence {
        StateSequence::new(v.to_vec()).unwrap()
    }

    fn set(pairs: &[(f64, f64)]) -> IntervalSet {
        normalize_intervals(pairs).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn segmentation() {
        let cfg = RewardConfig::default();
        let u = segment_utterances(&states(&[0, 1, 1, 0, 1]), &cfg);
        assert_eq!(u.len(), 2);
        let got: Vec<f64> = u.to_pairs().concat();
        assert!(close(&got, &[0.08, 0.24, 0.32, 0.40]));

        assert!(segment_utterances(&states(&[0, 0, 0]), &cfg).is_empty());

        let merged = RewardConfig { gap_merge_tokens: 1, ..cfg };
        let u = segment_utterances(&states(&[1, 0, 1]), &merged);
        assert_eq!(u.len(), 1);
        assert!(close(&u.to_pairs()[0], &[0.0, 3.0 * 0.08]));
        // a two-frame gap survives a one-frame merge tolerance
        assert_eq!(segment_utterances(&states(&[1, 0, 0, 1]), &merged).len(), 2);
    }

    #[test]
    fn overlaps_and_latencies() {
        assert_eq!(compute_overlaps(&set(&[(1., 3.)]), &set(&[(2., 5.)])), vec![1.0]);
        assert_eq!(
            compute_overlaps(&set(&[(0.5, 2.5)]), &set(&[(0., 1.), (2., 3.)])),
            vec![1.0]
        );
        assert!(compute_overlaps(&IntervalSet::empty(), &set(&[(0., 1.)])).is_empty());

        assert_eq!(compute_latencies(&set(&[(2.5, 3.)]), &set(&[(0., 2.)])), vec![Some(0.5)]);
        assert_eq!(compute_latencies(&set(&[(0.5, 0.8)]), &set(&[(1., 2.)])), vec![None]);
        let l = compute_latencies(&set(&[(2.1, 2.5), (6.0, 7.0)]), &set(&[(0., 2.), (3., 5.)]));
        assert!((l[0].unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(l[1], Some(1.0));
    }

    #[test]
    fn scores() {
        let cfg = RewardConfig::default();
        assert_eq!(interruption_score(&[0.5, 1.5], &cfg).unwrap(), 0.5);
        assert_eq!(interruption_score(&[1.0], &cfg).unwrap(), 1.0);
        assert_eq!(interruption_score(&[0., 0., 0.], &cfg).unwrap(), 1.0);
        assert!(interruption_score(&[], &cfg).is_err());

        assert_eq!(response_score(&[Some(0.5), None], &cfg).unwrap(), 0.5);
        assert_eq!(response_score(&[Some(1.0)], &cfg).unwrap(), 1.0);
        assert_eq!(response_score(&[Some(2.0), Some(3.0)], &cfg).unwrap(), 0.0);
        assert!(response_score(&[], &cfg).is_err());
    }

    #[test]
    fn total_reward_examples() {
        let cfg = RewardConfig { delta_t: 0.1, ..Default::default() };
        let user = set(&[(0.0, 2.0)]);
        let silent = total_reward(&states(&[0; 40]), &user, &cfg);
        assert_eq!((silent.r_int, silent.r_re, silent.r_total), (1.0, 0.0, 0.0));

        // starts 0.3 s after a user end and talks over the next user turn for 0.2 s
        let mut s = vec![0u8; 40];
        s[18..30].fill(1);
        let user3 = set(&[(0.0, 1.5), (2.0, 2.2)]);
        let b = total_reward(&states(&s), &user3, &cfg);
        assert!((b.overlaps[0] - 0.2).abs() < 1e-12);
        assert!((b.latencies[0].unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(b.r_total, 1.0);

        // first utterance passes both rules, second talks over the user and starts late
        let user4 = set(&[(0.0, 1.0), (3.0, 6.0)]);
        let mut s = vec![0u8; 60];
        s[12..20].fill(1);
        s[41..58].fill(1);
        let b = total_reward(&states(&s), &user4, &cfg);
        assert_eq!(b.overlaps.len(), 2);
        assert_eq!((b.r_int, b.r_re, b.r_total), (0.5, 0.5, 0.25));
    }

    #[test]
    fn advantages() {
        let a = group_advantages(&[0.5, 1.0]).unwrap();
        assert_eq!(a.advantages, vec![-1.0, 1.0]);
        assert_eq!((a.mean, a.std), (0.75, 0.25));
        assert_eq!(group_advantages(&[0.7, 0.7, 0.7]).unwrap().advantages, vec![0.0; 3]);
        let a = group_advantages(&[0.0, 0.5, 1.0]).unwrap();
        assert!(close(&a.advantages, &[-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589]));
        assert!(matches!(group_advantages(&[1.0]), Err(Error::GroupSize(1))));
    }

    #[test]
    fn density() {
        assert!(density_filter(&set(&[(0., 60.)]), 120.0, 0.5).unwrap());
        assert!(!density_filter(&set(&[(0., 10.)]), 120.0, 0.5).unwrap());
        assert!(!density_filter(&IntervalSet::empty(), 120.0, 0.5).unwrap());
        // speech past the clip end is not counted
        assert!(!density_filter(&set(&[(100., 200.)]), 120.0, 0.5).unwrap());
        assert!(density_filter(&set(&[(0., 1.)]), 0.0, 0.5).is_err());
        assert!(density_filter(&set(&[(0., 1.)]), 1.0, 1.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        assert!(RewardConfig { delta_t: 0.0, ..Default::default() }.validate().is_err());
        assert!(RewardConfig { tau_re: -1.0, ..Default::default() }.validate().is_err());
        let cfg: RewardConfig = serde_json::from_str(r#"{"tau_int": 0.5}"#).unwrap();
        assert_eq!((cfg.tau_int, cfg.tau_re, cfg.delta_t), (0.5, 1.0, 0.08));
    }
}
