mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{brute_force_reward, GridEpisode};
use duplex_rl::{group_advantages, total_reward, IntervalSet, RewardConfig, StateSequence};

fn reward_of(states: &[u8], user: &[(f64, f64)]) -> f64 {
    let s = StateSequence::new(states.to_vec()).unwrap();
    total_reward(&s, &IntervalSet::from_pairs(user).unwrap(), &RewardConfig::default()).r_total
}

#[test]
fn analytic_scores_equal_millisecond_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..1000 {
        let ep = GridEpisode::random(&mut rng);
        let b = total_reward(&ep.state_sequence(), &ep.user(), &ep.config());
        assert_eq!((b.r_int, b.r_re, b.r_total), brute_force_reward(&ep, 1000, 1000));
    }
}

#[test]
fn grid_oracle_detects_threshold_changes() {
    // the comparison above would be vacuous if both sides ignored the thresholds
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let differing = (0..300)
        .map(|_| GridEpisode::random(&mut rng))
        .filter(|ep| {
            let b = total_reward(&ep.state_sequence(), &ep.user(), &ep.config());
            (b.r_int, b.r_re) != {
                let (i, r, _) = brute_force_reward(ep, 400, 400);
                (i, r)
            }
        })
        .count();
    assert!(differing > 10, "{differing}");
}

#[test]
fn delayed_response_fails_latency_rule() {
    // user stops at 0.96 s; answers at 1.92 s and 2.0 s straddle the 1 s limit
    let user = [(0.0, 0.96)];
    let mut on_time = vec![0u8; 40];
    on_time[24..30].fill(1);
    let mut late = vec![0u8; 40];
    late[25..31].fill(1);
    assert_eq!(reward_of(&on_time, &user), 1.0);
    assert_eq!(reward_of(&late, &user), 0.0);
}

fn arb_states() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, 1..80)
}

fn arb_user() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0usize..80, 1usize..30).prop_map(|(a, l)| (a, a + l)), 0..4)
}

fn to_seconds(frames: &[(usize, usize)], shift: usize) -> Vec<(f64, f64)> {
    frames
        .iter()
        .map(|&(a, b)| ((a + shift) as f64 * 0.08, (b + shift) as f64 * 0.08))
        .collect()
}

proptest! {
    #[test]
    fn scores_bounded_and_product(states in arb_states(), user in arb_user()) {
        let s = StateSequence::new(states).unwrap();
        let b = total_reward(&s, &IntervalSet::from_pairs(&to_seconds(&user, 0)).unwrap(), &RewardConfig::default());
        for x in [b.r_int, b.r_re, b.r_total] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert_eq!(b.r_total, b.r_int * b.r_re);
        prop_assert!(b.r_total <= b.r_int.min(b.r_re));
        prop_assert_eq!(b.overlaps.len(), b.utterances.len());
        prop_assert_eq!(b.latencies.len(), b.utterances.len());
    }

    #[test]
    fn frame_shift_preserves_reward(states in arb_states(), user in arb_user(), shift in 1usize..20) {
        let mut shifted = vec![0u8; shift];
        shifted.extend(&states);
        let a = reward_of(&states, &to_seconds(&user, 0));
        let b = reward_of(&shifted, &to_seconds(&user, shift));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn later_start_never_helps_once_late(states in arb_states(), user in arb_user(), delay in 1usize..10) {
        // move the first utterance later by `delay` frames, keeping its end
        let s = StateSequence::new(states.clone()).unwrap();
        let cfg = RewardConfig::default();
        let set = IntervalSet::from_pairs(&to_seconds(&user, 0)).unwrap();
        let b = total_reward(&s, &set, &cfg);
        let Some(Some(lat)) = b.latencies.first().copied() else { return Ok(()) };
        prop_assume!(lat > cfg.tau_re);
        let first = states.iter().position(|&x| x == 1).unwrap();
        let run_end = states[first..].iter().position(|&x| x == 0).map_or(states.len(), |p| first + p);
        prop_assume!(first + delay < run_end);
        let mut moved = states.clone();
        moved[first..first + delay].fill(0);
        let m = total_reward(&StateSequence::new(moved).unwrap(), &set, &cfg);
        prop_assert!(m.r_re <= b.r_re);
    }

    #[test]
    fn advantages_standardized(rewards in prop::collection::vec(0.0f64..1.0, 2..9)) {
        let a = group_advantages(&rewards).unwrap();
        if a.std >= 1e-8 {
            let g = rewards.len() as f64;
            let mean = a.advantages.iter().sum::<f64>() / g;
            let var = a.advantages.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
        } else {
            prop_assert!(a.advantages.iter().all(|&x| x == 0.0));
        }
    }
}
