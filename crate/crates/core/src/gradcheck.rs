//! Finite-difference verification of the training objectives' gradients.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{EpisodeInput, FrameLogits, Policy, PolicyConfig};
use crate::reward::RewardConfig;
use crate::rollout::sample_rollout;
use crate::trainer::{loss_from_logits, objective_loss_and_grad, Objective, RolloutGroup, TrainConfig};
use crate::interval::IntervalSet;
use crate::scenario::intervals_from_bits;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Central-difference step.
    pub h: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding are compared absolutely.
    pub floor: f64,
    pub samples_per_tensor: usize,
    pub within_set_tolerance: f64,
    /// Scale one tensor's analytic gradient; used to confirm a broken
    /// gradient is detected.
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            h: 1e-3,
            tolerance: 1e-4,
            floor: 1e-6,
            samples_per_tensor: 3,
            within_set_tolerance: 1e-9,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Analytic and numeric values at the worst entry.
    pub worst: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveCheck {
    pub objective: Objective,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tensors: Vec<TensorError>,
    /// Largest gap between logit gradients of tokens in the same vocabulary
    /// subset at the same frame. Only meaningful for the projected objective.
    pub within_set_max_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<ObjectiveCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// A small randomized problem: a policy away from both the sampling and the
/// reference parameters, so ratio and KL terms are both active.
pub struct Problem {
    pub policy: Policy,
    pub reference: Policy,
    pub group: RolloutGroup,
    pub cfg: TrainConfig,
}

pub fn random_problem(seed: u64) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pcfg = PolicyConfig {
        vocab_size: 6,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        max_horizon: 16,
        seed: rng.next_u64(),
    };
    let cfg = TrainConfig {
        kl_beta: 0.1,
        group_size: 3,
        pad_ids: vec![0, 1],
        ..Default::default()
    };
    let partition = cfg.partition(pcfg.vocab_size)?;
    let old = Policy::init(pcfg.clone())?;
    let mut noisy = |p: &Policy, sd: f64| -> Result<Policy> {
        let mut q = p.clone();
        let vals: Vec<f64> = q.params().iter().map(|x| x + sd * (rng.random::<f64>() - 0.5)).collect();
        q.set_params(&vals)?;
        Ok(q)
    };
    // larger weights make the logits less uniform
    let old = noisy(&old, 0.4)?;
    let policy = noisy(&old, 0.05)?;
    let reference = noisy(&old, 0.05)?;
    let frames = 12;
    let bits: Vec<u8> = (0..frames).map(|_| u8::from(rng.random_bool(0.5))).collect();
    let user = intervals_from_bits(&bits, RewardConfig::default().delta_t);
    let mut input = EpisodeInput::new(bits);
    input.forced_active_frames = 2;
    input.content_seed = Some(rng.random_range(0..1024));
    let rollouts = (0..cfg.group_size)
        .map(|_| sample_rollout(&old, &input, &partition, 1.0, rng.next_u64()))
        .collect::<Result<Vec<_>>>()?;
    let mut group = RolloutGroup::score(input, &user_or_dummy(user), rollouts, &cfg.reward)?;
    group.advantages.advantages = (0..cfg.group_size).map(|_| rng.random_range(-1.5..1.5)).collect();
    Ok(Problem {
        policy,
        reference,
        group,
        cfg,
    })
}

fn user_or_dummy(user: IntervalSet) -> IntervalSet {
    if user.is_empty() {
        IntervalSet::from_pairs(&[(0.0, 0.08)]).expect("valid interval")
    } else {
        user
    }
}

fn loss_at(obj: Objective, p: &Problem, policy: &Policy) -> Result<f64> {
    let partition = p.cfg.partition(policy.config().vocab_size)?;
    let cur: Vec<FrameLogits> = p
        .group
        .rollouts
        .iter()
        .map(|r| policy.forward(&p.group.episode, &r.tokens))
        .collect::<Result<_>>()?;
    let reference: Vec<FrameLogits> = p
        .group
        .rollouts
        .iter()
        .map(|r| p.reference.forward(&p.group.episode, &r.tokens))
        .collect::<Result<_>>()?;
    Ok(loss_from_logits(obj, &p.group, &cur, &reference, &partition, p.cfg.kl_beta)?.0.loss)
}

/// Largest within-subset spread of the objective's logit gradients.
pub fn within_set_spread(obj: Objective, p: &Problem) -> Result<f64> {
    let partition = p.cfg.partition(p.policy.config().vocab_size)?;
    let fwd = |pol: &Policy| -> Result<Vec<FrameLogits>> {
        p.group
            .rollouts
            .iter()
            .map(|r| pol.forward(&p.group.episode, &r.tokens))
            .collect()
    };
    let (_, dlogits) = loss_from_logits(obj, &p.group, &fwd(&p.policy)?, &fwd(&p.reference)?, &partition, p.cfg.kl_beta)?;
    let v = partition.vocab_size();
    let mut worst = 0.0f64;
    for d in &dlogits {
        for frame in d.chunks_exact(v) {
            for ids in [partition.pad_ids(), partition.non_pad_ids()] {
                let vals = ids.iter().map(|&i| frame[i]);
                let hi = vals.clone().fold(f64::NEG_INFINITY, f64::max);
                let lo = vals.fold(f64::INFINITY, f64::min);
                worst = worst.max(hi - lo);
            }
        }
    }
    Ok(worst)
}

pub fn check_objective(obj: Objective, p: &Problem, cfg: &GradcheckConfig) -> Result<ObjectiveCheck> {
    let (_, mut analytic) = objective_loss_and_grad(obj, &p.group, &p.policy, &p.reference, &p.cfg)?;
    let specs = p.policy.param_specs().to_vec();
    if cfg.corrupt {
        let target = &specs[specs.len() / 2];
        for g in &mut analytic[target.range()] {
            *g *= 1.1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6AAD_C4EC);
    let horizon = p.group.episode.horizon();
    let mut probe = p.policy.clone();
    let mut tensors = Vec::with_capacity(specs.len());
    for spec in &specs {
        // position rows past the horizon never influence the loss
        let len = if spec.name == "pos_emb" { horizon * spec.shape[1] } else { spec.len() };
        let mut worst = 0.0f64;
        let mut worst_pair = (0.0, 0.0);
        for _ in 0..cfg.samples_per_tensor {
            let idx = spec.offset + rng.random_range(0..len);
            let x = probe.params()[idx];
            probe.params_mut_unrounded()[idx] = x + cfg.h;
            let up = loss_at(obj, p, &probe)?;
            probe.params_mut_unrounded()[idx] = x - cfg.h;
            let down = loss_at(obj, p, &probe)?;
            probe.params_mut_unrounded()[idx] = x;
            let numeric = (up - down) / (2.0 * cfg.h);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel >= worst {
                worst = rel;
                worst_pair = (a, numeric);
            }
        }
        tensors.push(TensorError {
            name: spec.name.clone(),
            checked: cfg.samples_per_tensor,
            max_rel_err: worst,
            worst: worst_pair,
        });
    }
    Ok(ObjectiveCheck {
        objective: obj,
        checked: tensors.iter().map(|t| t.checked).sum(),
        max_rel_err: tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max),
        tensors,
        within_set_max_diff: within_set_spread(obj, p)?,
    })
}

/// Check both objectives on a problem drawn from `cfg.seed`. Passing needs
/// every sampled relative error under tolerance and, for the projected
/// objective, equal logit gradients within each vocabulary subset.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let problem = random_problem(cfg.seed)?;
    let checks = [Objective::Aspirin, Objective::StandardGrpo]
        .into_iter()
        .map(|o| check_objective(o, &problem, cfg))
        .collect::<Result<Vec<_>>>()?;
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let passed = max_rel_err < cfg.tolerance
        && checks
            .iter()
            .filter(|c| c.objective == Objective::Aspirin)
            .all(|c| c.within_set_max_diff <= cfg.within_set_tolerance);
    Ok(GradcheckReport {
        checks,
        max_rel_err,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_seed_passes() {
        let r = run_gradcheck(&GradcheckConfig::default()).unwrap();
        for c in &r.checks {
            assert!(c.checked >= 50, "{} checked", c.checked);
        }
        assert!(r.passed, "{r:#?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let r = run_gradcheck(&GradcheckConfig {
            corrupt: true,
            ..Default::default()
        })
        .unwrap();
        assert!(!r.passed);
    }
}
