//! Group-relative policy optimization over projected states, and the raw
//! token baseline.
//!
//! Both objectives share sampling, rewards, advantages, and the optimizer;
//! they differ only in which policy the importance ratio and KL penalty are
//! taken over. The projected objective sees each frame as a speak/silence
//! choice, so every token inside one vocabulary subset receives the same
//! logit gradient.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, write_atomic};
use crate::error::{Error, Result};
use crate::interval::IntervalSet;
use crate::model::{EpisodeInput, FrameLogits, Policy, Trace};
use crate::projection::{log_softmax, project_unchecked, StateDistribution};
use crate::reward::{group_advantages, total_reward, AdvantageSet, RewardBreakdown, RewardConfig};
use crate::rollout::{sample_rollout, sample_rollout_traced, Rollout};
use crate::scenario::ScenarioSpec;
use crate::vocab::{VocabPartition, ACTIVE};

pub const LOG_HEADER: &str = "step,mean_r_total,mean_r_int,mean_r_re,loss,mean_kl,mean_ratio";
pub const CURVE_HEADER: &str = "step,mean_r_int,mean_r_re,mean_r_total";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Aspirin,
    #[serde(alias = "standard")]
    StandardGrpo,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aspirin" => Ok(Objective::Aspirin),
            "standard" | "standard_grpo" => Ok(Objective::StandardGrpo),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub inner_epochs: usize,
    pub steps: usize,
    pub grad_clip_norm: f64,
    pub reward: RewardConfig,
    pub objective: Objective,
    pub seed: u64,
    /// Episodes per optimization step.
    pub batch_size: usize,
    /// Sampling temperature for rollouts.
    pub temperature: f64,
    /// Token ids that mean "silent".
    pub pad_ids: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 2,
            kl_beta: 0.001,
            learning_rate: 1e-3,
            inner_epochs: 1,
            steps: 500,
            grad_clip_norm: 1.0,
            reward: RewardConfig::default(),
            objective: Objective::Aspirin,
            seed: 0,
            batch_size: 8,
            temperature: 1.0,
            pad_ids: vec![0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::GroupSize(self.group_size));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(Error::Config(format!("kl_beta must be non-negative, got {}", self.kl_beta)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        if self.inner_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("inner_epochs and batch_size must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        self.reward.validate()
    }

    pub fn partition(&self, vocab_size: usize) -> Result<VocabPartition> {
        VocabPartition::new(vocab_size, self.pad_ids.iter().copied())
    }
}

/// Episode conditioning plus the user activity the rewards are scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingEpisode {
    pub id: String,
    pub input: EpisodeInput,
    pub user: IntervalSet,
}

impl TrainingEpisode {
    pub fn from_spec(spec: &ScenarioSpec, delta_t: f64) -> Self {
        TrainingEpisode {
            id: spec.id.clone(),
            input: spec.episode_input(delta_t),
            user: spec.user.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub episode: EpisodeInput,
    pub rollouts: Vec<Rollout>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub advantages: AdvantageSet,
}

impl RolloutGroup {
    /// Score rollouts against `user` and standardize their rewards.
    pub fn score(episode: EpisodeInput, user: &IntervalSet, rollouts: Vec<Rollout>, reward: &RewardConfig) -> Result<Self> {
        let breakdowns: Vec<RewardBreakdown> = rollouts.iter().map(|r| total_reward(&r.states, user, reward)).collect();
        let rewards: Vec<f64> = breakdowns.iter().map(|b| b.r_total).collect();
        let advantages = group_advantages(&rewards)?;
        Ok(RolloutGroup {
            episode,
            rollouts,
            breakdowns,
            advantages,
        })
    }

    pub fn size(&self) -> usize {
        self.rollouts.len()
    }

    fn check(&self) -> Result<()> {
        let g = self.rollouts.len();
        for len in [self.breakdowns.len(), self.advantages.advantages.len()] {
            if len != g {
                return Err(Error::Shape { expected: g, got: len });
            }
        }
        if g < 2 {
            return Err(Error::GroupSize(g));
        }
        Ok(())
    }

    fn total_trainable_frames(&self) -> usize {
        self.rollouts.iter().map(|r| r.trainable_frames().len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub mean_kl: f64,
    pub mean_ratio: f64,
    pub frames: usize,
}

/// Per-frame objective term and its gradient with respect to the frame's
/// logits (already multiplied by `scale`). Returns `(value, ratio, kl)`.
#[allow(clippy::too_many_arguments)]
fn frame_term(
    objective: Objective,
    z: &[f64],
    z_ref: &[f64],
    token: usize,
    old_logprob: f64,
    advantage: f64,
    beta: f64,
    scale: f64,
    partition: &VocabPartition,
    dz: &mut [f64],
) -> (f64, f64, f64) {
    match objective {
        Objective::Aspirin => {
            let margin = project_unchecked(z, partition).margin();
            let ref_margin = project_unchecked(z_ref, partition).margin();
            let p = StateDistribution::from_margin(margin);
            let q = StateDistribution::from_margin(ref_margin);
            let (p0, p1) = (p.p_inactive(), p.p_active());
            let state = partition.state_of(token).expect("sampled token in vocabulary");
            let lp = p.log_prob(state);
            let ratio = (lp - old_logprob).exp();
            let kl = p0 * (p.log_prob(0) - q.log_prob(0)) + p1 * (p.log_prob(1) - q.log_prob(1));
            let dlp = if state == ACTIVE { p0 } else { -p1 };
            let dkl = p1 * p0 * ((p.log_prob(1) - q.log_prob(1)) - (p.log_prob(0) - q.log_prob(0)));
            let dmargin = -scale * (advantage * ratio * dlp - beta * dkl);
            for (v, g) in dz.iter_mut().enumerate() {
                *g = if partition.is_pad(v) { -dmargin } else { dmargin };
            }
            (-scale * (ratio * advantage - beta * kl), ratio, kl)
        }
        Objective::StandardGrpo => {
            let lp = log_softmax(z);
            let lq = log_softmax(z_ref);
            let ratio = (lp[token] - old_logprob).exp();
            let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
            let kl: f64 = probs.iter().zip(lp.iter().zip(&lq)).map(|(p, (a, b))| p * (a - b)).sum();
            for (v, g) in dz.iter_mut().enumerate() {
                let onehot = if v == token { 1.0 } else { 0.0 };
                let dlp = onehot - probs[v];
                let dkl = probs[v] * ((lp[v] - lq[v]) - kl);
                *g = -scale * (advantage * ratio * dlp - beta * dkl);
            }
            (-scale * (ratio * advantage - beta * kl), ratio, kl)
        }
    }
}

/// Objective value of one group, optionally accumulating `weight * dL/dθ`.
///
/// `current` supplies traces at the current parameters (recomputed when
/// absent); `reference` supplies frozen reference logits per rollout.
#[allow(clippy::too_many_arguments)]
fn group_objective(
    objective: Objective,
    group: &RolloutGroup,
    policy: &Policy,
    current: Option<&[Trace]>,
    reference: &[FrameLogits],
    partition: &VocabPartition,
    beta: f64,
    weight: f64,
    mut grads: Option<&mut [f64]>,
) -> Result<LossReport> {
    group.check()?;
    let frames = group.total_trainable_frames();
    if frames == 0 {
        return Err(Error::EmptyInput("group has no trainable frames"));
    }
    let scale = 1.0 / frames as f64;
    let v = policy.config().vocab_size;
    let mut report = LossReport {
        frames,
        ..Default::default()
    };
    for (i, rollout) in group.rollouts.iter().enumerate() {
        let fresh;
        let trace = match current {
            Some(traces) => &traces[i],
            None => {
                fresh = policy.trace(&group.episode, &rollout.tokens)?;
                &fresh
            }
        };
        let advantage = group.advantages.advantages[i];
        let mut dlogits = vec![0.0; rollout.len() * v];
        for t in rollout.trainable_frames() {
            let token = rollout.tokens[t];
            let old = match objective {
                Objective::Aspirin => rollout.state_logprobs_old[t],
                Objective::StandardGrpo => rollout.token_logprobs_old[t],
            };
            let (value, ratio, kl) = frame_term(
                objective,
                trace.frame_logits(t),
                reference[i].frame(t),
                token,
                old,
                advantage,
                beta,
                scale * weight,
                partition,
                &mut dlogits[t * v..(t + 1) * v],
            );
            if !value.is_finite() {
                return Err(Error::numeric("objective", Some(t)));
            }
            report.loss += value / weight;
            report.mean_ratio += ratio;
            report.mean_kl += kl;
        }
        if let Some(g) = grads.as_deref_mut() {
            policy.backward(trace, &dlogits, g)?;
        }
    }
    report.mean_ratio /= frames as f64;
    report.mean_kl /= frames as f64;
    Ok(report)
}

fn reference_logits(group: &RolloutGroup, reference: &Policy) -> Result<Vec<FrameLogits>> {
    group
        .rollouts
        .iter()
        .map(|r| reference.forward(&group.episode, &r.tokens))
        .collect()
}

fn loss_with_grad(
    objective: Objective,
    group: &RolloutGroup,
    policy: &Policy,
    reference: &Policy,
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(LossReport, Option<Vec<f64>>)> {
    let partition = cfg.partition(policy.config().vocab_size)?;
    let ref_logits = reference_logits(group, reference)?;
    let mut grads = with_grad.then(|| vec![0.0; policy.num_params()]);
    let report = group_objective(
        objective,
        group,
        policy,
        None,
        &ref_logits,
        &partition,
        cfg.kl_beta,
        1.0,
        grads.as_deref_mut(),
    )?;
    Ok((report, grads))
}

/// Projected-state GRPO loss with fresh forward passes for the current and
/// reference policies.
pub fn aspirin_loss(group: &RolloutGroup, policy: &Policy, reference: &Policy, cfg: &TrainConfig) -> Result<f64> {
    loss_with_grad(Objective::Aspirin, group, policy, reference, cfg, false).map(|(r, _)| r.loss)
}

/// Raw-token GRPO loss over the full vocabulary.
pub fn standard_grpo_loss(group: &RolloutGroup, policy: &Policy, reference: &Policy, cfg: &TrainConfig) -> Result<f64> {
    loss_with_grad(Objective::StandardGrpo, group, policy, reference, cfg, false).map(|(r, _)| r.loss)
}

/// Loss report and exact parameter gradient for the selected objective.
pub fn objective_loss_and_grad(
    objective: Objective,
    group: &RolloutGroup,
    policy: &Policy,
    reference: &Policy,
    cfg: &TrainConfig,
) -> Result<(LossReport, Vec<f64>)> {
    let (report, grads) = loss_with_grad(objective, group, policy, reference, cfg, true)?;
    Ok((report, grads.expect("requested")))
}

/// Objective value and per-rollout logit gradients, evaluated on supplied
/// current and reference logits instead of forward passes.
pub fn loss_from_logits(
    objective: Objective,
    group: &RolloutGroup,
    current: &[FrameLogits],
    reference: &[FrameLogits],
    partition: &VocabPartition,
    beta: f64,
) -> Result<(LossReport, Vec<Vec<f64>>)> {
    group.check()?;
    let g = group.size();
    for len in [current.len(), reference.len()] {
        if len != g {
            return Err(Error::Shape { expected: g, got: len });
        }
    }
    let frames = group.total_trainable_frames();
    if frames == 0 {
        return Err(Error::EmptyInput("group has no trainable frames"));
    }
    let scale = 1.0 / frames as f64;
    let mut report = LossReport {
        frames,
        ..Default::default()
    };
    let mut dlogits = Vec::with_capacity(g);
    for (i, r) in group.rollouts.iter().enumerate() {
        let v = current[i].vocab();
        if v != partition.vocab_size() || reference[i].vocab() != v {
            return Err(Error::Shape {
                expected: partition.vocab_size(),
                got: v,
            });
        }
        if current[i].frames() != r.len() || reference[i].frames() != r.len() {
            return Err(Error::Shape {
                expected: r.len(),
                got: current[i].frames().min(reference[i].frames()),
            });
        }
        let mut d = vec![0.0; r.len() * v];
        for t in r.trainable_frames() {
            let old = match objective {
                Objective::Aspirin => r.state_logprobs_old[t],
                Objective::StandardGrpo => r.token_logprobs_old[t],
            };
            let (value, ratio, kl) = frame_term(
                objective,
                current[i].frame(t),
                reference[i].frame(t),
                r.tokens[t],
                old,
                group.advantages.advantages[i],
                beta,
                scale,
                partition,
                &mut d[t * v..(t + 1) * v],
            );
            if !value.is_finite() {
                return Err(Error::numeric("objective", Some(t)));
            }
            report.loss += value;
            report.mean_ratio += ratio;
            report.mean_kl += kl;
        }
        dlogits.push(d);
    }
    report.mean_ratio /= frames as f64;
    report.mean_kl /= frames as f64;
    Ok((report, dlogits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Parameters after one bias-corrected Adam step.
    pub fn step(&mut self, params: &[f64], grads: &[f64], lr: f64) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        params
            .iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|((&p, &g), (m, v))| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                p - lr * (*m / c1) / ((*v / c2).sqrt() + self.eps)
            })
            .collect()
    }
}

/// Scale `grads` in place so its global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub mean_r_total: f64,
    pub mean_r_int: f64,
    pub mean_r_re: f64,
    pub loss: f64,
    pub mean_kl: f64,
    pub mean_ratio: f64,
}

impl TrainLogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.mean_r_total, self.mean_r_int, self.mean_r_re, self.loss, self.mean_kl, self.mean_ratio
        )
    }
}

/// Owns the trained policy, the frozen reference, and optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    partition: VocabPartition,
    policy: Policy,
    reference: Policy,
    adam: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// The reference policy is a frozen copy of `policy`.
    pub fn new(cfg: TrainConfig, policy: Policy) -> Result<Self> {
        let reference = policy.clone();
        Trainer::with_reference(cfg, policy, reference)
    }

    pub fn with_reference(cfg: TrainConfig, policy: Policy, reference: Policy) -> Result<Self> {
        cfg.validate()?;
        let partition = cfg.partition(policy.config().vocab_size)?;
        if reference.config() != policy.config() {
            return Err(Error::Config("reference and policy configs differ".into()));
        }
        Ok(Trainer {
            adam: Adam::new(policy.num_params()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            partition,
            policy,
            reference,
            step: 0,
        })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn reference(&self) -> &Policy {
        &self.reference
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn partition(&self) -> &VocabPartition {
        &self.partition
    }

    pub fn into_policy(self) -> Policy {
        self.policy
    }

    /// Sample a group for `episode` from the current policy.
    pub fn sample_group(&mut self, episode: &TrainingEpisode) -> Result<(RolloutGroup, Vec<Trace>)> {
        let mut rollouts = Vec::with_capacity(self.cfg.group_size);
        let mut traces = Vec::with_capacity(self.cfg.group_size);
        for _ in 0..self.cfg.group_size {
            let seed = self.rng.next_u64();
            let (r, tr) = sample_rollout_traced(&self.policy, &episode.input, &self.partition, self.cfg.temperature, seed)?;
            rollouts.push(r);
            traces.push(tr);
        }
        let group = RolloutGroup::score(episode.input.clone(), &episode.user, rollouts, &self.cfg.reward)?;
        Ok((group, traces))
    }

    /// One optimization step over `batch`. Rollouts are drawn from the current
    /// parameters, which act as the "old" policy for every inner epoch.
    pub fn train_step(&mut self, batch: &[&TrainingEpisode]) -> Result<TrainLogRow> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training batch"));
        }
        let step = self.step;
        let with_step = |e: Error| Error::AtStep {
            step,
            source: Box::new(e),
        };
        let mut groups = Vec::with_capacity(batch.len());
        let mut sample_traces = Vec::with_capacity(batch.len());
        let mut ref_logits = Vec::with_capacity(batch.len());
        for episode in batch {
            let (group, traces) = self.sample_group(episode).map_err(with_step)?;
            ref_logits.push(reference_logits(&group, &self.reference).map_err(with_step)?);
            groups.push(group);
            sample_traces.push(traces);
        }

        let weight = 1.0 / batch.len() as f64;
        let mut first: Option<LossReport> = None;
        for epoch in 0..self.cfg.inner_epochs {
            let mut grads = vec![0.0; self.policy.num_params()];
            let mut agg = LossReport::default();
            for (i, group) in groups.iter().enumerate() {
                let current = (epoch == 0).then(|| sample_traces[i].as_slice());
                let r = group_objective(
                    self.cfg.objective,
                    group,
                    &self.policy,
                    current,
                    &ref_logits[i],
                    &self.partition,
                    self.cfg.kl_beta,
                    weight,
                    Some(&mut grads),
                )
                .map_err(with_step)?;
                agg.loss += r.loss * weight;
                agg.mean_kl += r.mean_kl * weight;
                agg.mean_ratio += r.mean_ratio * weight;
                agg.frames += r.frames;
            }
            first.get_or_insert(agg);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(with_step(Error::numeric("gradient", None)));
            }
            clip_grad_norm(&mut grads, self.cfg.grad_clip_norm);
            let updated = self.adam.step(self.policy.params(), &grads, self.cfg.learning_rate);
            self.policy.set_params(&updated)?;
        }

        let n = groups.iter().map(RolloutGroup::size).sum::<usize>() as f64;
        let mean = |f: fn(&RewardBreakdown) -> f64| groups.iter().flat_map(|g| g.breakdowns.iter().map(f)).sum::<f64>() / n;
        let report = first.expect("at least one inner epoch");
        let row = TrainLogRow {
            step,
            mean_r_total: mean(|b| b.r_total),
            mean_r_int: mean(|b| b.r_int),
            mean_r_re: mean(|b| b.r_re),
            loss: report.loss,
            mean_kl: report.mean_kl,
            mean_ratio: report.mean_ratio,
        };
        self.step += 1;
        Ok(row)
    }
}

/// Cycles through episodes in a freshly shuffled order each pass.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl EpisodeSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = EpisodeSampler {
            order: (0..len).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_BA7C_0000_0000),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

pub fn log_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn curve_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.mean_r_int, r.mean_r_re, r.mean_r_total);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub curve: PathBuf,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        TrainOutputs {
            checkpoint: dir.join("final.ckpt"),
            log: dir.join("train_log.csv"),
            curve: dir.join("reward_curve.csv"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub policy: Policy,
    pub log: Vec<TrainLogRow>,
}

/// Run `cfg.steps` optimization steps from `initial`, which also serves as
/// the reference policy. Writes outputs when `outputs` is given.
pub fn train(
    initial: Policy,
    cfg: &TrainConfig,
    episodes: &[TrainingEpisode],
    outputs: Option<&TrainOutputs>,
    mut on_step: impl FnMut(&TrainLogRow),
) -> Result<TrainRun> {
    if episodes.is_empty() {
        return Err(Error::EmptyInput("training episodes"));
    }
    let mut trainer = Trainer::new(cfg.clone(), initial)?;
    let mut sampler = EpisodeSampler::new(episodes.len(), cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch: Vec<&TrainingEpisode> = sampler.next_batch(cfg.batch_size).into_iter().map(|i| &episodes[i]).collect();
        let row = trainer.train_step(&batch)?;
        on_step(&row);
        log.push(row);
    }
    if let Some(out) = outputs {
        save_checkpoint(trainer.policy(), &out.checkpoint)?;
        write_atomic(&out.log, log_csv(&log).as_bytes())?;
        write_atomic(&out.curve, curve_csv(&log).as_bytes())?;
    }
    Ok(TrainRun {
        policy: trainer.into_policy(),
        log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardEstimate {
    pub mean_r_total: f64,
    pub mean_r_int: f64,
    pub mean_r_re: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of the expected reward over `episodes`, with
/// `samples_per_episode` independent rollouts each.
pub fn estimate_reward(
    policy: &Policy,
    episodes: &[TrainingEpisode],
    partition: &VocabPartition,
    reward: &RewardConfig,
    samples_per_episode: usize,
    temperature: f64,
    seed: u64,
) -> Result<RewardEstimate> {
    if episodes.is_empty() || samples_per_episode == 0 {
        return Err(Error::EmptyInput("reward estimate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut totals = Vec::with_capacity(episodes.len() * samples_per_episode);
    let (mut r_int, mut r_re) = (0.0, 0.0);
    for ep in episodes {
        for _ in 0..samples_per_episode {
            let r = sample_rollout(policy, &ep.input, partition, temperature, rng.next_u64())?;
            let b = total_reward(&r.states, &ep.user, reward);
            totals.push(b.r_total);
            r_int += b.r_int;
            r_re += b.r_re;
        }
    }
    let n = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let var = if totals.len() > 1 {
        totals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(RewardEstimate {
        mean_r_total: mean,
        mean_r_int: r_int / n,
        mean_r_re: r_re / n,
        std_err: (var / n).sqrt(),
        samples: totals.len(),
    })
}
