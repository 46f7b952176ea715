//! Projection of token-level logits onto the binary speak/silence state.
//!
//! The state logit of each state is the plain sum of the raw token logits in
//! its vocabulary subset; the state policy is the two-way softmax of those
//! sums. Everything below stays in log-space so probabilities of exactly 0 or
//! 1 never appear.

use crate::error::{Error, Result};
use crate::vocab::{VocabPartition, ACTIVE};

/// Summed token logits for each state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateLogits {
    pub inactive: f64,
    pub active: f64,
}

impl StateLogits {
    /// `active - inactive`, the logit of the active state under the logistic form.
    pub fn margin(&self) -> f64 {
        self.active - self.inactive
    }
}

/// Binary state distribution stored as log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDistribution {
    log_inactive: f64,
    log_active: f64,
}

impl StateDistribution {
    /// Distribution with `P(active) = sigmoid(margin)`.
    pub fn from_margin(margin: f64) -> Self {
        StateDistribution {
            log_inactive: log_sigmoid(-margin),
            log_active: log_sigmoid(margin),
        }
    }

    pub fn from_probs(p_inactive: f64, p_active: f64) -> Result<Self> {
        let valid = |p: f64| p > 0.0 && p < 1.0;
        if !valid(p_inactive) || !valid(p_active) || (p_inactive + p_active - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "({p_inactive}, {p_active}) is not a binary distribution in the open simplex"
            )));
        }
        Ok(StateDistribution {
            log_inactive: p_inactive.ln(),
            log_active: p_active.ln(),
        })
    }

    pub fn p_inactive(&self) -> f64 {
        self.log_inactive.exp()
    }

    pub fn p_active(&self) -> f64 {
        self.log_active.exp()
    }

    pub fn log_prob(&self, s: u8) -> f64 {
        if s == ACTIVE {
            self.log_active
        } else {
            self.log_inactive
        }
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_logits(z: &[f64], partition: &VocabPartition) -> Result<()> {
    if z.len() != partition.vocab_size() {
        return Err(Error::Shape {
            expected: partition.vocab_size(),
            got: z.len(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("logit vector", None));
    }
    Ok(())
}

/// Sum token logits per state, ascending token id within each set.
pub fn project_logits(z: &[f64], partition: &VocabPartition) -> Result<StateLogits> {
    check_logits(z, partition)?;
    Ok(project_unchecked(z, partition))
}

pub(crate) fn project_unchecked(z: &[f64], partition: &VocabPartition) -> StateLogits {
    let sum = |ids: &[usize]| ids.iter().fold(0.0, |acc, &v| acc + z[v]);
    StateLogits {
        inactive: sum(partition.pad_ids()),
        active: sum(partition.non_pad_ids()),
    }
}

pub fn state_distribution(sl: StateLogits) -> StateDistribution {
    StateDistribution::from_margin(sl.margin())
}

pub fn state_log_prob(z: &[f64], partition: &VocabPartition, s: u8) -> Result<f64> {
    let sl = project_logits(z, partition)?;
    Ok(state_distribution(sl).log_prob(s))
}

/// `KL(p || q)` in nats for binary distributions.
pub fn binary_kl(p: &StateDistribution, q: &StateDistribution) -> f64 {
    let kl = p.p_inactive() * (p.log_inactive - q.log_inactive)
        + p.p_active() * (p.log_active - q.log_active);
    kl.max(0.0)
}

/// Numerically stable log-softmax.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// `KL(softmax(p) || softmax(q))` over the full vocabulary.
pub fn categorical_kl(p_logits: &[f64], q_logits: &[f64]) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(Error::Shape {
            expected: p_logits.len(),
            got: q_logits.len(),
        });
    }
    if p_logits.iter().chain(q_logits).any(|v| !v.is_finite()) {
        return Err(Error::numeric("logit vector", None));
    }
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    Ok(kl.max(0.0))
}
