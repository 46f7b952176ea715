//! Evaluation metrics: takeover rate, response latency, backchannel
//! frequency and timing divergence, and text degeneration scores.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::{intersect_duration, IntervalSet, TimeInterval};
use crate::scenario::{ScenarioKind, ScenarioSpec};

pub const DEFAULT_MAX_BACKCHANNEL: f64 = 1.0;
pub const ONSET_BINS: usize = 10;

/// Model utterances produced on one scenario, with the scenario's timing
/// fields copied alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeResult {
    pub id: String,
    pub kind: ScenarioKind,
    pub cue_time: f64,
    pub eval_window: TimeInterval,
    pub user: IntervalSet,
    pub model: IntervalSet,
}

impl EpisodeResult {
    pub fn new(spec: &ScenarioSpec, model: IntervalSet) -> Self {
        EpisodeResult {
            id: spec.id.clone(),
            kind: spec.kind,
            cue_time: spec.cue_time,
            eval_window: spec.eval_window,
            user: spec.user.clone(),
            model,
        }
    }
}

/// Fraction of episodes with any model speech inside the evaluation window.
pub fn takeover_rate(episodes: &[EpisodeResult]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::EmptyInput("takeover_rate episodes"));
    }
    let hits = episodes
        .iter()
        .filter(|e| intersect_duration(&e.eval_window, &e.model) > 0.0)
        .count();
    Ok(hits as f64 / episodes.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    /// `None` when no episode had a model utterance after its cue.
    pub mean: Option<f64>,
    pub count: usize,
}

/// Mean delay from cue to the first model utterance starting at or after it.
pub fn mean_response_latency(episodes: &[EpisodeResult]) -> LatencySummary {
    let lat: Vec<f64> = episodes
        .iter()
        .filter_map(|e| {
            e.model
                .iter()
                .find(|u| u.start() >= e.cue_time)
                .map(|u| u.start() - e.cue_time)
        })
        .collect();
    LatencySummary {
        mean: (!lat.is_empty()).then(|| lat.iter().sum::<f64>() / lat.len() as f64),
        count: lat.len(),
    }
}

/// Model utterances no longer than `max_duration` lying inside one user
/// utterance, paired with that utterance.
fn backchannels<'a>(e: &'a EpisodeResult, max_duration: f64) -> impl Iterator<Item = (&'a TimeInterval, &'a TimeInterval)> {
    e.model.iter().filter(move |m| m.length() <= max_duration).filter_map(move |m| {
        e.user
            .iter()
            .find(|u| u.start() <= m.start() && m.end() <= u.end())
            .map(|u| (m, u))
    })
}

/// Backchannels per minute of user speech.
pub fn backchannel_frequency(episodes: &[EpisodeResult], max_duration: f64) -> Result<f64> {
    let user_minutes = episodes.iter().map(|e| e.user.measure()).sum::<f64>() / 60.0;
    if user_minutes <= 0.0 {
        return Err(Error::EmptyInput("no user speech"));
    }
    let events: usize = episodes.iter().map(|e| backchannels(e, max_duration).count()).sum();
    Ok(events as f64 / user_minutes)
}

/// Counts of backchannel onsets by relative position within the enclosing
/// user utterance, over `bins` uniform bins.
pub fn backchannel_onset_histogram(episodes: &[EpisodeResult], max_duration: f64, bins: usize) -> Vec<f64> {
    let mut hist = vec![0.0; bins];
    for e in episodes {
        for (m, u) in backchannels(e, max_duration) {
            let rel = (m.start() - u.start()) / u.length();
            let b = ((rel * bins as f64) as usize).min(bins - 1);
            hist[b] += 1.0;
        }
    }
    hist
}

fn normalized(h: &[f64], what: &'static str) -> Result<Vec<f64>> {
    if h.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::numeric(what, None));
    }
    let total: f64 = h.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyInput(what));
    }
    Ok(h.iter().map(|x| x / total).collect())
}

/// Jensen-Shannon divergence in bits between two histograms.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            expected: p.len(),
            got: q.len(),
        });
    }
    let p = normalized(p, "jsd histogram p")?;
    let q = normalized(q, "jsd histogram q")?;
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).log2())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl(&p, &m) + 0.5 * kl(&q, &m)).clamp(0.0, 1.0))
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Portion of duplicate n-grams in one sequence.
pub fn seq_rep_n<T: Eq + Hash>(tokens: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("n-gram order must be at least 1".into()));
    }
    if tokens.len() < n {
        return Ok(0.0);
    }
    let total = tokens.len() - n + 1;
    let unique = ngram_counts(tokens, n).len();
    Ok(1.0 - unique as f64 / total as f64)
}

/// Sentence BLEU with uniform weights over 1- to 4-grams, clipped counts,
/// and the brevity penalty against the closest reference length. Any zero
/// precision gives 0.
pub fn bleu<T: Eq + Hash>(hypothesis: &[T], references: &[&[T]]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyInput("bleu references"));
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let hyp = ngram_counts(hypothesis, n);
        let total: usize = hyp.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let clipped: usize = hyp
            .iter()
            .map(|(g, &c)| c.min(ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += 0.25 * (clipped as f64 / total as f64).ln();
    }
    let c = hypothesis.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| ((len as i64 - c as i64).abs(), len))
        .unwrap() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * log_sum.exp())
}

/// Mean BLEU of each sample against all others.
pub fn self_bleu<T: Eq + Hash>(samples: &[Vec<T>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::EmptyInput("self_bleu needs at least two samples"));
    }
    let mut total = 0.0;
    for (i, hyp) in samples.iter().enumerate() {
        let refs: Vec<&[T]> = samples
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, s)| s.as_slice())
            .collect();
        total += bleu(hyp, &refs)?;
    }
    Ok(total / samples.len() as f64)
}

/// Lowercase, drop everything but letters, digits, and apostrophes, then
/// split on whitespace.
pub fn tokenize_transcript(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || *c == '\'' || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub episodes: usize,
    pub tor: f64,
    pub mean_latency: Option<f64>,
    pub latency_count: usize,
    pub backchannel_freq: Option<f64>,
    pub jsd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub samples: usize,
    pub seq_rep: BTreeMap<usize, f64>,
    pub self_bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenarios: BTreeMap<ScenarioKind, ScenarioReport>,
    pub corpus: Option<CorpusReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub max_backchannel: f64,
    /// Reference onset histogram for the backchannel divergence; uniform
    /// over `ONSET_BINS` bins when absent.
    pub onset_reference: Option<Vec<f64>>,
    pub seq_rep_orders: Vec<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            max_backchannel: DEFAULT_MAX_BACKCHANNEL,
            onset_reference: None,
            seq_rep_orders: vec![2, 3, 4],
        }
    }
}

pub fn scenario_report(results: &[EpisodeResult], cfg: &MetricsConfig) -> Result<ScenarioReport> {
    let latency = mean_response_latency(results);
    let bc = backchannel_frequency(results, cfg.max_backchannel).ok();
    let reference = cfg
        .onset_reference
        .clone()
        .unwrap_or_else(|| vec![1.0; ONSET_BINS]);
    let hist = backchannel_onset_histogram(results, cfg.max_backchannel, reference.len());
    let divergence = if hist.iter().sum::<f64>() > 0.0 {
        Some(jsd(&hist, &reference)?)
    } else {
        None
    };
    Ok(ScenarioReport {
        episodes: results.len(),
        tor: takeover_rate(results)?,
        mean_latency: latency.mean,
        latency_count: latency.count,
        backchannel_freq: bc,
        jsd: divergence,
    })
}

/// Mean seq-rep per order over samples, and Self-BLEU when there are at
/// least two samples.
pub fn corpus_report(samples: &[Vec<String>], cfg: &MetricsConfig) -> Result<CorpusReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("corpus samples"));
    }
    let mut seq_rep = BTreeMap::new();
    for &n in &cfg.seq_rep_orders {
        let mut total = 0.0;
        for s in samples {
            total += seq_rep_n(s, n)?;
        }
        seq_rep.insert(n, total / samples.len() as f64);
    }
    Ok(CorpusReport {
        samples: samples.len(),
        seq_rep,
        self_bleu: if samples.len() >= 2 { Some(self_bleu(samples)?) } else { None },
    })
}

/// Group results by scenario kind and report each group.
pub fn build_report(results: &[EpisodeResult], samples: Option<&[Vec<String>]>, cfg: &MetricsConfig) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::EmptyInput("episode results"));
    }
    let mut by_kind: BTreeMap<ScenarioKind, Vec<EpisodeResult>> = BTreeMap::new();
    for r in results {
        by_kind.entry(r.kind).or_default().push(r.clone());
    }
    let mut scenarios = BTreeMap::new();
    for (kind, rs) in by_kind {
        scenarios.insert(kind, scenario_report(&rs, cfg)?);
    }
    let corpus = match samples {
        Some(s) if !s.is_empty() => Some(corpus_report(s, cfg)?),
        _ => None,
    };
    Ok(EvalReport { scenarios, corpus })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn result(window: (f64, f64), cue: f64, user: &[(f64, f64)], model: &[(f64, f64)]) -> EpisodeResult {
        EpisodeResult {
            id: "x".into(),
            kind: ScenarioKind::TurnTaking,
            cue_time: cue,
            eval_window: TimeInterval::new(window.0, window.1).unwrap(),
            user: IntervalSet::from_pairs(user).unwrap(),
            model: IntervalSet::from_pairs(model).unwrap(),
        }
    }

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn takeover_counts_window_hits() {
        let eps = vec![
            result((4.0, 6.0), 4.0, &[(0.0, 4.0)], &[(4.5, 5.0)]),
            result((4.0, 6.0), 4.0, &[(0.0, 4.0)], &[(5.9, 7.0)]),
            result((4.0, 6.0), 4.0, &[(0.0, 4.0)], &[(7.0, 8.0)]),
        ];
        assert!((takeover_rate(&eps).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let silent = vec![result((4.0, 6.0), 4.0, &[(0.0, 4.0)], &[])];
        assert_eq!(takeover_rate(&silent).unwrap(), 0.0);
        let touching = vec![result((4.0, 6.0), 4.0, &[(0.0, 4.0)], &[(3.0, 4.0)])];
        assert_eq!(takeover_rate(&touching).unwrap(), 0.0);
        assert!(takeover_rate(&[]).is_err());
    }

    #[test]
    fn latency_examples() {
        let one = vec![result((4.0, 6.0), 4.0, &[(0.0, 4.0)], &[(4.3, 5.0)])];
        assert!((mean_response_latency(&one).mean.unwrap() - 0.3).abs() < 1e-12);
        let none = vec![result((4.0, 6.0), 4.0, &[(0.0, 4.0)], &[(1.0, 2.0)])];
        assert_eq!(mean_response_latency(&none), LatencySummary { mean: None, count: 0 });
        let two = vec![
            result((1.0, 3.0), 1.0, &[(0.0, 1.0)], &[(1.2, 2.0)]),
            result((1.0, 3.0), 1.0, &[(0.0, 1.0)], &[(1.4, 2.0)]),
        ];
        let s = mean_response_latency(&two);
        assert!((s.mean.unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(s.count, 2);
    }

    #[test]
    fn backchannel_examples() {
        let burst = vec![result((0.0, 12.0), 0.0, &[(0.0, 12.0)], &[(3.0, 3.5)])];
        assert!((backchannel_frequency(&burst, 1.0).unwrap() - 5.0).abs() < 1e-12);
        let long = vec![result((0.0, 12.0), 0.0, &[(0.0, 12.0)], &[(3.0, 6.0)])];
        assert_eq!(backchannel_frequency(&long, 1.0).unwrap(), 0.0);
        let quiet = vec![result((0.0, 12.0), 0.0, &[(0.0, 12.0)], &[])];
        assert_eq!(backchannel_frequency(&quiet, 1.0).unwrap(), 0.0);
        let h = backchannel_onset_histogram(&burst, 1.0, 10);
        assert_eq!(h[2], 1.0);
        assert_eq!(h.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn jsd_examples() {
        assert_eq!(jsd(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((jsd(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 0.3112781).abs() < 1e-7);
        assert!(jsd(&[1.0], &[1.0, 0.0]).is_err());
        assert!(jsd(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn seq_rep_examples() {
        assert_eq!(seq_rep_n(&words("a b c d"), 1).unwrap(), 0.0);
        assert!((seq_rep_n(&words("a b a b"), 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(seq_rep_n(&words("the cat the cat"), 1).unwrap(), 0.5);
        assert_eq!(seq_rep_n(&words("a"), 2).unwrap(), 0.0);
        assert!(seq_rep_n(&words("a"), 0).is_err());
    }

    #[test]
    fn bleu_examples() {
        let ten: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        assert!((self_bleu(&[ten.clone(), ten.clone()]).unwrap() - 1.0).abs() < 1e-12);
        let other: Vec<String> = (0..10).map(|i| format!("v{i}")).collect();
        assert_eq!(self_bleu(&[ten.clone(), other]).unwrap(), 0.0);
        assert!(self_bleu(&[ten]).is_err());

        let hyp = words("a b c d e");
        let reference = words("a b c d f");
        let hand = (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu(&hyp, &[&reference]).unwrap() - hand).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_applies_to_short_hypotheses() {
        let hyp = words("a b c d");
        let reference = words("a b c d e f g h");
        assert!((bleu(&hyp, &[&reference]).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize_transcript("Hello, world!"), vec!["hello", "world"]);
        assert!(tokenize_transcript("").is_empty());
        assert_eq!(tokenize_transcript("Don't stop"), vec!["don't", "stop"]);
    }

    #[test]
    fn report_groups_by_kind() {
        let mut a = result((4.0, 6.0), 4.0, &[(0.0, 4.0)], &[(4.5, 5.0)]);
        let mut b = a.clone();
        a.kind = ScenarioKind::Pause;
        b.kind = ScenarioKind::Backchannel;
        let r = build_report(&[a, b], None, &MetricsConfig::default()).unwrap();
        assert_eq!(r.scenarios.len(), 2);
        assert!(r.corpus.is_none());
        assert!(build_report(&[], None, &MetricsConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn jsd_is_symmetric_and_bounded(p in prop::collection::vec(0.0f64..1.0, 5), q in prop::collection::vec(0.0f64..1.0, 5)) {
            prop_assume!(p.iter().sum::<f64>() > 1e-6 && q.iter().sum::<f64>() > 1e-6);
            let a = jsd(&p, &q).unwrap();
            let b = jsd(&q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn seq_rep_bounds(tokens in prop::collection::vec(0u8..4, 1..30), n in 1usize..4) {
            let r = seq_rep_n(&tokens, n).unwrap();
            if tokens.len() >= n {
                let total = (tokens.len() - n + 1) as f64;
                prop_assert!(r >= 0.0 && r <= 1.0 - 1.0 / total + 1e-12);
                let doubled: Vec<u8> = tokens.iter().chain(tokens.iter()).copied().collect();
                prop_assert!(seq_rep_n(&doubled, n).unwrap() > r);
            }
        }

        #[test]
        fn self_bleu_of_copies_is_one(tokens in prop::collection::vec(0u8..6, 4..20), k in 2usize..5) {
            let samples = vec![tokens; k];
            prop_assert!((self_bleu(&samples).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
