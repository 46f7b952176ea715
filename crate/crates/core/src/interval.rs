//! Half-open time intervals in seconds and normalized interval sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A half-open interval `[start, end)` in seconds with `0 <= start < end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct TimeInterval {
    start: f64,
    end: f64,
}

impl TimeInterval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || start >= end {
            return Err(Error::InvalidInterval { start, end });
        }
        Ok(TimeInterval { start, end })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    /// Length of `self ∩ other`, zero when disjoint or touching.
    pub fn overlap(&self, other: &TimeInterval) -> f64 {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if hi > lo {
            hi - lo
        } else {
            0.0
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t < self.end
    }
}

impl TryFrom<[f64; 2]> for TimeInterval {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        TimeInterval::new(v[0], v[1])
    }
}

impl From<TimeInterval> for [f64; 2] {
    fn from(i: TimeInterval) -> Self {
        [i.start, i.end]
    }
}

/// Sorted, pairwise disjoint intervals. Overlapping and touching inputs are
/// coalesced, so consecutive members are always separated by a gap.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "Vec<TimeInterval>", into = "Vec<TimeInterval>")]
pub struct IntervalSet {
    intervals: Vec<TimeInterval>,
}

impl IntervalSet {
    pub fn empty() -> Self {
        IntervalSet::default()
    }

    /// Sorts and merges arbitrary valid intervals.
    pub fn new(mut raw: Vec<TimeInterval>) -> Self {
        raw.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
        let mut out: Vec<TimeInterval> = Vec::with_capacity(raw.len());
        for iv in raw {
            match out.last_mut() {
                Some(last) if iv.start <= last.end => last.end = last.end.max(iv.end),
                _ => out.push(iv),
            }
        }
        IntervalSet { intervals: out }
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        let raw = pairs
            .iter()
            .map(|&(s, e)| TimeInterval::new(s, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(IntervalSet::new(raw))
    }

    pub fn as_slice(&self) -> &[TimeInterval] {
        &self.intervals
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TimeInterval> {
        self.intervals.iter()
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Total measure of the union.
    pub fn measure(&self) -> f64 {
        self.intervals.iter().map(TimeInterval::length).sum()
    }

    pub fn to_pairs(&self) -> Vec<[f64; 2]> {
        self.intervals.iter().map(|&i| i.into()).collect()
    }

    /// Whether any member shares positive measure with `q`.
    pub fn overlaps(&self, q: &TimeInterval) -> bool {
        intersect_duration(q, self) > 0.0
    }

    /// Latest member end `e` with `e <= t`.
    pub fn last_end_at_or_before(&self, t: f64) -> Option<f64> {
        let idx = self.intervals.partition_point(|iv| iv.end <= t);
        idx.checked_sub(1).map(|i| self.intervals[i].end)
    }

    /// Restriction to `[lo, hi)`.
    pub fn clipped(&self, lo: f64, hi: f64) -> IntervalSet {
        let intervals = self
            .intervals
            .iter()
            .filter_map(|iv| TimeInterval::new(iv.start.max(lo), iv.end.min(hi)).ok())
            .collect();
        IntervalSet { intervals }
    }

    /// `window \ self`, assuming the caller wants only the part inside `window`.
    pub fn complement_within(&self, window: &TimeInterval) -> IntervalSet {
        let mut out = Vec::new();
        let mut cursor = window.start;
        for iv in &self.intervals {
            if iv.end <= window.start {
                continue;
            }
            if iv.start >= window.end {
                break;
            }
            if iv.start > cursor {
                out.push(TimeInterval {
                    start: cursor,
                    end: iv.start,
                });
            }
            cursor = cursor.max(iv.end);
        }
        if cursor < window.end {
            out.push(TimeInterval {
                start: cursor,
                end: window.end,
            });
        }
        IntervalSet { intervals: out }
    }
}

impl From<Vec<TimeInterval>> for IntervalSet {
    fn from(raw: Vec<TimeInterval>) -> Self {
        IntervalSet::new(raw)
    }
}

impl From<IntervalSet> for Vec<TimeInterval> {
    fn from(s: IntervalSet) -> Self {
        s.intervals
    }
}

impl<'a> IntoIterator for &'a IntervalSet {
    type Item = &'a TimeInterval;
    type IntoIter = std::slice::Iter<'a, TimeInterval>;

    fn into_iter(self) -> Self::IntoIter {
        self.intervals.iter()
    }
}

/// Sort and coalesce `(start, end)` pairs; rejects any pair with `start >= end`.
pub fn normalize_intervals(raw: &[(f64, f64)]) -> Result<IntervalSet> {
    IntervalSet::from_pairs(raw)
}

/// Total length of `q ∩ set`.
pub fn intersect_duration(q: &TimeInterval, set: &IntervalSet) -> f64 {
    let first = set.intervals.partition_point(|iv| iv.end <= q.start);
    set.intervals[first..]
        .iter()
        .take_while(|iv| iv.start < q.end)
        .map(|iv| q.overlap(iv))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(s: f64, e: f64) -> TimeInterval {
        TimeInterval::new(s, e).unwrap()
    }

    fn set(pairs: &[(f64, f64)]) -> IntervalSet {
        normalize_intervals(pairs).unwrap()
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(set(&[(0., 1.), (2., 3.)]).to_pairs(), vec![[0., 1.], [2., 3.]]);
        assert_eq!(set(&[(0., 2.), (1., 3.)]).to_pairs(), vec![[0., 3.]]);
        assert_eq!(set(&[(0., 1.), (1., 2.)]).to_pairs(), vec![[0., 2.]]);
        assert_eq!(set(&[(2., 3.), (0., 1.)]).to_pairs(), vec![[0., 1.], [2., 3.]]);
        assert_eq!(set(&[(0., 5.), (1., 2.)]).to_pairs(), vec![[0., 5.]]);
    }

    #[test]
    fn invalid_intervals_rejected() {
        assert!(matches!(
            normalize_intervals(&[(1., 1.)]),
            Err(Error::InvalidInterval { .. })
        ));
        assert!(normalize_intervals(&[(2., 1.)]).is_err());
        assert!(TimeInterval::new(-1.0, 1.0).is_err());
        assert!(TimeInterval::new(0.0, f64::NAN).is_err());
        assert!(serde_json::from_str::<TimeInterval>("[3.0, 2.0]").is_err());
    }

    #[test]
    fn intersection_examples() {
        assert_eq!(intersect_duration(&iv(1., 3.), &set(&[(2., 5.)])), 1.0);
        assert_eq!(intersect_duration(&iv(0.5, 2.5), &set(&[(0., 1.), (2., 3.)])), 1.0);
        assert_eq!(intersect_duration(&iv(4., 5.), &set(&[(0., 1.)])), 0.0);
        assert_eq!(intersect_duration(&iv(1., 2.), &IntervalSet::empty()), 0.0);
    }

    #[test]
    fn last_end_lookup() {
        let s = set(&[(0., 2.), (3., 5.)]);
        assert_eq!(s.last_end_at_or_before(2.1), Some(2.0));
        assert_eq!(s.last_end_at_or_before(2.0), Some(2.0));
        assert_eq!(s.last_end_at_or_before(1.0), None);
        assert_eq!(s.last_end_at_or_before(6.0), Some(5.0));
    }

    #[test]
    fn complement_and_clip() {
        let s = set(&[(1., 2.), (3., 4.)]);
        let c = s.complement_within(&iv(0., 5.));
        assert_eq!(c.to_pairs(), vec![[0., 1.], [2., 3.], [4., 5.]]);
        assert_eq!(s.clipped(1.5, 3.5).to_pairs(), vec![[1.5, 2.], [3., 3.5]]);
        assert_eq!(set(&[(0., 10.)]).complement_within(&iv(2., 3.)).len(), 0);
    }

    // Endpoints on a 10 ms grid over [0, 2) s.
    fn grid_set() -> impl Strategy<Value = IntervalSet> {
        proptest::collection::vec((0u32..200, 1u32..40), 0..6).prop_map(|v| {
            let raw = v
                .into_iter()
                .map(|(s, l)| iv(s as f64 * 0.01, (s + l) as f64 * 0.01))
                .collect();
            IntervalSet::new(raw)
        })
    }

    fn brute_force_ms(q: &TimeInterval, s: &IntervalSet) -> f64 {
        let lo = (q.start() * 1000.0).round() as i64;
        let hi = (q.end() * 1000.0).round() as i64;
        let cells = (lo..hi)
            .filter(|&c| {
                let mid = (c as f64 + 0.5) / 1000.0;
                s.iter().any(|iv| iv.contains(mid))
            })
            .count();
        cells as f64 / 1000.0
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in grid_set()) {
            let again = IntervalSet::new(s.as_slice().to_vec());
            prop_assert_eq!(&again, &s);
            for w in s.as_slice().windows(2) {
                prop_assert!(w[0].end() < w[1].start());
            }
        }

        #[test]
        fn intersection_matches_grid_oracle(s in grid_set(), a in 0u32..220, l in 1u32..100) {
            let q = iv(a as f64 * 0.01, (a + l) as f64 * 0.01);
            let fast = intersect_duration(&q, &s);
            prop_assert!(fast >= 0.0 && fast <= q.length() + 1e-12);
            prop_assert!((fast - brute_force_ms(&q, &s)).abs() <= 2e-3);
        }

        #[test]
        fn intersection_plus_complement_is_length(s in grid_set(), a in 0u32..200, l in 1u32..50) {
            let window = iv(0.0, 2.5);
            let q = iv(a as f64 * 0.01, (a + l) as f64 * 0.01);
            let inside = intersect_duration(&q, &s);
            let outside = intersect_duration(&q, &s.complement_within(&window));
            prop_assert!((inside + outside - q.length()).abs() < 1e-9);
        }
    }
}
