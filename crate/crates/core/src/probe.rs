//! Fixed-interval service probing and downtime streak analysis.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::sim::{SimDuration, SimTime};

pub const DEFAULT_INTERVAL: SimDuration = SimDuration::from_millis(10);
pub const DEFAULT_GAP_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTrace {
    pub interval: SimDuration,
    pub samples: Vec<(SimTime, bool)>,
}

impl ProbeTrace {
    pub fn new(interval: SimDuration) -> Self {
        ProbeTrace { interval, samples: Vec::new() }
    }

    pub fn record(&mut self, at: SimTime, up: bool) {
        self.samples.push((at, up));
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_s,up\n");
        for (t, up) in &self.samples {
            let _ = writeln!(out, "{:.3},{}", t.as_secs_f64(), u8::from(*up));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DowntimeReport {
    pub longest_streak_s: f64,
    pub streak_count: usize,
    /// Merged failure windows as (start, end) seconds.
    pub windows: Vec<(f64, f64)>,
}

/// Longest merged failure window. A failure run spans from its first failed
/// sample to one interval past its last; runs separated by a success gap
/// shorter than `gap_threshold` seconds are merged.
pub fn compute_downtime(trace: &ProbeTrace, gap_threshold: f64) -> DowntimeReport {
    let step = trace.interval.as_micros();
    let mut runs: Vec<(u64, u64)> = Vec::new();
    let mut open: Option<(u64, u64)> = None;
    for &(t, up) in &trace.samples {
        let t = t.as_micros();
        match (up, open.as_mut()) {
            (false, Some(run)) => run.1 = t + step,
            (false, None) => open = Some((t, t + step)),
            (true, Some(_)) => runs.extend(open.take()),
            (true, None) => {}
        }
    }
    runs.extend(open);

    let threshold = SimDuration::from_secs_f64(gap_threshold).as_micros();
    let mut merged: Vec<(u64, u64)> = Vec::new();
    for run in runs {
        match merged.last_mut() {
            Some(last) if run.0.saturating_sub(last.1) < threshold => last.1 = run.1,
            _ => merged.push(run),
        }
    }
    let secs = |us: u64| SimTime::from_micros(us).as_secs_f64();
    let longest = merged.iter().map(|(a, b)| b - a).max().unwrap_or(0);
    DowntimeReport {
        longest_streak_s: secs(longest),
        streak_count: merged.len(),
        windows: merged.iter().map(|&(a, b)| (secs(a), secs(b))).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(pattern: &[bool]) -> ProbeTrace {
        let mut t = ProbeTrace::new(DEFAULT_INTERVAL);
        for (i, &up) in pattern.iter().enumerate() {
            t.record(SimTime::from_micros(i as u64 * 10_000), up);
        }
        t
    }

    fn segments(parts: &[(bool, f64)]) -> Vec<bool> {
        parts.iter().flat_map(|&(up, secs)| std::iter::repeat_n(up, (secs * 100.0).round() as usize)).collect()
    }

    #[test]
    fn all_up_is_zero() {
        let r = compute_downtime(&trace(&[true; 500]), 3.0);
        assert_eq!(r.longest_streak_s, 0.0);
        assert_eq!(r.streak_count, 0);
    }

    #[test]
    fn single_run_of_3110_samples() {
        let r = compute_downtime(&trace(&segments(&[(true, 1.0), (false, 31.1), (true, 1.0)])), 3.0);
        assert!((r.longest_streak_s - 31.1).abs() < 1e-9);
    }

    #[test]
    fn short_success_gap_merges() {
        let r = compute_downtime(&trace(&segments(&[(false, 2.0), (true, 0.5), (false, 1.5)])), 3.0);
        assert_eq!(r.windows.len(), 1);
        assert!((r.longest_streak_s - 4.0).abs() < 1e-9);
    }

    #[test]
    fn long_success_gap_separates() {
        let r = compute_downtime(&trace(&segments(&[(false, 2.0), (true, 3.5), (false, 1.5)])), 3.0);
        assert_eq!(r.windows.len(), 2);
        assert!((r.longest_streak_s - 2.0).abs() < 1e-9);
    }

    #[test]
    fn csv_format() {
        let csv = trace(&[true, false]).to_csv();
        assert_eq!(csv, "time_s,up\n0.000,1\n0.010,0\n");
    }

    /// Brute force: mark every covered interval slot, close gaps shorter
    /// than the threshold, then take the longest run of marked slots.
    fn brute(pattern: &[bool], gap_slots: usize) -> usize {
        let mut down: Vec<bool> = pattern.iter().map(|u| !u).collect();
        let idx: Vec<usize> = (0..down.len()).filter(|&i| down[i]).collect();
        for w in idx.windows(2) {
            let gap = w[1] - w[0] - 1;
            if gap > 0 && gap < gap_slots {
                for slot in &mut down[w[0]..w[1]] {
                    *slot = true;
                }
            }
        }
        let mut best = 0;
        let mut cur = 0;
        for d in down {
            cur = if d { cur + 1 } else { 0 };
            best = best.max(cur);
        }
        best
    }

    proptest! {
        #[test]
        fn matches_brute_force(pattern in prop::collection::vec(any::<bool>(), 1..400), gap in 0usize..50) {
            let r = compute_downtime(&trace(&pattern), gap as f64 / 100.0);
            let expected = brute(&pattern, gap) as f64 / 100.0;
            prop_assert!((r.longest_streak_s - expected).abs() < 1e-9, "{} vs {}", r.longest_streak_s, expected);
        }

        #[test]
        fn padding_with_up_samples_changes_nothing(pattern in prop::collection::vec(any::<bool>(), 1..200), pad in 0usize..50) {
            let base = compute_downtime(&trace(&pattern), 0.3).longest_streak_s;
            let mut padded = vec![true; pad];
            padded.extend(&pattern);
            padded.extend(vec![true; pad]);
            prop_assert!((compute_downtime(&trace(&padded), 0.3).longest_streak_s - base).abs() < 1e-9);
        }

        #[test]
        fn windows_are_disjoint_and_ordered(pattern in prop::collection::vec(any::<bool>(), 1..300)) {
            let r = compute_downtime(&trace(&pattern), 0.2);
            for w in r.windows.windows(2) {
                prop_assert!(w[0].1 < w[1].0);
            }
            for (a, b) in &r.windows {
                prop_assert!(a < b);
            }
        }
    }
}
