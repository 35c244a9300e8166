//! Closed-form fluid model of replay backlog and drain time.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayModel {
    /// Arrival rate, msg/s.
    pub lambda: f64,
    /// Consumer capacity, msg/s.
    pub mu: f64,
    /// Seconds the replay queue fills before anyone reads it.
    pub t_accum: f64,
    pub t_cutoff: f64,
    /// Extra seconds between replay start and the consumer's first read.
    pub start_delay: f64,
}

impl ReplayModel {
    pub fn new(lambda: f64, mu: f64, t_accum: f64, t_cutoff: f64) -> Self {
        ReplayModel { lambda, mu, t_accum, t_cutoff, start_delay: 0.0 }
    }

    pub fn with_start_delay(self, start_delay: f64) -> Self {
        ReplayModel { start_delay, ..self }
    }

    pub fn backlog(&self) -> f64 {
        self.lambda * self.t_accum
    }

    /// Drain time ignoring the cutoff; infinite when the queue never drains.
    pub fn uncapped(&self) -> f64 {
        if self.lambda <= 0.0 {
            return self.start_delay;
        }
        if self.mu <= self.lambda {
            return f64::INFINITY;
        }
        let waiting = self.lambda * (self.t_accum + self.start_delay);
        self.start_delay + waiting / (self.mu - self.lambda)
    }

    pub fn hits_cutoff(&self) -> bool {
        self.uncapped() >= self.t_cutoff
    }
}

pub fn predict_replay(m: &ReplayModel) -> f64 {
    m.uncapped().min(m.t_cutoff)
}

/// `T_replay_max * mu / lambda`: the latest source cutoff that keeps the
/// number of messages to replay within what `mu` can drain in `T_replay_max`.
pub fn cutoff_bound(t_replay_max: f64, lambda: f64, mu: f64) -> f64 {
    if lambda <= 0.0 {
        return f64::INFINITY;
    }
    t_replay_max * mu / lambda
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayObservation {
    pub lambda: f64,
    pub t_accum: f64,
    pub replay: f64,
}

/// Mean of the per-point capacity estimates `lambda + lambda * T_accum / replay`.
/// Points with no replay or with replay at or past `cutoff` carry no
/// information about capacity and are skipped.
pub fn fit_mu(observations: &[ReplayObservation], cutoff: f64) -> Option<f64> {
    let estimates: Vec<f64> = observations
        .iter()
        .filter(|o| o.lambda > 0.0 && o.replay > 0.0 && o.replay.is_finite() && o.replay < cutoff)
        .map(|o| o.lambda + o.lambda * o.t_accum / o.replay)
        .collect();
    if estimates.is_empty() {
        return None;
    }
    Some(estimates.iter().sum::<f64>() / estimates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sequential_at_sixty() {
        let m = ReplayModel::new(60.0, 84.0, 44.10, 120.0);
        assert!((m.backlog() - 2646.0).abs() < 1e-9);
        assert!((predict_replay(&m) - 110.25).abs() < 1e-9);
    }

    #[test]
    fn no_producer_means_no_replay() {
        assert_eq!(predict_replay(&ReplayModel::new(0.0, 84.0, 44.1, 120.0)), 0.0);
    }

    #[test]
    fn overload_hits_cutoff() {
        for t in [0.1, 5.0, 44.1] {
            assert_eq!(predict_replay(&ReplayModel::new(120.0, 84.0, t, 120.0)), 120.0);
        }
    }

    #[test]
    fn start_delay_adds_inflow_during_delay() {
        // 10 msg/s for 8.87 s + 2.25 s of delay, drained at 74 msg/s.
        let m = ReplayModel::new(10.0, 84.0, 8.87, 120.0).with_start_delay(2.25);
        let expected = 2.25 + 10.0 * (8.87 + 2.25) / 74.0;
        assert!((predict_replay(&m) - expected).abs() < 1e-12);
    }

    #[test]
    fn fit_single_points() {
        let a = fit_mu(&[ReplayObservation { lambda: 60.0, t_accum: 44.10, replay: 112.80 }], 120.0).unwrap();
        assert!((a - 83.457).abs() < 1e-3);
        let b = fit_mu(&[ReplayObservation { lambda: 10.0, t_accum: 44.12, replay: 6.53 }], 120.0).unwrap();
        assert!((b - 77.56).abs() < 1e-2);
    }

    #[test]
    fn fit_skips_cutoff_points() {
        let obs = [
            ReplayObservation { lambda: 60.0, t_accum: 44.10, replay: 112.80 },
            ReplayObservation { lambda: 120.0, t_accum: 44.10, replay: 120.0 },
        ];
        assert!((fit_mu(&obs, 120.0).unwrap() - 83.457).abs() < 1e-3);
        assert_eq!(fit_mu(&obs[1..], 120.0), None);
    }

    #[test]
    fn cutoff_bound_formula() {
        assert!((cutoff_bound(120.0, 60.0, 84.0) - 168.0).abs() < 1e-12);
        assert!(cutoff_bound(120.0, 0.0, 84.0).is_infinite());
    }

    #[test]
    fn fit_recovers_mu_from_its_own_predictions() {
        let obs: Vec<_> = [(10.0, 44.1), (20.0, 44.1), (40.0, 8.9), (60.0, 8.9)]
            .iter()
            .map(|&(l, t)| ReplayObservation { lambda: l, t_accum: t, replay: predict_replay(&ReplayModel::new(l, 84.0, t, 1e9)) })
            .collect();
        assert!((fit_mu(&obs, 1e9).unwrap() - 84.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn monotone(l in 0.0f64..100.0, dl in 0.0f64..20.0, t in 0.0f64..50.0, dt in 0.0f64..10.0, mu in 1.0f64..150.0, dmu in 0.0f64..20.0) {
            let base = predict_replay(&ReplayModel::new(l, mu, t, 120.0));
            prop_assert!(predict_replay(&ReplayModel::new(l + dl, mu, t, 120.0)) >= base - 1e-9);
            prop_assert!(predict_replay(&ReplayModel::new(l, mu, t + dt, 120.0)) >= base - 1e-9);
            prop_assert!(predict_replay(&ReplayModel::new(l, mu + dmu, t, 120.0)) <= base + 1e-9);
            prop_assert!(base <= 120.0);
        }
    }
}
