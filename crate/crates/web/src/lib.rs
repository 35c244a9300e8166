//! Browser bindings for the migration simulator.
//!
//! Every export takes plain numbers and strings and returns a JSON string, so
//! the page needs no generated TypeScript types. The same functions are
//! ordinary Rust and are tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use shadow_core::harness::{build_world, finish, Calibration, Configuration, ExperimentConfig, Injection, RunReport, RATES};
use shadow_core::oracle::{predict_replay as fluid_prediction, ReplayModel};
use shadow_core::probe::ProbeTrace;
use shadow_core::reconciler::{FaultPlan, Phase};
use shadow_core::world::TimelineEntry;

#[derive(Serialize)]
struct Simulation {
    report: RunReport,
    timeline: Vec<TimelineEntry>,
    /// Probe state changes as (seconds, up); the first and last samples are kept.
    probe: Vec<(f64, bool)>,
}

#[derive(Serialize)]
struct SweepRow {
    rate: f64,
    total: f64,
    replay: f64,
    predicted_replay: f64,
    downtime: f64,
    cutoff: bool,
}

fn configuration(name: &str) -> Result<Configuration, String> {
    name.parse::<Configuration>().map_err(|e| e.to_string())
}

fn fault_phase(name: &str) -> Result<Option<Phase>, String> {
    if name.is_empty() {
        return Ok(None);
    }
    Phase::ACTIVE.into_iter().find(|p| p.name() == name).map(Some).ok_or_else(|| format!("no active phase named {name:?}"))
}

fn experiment(config: &str, rate: f64, cutoff: f64) -> Result<ExperimentConfig, String> {
    if !(rate.is_finite() && rate >= 0.0) {
        return Err(format!("rate must be a non-negative number, got {rate}"));
    }
    if !(cutoff.is_finite() && cutoff > 0.0) {
        return Err(format!("cutoff must be positive, got {cutoff}"));
    }
    Ok(ExperimentConfig { cutoff, ..ExperimentConfig::new(configuration(config)?, rate) })
}

fn transitions(trace: &ProbeTrace) -> Vec<(f64, bool)> {
    let mut out: Vec<(f64, bool)> = Vec::new();
    for (i, &(t, up)) in trace.samples.iter().enumerate() {
        let last = i + 1 == trace.samples.len();
        if last || out.last().is_none_or(|&(_, prev)| prev != up) {
            out.push((t.as_secs_f64(), up));
        }
    }
    out
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// Runs one migration. `fault` names a phase to fail once ("" for none).
#[wasm_bindgen]
pub fn simulate(config: &str, rate: f64, seed: u64, cutoff: f64, fault: &str) -> Result<String, String> {
    let cfg = experiment(config, rate, cutoff)?;
    let injection = Injection { fault: fault_phase(fault)?.map(|phase| FaultPlan { phase }), ..Default::default() };
    let mut world = build_world(&cfg, seed, injection);
    world.run();
    let report = finish(&mut world, &cfg, seed);
    to_json(&Simulation { report, timeline: world.timeline.clone(), probe: transitions(&world.probe) })
}

/// Closed-form replay duration, capped at `cutoff`.
#[wasm_bindgen]
pub fn predict_replay(rate: f64, mu: f64, t_accum: f64, start_delay: f64, cutoff: f64) -> f64 {
    fluid_prediction(&ReplayModel::new(rate, mu, t_accum, cutoff).with_start_delay(start_delay))
}

/// One run per standard rate: simulated totals beside the replay prediction.
#[wasm_bindgen]
pub fn sweep(config: &str, seed: u64, cutoff: f64) -> Result<String, String> {
    let mut rows = Vec::new();
    for rate in RATES {
        let cfg = experiment(config, rate, cutoff)?;
        let mut world = build_world(&cfg, seed, Injection::default());
        world.run();
        let r = finish(&mut world, &cfg, seed);
        let (predicted_replay, cutoff_fired) = r.replay.map_or((0.0, false), |c| (c.predicted, c.cutoff_fired));
        rows.push(SweepRow {
            rate,
            total: r.total,
            replay: r.timing(Phase::Replaying),
            predicted_replay,
            downtime: r.downtime.longest_streak_s,
            cutoff: cutoff_fired,
        });
    }
    to_json(&rows)
}

/// Configuration names and the default calibration, for populating the page.
#[wasm_bindgen]
pub fn defaults() -> String {
    let cal = Calibration::default();
    serde_json::json!({
        "configurations": Configuration::ALL.iter().map(|c| c.name()).collect::<Vec<_>>(),
        "phases": Phase::ACTIVE.iter().map(|p| p.name()).collect::<Vec<_>>(),
        "rates": RATES,
        "mu": cal.mu,
        "cutoff": cal.cutoff,
        "calibration": cal.to_text(),
    })
    .to_string()
}
